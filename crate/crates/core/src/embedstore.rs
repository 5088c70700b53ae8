//! Token-level embedding tensors and their document index.
//!
//! Tensor file layout (little-endian):
//!
//! ```text
//! b"EMB1" | n_tokens: u64 | n_layers: u64 | dim: u64 | f32 * n_tokens*n_layers*dim
//! ```
//!
//! Values are row-major `[token][layer][dim]`, so a document occupying tokens
//! `offset..offset+length` is one contiguous byte range.
//!
//! The index is a sidecar text file with one tab-separated record per line:
//! `doc_id, offset, length, kind (q|p), pair_id` (pair_id empty for paragraphs).

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STORE_MAGIC: &[u8; 4] = b"EMB1";
const HEADER_LEN: usize = 4 + 3 * 8;

/// The `[n_tokens, n_layers, dim]` tensor of token embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenEmbeddingStore {
    n_tokens: usize,
    n_layers: usize,
    dim: usize,
    data: Vec<f32>,
}

impl TokenEmbeddingStore {
    pub fn new(n_tokens: usize, n_layers: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if n_layers == 0 || dim == 0 {
            return Err(Error::arg("n_layers and dim must be positive"));
        }
        let expected = n_tokens
            .checked_mul(n_layers)
            .and_then(|v| v.checked_mul(dim))
            .ok_or_else(|| Error::arg("tensor shape overflows"))?;
        if data.len() != expected {
            return Err(Error::arg(format!(
                "shape [{n_tokens}, {n_layers}, {dim}] needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::DataIntegrity(format!(
                "non-finite value at token {}, layer {}, component {}",
                pos / (n_layers * dim),
                (pos / dim) % n_layers,
                pos % dim
            )));
        }
        Ok(Self {
            n_tokens,
            n_layers,
            dim,
            data,
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.n_tokens, self.n_layers, self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Rows `start..start+len` as a view.
    pub fn rows(&self, start: usize, len: usize) -> Option<DocSlice<'_>> {
        let end = start.checked_add(len)?;
        if end > self.n_tokens {
            return None;
        }
        let stride = self.n_layers * self.dim;
        Some(DocSlice {
            data: &self.data[start * stride..end * stride],
            length: len,
            n_layers: self.n_layers,
            dim: self.dim,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format(format!(
                "tensor file too short for header ({} bytes)",
                bytes.len()
            )));
        }
        if &bytes[..4] != STORE_MAGIC {
            return Err(Error::Format(format!("bad magic {:?}, expected \"EMB1\"", &bytes[..4])));
        }
        let field = |i: usize| {
            let start = 4 + 8 * i;
            u64::from_le_bytes(bytes[start..start + 8].try_into().unwrap())
        };
        let (n_tokens, n_layers, dim) = (field(0), field(1), field(2));
        let expected = n_tokens
            .checked_mul(n_layers)
            .and_then(|v| v.checked_mul(dim))
            .and_then(|v| v.checked_mul(4))
            .and_then(|v| v.checked_add(HEADER_LEN as u64))
            .ok_or_else(|| Error::Format("header shape overflows".into()))?;
        if bytes.len() as u64 != expected {
            return Err(Error::SizeMismatch {
                expected,
                found: bytes.len() as u64,
            });
        }
        let data = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(n_tokens as usize, n_layers as usize, dim as usize, data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(STORE_MAGIC);
        for v in [self.n_tokens, self.n_layers, self.dim] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

pub fn load_store(path: impl AsRef<Path>) -> Result<TokenEmbeddingStore> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    TokenEmbeddingStore::from_bytes(&bytes)
}

pub fn save_store(store: &TokenEmbeddingStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, store.to_bytes()).map_err(|e| Error::io(path, e))
}

/// Borrowed `[length, n_layers, dim]` block of a store.
#[derive(Clone, Copy, Debug)]
pub struct DocSlice<'a> {
    data: &'a [f32],
    length: usize,
    n_layers: usize,
    dim: usize,
}

impl<'a> DocSlice<'a> {
    pub fn length(&self) -> usize {
        self.length
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &'a [f32] {
        self.data
    }

    /// Vector of token `k` in layer `j`.
    #[inline]
    pub fn layer(&self, k: usize, j: usize) -> &'a [f32] {
        let start = (k * self.n_layers + j) * self.dim;
        &self.data[start..start + self.dim]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DocKind {
    Question,
    Paragraph,
}

impl DocKind {
    pub fn tag(self) -> &'static str {
        match self {
            DocKind::Question => "q",
            DocKind::Paragraph => "p",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DocEntry {
    pub doc_id: String,
    pub offset: usize,
    pub length: usize,
    pub kind: DocKind,
    /// Paragraph answering this question; `None` for paragraphs.
    pub pair_id: Option<String>,
}

/// Ordered document records over a token store.
#[derive(Clone, Debug, Default)]
pub struct DocIndex {
    entries: Vec<DocEntry>,
    by_id: HashMap<String, usize>,
}

impl PartialEq for DocIndex {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl DocIndex {
    /// Builds an index; duplicate ids are kept (and reported by [`validate`]),
    /// lookups resolve to the first occurrence.
    pub fn new(entries: Vec<DocEntry>) -> Self {
        let mut by_id = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            by_id.entry(e.doc_id.clone()).or_insert(i);
        }
        Self { entries, by_id }
    }

    pub fn entries(&self) -> &[DocEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn position(&self, doc_id: &str) -> Option<usize> {
        self.by_id.get(doc_id).copied()
    }

    pub fn get(&self, doc_id: &str) -> Option<&DocEntry> {
        self.position(doc_id).map(|i| &self.entries[i])
    }

    pub fn counts(&self) -> CorpusCounts {
        let n_questions = self
            .entries
            .iter()
            .filter(|e| e.kind == DocKind::Question)
            .count();
        CorpusCounts {
            n_questions,
            n_paragraphs: self.entries.len() - n_questions,
            n_total: self.entries.len(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.strip_suffix('\r').unwrap_or(line);
            if line.is_empty() {
                continue;
            }
            let bad = |what: &str| Error::Format(format!("index line {}: {what}", lineno + 1));
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() < 4 || fields.len() > 5 {
                return Err(bad("expected 5 tab-separated fields"));
            }
            let offset = fields[1].parse().map_err(|_| bad("offset is not an integer"))?;
            let length = fields[2].parse().map_err(|_| bad("length is not an integer"))?;
            let kind = match fields[3] {
                "q" => DocKind::Question,
                "p" => DocKind::Paragraph,
                other => return Err(bad(&format!("unknown kind `{other}`"))),
            };
            let pair_id = fields.get(4).filter(|s| !s.is_empty()).map(|s| s.to_string());
            entries.push(DocEntry {
                doc_id: fields[0].to_string(),
                offset,
                length,
                kind,
                pair_id,
            });
        }
        Ok(Self::new(entries))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                e.doc_id,
                e.offset,
                e.length,
                e.kind.tag(),
                e.pair_id.as_deref().unwrap_or("")
            ));
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusCounts {
    pub n_questions: usize,
    pub n_paragraphs: usize,
    pub n_total: usize,
}

pub fn slice_document<'a>(
    store: &'a TokenEmbeddingStore,
    index: &DocIndex,
    doc_id: &str,
) -> Result<DocSlice<'a>> {
    let entry = index.get(doc_id).ok_or_else(|| Error::Lookup(doc_id.to_string()))?;
    store.rows(entry.offset, entry.length).ok_or_else(|| {
        Error::DataIntegrity(format!(
            "document `{doc_id}` spans tokens {}..{} beyond the store's {}",
            entry.offset,
            entry.offset + entry.length,
            store.n_tokens()
        ))
    })
}

/// One broken store/index invariant.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    EmptyDocument { doc_id: String },
    DuplicateId { doc_id: String },
    Overlap { doc_id: String, previous: String, tokens: usize },
    Gap { start: usize, end: usize },
    OutOfRange { doc_id: String, end: usize, n_tokens: usize },
    Uncovered { covered: usize, n_tokens: usize },
    MissingPair { doc_id: String },
    UnresolvedPair { doc_id: String, pair_id: String },
    PairNotParagraph { doc_id: String, pair_id: String },
    ParagraphWithPair { doc_id: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyDocument { doc_id } => write!(f, "{doc_id}: length must be at least 1"),
            Violation::DuplicateId { doc_id } => write!(f, "{doc_id}: duplicate document id"),
            Violation::Overlap {
                doc_id,
                previous,
                tokens,
            } => write!(f, "{doc_id}: overlaps {previous} by {tokens} token(s)"),
            Violation::Gap { start, end } => write!(f, "tokens {start}..{end} belong to no document"),
            Violation::OutOfRange {
                doc_id,
                end,
                n_tokens,
            } => write!(f, "{doc_id}: ends at token {end}, store has {n_tokens}"),
            Violation::Uncovered { covered, n_tokens } => {
                write!(f, "index covers {covered} tokens, store has {n_tokens}")
            }
            Violation::MissingPair { doc_id } => write!(f, "{doc_id}: question without pair_id"),
            Violation::UnresolvedPair { doc_id, pair_id } => {
                write!(f, "{doc_id}: pair_id `{pair_id}` matches no document")
            }
            Violation::PairNotParagraph { doc_id, pair_id } => {
                write!(f, "{doc_id}: pair_id `{pair_id}` is not a paragraph")
            }
            Violation::ParagraphWithPair { doc_id } => write!(f, "{doc_id}: paragraph carries a pair_id"),
        }
    }
}

/// Checks that the index tiles the store exactly and that every question's
/// pair resolves to a single paragraph.
pub fn validate(store: &TokenEmbeddingStore, index: &DocIndex) -> Vec<Violation> {
    let n_tokens = store.n_tokens();
    let mut out = Vec::new();

    let mut seen: HashMap<&str, usize> = HashMap::new();
    for e in index.entries() {
        *seen.entry(e.doc_id.as_str()).or_default() += 1;
        if e.length == 0 {
            out.push(Violation::EmptyDocument {
                doc_id: e.doc_id.clone(),
            });
        }
    }
    let mut dups: Vec<&str> = seen.iter().filter(|(_, &c)| c > 1).map(|(id, _)| *id).collect();
    dups.sort_unstable();
    out.extend(dups.into_iter().map(|id| Violation::DuplicateId { doc_id: id.to_string() }));

    let mut order: Vec<&DocEntry> = index.entries().iter().collect();
    order.sort_by_key(|e| (e.offset, e.length));
    let mut covered = 0usize;
    let mut last: Option<&DocEntry> = None;
    for e in order {
        let end = e.offset.saturating_add(e.length);
        if end > n_tokens {
            out.push(Violation::OutOfRange {
                doc_id: e.doc_id.clone(),
                end,
                n_tokens,
            });
        }
        if e.offset < covered {
            out.push(Violation::Overlap {
                doc_id: e.doc_id.clone(),
                previous: last.map(|p| p.doc_id.clone()).unwrap_or_default(),
                tokens: covered.min(end) - e.offset,
            });
        } else if e.offset > covered {
            out.push(Violation::Gap {
                start: covered,
                end: e.offset,
            });
        }
        if end > covered {
            covered = end;
            last = Some(e);
        }
    }
    if covered < n_tokens {
        out.push(Violation::Uncovered { covered, n_tokens });
    }

    for e in index.entries() {
        match (e.kind, &e.pair_id) {
            (DocKind::Question, None) => out.push(Violation::MissingPair {
                doc_id: e.doc_id.clone(),
            }),
            (DocKind::Question, Some(pid)) => match index.get(pid) {
                None => out.push(Violation::UnresolvedPair {
                    doc_id: e.doc_id.clone(),
                    pair_id: pid.clone(),
                }),
                Some(target) if target.kind != DocKind::Paragraph => out.push(Violation::PairNotParagraph {
                    doc_id: e.doc_id.clone(),
                    pair_id: pid.clone(),
                }),
                Some(_) => {}
            },
            (DocKind::Paragraph, Some(_)) => out.push(Violation::ParagraphWithPair {
                doc_id: e.doc_id.clone(),
            }),
            (DocKind::Paragraph, None) => {}
        }
    }
    out
}
