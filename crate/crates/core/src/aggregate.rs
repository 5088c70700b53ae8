//! Document embeddings from token-level layer stacks.
//!
//! For a document with token block `T[k, j, :]`, layer weights `w` and
//! optional per-token IDF weights `idf[k]`:
//!
//! ```text
//! t_k = idf[k] · Σ_j w_j · T[k, j, :]
//! M'  = normalize( mean_k t_k )
//! ```
//!
//! All reductions run in `f64` in a fixed order; only the final unit vector
//! is rounded to `f32`.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedstore::{slice_document, DocEntry, DocIndex, DocKind, DocSlice, TokenEmbeddingStore};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, MIN_NORM};
use crate::metrics::{recall_from_ranks, streaming_truth_ranks};

const WEIGHT_SUM_TOL: f64 = 1e-6;

/// Convex combination over the layer axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights(Vec<f64>);

impl LayerWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::arg("layer weights must not be empty"));
        }
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::arg(format!("layer weights must be non-negative: {w:?}")));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::arg(format!("layer weights sum to {sum}, not 1")));
        }
        Ok(Self(w))
    }

    pub fn one_hot(n_layers: usize, layer: usize) -> Self {
        let mut w = vec![0.0; n_layers];
        w[layer] = 1.0;
        Self(w)
    }

    pub fn uniform(n_layers: usize) -> Self {
        Self(vec![1.0 / n_layers as f64; n_layers])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for LayerWeights {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|v| format!("{v:.4}")).collect();
        write!(f, "({})", parts.join(", "))
    }
}

/// Every point `(i_1/s, …, i_n/s)` of the simplex with integer `i` summing to `s`.
pub fn simplex_grid(n_layers: usize, steps: usize) -> Vec<LayerWeights> {
    fn rec(left: usize, slots: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if slots == 1 {
            prefix.push(left);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for i in (0..=left).rev() {
            prefix.push(i);
            rec(left - i, slots - 1, prefix, out);
            prefix.pop();
        }
    }
    if n_layers == 0 || steps == 0 {
        return Vec::new();
    }
    let mut raw = Vec::new();
    rec(steps, n_layers, &mut Vec::new(), &mut raw);
    raw.into_iter()
        .map(|c| LayerWeights(c.into_iter().map(|i| i as f64 / steps as f64).collect()))
        .collect()
}

/// Pure-layer corners followed by the uniform mix.
pub fn named_configs(n_layers: usize) -> Vec<LayerWeights> {
    let mut out: Vec<LayerWeights> = (0..n_layers).map(|j| LayerWeights::one_hot(n_layers, j)).collect();
    if n_layers > 1 {
        out.push(LayerWeights::uniform(n_layers));
    }
    out
}

/// Named configs first, then the remaining simplex points with denominator `steps`.
pub fn grid_configs(n_layers: usize, steps: usize) -> Vec<LayerWeights> {
    let mut out = named_configs(n_layers);
    for w in simplex_grid(n_layers, steps) {
        let dup = out
            .iter()
            .any(|o| o.0.iter().zip(&w.0).all(|(a, b)| (a - b).abs() < 1e-12));
        if !dup {
            out.push(w);
        }
    }
    out
}

/// `ln(N / df)` per token id.
#[derive(Clone, Debug, PartialEq)]
pub struct IdfTable {
    weights: BTreeMap<u32, f64>,
    n_documents: usize,
}

impl IdfTable {
    pub fn n_documents(&self) -> usize {
        self.n_documents
    }

    pub fn weights(&self) -> &BTreeMap<u32, f64> {
        &self.weights
    }

    pub fn weight(&self, token: u32) -> Option<f64> {
        self.weights.get(&token).copied()
    }

    /// Weight given to tokens absent from the table: `ln(N / 1)`.
    pub fn unseen_weight(&self) -> f64 {
        (self.n_documents as f64).ln()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("# n_documents\t{}\n", self.n_documents);
        for (t, w) in &self.weights {
            out.push_str(&format!("{t}\t{w}\n"));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut weights = BTreeMap::new();
        let mut n_documents = None;
        for (lineno, line) in text.lines().enumerate() {
            let bad = || Error::Format(format!("IDF line {}: expected `token_id<TAB>weight`", lineno + 1));
            if let Some(rest) = line.strip_prefix("# n_documents\t") {
                n_documents = Some(rest.trim().parse().map_err(|_| bad())?);
                continue;
            }
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (t, w) = line.split_once('\t').ok_or_else(bad)?;
            let t: u32 = t.parse().map_err(|_| bad())?;
            let w: f64 = w.trim().parse().map_err(|_| bad())?;
            if !(w >= 0.0) || !w.is_finite() {
                return Err(bad());
            }
            weights.insert(t, w);
        }
        // Without the header, recover N from the largest weight, ln(N/1).
        let n_documents = match n_documents {
            Some(n) => n,
            None => weights.values().fold(0.0f64, |a, &b| a.max(b)).exp().round() as usize,
        };
        if n_documents == 0 {
            return Err(Error::Format("IDF table has no document count".into()));
        }
        Ok(Self { weights, n_documents })
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

/// Document frequencies count documents, not occurrences.
pub fn compute_idf<L: AsRef<[u32]>>(docs: &[L]) -> Result<IdfTable> {
    if docs.is_empty() {
        return Err(Error::arg("cannot compute IDF over an empty corpus"));
    }
    let mut df: BTreeMap<u32, usize> = BTreeMap::new();
    for doc in docs {
        let uniq: HashSet<u32> = doc.as_ref().iter().copied().collect();
        for t in uniq {
            *df.entry(t).or_default() += 1;
        }
    }
    let n = docs.len() as f64;
    let weights = df.into_iter().map(|(t, c)| (t, (n / c as f64).ln())).collect();
    Ok(IdfTable {
        weights,
        n_documents: docs.len(),
    })
}

/// Token ids for every document, in index order.
///
/// Text form: one line per document, `doc_id<TAB>id id id …`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct TokenLists {
    docs: Vec<(String, Vec<u32>)>,
}

impl TokenLists {
    pub fn new(docs: Vec<(String, Vec<u32>)>) -> Self {
        Self { docs }
    }

    pub fn docs(&self) -> &[(String, Vec<u32>)] {
        &self.docs
    }

    pub fn lists(&self) -> Vec<&[u32]> {
        self.docs.iter().map(|(_, t)| t.as_slice()).collect()
    }

    pub fn get(&self, doc_id: &str) -> Option<&[u32]> {
        self.docs.iter().find(|(d, _)| d == doc_id).map(|(_, t)| t.as_slice())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (id, toks) in &self.docs {
            out.push_str(id);
            out.push('\t');
            let parts: Vec<String> = toks.iter().map(u32::to_string).collect();
            out.push_str(&parts.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut docs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let bad = || Error::Format(format!("token list line {}", lineno + 1));
            let (id, rest) = line.split_once('\t').ok_or_else(bad)?;
            let toks = rest
                .split_ascii_whitespace()
                .map(|t| t.parse::<u32>().map_err(|_| bad()))
                .collect::<Result<Vec<_>>>()?;
            docs.push((id.to_string(), toks));
        }
        Ok(Self { docs })
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

/// IDF weights together with the token ids they apply to.
#[derive(Clone, Copy, Debug)]
pub struct IdfInjection<'a> {
    pub table: &'a IdfTable,
    pub tokens: &'a TokenLists,
}

/// Weighted layer sum, optional per-token scaling, token mean, L2 normalization.
pub fn pool_document(doc: &DocSlice<'_>, w: &LayerWeights, token_idf: Option<&[f64]>) -> Result<Vec<f32>> {
    pool_named(doc, w, token_idf, "<document>")
}

fn pool_named(doc: &DocSlice<'_>, w: &LayerWeights, token_idf: Option<&[f64]>, doc_id: &str) -> Result<Vec<f32>> {
    if doc.length() == 0 {
        return Err(Error::arg(format!("document `{doc_id}` has no tokens")));
    }
    if w.len() != doc.n_layers() {
        return Err(Error::arg(format!(
            "{} layer weights for {} layers",
            w.len(),
            doc.n_layers()
        )));
    }
    if let Some(idf) = token_idf {
        if idf.len() != doc.length() {
            return Err(Error::arg(format!(
                "document `{doc_id}`: {} IDF weights for {} tokens",
                idf.len(),
                doc.length()
            )));
        }
    }
    let dim = doc.dim();
    let mut acc = vec![0f64; dim];
    let mut token = vec![0f64; dim];
    for k in 0..doc.length() {
        token.iter_mut().for_each(|v| *v = 0.0);
        for (j, &wj) in w.as_slice().iter().enumerate() {
            if wj == 0.0 {
                continue;
            }
            for (t, &x) in token.iter_mut().zip(doc.layer(k, j)) {
                *t += wj * x as f64;
            }
        }
        let scale = token_idf.map_or(1.0, |idf| idf[k]);
        for (a, t) in acc.iter_mut().zip(&token) {
            *a += scale * t;
        }
    }
    let len = doc.length() as f64;
    acc.iter_mut().for_each(|v| *v /= len);
    let n = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(n >= MIN_NORM) {
        return Err(Error::Normalization {
            doc_id: doc_id.to_string(),
        });
    }
    Ok(acc.iter().map(|v| (v / n) as f32).collect())
}

/// One unit-norm row per indexed document, in index order.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    pub vectors: Matrix<f32>,
    pub index: Vec<DocEntry>,
    pub normalized: bool,
}

/// Question rows, paragraph rows, and the paragraph column of each question.
#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    pub questions: Matrix<f32>,
    pub paragraphs: Matrix<f32>,
    /// `truth[i]` is the row in `paragraphs` paired with question `i`.
    pub truth: Vec<usize>,
    pub question_ids: Vec<String>,
    pub paragraph_ids: Vec<String>,
}

impl EmbeddingMatrix {
    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn partition(&self) -> Result<Partition> {
        let mut q_rows = Vec::new();
        let mut p_rows = Vec::new();
        for (i, e) in self.index.iter().enumerate() {
            match e.kind {
                DocKind::Question => q_rows.push(i),
                DocKind::Paragraph => p_rows.push(i),
            }
        }
        let para_pos: BTreeMap<&str, usize> = p_rows
            .iter()
            .enumerate()
            .map(|(pos, &row)| (self.index[row].doc_id.as_str(), pos))
            .collect();
        let truth = q_rows
            .iter()
            .map(|&row| {
                let e = &self.index[row];
                let pid = e
                    .pair_id
                    .as_deref()
                    .ok_or_else(|| Error::DataIntegrity(format!("question `{}` has no pair_id", e.doc_id)))?;
                para_pos.get(pid).copied().ok_or_else(|| {
                    Error::DataIntegrity(format!("question `{}`: pair `{pid}` is not a paragraph", e.doc_id))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Partition {
            questions: self.vectors.select_rows(&q_rows),
            paragraphs: self.vectors.select_rows(&p_rows),
            truth,
            question_ids: q_rows.iter().map(|&r| self.index[r].doc_id.clone()).collect(),
            paragraph_ids: p_rows.iter().map(|&r| self.index[r].doc_id.clone()).collect(),
        })
    }

    /// Sidecar index path used next to a matrix file: `<path>.idx`.
    pub fn index_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".idx");
        PathBuf::from(s)
    }

    /// Writes an `EMB1` container with one layer and one "token" per
    /// document, plus the sidecar index.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let store = TokenEmbeddingStore::new(self.vectors.rows(), 1, self.dim(), self.vectors.as_slice().to_vec())?;
        crate::embedstore::save_store(&store, path)?;
        let entries = self
            .index
            .iter()
            .enumerate()
            .map(|(row, e)| DocEntry {
                offset: row,
                length: 1,
                ..e.clone()
            })
            .collect();
        DocIndex::new(entries).save(Self::index_path(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let store = crate::embedstore::load_store(path)?;
        if store.n_layers() != 1 {
            return Err(Error::Format(format!(
                "embedding matrix must have one layer, found {}",
                store.n_layers()
            )));
        }
        let index = DocIndex::load(Self::index_path(path))?;
        if index.len() != store.n_tokens() {
            return Err(Error::DataIntegrity(format!(
                "matrix has {} rows but its index lists {}",
                store.n_tokens(),
                index.len()
            )));
        }
        for (row, e) in index.entries().iter().enumerate() {
            if e.offset != row || e.length != 1 {
                return Err(Error::DataIntegrity(format!(
                    "matrix index entry `{}` must map to row {row}",
                    e.doc_id
                )));
            }
        }
        let vectors = Matrix::from_vec(store.n_tokens(), store.dim(), store.data().to_vec())?;
        let normalized = vectors
            .iter_rows()
            .all(|r| (crate::linalg::norm(r) - 1.0).abs() <= 1e-5);
        Ok(Self {
            vectors,
            index: index.entries().to_vec(),
            normalized,
        })
    }
}

fn idf_for_doc(inj: &IdfInjection<'_>, entry: &DocEntry, pos: usize, missing: &mut usize) -> Result<Vec<f64>> {
    // Token lists are normally in index order; fall back to an id lookup.
    let toks = match inj.tokens.docs().get(pos) {
        Some((id, t)) if *id == entry.doc_id => t.as_slice(),
        _ => inj
            .tokens
            .get(&entry.doc_id)
            .ok_or_else(|| Error::Lookup(format!("{} (token list)", entry.doc_id)))?,
    };
    if toks.len() != entry.length {
        return Err(Error::DataIntegrity(format!(
            "document `{}` has {} tokens but {} token ids",
            entry.doc_id,
            entry.length,
            toks.len()
        )));
    }
    let unseen = inj.table.unseen_weight();
    Ok(toks
        .iter()
        .map(|&t| {
            inj.table.weight(t).unwrap_or_else(|| {
                *missing += 1;
                unseen
            })
        })
        .collect())
}

/// Pools every indexed document; rows follow index order.
pub fn build_matrix(
    store: &TokenEmbeddingStore,
    index: &DocIndex,
    w: &LayerWeights,
    idf: Option<IdfInjection<'_>>,
) -> Result<EmbeddingMatrix> {
    if w.len() != store.n_layers() {
        return Err(Error::arg(format!(
            "{} layer weights for a {}-layer store",
            w.len(),
            store.n_layers()
        )));
    }
    let dim = store.dim();
    let rows: Vec<(Vec<f32>, usize)> = index
        .entries()
        .par_iter()
        .enumerate()
        .map(|(pos, e)| {
            let doc = slice_document(store, index, &e.doc_id)?;
            let mut missing = 0;
            let weights = idf
                .as_ref()
                .map(|inj| idf_for_doc(inj, e, pos, &mut missing))
                .transpose()?;
            Ok((pool_named(&doc, w, weights.as_deref(), &e.doc_id)?, missing))
        })
        .collect::<Result<_>>()?;
    let missing: usize = rows.iter().map(|r| r.1).sum();
    if missing > 0 {
        log::warn!("{missing} token(s) missing from the IDF table were weighted as unseen (ln N)");
    }
    let mut data = Vec::with_capacity(rows.len() * dim);
    for (r, _) in rows {
        data.extend(r);
    }
    Ok(EmbeddingMatrix {
        vectors: Matrix::from_vec(index.len(), dim, data)?,
        index: index.entries().to_vec(),
        normalized: true,
    })
}

/// One evaluated layer configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub weights: LayerWeights,
    pub recall_at_1: f64,
    pub avg_recall: f64,
}

/// Builds and evaluates each configuration; best recall@1 first, ties in
/// input order. `eval` returns `(k, recall fraction)` pairs and must include k = 1.
pub fn grid_search<F>(
    store: &TokenEmbeddingStore,
    index: &DocIndex,
    configs: &[LayerWeights],
    idf: Option<IdfInjection<'_>>,
    eval: F,
) -> Result<Vec<GridResult>>
where
    F: Fn(&EmbeddingMatrix) -> Result<Vec<(usize, f64)>> + Sync,
{
    if configs.is_empty() {
        return Err(Error::arg("grid search needs at least one configuration"));
    }
    let tag = |w: &LayerWeights, e: Error| match e {
        Error::Argument(m) => Error::Argument(format!("config {w}: {m}")),
        Error::Numeric(m) => Error::Numeric(format!("config {w}: {m}")),
        other => other,
    };
    let mut results = configs
        .par_iter()
        .map(|w| {
            let m = build_matrix(store, index, w, idf).map_err(|e| tag(w, e))?;
            let recalls = eval(&m).map_err(|e| tag(w, e))?;
            let r1 = recalls
                .iter()
                .find(|(k, _)| *k == 1)
                .map(|r| r.1)
                .ok_or_else(|| Error::arg("evaluator did not report recall@1"))?;
            let avg = recalls.iter().map(|r| r.1).sum::<f64>() / recalls.len() as f64;
            Ok(GridResult {
                weights: w.clone(),
                recall_at_1: r1,
                avg_recall: avg,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    results.sort_by(|a, b| b.recall_at_1.total_cmp(&a.recall_at_1));
    Ok(results)
}

/// Standard evaluator for [`grid_search`]: question→paragraph recall at `ks`.
pub fn recall_evaluator(ks: Vec<usize>) -> impl Fn(&EmbeddingMatrix) -> Result<Vec<(usize, f64)>> + Sync {
    move |m: &EmbeddingMatrix| {
        let part = m.partition()?;
        if part.truth.is_empty() {
            return Err(Error::arg("no questions with a resolvable pair"));
        }
        let ranks = streaming_truth_ranks(&part.questions, &part.paragraphs, &part.truth)?;
        let table = recall_from_ranks(&ranks, part.paragraphs.rows(), &ks)?;
        Ok(table.rows.iter().map(|r| (r.k, r.fraction)).collect())
    }
}
