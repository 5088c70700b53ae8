//! Seeded synthetic corpora with known question–paragraph pairing.
//!
//! Each pair draws a latent unit vector. In the signal layer, content tokens
//! of both documents are the latent plus Gaussian noise; stopword tokens
//! (token id 0, present in every document) instead carry a shared distractor
//! direction scaled by a per-document gain and by `distractor_overlap`. Every
//! other layer is pure noise. Stopwords make documents look alike, so both
//! IDF weighting and a learned projection can recover the pairing.

use serde::{Deserialize, Serialize};

use crate::aggregate::TokenLists;
use crate::embedstore::{DocEntry, DocIndex, DocKind, TokenEmbeddingStore};
use crate::error::{Error, Result};
use crate::linalg::normalize_in_place;
use crate::rng::XorShift64Star;

/// Token id shared by every stopword.
pub const STOPWORD_TOKEN: u32 = 0;

/// Length of the distractor carried by one stopword at full overlap and unit gain.
const DISTRACTOR_SCALE: f64 = 3.0;

const STREAM_LATENT: u64 = 1 << 40;
const STREAM_LAYOUT: u64 = 2 << 40;
const STREAM_VALUES: u64 = 3 << 40;
const STREAM_SHARED: u64 = 4 << 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_pairs: usize,
    pub dim: usize,
    pub n_layers: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub signal_layer: usize,
    /// Standard deviation of per-token noise, relative to the unit latent.
    pub noise_sigma: f64,
    /// Strength of the shared distractor on stopwords, in [0, 1].
    pub distractor_overlap: f64,
    /// Share of each document's tokens that are stopwords, in [0, 1].
    pub stopword_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_pairs: 200,
            dim: 64,
            n_layers: 3,
            min_tokens: 5,
            max_tokens: 20,
            signal_layer: 0,
            noise_sigma: 1.5,
            distractor_overlap: 1.0,
            stopword_fraction: 0.6,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_pairs == 0 || self.dim == 0 || self.n_layers == 0 {
            return Err(Error::arg("pairs, dim and layers must be positive"));
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return Err(Error::arg("token range must satisfy 1 <= min <= max"));
        }
        if self.signal_layer >= self.n_layers {
            return Err(Error::arg("signal layer out of range"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::arg("noise sigma must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.distractor_overlap) || !(0.0..=1.0).contains(&self.stopword_fraction) {
            return Err(Error::arg("distractor overlap and stopword fraction must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// A generated store and index plus the token ids behind every position.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub store: TokenEmbeddingStore,
    pub index: DocIndex,
    pub tokens: TokenLists,
    /// `(question id, paragraph id)` for every pair.
    pub pairs: Vec<(String, String)>,
}

/// Document `d` (questions are `0..n`, paragraphs `n..2n`): id, pair number,
/// and whether each position is a stopword.
struct DocLayout {
    doc_id: String,
    pair: usize,
    kind: DocKind,
    stopword: Vec<bool>,
}

fn layout(spec: &SynthSpec) -> Vec<DocLayout> {
    let n = spec.n_pairs;
    (0..2 * n)
        .map(|d| {
            let (pair, kind) = if d < n { (d, DocKind::Question) } else { (d - n, DocKind::Paragraph) };
            let mut rng = XorShift64Star::derive(spec.seed, STREAM_LAYOUT | d as u64);
            let len = spec.min_tokens + rng.below(spec.max_tokens - spec.min_tokens + 1);
            let f = spec.stopword_fraction;
            let mut n_stop = (f * len as f64).round() as usize;
            if f > 0.0 {
                n_stop = n_stop.max(1);
            }
            if f < 1.0 {
                n_stop = n_stop.min(len - 1);
            }
            let mut stopword: Vec<bool> = (0..len).map(|k| k < n_stop).collect();
            rng.shuffle(&mut stopword);
            DocLayout {
                doc_id: format!("{}{pair:06}", kind.tag()),
                pair,
                kind,
                stopword,
            }
        })
        .collect()
}

fn unit_vector(rng: &mut XorShift64Star, dim: usize) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.gaussian()).collect();
        if normalize_in_place(&mut v).is_some() {
            return v;
        }
    }
}

pub fn generate(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let docs = layout(spec);
    let dim = spec.dim;
    let per_coord = 1.0 / (dim as f64).sqrt();
    let distractor = unit_vector(&mut XorShift64Star::derive(spec.seed, STREAM_SHARED), dim);
    let latents: Vec<Vec<f64>> = (0..spec.n_pairs)
        .map(|p| unit_vector(&mut XorShift64Star::derive(spec.seed, STREAM_LATENT | p as u64), dim))
        .collect();

    let n_tokens: usize = docs.iter().map(|d| d.stopword.len()).sum();
    let mut data = Vec::with_capacity(n_tokens * spec.n_layers * dim);
    let mut entries = Vec::with_capacity(docs.len());
    let mut token_lists = Vec::with_capacity(docs.len());
    let mut next_token = STOPWORD_TOKEN + 1;
    let mut offset = 0;
    for (d, doc) in docs.iter().enumerate() {
        let mut rng = XorShift64Star::derive(spec.seed, STREAM_VALUES | d as u64);
        let gain = rng.uniform(0.0, 2.0);
        let z = &latents[doc.pair];
        let mut ids = Vec::with_capacity(doc.stopword.len());
        for &stop in &doc.stopword {
            for layer in 0..spec.n_layers {
                for k in 0..dim {
                    let v = if layer != spec.signal_layer {
                        per_coord * rng.gaussian()
                    } else {
                        let noise = spec.noise_sigma * per_coord * rng.gaussian();
                        if stop {
                            spec.distractor_overlap * gain * DISTRACTOR_SCALE * distractor[k] + noise
                        } else {
                            z[k] + noise
                        }
                    };
                    data.push(v as f32);
                }
            }
            if stop {
                ids.push(STOPWORD_TOKEN);
            } else {
                ids.push(next_token);
                next_token += 1;
            }
        }
        entries.push(DocEntry {
            doc_id: doc.doc_id.clone(),
            offset,
            length: doc.stopword.len(),
            kind: doc.kind,
            pair_id: (doc.kind == DocKind::Question).then(|| format!("p{:06}", doc.pair)),
        });
        token_lists.push((doc.doc_id.clone(), ids));
        offset += doc.stopword.len();
    }
    let store = TokenEmbeddingStore::new(n_tokens, spec.n_layers, dim, data)?;
    let pairs = (0..spec.n_pairs)
        .map(|p| (format!("q{p:06}"), format!("p{p:06}")))
        .collect();
    Ok(SynthCorpus {
        store,
        index: DocIndex::new(entries),
        tokens: TokenLists::new(token_lists),
        pairs,
    })
}

/// Token ids of every generated document, in index order; matches
/// [`generate`] for the same spec.
pub fn generate_idf_corpus(spec: &SynthSpec) -> Result<TokenLists> {
    spec.validate()?;
    let mut next_token = STOPWORD_TOKEN + 1;
    Ok(TokenLists::new(
        layout(spec)
            .into_iter()
            .map(|doc| {
                let ids = doc
                    .stopword
                    .iter()
                    .map(|&stop| {
                        if stop {
                            STOPWORD_TOKEN
                        } else {
                            next_token += 1;
                            next_token - 1
                        }
                    })
                    .collect();
                (doc.doc_id, ids)
            })
            .collect(),
    ))
}
