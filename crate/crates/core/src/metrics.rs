//! Exhaustive question→paragraph retrieval evaluation.
//!
//! Distances are squared Euclidean throughout. Among equal distances the
//! lower paragraph column ranks first, in top-k lists and in recall alike.
//! P-R and ROC sweeps group equal distances into one threshold, which keeps
//! AP and AUC invariant under strictly monotone transforms of the distances.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sq_dist, Matrix, Real};

/// Rows per parallel work item in the distance kernel.
const ROW_BLOCK: usize = 64;

/// The ks reported throughout (recall tables, grid search, training logs).
pub const DEFAULT_KS: [usize; 6] = [1, 2, 5, 10, 20, 50];

/// `[n_questions, n_paragraphs]` squared distances.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    n_questions: usize,
    n_paragraphs: usize,
    d: Vec<f32>,
}

impl DistanceMatrix {
    pub fn from_vec(n_questions: usize, n_paragraphs: usize, d: Vec<f32>) -> Result<Self> {
        if d.len() != n_questions * n_paragraphs {
            return Err(Error::arg("distance buffer does not match its shape"));
        }
        if n_questions == 0 || n_paragraphs == 0 {
            return Err(Error::arg("distance matrix must be non-empty"));
        }
        Ok(Self {
            n_questions,
            n_paragraphs,
            d,
        })
    }

    pub fn n_questions(&self) -> usize {
        self.n_questions
    }

    pub fn n_paragraphs(&self) -> usize {
        self.n_paragraphs
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.d[i * self.n_paragraphs..(i + 1) * self.n_paragraphs]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.d[i * self.n_paragraphs + j]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.d
    }
}

fn check_pair<T: Real>(q: &Matrix<T>, p: &Matrix<T>) -> Result<()> {
    if q.cols() != p.cols() {
        return Err(Error::arg(format!(
            "dimension mismatch: questions have {}, paragraphs {}",
            q.cols(),
            p.cols()
        )));
    }
    if q.rows() == 0 || p.rows() == 0 {
        return Err(Error::arg("question and paragraph matrices must be non-empty"));
    }
    Ok(())
}

/// `d[i][j] = ‖q_i − p_j‖²`, accumulated in `f64`, row blocks in parallel.
pub fn pairwise_distances<T: Real>(q: &Matrix<T>, p: &Matrix<T>) -> Result<DistanceMatrix> {
    check_pair(q, p)?;
    let n_p = p.rows();
    let mut d = vec![0f32; q.rows() * n_p];
    d.par_chunks_mut(ROW_BLOCK * n_p)
        .enumerate()
        .for_each(|(block, out)| {
            for (r, out_row) in out.chunks_exact_mut(n_p).enumerate() {
                let qi = q.row(block * ROW_BLOCK + r);
                for (j, slot) in out_row.iter_mut().enumerate() {
                    *slot = sq_dist(qi, p.row(j)) as f32;
                }
            }
        });
    DistanceMatrix::from_vec(q.rows(), n_p, d)
}

fn check_truth(truth: &[usize], n_questions: usize, n_paragraphs: usize) -> Result<()> {
    if truth.len() != n_questions {
        return Err(Error::arg(format!(
            "{} truth labels for {n_questions} questions",
            truth.len()
        )));
    }
    if let Some((i, &t)) = truth.iter().enumerate().find(|(_, &t)| t >= n_paragraphs) {
        return Err(Error::arg(format!(
            "question {i}: true paragraph {t} out of range ({n_paragraphs} paragraphs)"
        )));
    }
    Ok(())
}

#[inline]
fn rank_in_row(row: &[f32], t: usize) -> usize {
    let dt = row[t];
    row.iter()
        .enumerate()
        .filter(|&(j, &v)| v < dt || (v == dt && j < t))
        .count()
}

/// Zero-based rank of each question's true paragraph within its row.
pub fn truth_ranks(d: &DistanceMatrix, truth: &[usize]) -> Result<Vec<usize>> {
    check_truth(truth, d.n_questions, d.n_paragraphs)?;
    Ok((0..d.n_questions)
        .into_par_iter()
        .map(|i| rank_in_row(d.row(i), truth[i]))
        .collect())
}

/// Same as [`truth_ranks`] on `pairwise_distances(q, p)`, without holding the
/// full matrix in memory.
pub fn streaming_truth_ranks<T: Real>(q: &Matrix<T>, p: &Matrix<T>, truth: &[usize]) -> Result<Vec<usize>> {
    check_pair(q, p)?;
    check_truth(truth, q.rows(), p.rows())?;
    Ok((0..q.rows())
        .into_par_iter()
        .map_init(
            || vec![0f32; p.rows()],
            |row, i| {
                let qi = q.row(i);
                for (j, slot) in row.iter_mut().enumerate() {
                    *slot = sq_dist(qi, p.row(j)) as f32;
                }
                rank_in_row(row, truth[i])
            },
        )
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallAt {
    pub k: usize,
    pub hits: usize,
    pub fraction: f64,
}

/// recall@k rows, ascending in k.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RecallTable {
    pub rows: Vec<RecallAt>,
}

impl RecallTable {
    pub fn at(&self, k: usize) -> Option<&RecallAt> {
        self.rows.iter().find(|r| r.k == k)
    }

    /// Mean of the fractions over every k in the table.
    pub fn mean_fraction(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().map(|r| r.fraction).sum::<f64>() / self.rows.len() as f64
    }

    pub fn as_map(&self) -> BTreeMap<usize, (usize, f64)> {
        self.rows.iter().map(|r| (r.k, (r.hits, r.fraction))).collect()
    }
}

fn check_ks(ks: &[usize], n_paragraphs: usize) -> Result<()> {
    if ks.is_empty() {
        return Err(Error::arg("no k values requested"));
    }
    if ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::arg("k values must be strictly ascending"));
    }
    if ks[0] == 0 {
        return Err(Error::arg("k must be at least 1"));
    }
    if let Some(&k) = ks.iter().find(|&&k| k > n_paragraphs) {
        return Err(Error::arg(format!("k = {k} exceeds {n_paragraphs} paragraphs")));
    }
    Ok(())
}

/// Turns true-paragraph ranks into a recall table.
pub fn recall_from_ranks(ranks: &[usize], n_paragraphs: usize, ks: &[usize]) -> Result<RecallTable> {
    check_ks(ks, n_paragraphs)?;
    if ranks.is_empty() {
        return Err(Error::arg("no questions to evaluate"));
    }
    let n = ranks.len() as f64;
    let rows = ks
        .iter()
        .map(|&k| {
            let hits = ranks.iter().filter(|&&r| r < k).count();
            RecallAt {
                k,
                hits,
                fraction: hits as f64 / n,
            }
        })
        .collect();
    Ok(RecallTable { rows })
}

pub fn recall_at_k(d: &DistanceMatrix, truth: &[usize], ks: &[usize]) -> Result<RecallTable> {
    check_ks(ks, d.n_paragraphs)?;
    let ranks = truth_ranks(d, truth)?;
    recall_from_ranks(&ranks, d.n_paragraphs, ks)
}

/// The `k` nearest paragraph columns of every row, nearest first.
pub fn top_k_rows(d: &DistanceMatrix, k: usize) -> Result<Vec<Vec<usize>>> {
    if k == 0 || k > d.n_paragraphs {
        return Err(Error::arg(format!(
            "k = {k} must be within 1..={}",
            d.n_paragraphs
        )));
    }
    Ok((0..d.n_questions)
        .into_par_iter()
        .map(|i| {
            let row = d.row(i);
            let cmp = |a: &usize, b: &usize| row[*a].total_cmp(&row[*b]).then(a.cmp(b));
            let mut cols: Vec<usize> = (0..row.len()).collect();
            if k < cols.len() {
                cols.select_nth_unstable_by(k - 1, cmp);
                cols.truncate(k);
            }
            cols.sort_unstable_by(cmp);
            cols
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

/// All `(distance, is_positive)` pairs, sorted ascending by distance.
fn sorted_labelled(d: &DistanceMatrix, truth: &[usize]) -> Vec<(f32, bool)> {
    let n_p = d.n_paragraphs;
    let mut pairs: Vec<(f32, bool)> = d
        .d
        .par_iter()
        .enumerate()
        .map(|(idx, &v)| (v, truth[idx / n_p] == idx % n_p))
        .collect();
    pairs.par_sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)));
    pairs
}

/// Sweeps thresholds over the ascending distances, yielding per distinct
/// distance the (positives, negatives) it contains.
fn threshold_groups(pairs: &[(f32, bool)]) -> impl Iterator<Item = (usize, usize)> + '_ {
    pairs
        .chunk_by(|a, b| a.0.total_cmp(&b.0) == Ordering::Equal)
        .map(|g| {
            let pos = g.iter().filter(|p| p.1).count();
            (pos, g.len() - pos)
        })
}

/// Precision–recall points at every change in true-positive count, and the
/// step-wise average precision `Σ (R_i − R_{i−1})·P_i`.
pub fn pr_curve_and_ap(d: &DistanceMatrix, truth: &[usize]) -> Result<(Vec<PrPoint>, f64)> {
    check_truth(truth, d.n_questions, d.n_paragraphs)?;
    let pairs = sorted_labelled(d, truth);
    let n_pos = d.n_questions as f64;
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut points = Vec::new();
    for (pos, neg) in threshold_groups(&pairs) {
        seen += pos + neg;
        if pos == 0 {
            continue;
        }
        tp += pos;
        let recall = tp as f64 / n_pos;
        let precision = tp as f64 / seen as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        points.push(PrPoint { recall, precision });
    }
    Ok((points, ap))
}

/// Probability that a random positive pair is closer than a random negative
/// pair, ties counting one half.
pub fn roc_auc(d: &DistanceMatrix, truth: &[usize]) -> Result<f64> {
    check_truth(truth, d.n_questions, d.n_paragraphs)?;
    let n_pos = d.n_questions;
    let n_neg = d.n_questions * d.n_paragraphs - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::arg("ROC AUC needs at least one positive and one negative pair"));
    }
    let pairs = sorted_labelled(d, truth);
    let mut neg_seen = 0usize;
    let mut wins = 0.0f64;
    for (pos, neg) in threshold_groups(&pairs) {
        let later_neg = n_neg - neg_seen - neg;
        wins += pos as f64 * (later_neg as f64 + 0.5 * neg as f64);
        neg_seen += neg;
    }
    Ok(wins / (n_pos as f64 * n_neg as f64))
}

/// Recall table, P-R curve, AP and optionally AUC for one distance matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_questions: usize,
    pub n_paragraphs: usize,
    pub recall: RecallTable,
    pub average_precision: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    pub pr_curve: Vec<PrPoint>,
}

impl EvalReport {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(e.to_string()))
    }

    /// Two-column `recall,precision` CSV of the P-R curve.
    pub fn pr_csv(&self) -> String {
        let mut out = String::from("recall,precision\n");
        for p in &self.pr_curve {
            out.push_str(&format!("{},{}\n", p.recall, p.precision));
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }
}

pub fn evaluate(d: &DistanceMatrix, truth: &[usize], ks: &[usize], with_auc: bool) -> Result<EvalReport> {
    let recall = recall_at_k(d, truth, ks)?;
    let (pr_curve, average_precision) = pr_curve_and_ap(d, truth)?;
    let auc = if with_auc { Some(roc_auc(d, truth)?) } else { None };
    Ok(EvalReport {
        n_questions: d.n_questions,
        n_paragraphs: d.n_paragraphs,
        recall,
        average_precision,
        auc,
        pr_curve,
    })
}
