//! Triplet loss with in-batch hard negative mining, and the quadratic
//! regression conditional loss.
//!
//! Both losses are averaged over the batch and return gradients alongside the
//! value. Distances are squared Euclidean.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sq_dist, Matrix, Real};

/// Default triplet margin.
pub const DEFAULT_MARGIN: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Triplet,
    Quadratic,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "triplet" => Ok(LossKind::Triplet),
            "quadratic" => Ok(LossKind::Quadratic),
            other => Err(Error::arg(format!("unknown loss `{other}`"))),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::Triplet => "triplet",
            LossKind::Quadratic => "quadratic",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripletBatch<T = f32> {
    pub anchors: Matrix<T>,
    pub positives: Matrix<T>,
    pub negatives: Matrix<T>,
    pub margin: f64,
}

/// Loss value and its gradient with respect to each input matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletGrads<T = f32> {
    pub loss: f64,
    pub anchors: Matrix<T>,
    pub positives: Matrix<T>,
    pub negatives: Matrix<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairGrads<T = f32> {
    pub loss: f64,
    pub anchors: Matrix<T>,
    pub positives: Matrix<T>,
}

/// For each anchor `i`, the row `j` of `candidates` closest to it among rows
/// with a different group id; `None` when every other row shares its group.
/// Ties go to the lowest `j`.
pub fn hard_negative_indices<T: Real>(
    anchors: &Matrix<T>,
    candidates: &Matrix<T>,
    groups: &[usize],
) -> Result<Vec<Option<usize>>> {
    let b = anchors.rows();
    if candidates.rows() != b || groups.len() != b {
        return Err(Error::arg(format!(
            "batch mismatch: {b} anchors, {} candidates, {} group ids",
            candidates.rows(),
            groups.len()
        )));
    }
    if anchors.cols() != candidates.cols() {
        return Err(Error::arg("anchors and candidates differ in width"));
    }
    Ok((0..b)
        .into_par_iter()
        .map(|i| {
            let a = anchors.row(i);
            let mut best: Option<(usize, f64)> = None;
            for j in 0..b {
                if j == i || groups[j] == groups[i] {
                    continue;
                }
                let d = sq_dist(a, candidates.row(j));
                if best.map_or(true, |(_, bd)| d < bd) {
                    best = Some((j, d));
                }
            }
            best.map(|(j, _)| j)
        })
        .collect())
}

/// Pairs `anchors[i]` with `positives[i]` and mines the hardest in-batch
/// negative among the other positives. Rows sharing a group id (the same
/// paragraph) are never each other's negatives.
pub fn mine_hard_triplets<T: Real>(
    anchors: &Matrix<T>,
    positives: &Matrix<T>,
    groups: &[usize],
    margin: f64,
) -> Result<TripletBatch<T>> {
    if anchors.rows() < 2 {
        return Err(Error::arg("hard negative mining needs a batch of at least 2"));
    }
    let neg = hard_negative_indices(anchors, positives, groups)?;
    let idx = neg
        .iter()
        .enumerate()
        .map(|(i, j)| j.ok_or_else(|| Error::arg(format!("anchor {i} has no negative with a different pair"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(TripletBatch {
        anchors: anchors.clone(),
        positives: positives.clone(),
        negatives: positives.select_rows(&idx),
        margin,
    })
}

fn check_same_shape<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<()> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::arg(format!(
            "shape mismatch: {}x{} vs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    if a.rows() == 0 {
        return Err(Error::arg("empty batch"));
    }
    Ok(())
}

/// Mean of `max(0, ‖a − p‖² − ‖a − n‖² + m)`; the subgradient at the hinge is 0.
pub fn triplet_loss<T: Real>(t: &TripletBatch<T>) -> Result<TripletGrads<T>> {
    check_same_shape(&t.anchors, &t.positives)?;
    check_same_shape(&t.anchors, &t.negatives)?;
    let (b, dim) = (t.anchors.rows(), t.anchors.cols());
    let scale = 2.0 / b as f64;
    let mut ga = Matrix::zeros(b, dim);
    let mut gp = Matrix::zeros(b, dim);
    let mut gn = Matrix::zeros(b, dim);
    let mut total = 0.0;
    for i in 0..b {
        let (a, p, n) = (t.anchors.row(i), t.positives.row(i), t.negatives.row(i));
        let h = sq_dist(a, p) - sq_dist(a, n) + t.margin;
        if h <= 0.0 {
            continue;
        }
        total += h;
        for k in 0..dim {
            let (a, p, n) = (a[k].widen(), p[k].widen(), n[k].widen());
            ga.set(i, k, T::cast(scale * (n - p)));
            gp.set(i, k, T::cast(-scale * (a - p)));
            gn.set(i, k, T::cast(scale * (a - n)));
        }
    }
    Ok(TripletGrads {
        loss: total / b as f64,
        anchors: ga,
        positives: gp,
        negatives: gn,
    })
}

/// `m` when `d > m`, else 0.
pub fn conditional_margin(margin: f64, d: f64) -> f64 {
    if d > margin {
        margin
    } else {
        0.0
    }
}

/// Mean over pairs of `[d − m]⁺ + m′(m, d)` with `d = ‖a − p‖²`. The `m′`
/// term is piecewise constant and contributes no gradient.
pub fn quadratic_regression_conditional_loss<T: Real>(
    anchors: &Matrix<T>,
    positives: &Matrix<T>,
    margin: f64,
) -> Result<PairGrads<T>> {
    check_same_shape(anchors, positives)?;
    let (b, dim) = (anchors.rows(), anchors.cols());
    let scale = 2.0 / b as f64;
    let mut ga = Matrix::zeros(b, dim);
    let mut gp = Matrix::zeros(b, dim);
    let mut total = 0.0;
    for i in 0..b {
        let (a, p) = (anchors.row(i), positives.row(i));
        let d = sq_dist(a, p);
        total += (d - margin).max(0.0) + conditional_margin(margin, d);
        if d > margin {
            for k in 0..dim {
                let diff = a[k].widen() - p[k].widen();
                ga.set(i, k, T::cast(scale * diff));
                gp.set(i, k, T::cast(-scale * diff));
            }
        }
    }
    Ok(PairGrads {
        loss: total / b as f64,
        anchors: ga,
        positives: gp,
    })
}
