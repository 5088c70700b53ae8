//! Training loop, validation splits and the three-stage refinement pipeline.
//!
//! A [`RetrievalTask`] describes one side of the retrieval problem: a model
//! maps rows of `inputs` and each example's output should land nearest its
//! paired row of the fixed `pool`. The question side maps questions against
//! paragraphs; the paragraph side maps each question's paragraph against the
//! questions.

mod adam;
mod pipeline;

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sq_dist, Matrix};
use crate::loss::{
    hard_negative_indices, quadratic_regression_conditional_loss, triplet_loss, LossKind, TripletBatch,
    DEFAULT_MARGIN,
};
use crate::metrics::{recall_from_ranks, streaming_truth_ranks, RecallTable, DEFAULT_KS};
use crate::model::RetrievalModel;
use crate::rng::XorShift64Star;

pub use adam::{adam_step, AdamState};
pub use pipeline::{pipeline_three_stage, PipelineOutcome, PipelineReport, StageSummary};

/// Where triplet negatives come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mining {
    /// Hardest negative among the batch's other positives.
    #[default]
    Batch,
    /// Hardest negative over the whole pool.
    Corpus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub dropout: f32,
    pub batch_size: usize,
    /// Passes over the training questions.
    pub epochs: usize,
    pub margin: f64,
    pub seed: u64,
    pub loss: LossKind,
    pub mining: Mining,
    pub eval_ks: Vec<usize>,
    /// Validate every this many epochs (the last epoch is always validated).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 1e-3,
            dropout: 0.1,
            batch_size: 512,
            epochs: 100,
            margin: DEFAULT_MARGIN,
            seed: 0,
            loss: LossKind::Triplet,
            mining: Mining::Batch,
            eval_ks: DEFAULT_KS.to_vec(),
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::arg("batch size must be at least 2"));
        }
        if self.epochs == 0 {
            return Err(Error::arg("at least one epoch is required"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::arg("learning rate must be a non-negative finite number"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::arg("weight decay must be a non-negative finite number"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::arg("dropout must lie in [0, 1)"));
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::arg("margin must be positive"));
        }
        if self.eval_every == 0 {
            return Err(Error::arg("evaluation cadence must be positive"));
        }
        if self.eval_ks.is_empty() || self.eval_ks[0] != 1 || self.eval_ks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::arg("eval ks must be strictly ascending and start at 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub recall_validation_questions: usize,
    pub loss_validation_questions: usize,
    pub seed: u64,
}

/// Question ordinals of each split, ascending.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub recall_val: Vec<usize>,
    pub loss_val: Vec<usize>,
}

/// Seeded partition of `n_questions` question ordinals into train, recall
/// validation and loss validation sets.
pub fn make_splits(n_questions: usize, spec: &SplitSpec) -> Result<Splits> {
    let held = spec.recall_validation_questions + spec.loss_validation_questions;
    if held > n_questions {
        return Err(Error::arg(format!(
            "{held} validation questions requested but only {n_questions} exist"
        )));
    }
    let mut order: Vec<usize> = (0..n_questions).collect();
    XorShift64Star::derive(spec.seed, 0x5b17).shuffle(&mut order);
    let sorted = |s: &[usize]| {
        let mut v = s.to_vec();
        v.sort_unstable();
        v
    };
    let (recall, rest) = order.split_at(spec.recall_validation_questions);
    let (loss, train) = rest.split_at(spec.loss_validation_questions);
    Ok(Splits {
        train: sorted(train),
        recall_val: sorted(recall),
        loss_val: sorted(loss),
    })
}

/// One training example: model input row, paired pool row, and the group
/// (paragraph) it belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Example {
    pub input_row: usize,
    pub pool_row: usize,
    pub group: usize,
}

/// One retrieval direction: `examples[i]` is question ordinal `i`.
#[derive(Clone, Debug)]
pub struct RetrievalTask<'a> {
    pub inputs: &'a Matrix<f32>,
    pub pool: &'a Matrix<f32>,
    pub examples: Vec<Example>,
    /// Group of every pool row; pool rows sharing an example's group are
    /// never its negatives.
    pub pool_groups: Vec<usize>,
}

impl<'a> RetrievalTask<'a> {
    /// Questions mapped against paragraphs; `truth[i]` is question `i`'s paragraph.
    pub fn question_side(questions: &'a Matrix<f32>, paragraphs: &'a Matrix<f32>, truth: &[usize]) -> Result<Self> {
        check_truth(questions, paragraphs, truth)?;
        Ok(Self {
            inputs: questions,
            pool: paragraphs,
            examples: truth
                .iter()
                .enumerate()
                .map(|(i, &p)| Example {
                    input_row: i,
                    pool_row: p,
                    group: p,
                })
                .collect(),
            pool_groups: (0..paragraphs.rows()).collect(),
        })
    }

    /// Each question's paragraph mapped against all questions.
    pub fn paragraph_side(questions: &'a Matrix<f32>, paragraphs: &'a Matrix<f32>, truth: &[usize]) -> Result<Self> {
        check_truth(questions, paragraphs, truth)?;
        Ok(Self {
            inputs: paragraphs,
            pool: questions,
            examples: truth
                .iter()
                .enumerate()
                .map(|(i, &p)| Example {
                    input_row: p,
                    pool_row: i,
                    group: p,
                })
                .collect(),
            pool_groups: truth.to_vec(),
        })
    }

    fn inputs_of(&self, ids: &[usize]) -> Matrix<f32> {
        let rows: Vec<usize> = ids.iter().map(|&i| self.examples[i].input_row).collect();
        self.inputs.select_rows(&rows)
    }

    fn targets_of(&self, ids: &[usize]) -> Matrix<f32> {
        let rows: Vec<usize> = ids.iter().map(|&i| self.examples[i].pool_row).collect();
        self.pool.select_rows(&rows)
    }
}

fn check_truth(q: &Matrix<f32>, p: &Matrix<f32>, truth: &[usize]) -> Result<()> {
    if q.cols() != p.cols() {
        return Err(Error::arg("question and paragraph widths differ"));
    }
    if truth.len() != q.rows() {
        return Err(Error::arg(format!("{} pair labels for {} questions", truth.len(), q.rows())));
    }
    if truth.iter().any(|&t| t >= p.rows()) {
        return Err(Error::arg("pair label out of range"));
    }
    Ok(())
}

/// Recall of `model` on the given examples against the whole pool.
pub fn evaluate_recall(model: &RetrievalModel, task: &RetrievalTask<'_>, ids: &[usize], ks: &[usize]) -> Result<RecallTable> {
    let out = model.infer(&task.inputs_of(ids))?;
    let truth: Vec<usize> = ids.iter().map(|&i| task.examples[i].pool_row).collect();
    let ranks = streaming_truth_ranks(&out, task.pool, &truth)?;
    recall_from_ranks(&ranks, task.pool.rows(), ks)
}

/// Loss and gradient with respect to the model outputs of one batch.
struct BatchLoss {
    loss: f64,
    upstream: Matrix<f32>,
    /// Rows that had a usable negative (triplet) or all rows (quadratic).
    used: usize,
}

fn corpus_negatives(outputs: &Matrix<f32>, task: &RetrievalTask<'_>, ids: &[usize]) -> Vec<Option<usize>> {
    use rayon::prelude::*;
    ids.par_iter()
        .enumerate()
        .map(|(r, &i)| {
            let group = task.examples[i].group;
            let a = outputs.row(r);
            let mut best: Option<(usize, f64)> = None;
            for j in 0..task.pool.rows() {
                if task.pool_groups[j] == group {
                    continue;
                }
                let d = sq_dist(a, task.pool.row(j));
                if best.map_or(true, |(_, bd)| d < bd) {
                    best = Some((j, d));
                }
            }
            best.map(|(j, _)| j)
        })
        .collect()
}

fn batch_loss(outputs: &Matrix<f32>, task: &RetrievalTask<'_>, ids: &[usize], cfg: &TrainConfig) -> Result<BatchLoss> {
    let targets = task.targets_of(ids);
    match cfg.loss {
        LossKind::Quadratic => {
            let g = quadratic_regression_conditional_loss(outputs, &targets, cfg.margin)?;
            Ok(BatchLoss {
                loss: g.loss,
                upstream: g.anchors,
                used: ids.len(),
            })
        }
        LossKind::Triplet => {
            let (negatives, neg_source): (Vec<Option<usize>>, &Matrix<f32>) = match cfg.mining {
                Mining::Batch => {
                    let groups: Vec<usize> = ids.iter().map(|&i| task.examples[i].group).collect();
                    (hard_negative_indices(outputs, &targets, &groups)?, &targets)
                }
                Mining::Corpus => (corpus_negatives(outputs, task, ids), task.pool),
            };
            let kept: Vec<usize> = (0..ids.len()).filter(|&r| negatives[r].is_some()).collect();
            let mut upstream = Matrix::zeros(outputs.rows(), outputs.cols());
            if kept.is_empty() {
                return Ok(BatchLoss {
                    loss: 0.0,
                    upstream,
                    used: 0,
                });
            }
            let neg_rows: Vec<usize> = kept.iter().map(|&r| negatives[r].unwrap()).collect();
            let batch = TripletBatch {
                anchors: outputs.select_rows(&kept),
                positives: targets.select_rows(&kept),
                negatives: neg_source.select_rows(&neg_rows),
                margin: cfg.margin,
            };
            let g = triplet_loss(&batch)?;
            for (k, &r) in kept.iter().enumerate() {
                upstream.row_mut(r).copy_from_slice(g.anchors.row(k));
            }
            Ok(BatchLoss {
                loss: g.loss,
                upstream,
                used: kept.len(),
            })
        }
    }
}

/// Mean loss over `ids` in inference mode, taken in fixed chunks of the
/// batch size and weighted by the rows each chunk contributes.
pub fn validation_loss(model: &RetrievalModel, task: &RetrievalTask<'_>, ids: &[usize], cfg: &TrainConfig) -> Result<Option<f64>> {
    let (mut total, mut used) = (0.0, 0usize);
    for chunk in ids.chunks(cfg.batch_size) {
        if chunk.len() < 2 && cfg.loss == LossKind::Triplet && cfg.mining == Mining::Batch {
            continue;
        }
        let out = model.infer(&task.inputs_of(chunk))?;
        let b = batch_loss(&out, task, chunk, cfg)?;
        total += b.loss * b.used as f64;
        used += b.used;
    }
    Ok((used > 0).then(|| total / used as f64))
}

/// One row of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_val_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recall_at_1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub avg_recall: Option<f64>,
}

impl EpochRecord {
    /// Human-readable log line.
    pub fn log_line(&self) -> String {
        let f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
        let pct = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{:.2}%", 100.0 * v));
        format!(
            "epoch {:>4}  train_loss {}  val_loss {}  recall@1 {}  avg_recall {}",
            self.epoch,
            f(self.train_loss),
            f(self.val_loss),
            pct(self.recall_at_1),
            pct(self.avg_recall)
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub best_epoch: usize,
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }
}

pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation recall@1.
    pub model: RetrievalModel,
    pub history: TrainHistory,
    /// Validation recall before any update.
    pub baseline: RecallTable,
    /// Validation recall of the selected parameters.
    pub best: RecallTable,
    /// Every example id that contributed a gradient, ascending.
    pub trained_on: Vec<usize>,
}

/// Clamps the requested ks to the pool size.
fn usable_ks(ks: &[usize], pool: usize) -> Vec<usize> {
    let out: Vec<usize> = ks.iter().copied().filter(|&k| k <= pool).collect();
    if out.len() < ks.len() {
        log::warn!("dropping recall@k for k > {pool} (pool size)");
    }
    out
}

/// Trains `model` on `splits.train`, validating on the two held-out sets, and
/// returns the best parameters by validation recall@1 (earliest on ties, the
/// untrained model counting as epoch 0). `on_epoch` sees each history row as
/// it is produced.
pub fn train_epochal(
    model: RetrievalModel,
    task: &RetrievalTask<'_>,
    cfg: &TrainConfig,
    splits: &Splits,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if task.inputs.cols() != model.dim() || task.pool.cols() != model.dim() {
        return Err(Error::arg("embedding width does not match the model"));
    }
    let n = task.examples.len();
    if [&splits.train, &splits.recall_val, &splits.loss_val]
        .iter()
        .any(|s| s.iter().any(|&i| i >= n))
    {
        return Err(Error::arg("split refers to a question that does not exist"));
    }
    if splits.train.len() < 2 {
        return Err(Error::arg("need at least two training questions"));
    }
    if splits.recall_val.is_empty() {
        return Err(Error::arg("the recall validation set is empty"));
    }
    let held: BTreeSet<usize> = splits.recall_val.iter().chain(&splits.loss_val).copied().collect();
    if splits.train.iter().any(|i| held.contains(i)) {
        return Err(Error::arg("training and validation questions overlap"));
    }
    let ks = usable_ks(&cfg.eval_ks, task.pool.rows());

    let mut model = model;
    let mut config = *model.config();
    config = config.with_dropout(cfg.dropout);
    if config != *model.config() {
        model = RetrievalModel::from_params(config, model_params(&model))?;
    }

    let mut adam = AdamState::new(model.tensors());
    let mut history = TrainHistory::default();
    let mut trained_on = BTreeSet::new();

    let baseline = evaluate_recall(&model, task, &splits.recall_val, &ks)?;
    let val0 = validation_loss(&model, task, &splits.loss_val, cfg)?;
    let mut best_val_loss = val0;
    let mut best = (baseline.clone(), model.clone());
    let first = EpochRecord {
        epoch: 0,
        train_loss: None,
        val_loss: val0,
        best_val_loss,
        recall_at_1: Some(baseline.rows[0].fraction),
        avg_recall: Some(baseline.mean_fraction()),
    };
    on_epoch(&first);
    history.epochs.push(first);

    for epoch in 1..=cfg.epochs {
        let mut order = splits.train.clone();
        XorShift64Star::derive(cfg.seed, epoch as u64).shuffle(&mut order);
        let (mut loss_sum, mut loss_rows) = (0.0, 0usize);
        for (b, ids) in order.chunks(cfg.batch_size).enumerate() {
            if ids.len() < 2 && cfg.loss == LossKind::Triplet && cfg.mining == Mining::Batch {
                continue;
            }
            let step_seed = cfg.seed ^ ((epoch as u64) << 32 | b as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let out = model.forward(&task.inputs_of(ids), true, step_seed)?;
            let bl = batch_loss(&out, task, ids, cfg)?;
            if !bl.loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite training loss at epoch {epoch}, batch {b}")));
            }
            if bl.used == 0 {
                continue;
            }
            trained_on.extend(ids.iter().copied());
            loss_sum += bl.loss * bl.used as f64;
            loss_rows += bl.used;
            model.backward(&bl.upstream)?;
            adam_step(model.tensors_mut(), &mut adam, cfg.learning_rate, cfg.weight_decay)?;
            if model.tensors().iter().any(|t| t.values.iter().any(|v| !v.is_finite())) {
                return Err(Error::Numeric(format!("non-finite parameters after epoch {epoch}, batch {b}")));
            }
        }
        let mut record = EpochRecord {
            epoch,
            train_loss: (loss_rows > 0).then(|| loss_sum / loss_rows as f64),
            val_loss: None,
            best_val_loss,
            recall_at_1: None,
            avg_recall: None,
        };
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let recall = evaluate_recall(&model, task, &splits.recall_val, &ks)?;
            let val = validation_loss(&model, task, &splits.loss_val, cfg)?;
            if let Some(v) = val {
                if !v.is_finite() {
                    return Err(Error::Numeric(format!("non-finite validation loss at epoch {epoch}")));
                }
                best_val_loss = Some(best_val_loss.map_or(v, |b: f64| b.min(v)));
            }
            record.val_loss = val;
            record.best_val_loss = best_val_loss;
            record.recall_at_1 = Some(recall.rows[0].fraction);
            record.avg_recall = Some(recall.mean_fraction());
            if recall.rows[0].hits > best.0.rows[0].hits {
                best = (recall, model.clone());
                history.best_epoch = epoch;
            }
        }
        on_epoch(&record);
        history.epochs.push(record);
    }
    Ok(TrainOutcome {
        model: best.1,
        history,
        baseline,
        best: best.0,
        trained_on: trained_on.into_iter().collect(),
    })
}

fn model_params(model: &RetrievalModel) -> Vec<crate::model::Param> {
    model
        .names()
        .iter()
        .zip(model.tensors())
        .map(|(name, t)| crate::model::Param {
            name: name.clone(),
            tensor: t.clone(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::normalize_in_place;
    use crate::model::{ModelConfig, ModelKind};

    fn corpus(n: usize, dim: usize, noise: f64, seed: u64) -> (Matrix<f32>, Matrix<f32>, Vec<usize>) {
        let mut rng = XorShift64Star::new(seed);
        let mut p = Matrix::zeros(n, dim);
        let mut q = Matrix::zeros(n, dim);
        for i in 0..n {
            for k in 0..dim {
                let z = rng.gaussian();
                p.set(i, k, z as f32);
                q.set(i, k, (z + noise * rng.gaussian()) as f32);
            }
            normalize_in_place(p.row_mut(i)).unwrap();
            normalize_in_place(q.row_mut(i)).unwrap();
        }
        (q, p, (0..n).collect())
    }

    #[test]
    fn splits_are_disjoint_and_seeded() {
        let spec = SplitSpec {
            recall_validation_questions: 5,
            loss_validation_questions: 7,
            seed: 3,
        };
        let s = make_splits(30, &spec).unwrap();
        assert_eq!((s.train.len(), s.recall_val.len(), s.loss_val.len()), (18, 5, 7));
        let mut all: Vec<usize> = s.train.iter().chain(&s.recall_val).chain(&s.loss_val).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..30).collect::<Vec<_>>());
        assert_eq!(make_splits(30, &spec).unwrap(), s);
        let none = make_splits(
            4,
            &SplitSpec {
                recall_validation_questions: 0,
                loss_validation_questions: 0,
                seed: 0,
            },
        )
        .unwrap();
        assert_eq!(none.train, vec![0, 1, 2, 3]);
        assert!(make_splits(10, &SplitSpec { recall_validation_questions: 6, loss_validation_questions: 5, seed: 0 }).is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_the_baseline() {
        let (q, p, truth) = corpus(40, 8, 1.0, 1);
        let task = RetrievalTask::question_side(&q, &p, &truth).unwrap();
        let splits = make_splits(40, &SplitSpec { recall_validation_questions: 10, loss_validation_questions: 10, seed: 1 }).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            weight_decay: 0.0,
            batch_size: 8,
            epochs: 3,
            eval_ks: vec![1, 2, 5],
            ..TrainConfig::default()
        };
        let model = RetrievalModel::init_params(ModelConfig::new(ModelKind::Fcrr, 8), 0).unwrap();
        let out = train_epochal(model, &task, &cfg, &splits, |_| {}).unwrap();
        let direct = {
            let qv = q.select_rows(&splits.recall_val);
            let ranks = streaming_truth_ranks(&qv, &p, &splits.recall_val).unwrap();
            recall_from_ranks(&ranks, 40, &[1, 2, 5]).unwrap()
        };
        assert_eq!(out.baseline, direct);
        assert_eq!(out.best, direct);
        assert_eq!(out.history.best_epoch, 0);
        assert!(out.trained_on.iter().all(|i| splits.train.contains(i)));
    }

    #[test]
    fn training_is_deterministic_and_improves() {
        let (q, p, truth) = corpus(120, 16, 1.2, 2);
        let task = RetrievalTask::question_side(&q, &p, &truth).unwrap();
        let splits = make_splits(120, &SplitSpec { recall_validation_questions: 30, loss_validation_questions: 20, seed: 0 }).unwrap();
        let cfg = TrainConfig {
            batch_size: 16,
            epochs: 30,
            learning_rate: 3e-3,
            eval_ks: vec![1, 5],
            ..TrainConfig::default()
        };
        let run = || {
            let model = RetrievalModel::init_params(ModelConfig::new(ModelKind::Fcrr, 16), 0).unwrap();
            train_epochal(model, &task, &cfg, &splits, |_| {}).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.history, b.history);
        assert_eq!(a.model.tensors(), b.model.tensors());
        assert!(a.history.epochs.iter().skip(1).all(|r| r.train_loss.unwrap().is_finite()));
        let held: BTreeSet<usize> = splits.recall_val.iter().chain(&splits.loss_val).copied().collect();
        assert!(a.trained_on.iter().all(|i| !held.contains(i)));
        assert!(a.best.rows[0].hits >= a.baseline.rows[0].hits);
    }

    #[test]
    fn bad_configs_are_rejected() {
        let mut cfg = TrainConfig::default();
        cfg.epochs = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.batch_size = 1;
        assert!(cfg.validate().is_err());
    }
}
