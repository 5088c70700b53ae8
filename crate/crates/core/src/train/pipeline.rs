use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::metrics::RecallTable;
use crate::model::{ModelConfig, RetrievalModel};
use crate::rng::splitmix64;

use super::{train_epochal, RetrievalTask, Splits, TrainConfig, TrainHistory};

/// Recall of one stage against the raw-embedding baseline of its side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: String,
    pub baseline_recall_at_1: f64,
    pub baseline_avg_recall: f64,
    pub recall_at_1: f64,
    pub avg_recall: f64,
    pub best_epoch: usize,
}

impl StageSummary {
    fn new(stage: &str, baseline: &RecallTable, best: &RecallTable, best_epoch: usize) -> Self {
        Self {
            stage: stage.to_string(),
            baseline_recall_at_1: baseline.rows[0].fraction,
            baseline_avg_recall: baseline.mean_fraction(),
            recall_at_1: best.rows[0].fraction,
            avg_recall: best.mean_fraction(),
            best_epoch,
        }
    }

    pub fn recall_at_1_gain(&self) -> f64 {
        self.recall_at_1 - self.baseline_recall_at_1
    }

    pub fn avg_recall_gain(&self) -> f64 {
        self.avg_recall - self.baseline_avg_recall
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub question_side: StageSummary,
    pub paragraph_side: StageSummary,
    /// Question model refined again against the refined paragraphs.
    pub combined: StageSummary,
}

impl PipelineReport {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// Plain-text table: recall@1, mean recall and the gains over baseline,
    /// all in percentage points.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<16} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}\n",
            "stage", "base R@1", "R@1", "gain R@1", "base avg", "avg", "gain avg"
        );
        for s in [&self.question_side, &self.paragraph_side, &self.combined] {
            out.push_str(&format!(
                "{:<16} {:>10.2} {:>10.2} {:>+10.2} {:>10.2} {:>10.2} {:>+10.2}\n",
                s.stage,
                100.0 * s.baseline_recall_at_1,
                100.0 * s.recall_at_1,
                100.0 * s.recall_at_1_gain(),
                100.0 * s.baseline_avg_recall,
                100.0 * s.avg_recall,
                100.0 * s.avg_recall_gain()
            ));
        }
        out
    }
}

pub struct PipelineOutcome {
    pub question_model: RetrievalModel,
    pub paragraph_model: RetrievalModel,
    pub report: PipelineReport,
    /// Histories of the question, paragraph and combined stages.
    pub histories: [TrainHistory; 3],
}

/// Question side against fixed paragraphs, paragraph side against the
/// original questions, then the question model again against the refined
/// paragraphs (fresh optimizer state). Every stage uses the same splits.
pub fn pipeline_three_stage(
    questions: &Matrix<f32>,
    paragraphs: &Matrix<f32>,
    truth: &[usize],
    config: ModelConfig,
    cfg: &TrainConfig,
    splits: &Splits,
    mut on_epoch: impl FnMut(usize, &super::EpochRecord),
) -> Result<PipelineOutcome> {
    let q_task = RetrievalTask::question_side(questions, paragraphs, truth)?;
    let q_init = RetrievalModel::init_params(config, cfg.seed)?;
    let stage1 = train_epochal(q_init, &q_task, cfg, splits, |r| on_epoch(1, r))?;

    let p_task = RetrievalTask::paragraph_side(questions, paragraphs, truth)?;
    let p_init = RetrievalModel::init_params(config, splitmix64(cfg.seed ^ 2))?;
    let p_cfg = TrainConfig {
        seed: splitmix64(cfg.seed ^ 2),
        ..cfg.clone()
    };
    let stage2 = train_epochal(p_init, &p_task, &p_cfg, splits, |r| on_epoch(2, r))?;

    let refined = stage2.model.infer(paragraphs)?;
    let c_task = RetrievalTask::question_side(questions, &refined, truth)?;
    let c_cfg = TrainConfig {
        seed: splitmix64(cfg.seed ^ 3),
        ..cfg.clone()
    };
    let stage3 = train_epochal(stage1.model, &c_task, &c_cfg, splits, |r| on_epoch(3, r))?;

    let report = PipelineReport {
        question_side: StageSummary::new("question", &stage1.baseline, &stage1.best, stage1.history.best_epoch),
        paragraph_side: StageSummary::new("paragraph", &stage2.baseline, &stage2.best, stage2.history.best_epoch),
        combined: StageSummary::new("combined", &stage1.baseline, &stage3.best, stage3.history.best_epoch),
    };
    Ok(PipelineOutcome {
        question_model: stage3.model,
        paragraph_model: stage2.model,
        report,
        histories: [stage1.history, stage2.history, stage3.history],
    })
}
