use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use retforge_core::aggregate::{grid_configs, recall_evaluator, GridResult, Partition};
use retforge_core::embedstore::{validate as check_index, Violation};
use retforge_core::metrics::{DEFAULT_KS, RecallTable};
use retforge_core::model::ModelConfig;
use retforge_core::train::{EpochRecord, Mining, PipelineReport, Splits};
use retforge_core::{
    build_matrix, compute_idf, evaluate, generate, grid_search, load_checkpoint, load_store, make_splits,
    pairwise_distances, pipeline_three_stage, save_checkpoint, save_store, train_epochal, DocIndex,
    EmbeddingMatrix, IdfInjection, IdfTable, LayerWeights, RetrievalModel, RetrievalTask, SplitSpec, SynthSpec,
    TokenEmbeddingStore, TokenLists, TrainConfig,
};

use crate::manifest::{beside, RunManifest};
use crate::{
    AggregateArgs, EvalArgs, GenArgs, GridArgs, IdfArgs, IdfFlags, PipelineArgs, Side, TrainArgs, TrainFlags,
    UsageError, ValidateArgs,
};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn to_toml<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string(value).context("serializing TOML")
}

/// Store and index, rejected with every violation listed if they disagree.
fn load_checked(store: &Path, index: &Path) -> Result<(TokenEmbeddingStore, DocIndex)> {
    let s = load_store(store)?;
    let i = DocIndex::load(index)?;
    report_violations(&check_index(&s, &i))?;
    Ok((s, i))
}

fn report_violations(v: &[Violation]) -> Result<()> {
    if v.is_empty() {
        return Ok(());
    }
    for x in v {
        eprintln!("  {x}");
    }
    Err(retforge_core::Error::DataIntegrity(format!("{} index violation(s)", v.len())).into())
}

fn load_idf(flags: &IdfFlags) -> Result<Option<(IdfTable, TokenLists)>> {
    match (&flags.idf, &flags.tokens) {
        (Some(idf), Some(tokens)) => Ok(Some((IdfTable::load(idf)?, TokenLists::load(tokens)?))),
        (Some(_), None) => Err(usage("--idf needs --tokens")),
        (None, _) => Ok(None),
    }
}

fn idf_inputs(flags: &IdfFlags) -> Vec<PathBuf> {
    match (&flags.idf, &flags.tokens) {
        (Some(i), Some(t)) => vec![i.clone(), t.clone()],
        _ => Vec::new(),
    }
}

/// Explicit ks are used as given; the default list is cut at the pool size.
fn resolve_ks(ks: &Option<Vec<usize>>, pool: usize) -> Vec<usize> {
    match ks {
        Some(ks) => ks.clone(),
        None => DEFAULT_KS.iter().copied().filter(|&k| k <= pool).collect(),
    }
}

pub fn gen(a: &GenArgs) -> Result<()> {
    let spec = SynthSpec {
        n_pairs: a.pairs,
        dim: a.dim,
        n_layers: a.layers,
        min_tokens: a.min_tokens,
        max_tokens: a.max_tokens,
        signal_layer: a.signal_layer,
        noise_sigma: a.noise_sigma,
        distractor_overlap: a.distractor_overlap,
        stopword_fraction: a.stopword_fraction,
        seed: a.seed,
    };
    spec.validate()?;
    create_dir(&a.out_dir)?;
    let (store_path, index_path, tokens_path) = (
        a.out_dir.join("store.emb"),
        a.out_dir.join("store.idx"),
        a.out_dir.join("tokens.tsv"),
    );
    RunManifest::new("gen", a, vec![a.seed])?
        .outputs([&store_path, &index_path, &tokens_path])
        .write(&a.out_dir.join("manifest.toml"))?;
    let corpus = generate(&spec)?;
    save_store(&corpus.store, &store_path)?;
    corpus.index.save(&index_path)?;
    corpus.tokens.save(&tokens_path)?;
    let c = corpus.index.counts();
    println!("questions\t{}", c.n_questions);
    println!("paragraphs\t{}", c.n_paragraphs);
    println!("tokens\t{}", corpus.store.n_tokens());
    Ok(())
}

pub fn validate(a: &ValidateArgs) -> Result<()> {
    let store = load_store(&a.store)?;
    let index = DocIndex::load(&a.index)?;
    report_violations(&check_index(&store, &index))?;
    let c = index.counts();
    println!("ok: {} questions, {} paragraphs, {} tokens", c.n_questions, c.n_paragraphs, store.n_tokens());
    Ok(())
}

pub fn idf(a: &IdfArgs) -> Result<()> {
    let tokens = TokenLists::load(&a.tokens)?;
    RunManifest::new("idf", a, vec![])?
        .input(&a.tokens)?
        .outputs([&a.out])
        .write(&beside(&a.out))?;
    let table = compute_idf(&tokens.lists())?;
    table.save(&a.out)?;
    println!("documents\t{}", table.n_documents());
    println!("distinct tokens\t{}", table.weights().len());
    Ok(())
}

pub fn aggregate(a: &AggregateArgs) -> Result<()> {
    let weights = LayerWeights::new(a.weights.clone()).map_err(|e| usage(e.to_string()))?;
    let (store, index) = load_checked(&a.store, &a.index)?;
    if weights.len() != store.n_layers() {
        return Err(usage(format!(
            "{} weights given for a {}-layer store",
            weights.len(),
            store.n_layers()
        )));
    }
    let idf = load_idf(&a.idf)?;
    let idx_path = EmbeddingMatrix::index_path(&a.out);
    RunManifest::new("aggregate", a, vec![])?
        .inputs([&a.store, &a.index])?
        .inputs(&idf_inputs(&a.idf))?
        .outputs([&a.out, &idx_path])
        .write(&beside(&a.out))?;
    let inj = idf.as_ref().map(|(table, tokens)| IdfInjection { table, tokens });
    let matrix = build_matrix(&store, &index, &weights, inj)?;
    matrix.save(&a.out)?;
    let c = index.counts();
    println!("questions\t{}", c.n_questions);
    println!("paragraphs\t{}", c.n_paragraphs);
    Ok(())
}

#[derive(Serialize)]
struct GridOutput {
    step: u64,
    idf: bool,
    ks: Vec<usize>,
    results: Vec<GridResult>,
}

pub fn grid(a: &GridArgs) -> Result<()> {
    let (store, index) = load_checked(&a.store, &a.index)?;
    let idf = load_idf(&a.idf)?;
    let ks = resolve_ks(&a.ks, index.counts().n_paragraphs);
    if let Some(out) = &a.out {
        RunManifest::new("grid", a, vec![])?
            .inputs([&a.store, &a.index])?
            .inputs(&idf_inputs(&a.idf))?
            .outputs([out])
            .write(&beside(out))?;
    }
    let configs = grid_configs(store.n_layers(), a.step as usize);
    let inj = idf.as_ref().map(|(table, tokens)| IdfInjection { table, tokens });
    let results = grid_search(&store, &index, &configs, inj, recall_evaluator(ks.clone()))?;

    println!("{:>4}  {:<32} {:>9} {:>9}", "rank", "weights", "R@1 %", "avg %");
    for (i, r) in results.iter().enumerate() {
        println!(
            "{:>4}  {:<32} {:>9.2} {:>9.2}",
            i + 1,
            r.weights.to_string(),
            100.0 * r.recall_at_1,
            100.0 * r.avg_recall
        );
    }
    if let Some(out) = &a.out {
        let doc = GridOutput {
            step: a.step,
            idf: idf.is_some(),
            ks,
            results,
        };
        write_text(out, &to_toml(&doc)?)?;
    }
    Ok(())
}

/// Mean and half the spread of a set of runs.
#[derive(Serialize, Clone, Copy, Debug, PartialEq)]
struct Spread {
    mean: f64,
    half_range: f64,
}

impl Spread {
    fn of(values: &[f64]) -> Self {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self {
            mean,
            half_range: (hi - lo) / 2.0,
        }
    }

    fn pct(&self) -> String {
        format!("{:.2} ± {:.2}", 100.0 * self.mean, 100.0 * self.half_range)
    }
}

struct Prepared {
    partition: Partition,
    splits: Splits,
    cfg: TrainConfig,
    model: ModelConfig,
}

fn prepare(f: &TrainFlags, n_examples: impl Fn(&Partition) -> usize) -> Result<Prepared> {
    if f.epochs == 0 {
        return Err(usage("--epochs must be at least 1"));
    }
    if f.seeds.is_empty() {
        return Err(usage("--seed needs at least one value"));
    }
    let matrix = EmbeddingMatrix::load(&f.matrix)?;
    let partition = matrix.partition()?;
    let n = n_examples(&partition);
    let spec = SplitSpec {
        recall_validation_questions: f.recall_val.unwrap_or((n / 4).min(5000)),
        loss_validation_questions: f.loss_val.unwrap_or((n / 4).min(10000)),
        seed: f.split_seed,
    };
    let splits = make_splits(n, &spec)?;
    let cfg = TrainConfig {
        learning_rate: f.lr,
        weight_decay: f.wd,
        dropout: f.dropout as f32,
        batch_size: f.batch,
        epochs: f.epochs,
        margin: f.margin,
        seed: f.seeds[0],
        loss: f.loss.into(),
        mining: if f.corpus_mining { Mining::Corpus } else { Mining::Batch },
        eval_ks: f.ks.clone().unwrap_or_else(|| DEFAULT_KS.to_vec()),
        eval_every: f.eval_every,
    };
    cfg.validate()?;
    let model = ModelConfig::new(f.model.into(), matrix.dim()).with_dropout(f.dropout as f32);
    model.validate()?;
    Ok(Prepared {
        partition,
        splits,
        cfg,
        model,
    })
}

fn log_epoch(label: &str, start: Instant, r: &EpochRecord) {
    eprintln!("[{label}] {}  wall {:.2}s", r.log_line(), start.elapsed().as_secs_f64());
}

#[derive(Serialize)]
struct SeedRun {
    seed: u64,
    best_epoch: usize,
    validation_questions: usize,
    baseline_hits_at_1: usize,
    hits_at_1: usize,
    baseline_recall_at_1: f64,
    recall_at_1: f64,
    baseline_avg_recall: f64,
    avg_recall: f64,
    checkpoint: String,
    history: String,
}

#[derive(Serialize)]
struct TrainSummary {
    side: Side,
    recall_at_1: Spread,
    avg_recall: Spread,
    recall_at_1_gain: Spread,
    runs: Vec<SeedRun>,
}

fn hits_at_1(t: &RecallTable) -> usize {
    t.rows[0].hits
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let f = &a.common;
    let p = prepare(f, |part| part.questions.rows())?;
    create_dir(&f.out_dir)?;
    let names: Vec<(PathBuf, PathBuf)> = f
        .seeds
        .iter()
        .map(|s| {
            (
                f.out_dir.join(format!("model-seed{s}.rrm")),
                f.out_dir.join(format!("history-seed{s}.toml")),
            )
        })
        .collect();
    let summary_path = f.out_dir.join("summary.toml");
    RunManifest::new("train", a, f.seeds.clone())?
        .inputs([&f.matrix, &EmbeddingMatrix::index_path(&f.matrix)])?
        .outputs(names.iter().flat_map(|(m, h)| [m, h]).chain([&summary_path]))
        .write(&f.out_dir.join("manifest.toml"))?;

    let part = &p.partition;
    let task = match a.side {
        Side::Question => RetrievalTask::question_side(&part.questions, &part.paragraphs, &part.truth)?,
        Side::Paragraph => RetrievalTask::paragraph_side(&part.questions, &part.paragraphs, &part.truth)?,
    };
    let mut runs = Vec::new();
    for (&seed, (model_path, history_path)) in f.seeds.iter().zip(&names) {
        let cfg = TrainConfig { seed, ..p.cfg.clone() };
        let init = RetrievalModel::init_params(p.model, seed)?;
        let start = Instant::now();
        let label = format!("seed {seed}");
        let out = train_epochal(init, &task, &cfg, &p.splits, |r| log_epoch(&label, start, r))?;
        save_checkpoint(&out.model, model_path)?;
        out.history.save(history_path)?;
        runs.push(SeedRun {
            seed,
            best_epoch: out.history.best_epoch,
            validation_questions: p.splits.recall_val.len(),
            baseline_hits_at_1: hits_at_1(&out.baseline),
            hits_at_1: hits_at_1(&out.best),
            baseline_recall_at_1: out.baseline.rows[0].fraction,
            recall_at_1: out.best.rows[0].fraction,
            baseline_avg_recall: out.baseline.mean_fraction(),
            avg_recall: out.best.mean_fraction(),
            checkpoint: model_path.display().to_string(),
            history: history_path.display().to_string(),
        });
    }
    let r1: Vec<f64> = runs.iter().map(|r| r.recall_at_1).collect();
    let avg: Vec<f64> = runs.iter().map(|r| r.avg_recall).collect();
    let gain: Vec<f64> = runs.iter().map(|r| r.recall_at_1 - r.baseline_recall_at_1).collect();
    let summary = TrainSummary {
        side: a.side,
        recall_at_1: Spread::of(&r1),
        avg_recall: Spread::of(&avg),
        recall_at_1_gain: Spread::of(&gain),
        runs,
    };
    write_text(&summary_path, &to_toml(&summary)?)?;

    println!("{:>6} {:>10} {:>10} {:>10} {:>6}", "seed", "base R@1", "R@1", "avg", "best");
    for r in &summary.runs {
        println!(
            "{:>6} {:>10.2} {:>10.2} {:>10.2} {:>6}",
            r.seed,
            100.0 * r.baseline_recall_at_1,
            100.0 * r.recall_at_1,
            100.0 * r.avg_recall,
            r.best_epoch
        );
    }
    println!("recall@1 %\t{}", summary.recall_at_1.pct());
    println!("avg recall %\t{}", summary.avg_recall.pct());
    println!("recall@1 gain\t{}", summary.recall_at_1_gain.pct());
    Ok(())
}

#[derive(Serialize)]
struct PipelineSummary {
    question_recall_at_1: Spread,
    paragraph_recall_at_1: Spread,
    combined_recall_at_1: Spread,
    combined_avg_recall: Spread,
    runs: Vec<PipelineRun>,
}

#[derive(Serialize)]
struct PipelineRun {
    seed: u64,
    report: PipelineReport,
}

pub fn pipeline(a: &PipelineArgs) -> Result<()> {
    let f = &a.common;
    let p = prepare(f, |part| part.questions.rows())?;
    create_dir(&f.out_dir)?;
    let per_seed = |s: u64| -> Vec<PathBuf> {
        let mut v = vec![
            f.out_dir.join(format!("question-seed{s}.rrm")),
            f.out_dir.join(format!("paragraph-seed{s}.rrm")),
            f.out_dir.join(format!("report-seed{s}.toml")),
        ];
        v.extend((1..=3).map(|k| f.out_dir.join(format!("history-stage{k}-seed{s}.toml"))));
        v
    };
    let summary_path = f.out_dir.join("summary.toml");
    let all: Vec<PathBuf> = f.seeds.iter().flat_map(|&s| per_seed(s)).chain([summary_path.clone()]).collect();
    RunManifest::new("pipeline", a, f.seeds.clone())?
        .inputs([&f.matrix, &EmbeddingMatrix::index_path(&f.matrix)])?
        .outputs(&all)
        .write(&f.out_dir.join("manifest.toml"))?;

    let part = &p.partition;
    let mut runs = Vec::new();
    for &seed in &f.seeds {
        let cfg = TrainConfig { seed, ..p.cfg.clone() };
        let start = Instant::now();
        let out = pipeline_three_stage(
            &part.questions,
            &part.paragraphs,
            &part.truth,
            p.model,
            &cfg,
            &p.splits,
            |stage, r| log_epoch(&format!("seed {seed} stage {stage}"), start, r),
        )?;
        let paths = per_seed(seed);
        save_checkpoint(&out.question_model, &paths[0])?;
        save_checkpoint(&out.paragraph_model, &paths[1])?;
        write_text(&paths[2], &out.report.to_toml()?)?;
        for (h, path) in out.histories.iter().zip(&paths[3..]) {
            h.save(path)?;
        }
        println!("seed {seed}");
        print!("{}", out.report.to_table());
        runs.push(PipelineRun { seed, report: out.report });
    }
    let spread = |get: fn(&PipelineReport) -> f64| Spread::of(&runs.iter().map(|r| get(&r.report)).collect::<Vec<_>>());
    let summary = PipelineSummary {
        question_recall_at_1: spread(|r| r.question_side.recall_at_1),
        paragraph_recall_at_1: spread(|r| r.paragraph_side.recall_at_1),
        combined_recall_at_1: spread(|r| r.combined.recall_at_1),
        combined_avg_recall: spread(|r| r.combined.avg_recall),
        runs,
    };
    write_text(&summary_path, &to_toml(&summary)?)?;
    println!("combined recall@1 %\t{}", summary.combined_recall_at_1.pct());
    println!("combined avg recall %\t{}", summary.combined_avg_recall.pct());
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let matrix = EmbeddingMatrix::load(&a.matrix)?;
    let mut part = matrix.partition()?;
    if part.truth.is_empty() {
        bail!(retforge_core::Error::DataIntegrity("matrix has no questions".into()));
    }
    let ks = resolve_ks(&a.ks, part.paragraphs.rows());
    let pr_path = a.pr_csv.clone().unwrap_or_else(|| a.out.with_extension("pr.csv"));
    let mut inputs = vec![a.matrix.clone(), EmbeddingMatrix::index_path(&a.matrix)];
    inputs.extend(a.checkpoint.iter().cloned());
    inputs.extend(a.paragraph_checkpoint.iter().cloned());
    RunManifest::new("eval", a, vec![])?
        .inputs(&inputs)?
        .outputs([&a.out, &pr_path])
        .write(&beside(&a.out))?;

    if let Some(c) = &a.checkpoint {
        part.questions = load_checkpoint(c)?.infer(&part.questions)?;
    }
    if let Some(c) = &a.paragraph_checkpoint {
        part.paragraphs = load_checkpoint(c)?.infer(&part.paragraphs)?;
    }
    let d = pairwise_distances(&part.questions, &part.paragraphs)?;
    let report = evaluate(&d, &part.truth, &ks, a.auc)?;
    report.save(&a.out)?;
    write_text(&pr_path, &report.pr_csv())?;

    println!("{:>6} {:>8} {:>8}", "k", "hits", "recall");
    for r in &report.recall.rows {
        println!("{:>6} {:>8} {:>7.2}%", r.k, r.hits, 100.0 * r.fraction);
    }
    println!("questions\t{}", report.n_questions);
    println!("AP\t{:.6}", report.average_precision);
    if let Some(auc) = report.auc {
        println!("AUC\t{auc:.6}");
    }
    Ok(())
}
