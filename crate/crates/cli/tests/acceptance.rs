//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 1-5 exercise the library against independent oracles; 6-8 drive
//! the `retforge` binary. Criterion 9 needs real ELMo-layer SQuAD dev
//! embeddings and runs only when `RETFORGE_SQUAD_DEV` names a directory
//! holding `store.emb` and `store.idx`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use retforge_core::aggregate::{named_configs, recall_evaluator};
use retforge_core::datagen::SynthSpec;
use retforge_core::linalg::{normalize_in_place, Matrix};
use retforge_core::loss::{
    hard_negative_indices, mine_hard_triplets, quadratic_regression_conditional_loss, triplet_loss, TripletBatch,
};
use retforge_core::metrics::{pr_curve_and_ap, roc_auc, top_k_rows};
use retforge_core::model::{ModelConfig, ModelKind, RetrievalModel};
use retforge_core::rng::XorShift64Star;
use retforge_core::{
    build_matrix, compute_idf, generate, grid_search, pairwise_distances, recall_at_k, DocIndex, IdfInjection,
    LayerWeights, TokenEmbeddingStore, TokenLists,
};

const DIST_TOL: f64 = 1e-4;
const METRIC_TOL: f64 = 1e-6;
const GRAD_H: f64 = 1e-3;
const GRAD_TOL: f64 = 1e-3;
const NORM_TOL: f64 = 1e-5;
const AGG_TOL: f64 = 1e-5;
const IDF_TOL: f64 = 1e-9;
const MIN_GAIN: f64 = 0.10;

// Seed-0 regression values for the end-to-end run (50 validation questions).
const FROZEN_BASELINE_HITS: usize = 19;
const FROZEN_TRAINED_HITS: usize = 28;
const FROZEN_BEST_EPOCH: usize = 32;

// recall@1 hits out of 200 questions, (plain, with IDF), for data seeds 0-4.
const FROZEN_IDF_HITS: [(usize, usize); 5] = [(84, 199), (75, 199), (81, 200), (82, 199), (80, 200)];

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: u64) -> Result<(), String> {
    ensure(elapsed.as_secs() < limit_s, || {
        format!("took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64())
    })
}

fn gaussian<T: retforge_core::linalg::Real>(rng: &mut XorShift64Star, rows: usize, cols: usize) -> Matrix<T> {
    let data = (0..rows * cols).map(|_| T::cast(rng.gaussian())).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

fn unit<T: retforge_core::linalg::Real>(rng: &mut XorShift64Star, rows: usize, cols: usize) -> Matrix<T> {
    let mut m = gaussian::<T>(rng, rows, cols);
    for r in 0..rows {
        normalize_in_place(m.row_mut(r)).unwrap();
    }
    m
}

/// Coordinates on a coarse grid so that distance ties are common.
fn coarse(rng: &mut XorShift64Star, rows: usize, cols: usize) -> Matrix<f32> {
    let data = (0..rows * cols).map(|_| (rng.below(3) as f32 - 1.0) * 0.5).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

fn naive_sq<T: retforge_core::linalg::Real>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x.widen() - y.widen()).powi(2)).sum()
}

fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

// ---------------------------------------------------------------- metrics

fn criterion_metrics() -> Outcome {
    let start = Instant::now();
    let mut rng = XorShift64Star::new(2024);
    let instances = 120;
    for inst in 0..instances {
        let nq = 1 + rng.below(64);
        let np = 2 + rng.below(127);
        let dim = 1 + rng.below(32);
        let (q, p) = if inst % 3 == 0 {
            (coarse(&mut rng, nq, dim), coarse(&mut rng, np, dim))
        } else {
            (unit::<f32>(&mut rng, nq, dim), unit::<f32>(&mut rng, np, dim))
        };
        let truth: Vec<usize> = (0..nq).map(|_| rng.below(np)).collect();
        let d = pairwise_distances(&q, &p).map_err(|e| e.to_string())?;

        for i in 0..nq {
            for j in 0..np {
                let want = naive_sq(q.row(i), p.row(j));
                let got = d.get(i, j) as f64;
                ensure((got - want).abs() <= DIST_TOL, || {
                    format!("instance {inst}: distance ({i},{j}) {got} vs {want}")
                })?;
            }
        }

        // Full stable sort of each row; ties keep the lower column first.
        let sorted: Vec<Vec<usize>> = (0..nq)
            .map(|i| {
                let mut cols: Vec<usize> = (0..np).collect();
                cols.sort_by(|&a, &b| d.get(i, a).total_cmp(&d.get(i, b)));
                cols
            })
            .collect();
        let ks: Vec<usize> = [1, 2, 5, 10, 20, 50].into_iter().filter(|&k| k <= np).collect();
        let table = recall_at_k(&d, &truth, &ks).map_err(|e| e.to_string())?;
        for row in &table.rows {
            let hits = (0..nq).filter(|&i| sorted[i][..row.k].contains(&truth[i])).count();
            ensure(row.hits == hits, || format!("instance {inst}: recall@{} hits {} vs {hits}", row.k, row.hits))?;
            ensure((row.fraction - hits as f64 / nq as f64).abs() <= METRIC_TOL, || {
                format!("instance {inst}: recall@{} fraction", row.k)
            })?;
        }
        let k = 1 + rng.below(np);
        let top = top_k_rows(&d, k).map_err(|e| e.to_string())?;
        for i in 0..nq {
            ensure(top[i] == sorted[i][..k], || format!("instance {inst}: top-{k} of row {i}"))?;
        }

        // AP: threshold at every distinct distance; AUC: all positive/negative pairs.
        let mut all: Vec<(f32, bool)> = (0..nq)
            .flat_map(|i| (0..np).map(move |j| (i, j)))
            .map(|(i, j)| (d.get(i, j), truth[i] == j))
            .collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut thresholds: Vec<f32> = all.iter().map(|x| x.0).collect();
        thresholds.dedup();
        let (mut ap, mut prev) = (0.0, 0.0);
        for t in thresholds {
            let within: Vec<&(f32, bool)> = all.iter().filter(|x| x.0 <= t).collect();
            let tp = within.iter().filter(|x| x.1).count();
            let recall = tp as f64 / nq as f64;
            if recall > prev {
                ap += (recall - prev) * tp as f64 / within.len() as f64;
                prev = recall;
            }
        }
        let (_, got_ap) = pr_curve_and_ap(&d, &truth).map_err(|e| e.to_string())?;
        ensure((got_ap - ap).abs() <= METRIC_TOL, || format!("instance {inst}: AP {got_ap} vs {ap}"))?;

        let pos: Vec<f32> = all.iter().filter(|x| x.1).map(|x| x.0).collect();
        let neg: Vec<f32> = all.iter().filter(|x| !x.1).map(|x| x.0).collect();
        let mut wins = 0.0;
        for &a in &pos {
            for &b in &neg {
                wins += if a < b {
                    1.0
                } else if a == b {
                    0.5
                } else {
                    0.0
                };
            }
        }
        let auc = wins / (pos.len() * neg.len()) as f64;
        let got_auc = roc_auc(&d, &truth).map_err(|e| e.to_string())?;
        ensure((got_auc - auc).abs() <= METRIC_TOL, || format!("instance {inst}: AUC {got_auc} vs {auc}"))?;
    }
    within(start.elapsed(), 30)?;
    Ok(format!("{instances} instances in {:.1}s", start.elapsed().as_secs_f64()))
}

// -------------------------------------------------------------- gradients

fn model_gradient_error(model: &mut RetrievalModel<f64>, x: &Matrix<f64>, coef: &Matrix<f64>, seed: u64) -> Vec<f64> {
    let objective = |m: &mut RetrievalModel<f64>| {
        let y = m.forward(x, true, seed).unwrap();
        let pattern = m.relu_pattern();
        let v: f64 = y.as_slice().iter().zip(coef.as_slice()).map(|(a, b)| a * b).sum();
        (v, pattern)
    };
    let (_, base) = objective(model);
    model.backward(coef).unwrap();
    let analytic: Vec<Vec<f64>> = model.tensors().iter().map(|t| t.grad.clone().unwrap()).collect();
    let mut worst = vec![0.0f64; analytic.len()];
    for (ti, grads) in analytic.iter().enumerate() {
        for (vi, &g) in grads.iter().enumerate() {
            let orig = model.tensors()[ti].values[vi];
            model.tensors_mut()[ti].values[vi] = orig + GRAD_H;
            let (up, pu) = objective(model);
            model.tensors_mut()[ti].values[vi] = orig - GRAD_H;
            let (down, pd) = objective(model);
            model.tensors_mut()[ti].values[vi] = orig;
            // A ReLU flipping inside the stencil is a kink, not a gradient error.
            if pu != base || pd != base {
                continue;
            }
            worst[ti] = worst[ti].max(rel_err(g, (up - down) / (2.0 * GRAD_H), 1e-6));
        }
    }
    worst
}

fn loss_fd_error(inputs: &mut [Matrix<f64>], analytic: &[Matrix<f64>], loss: &dyn Fn(&[Matrix<f64>]) -> f64) -> f64 {
    let mut worst = 0.0f64;
    for m in 0..inputs.len() {
        for k in 0..inputs[m].as_slice().len() {
            let orig = inputs[m].as_slice()[k];
            inputs[m].as_mut_slice()[k] = orig + GRAD_H;
            let up = loss(inputs);
            inputs[m].as_mut_slice()[k] = orig - GRAD_H;
            let down = loss(inputs);
            inputs[m].as_mut_slice()[k] = orig;
            worst = worst.max(rel_err(analytic[m].as_slice()[k], (up - down) / (2.0 * GRAD_H), 1e-6));
        }
    }
    worst
}

fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let (batch, dim, seeds) = (8, 16, 10u64);
    let mut worst = BTreeMap::new();
    for kind in [ModelKind::Fcrr, ModelKind::ConvRr, ModelKind::Composite] {
        let config = ModelConfig::new(kind, dim);
        if let Some(f) = config.fcrr() {
            ensure(f.n_layers == 2, || "FCRR default depth is not 2".into())?;
        }
        for seed in 0..seeds {
            let mut rng = XorShift64Star::new(seed);
            let mut model = RetrievalModel::<f64>::init_params(config, seed).map_err(|e| e.to_string())?;
            for t in model.tensors_mut() {
                for v in &mut t.values {
                    *v = 0.3 * rng.gaussian();
                }
            }
            let x = unit::<f64>(&mut rng, batch, dim);
            let coef = gaussian::<f64>(&mut rng, batch, dim);
            let errs = model_gradient_error(&mut model, &x, &coef, seed);
            for (name, e) in model.names().iter().zip(errs) {
                ensure(e < GRAD_TOL, || format!("{kind} seed {seed} {name}: relative error {e:.2e}"))?;
                let w = worst.entry(kind.name().to_string()).or_insert(0.0f64);
                *w = w.max(e);
            }
        }
    }

    // Losses: resample until every hinge or kink is at least 0.05 away.
    let margin = 0.5;
    for seed in 0..seeds {
        let mut rng = XorShift64Star::new(1000 + seed);
        let mut tries = 0;
        let (a, p, n) = loop {
            tries += 1;
            let (a, p, n) = (gaussian::<f64>(&mut rng, batch, dim), gaussian(&mut rng, batch, dim), gaussian(&mut rng, batch, dim));
            let (a, p, n) = (scale(&a, 0.3), scale(&p, 0.3), scale(&n, 0.3));
            let clear = (0..batch).all(|i| {
                let h = naive_sq(a.row(i), p.row(i)) - naive_sq(a.row(i), n.row(i)) + margin;
                let d = naive_sq(a.row(i), p.row(i));
                h.abs() > 0.05 && (d - margin).abs() > 0.05
            });
            if clear {
                break (a, p, n);
            }
            ensure(tries < 10_000, || "could not draw a batch away from the hinge".into())?;
        };
        let g = triplet_loss(&TripletBatch {
            anchors: a.clone(),
            positives: p.clone(),
            negatives: n.clone(),
            margin,
        })
        .map_err(|e| e.to_string())?;
        let triplet = |m: &[Matrix<f64>]| {
            triplet_loss(&TripletBatch {
                anchors: m[0].clone(),
                positives: m[1].clone(),
                negatives: m[2].clone(),
                margin,
            })
            .unwrap()
            .loss
        };
        let e = loss_fd_error(&mut [a.clone(), p.clone(), n.clone()], &[g.anchors, g.positives, g.negatives], &triplet);
        ensure(e < GRAD_TOL, || format!("triplet seed {seed}: relative error {e:.2e}"))?;
        let w = worst.entry("triplet".to_string()).or_insert(0.0f64);
        *w = w.max(e);

        let q = quadratic_regression_conditional_loss(&a, &p, margin).map_err(|e| e.to_string())?;
        let quad = |m: &[Matrix<f64>]| quadratic_regression_conditional_loss(&m[0], &m[1], margin).unwrap().loss;
        let e = loss_fd_error(&mut [a, p], &[q.anchors, q.positives], &quad);
        ensure(e < GRAD_TOL, || format!("quadratic seed {seed}: relative error {e:.2e}"))?;
        let w = worst.entry("quadratic".to_string()).or_insert(0.0f64);
        *w = w.max(e);
    }
    within(start.elapsed(), 60)?;
    let summary: Vec<String> = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
    Ok(format!("max rel err: {}", summary.join(", ")))
}

fn scale(m: &Matrix<f64>, s: f64) -> Matrix<f64> {
    let mut out = m.clone();
    for v in out.as_mut_slice() {
        *v *= s;
    }
    out
}

// ------------------------------------------------- identity and unit norm

fn criterion_identity() -> Outcome {
    let mut rng = XorShift64Star::new(7);
    let dim = 16;
    let kinds = [ModelKind::Fcrr, ModelKind::ConvRr, ModelKind::Composite];
    for kind in kinds {
        let x = unit::<f32>(&mut rng, 32, dim);
        let model = RetrievalModel::<f32>::zeroed(ModelConfig::new(kind, dim)).map_err(|e| e.to_string())?;
        let y = model.infer(&x).map_err(|e| e.to_string())?;
        ensure(y.as_slice() == x.as_slice(), || format!("{kind}: zero branch is not the identity"))?;
    }
    let draws = 1000;
    let mut worst = 0.0f64;
    for draw in 0..draws {
        let kind = kinds[draw % 3];
        let mut model = RetrievalModel::<f32>::init_params(ModelConfig::new(kind, dim), draw as u64).map_err(|e| e.to_string())?;
        let s = [0.1, 1.0, 5.0][(draw / 3) % 3];
        for t in model.tensors_mut() {
            for v in &mut t.values {
                *v = (s * rng.gaussian()) as f32;
            }
        }
        let x = unit::<f32>(&mut rng, 4, dim);
        let y = model.infer(&x).map_err(|e| e.to_string())?;
        for r in y.iter_rows() {
            let n = r.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            worst = worst.max((n - 1.0).abs());
        }
    }
    ensure(worst <= NORM_TOL, || format!("output norm off by {worst:.2e}"))?;
    Ok(format!("exact identity for 3 kinds; {draws} draws, max |norm-1| {worst:.1e}"))
}

// ----------------------------------------------------------------- mining

fn criterion_mining() -> Outcome {
    let mut batches = 0;
    let mut duplicated = 0;
    for seed in 0..100u64 {
        let mut rng = XorShift64Star::new(seed);
        for _ in 0..4 {
            let b = 2 + rng.below(63);
            let dim = 1 + rng.below(8);
            let dup = rng.below(2) == 0;
            let groups: Vec<usize> = (0..b).map(|i| if dup { rng.below(b / 2 + 1) } else { i }).collect();
            if dup {
                duplicated += 1;
            }
            let (a, p) = if rng.below(2) == 0 {
                (coarse(&mut rng, b, dim), coarse(&mut rng, b, dim))
            } else {
                (gaussian::<f32>(&mut rng, b, dim), gaussian::<f32>(&mut rng, b, dim))
            };
            let oracle: Vec<Option<usize>> = (0..b)
                .map(|i| {
                    let mut best: Option<(usize, f64)> = None;
                    for j in 0..b {
                        if j == i || groups[j] == groups[i] {
                            continue;
                        }
                        let d = naive_sq(a.row(i), p.row(j));
                        if best.map_or(true, |(_, bd)| d < bd) {
                            best = Some((j, d));
                        }
                    }
                    best.map(|x| x.0)
                })
                .collect();
            let got = hard_negative_indices(&a, &p, &groups).map_err(|e| e.to_string())?;
            ensure(got == oracle, || format!("seed {seed} b {b}: mined indices differ from exhaustive search"))?;
            match mine_hard_triplets(&a, &p, &groups, 0.2) {
                Ok(t) => {
                    for i in 0..b {
                        let j = oracle[i].ok_or("triplets mined for an anchor without negatives")?;
                        ensure(t.negatives.row(i) == p.row(j), || format!("seed {seed}: negative row {i}"))?;
                    }
                }
                Err(_) => ensure(oracle.iter().any(|o| o.is_none()), || format!("seed {seed}: spurious mining error"))?,
            }
            batches += 1;
        }
    }
    Ok(format!("{batches} batches ({duplicated} with shared paragraphs)"))
}

// ------------------------------------------------------------ aggregation

/// Straight loops over the raw store: weighted layer sum per token, IDF
/// scaling, token mean, L2 normalization.
fn naive_matrix(store: &TokenEmbeddingStore, index: &DocIndex, w: &[f64], idf: Option<(&BTreeMap<u32, f64>, f64, &TokenLists)>) -> Vec<Vec<f64>> {
    let (layers, dim) = (store.n_layers(), store.dim());
    let data = store.data();
    index
        .entries()
        .iter()
        .map(|e| {
            let mut acc = vec![0.0f64; dim];
            for k in 0..e.length {
                let token = e.offset + k;
                let scale = match idf {
                    Some((table, unseen, lists)) => {
                        let id = lists.get(&e.doc_id).unwrap()[k];
                        *table.get(&id).unwrap_or(&unseen)
                    }
                    None => 1.0,
                };
                for j in 0..layers {
                    for c in 0..dim {
                        acc[c] += scale * w[j] * data[(token * layers + j) * dim + c] as f64;
                    }
                }
            }
            for v in &mut acc {
                *v /= e.length as f64;
            }
            let n = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
            acc.iter().map(|v| v / n).collect()
        })
        .collect()
}

fn criterion_aggregation() -> Outcome {
    let mut worst = 0.0f64;
    let mut worst_idf = 0.0f64;
    let mut rng = XorShift64Star::new(55);
    for seed in 0..6u64 {
        let spec = SynthSpec {
            n_pairs: 30,
            dim: 8,
            stopword_fraction: 0.3,
            seed,
            ..SynthSpec::default()
        };
        let c = generate(&spec).map_err(|e| e.to_string())?;
        let raw: Vec<f64> = (0..3).map(|_| rng.next_f64() + 0.01).collect();
        let total: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let weights = LayerWeights::new(w.clone()).map_err(|e| e.to_string())?;

        // IDF values from document frequencies counted here.
        let n_docs = c.tokens.docs().len() as f64;
        let mut df: BTreeMap<u32, usize> = BTreeMap::new();
        for (_, ids) in c.tokens.docs() {
            let mut seen: Vec<u32> = ids.clone();
            seen.sort_unstable();
            seen.dedup();
            for t in seen {
                *df.entry(t).or_default() += 1;
            }
        }
        let expected: BTreeMap<u32, f64> = df.iter().map(|(&t, &f)| (t, (n_docs / f as f64).ln())).collect();
        let table = compute_idf(&c.tokens.lists()).map_err(|e| e.to_string())?;
        ensure(table.weights().len() == expected.len(), || "IDF table size".into())?;
        for (t, want) in &expected {
            let got = table.weight(*t).ok_or("token missing from IDF table")?;
            worst_idf = worst_idf.max((got - want).abs());
        }
        ensure(worst_idf <= IDF_TOL, || format!("IDF off by {worst_idf:.2e}"))?;

        for with_idf in [false, true] {
            let inj = with_idf.then_some(IdfInjection {
                table: &table,
                tokens: &c.tokens,
            });
            let m = build_matrix(&c.store, &c.index, &weights, inj).map_err(|e| e.to_string())?;
            let want = naive_matrix(
                &c.store,
                &c.index,
                &w,
                with_idf.then_some((&expected, n_docs.ln(), &c.tokens)),
            );
            for (r, row) in want.iter().enumerate() {
                for (k, v) in row.iter().enumerate() {
                    worst = worst.max((m.vectors.get(r, k) as f64 - v).abs());
                }
            }
        }
    }
    ensure(worst <= AGG_TOL, || format!("pooled vectors off by {worst:.2e}"))?;

    let c = generate(&SynthSpec::default()).map_err(|e| e.to_string())?;
    let configs = named_configs(3);
    let ranked = grid_search(&c.store, &c.index, &configs, None, recall_evaluator(vec![1, 2, 5, 10, 20, 50]))
        .map_err(|e| e.to_string())?;
    ensure(ranked.len() == 4, || "expected four configurations".into())?;
    ensure(ranked[0].weights == LayerWeights::one_hot(3, 0), || format!("first config is {}", ranked[0].weights))?;
    ensure(ranked[0].recall_at_1 > ranked[1].recall_at_1, || "(1,0,0) is not strictly first".into())?;
    Ok(format!(
        "max vector err {worst:.1e}, max IDF err {worst_idf:.1e}; (1,0,0) R@1 {:.1}% vs next {:.1}%",
        100.0 * ranked[0].recall_at_1,
        100.0 * ranked[1].recall_at_1
    ))
}

// ------------------------------------------------------------------- CLI

struct Cli {
    dir: PathBuf,
}

impl Cli {
    fn run(&self, args: &[&str]) -> Result<(i32, String), String> {
        let out = Command::new(env!("CARGO_BIN_EXE_retforge"))
            .args(args)
            .current_dir(&self.dir)
            .output()
            .map_err(|e| format!("spawning retforge: {e}"))?;
        Ok((out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stdout).into_owned()))
    }

    fn ok(&self, args: &[&str]) -> Result<String, String> {
        let (code, stdout) = self.run(args)?;
        ensure(code == 0, || format!("`retforge {}` exited {code}", args.join(" ")))?;
        Ok(stdout)
    }

    fn toml(&self, rel: &str) -> Result<toml::Table, String> {
        let text = std::fs::read_to_string(self.dir.join(rel)).map_err(|e| format!("{rel}: {e}"))?;
        text.parse().map_err(|e| format!("{rel}: {e}"))
    }
}

fn tempdir() -> Result<tempfile::TempDir, String> {
    tempfile::tempdir().map_err(|e| e.to_string())
}

fn int(t: &toml::Table, key: &str) -> Result<i64, String> {
    t.get(key).and_then(|v| v.as_integer()).ok_or_else(|| format!("missing `{key}`"))
}

fn criterion_end_to_end() -> Outcome {
    let start = Instant::now();
    let tmp = tempdir()?;
    let cli = Cli { dir: tmp.path().into() };
    cli.ok(&["--threads", "1", "gen", "--out-dir", "data"])?;
    cli.ok(&["--threads", "1", "aggregate", "--store", "data/store.emb", "--index", "data/store.idx", "--weights", "1,0,0", "--out", "m.emb"])?;
    cli.ok(&[
        "--threads", "1", "train", "--matrix", "m.emb", "--model", "fcrr", "--loss", "triplet", "--margin", "0.2",
        "--lr", "1e-3", "--batch", "32", "--epochs", "100", "--seed", "0", "--recall-val", "50", "--loss-val", "50",
        "--out-dir", "run",
    ])?;
    let summary = cli.toml("run/summary.toml")?;
    let run = summary["runs"].as_array().and_then(|a| a.first()).and_then(|r| r.as_table()).ok_or("no runs")?;
    let n = int(run, "validation_questions")? as f64;
    let base = int(run, "baseline_hits_at_1")? as usize;
    let trained = int(run, "hits_at_1")? as usize;
    let best = int(run, "best_epoch")? as usize;
    let (base_r, trained_r) = (base as f64 / n, trained as f64 / n);
    ensure((0.30..=0.50).contains(&base_r), || format!("baseline recall@1 {base_r} outside 30-50%"))?;
    ensure(trained_r - base_r >= MIN_GAIN, || format!("gain {:.1} points < 10", 100.0 * (trained_r - base_r)))?;
    ensure(
        (base, trained, best) == (FROZEN_BASELINE_HITS, FROZEN_TRAINED_HITS, FROZEN_BEST_EPOCH),
        || format!("regression: hits {base} -> {trained} at epoch {best}, frozen {FROZEN_BASELINE_HITS} -> {FROZEN_TRAINED_HITS} at {FROZEN_BEST_EPOCH}"),
    )?;

    let history = std::fs::read_to_string(tmp.path().join("run/history-seed0.toml")).map_err(|e| e.to_string())?;
    let history = retforge_core::train::TrainHistory::from_toml(&history).map_err(|e| e.to_string())?;
    let best_so_far: Vec<f64> = history.epochs.iter().filter_map(|r| r.best_val_loss).collect();
    ensure(best_so_far.windows(2).all(|w| w[1] <= w[0]), || "best-so-far validation loss increased".into())?;
    within(start.elapsed(), 300)?;
    Ok(format!(
        "val recall@1 {:.0}% -> {:.0}% ({base}/{n} -> {trained}/{n}, best epoch {best}) in {:.1}s",
        100.0 * base_r,
        100.0 * trained_r,
        start.elapsed().as_secs_f64()
    ))
}

fn recall1_hits(cli: &Cli, report: &str) -> Result<usize, String> {
    let t = cli.toml(report)?;
    let rows = t["recall"]["rows"].as_array().ok_or("report has no recall rows")?;
    let first = rows[0].as_table().ok_or("bad recall row")?;
    ensure(int(first, "k")? == 1, || "first recall row is not k = 1".into())?;
    Ok(int(first, "hits")? as usize)
}

fn criterion_idf() -> Outcome {
    let tmp = tempdir()?;
    let cli = Cli { dir: tmp.path().into() };
    let mut parts = Vec::new();
    for (seed, &(frozen_plain, frozen_idf)) in FROZEN_IDF_HITS.iter().enumerate() {
        let s = seed.to_string();
        let dir = format!("s{seed}");
        let p = |f: &str| format!("{dir}/{f}");
        cli.ok(&["gen", "--seed", &s, "--out-dir", &dir])?;
        cli.ok(&["idf", "--tokens", &p("tokens.tsv"), "--out", &p("idf.tsv")])?;
        let (store, index) = (p("store.emb"), p("store.idx"));
        let base = ["aggregate", "--store", &store, "--index", &index, "--weights", "1,0,0"];
        cli.ok(&[&base[..], &["--out", &p("plain.emb")]].concat())?;
        cli.ok(&[&base[..], &["--idf", &p("idf.tsv"), "--tokens", &p("tokens.tsv"), "--out", &p("idf.emb")]].concat())?;
        cli.ok(&["eval", "--matrix", &p("plain.emb"), "--out", &p("plain.toml")])?;
        cli.ok(&["eval", "--matrix", &p("idf.emb"), "--out", &p("idf.toml")])?;
        let plain = recall1_hits(&cli, &p("plain.toml"))?;
        let idf = recall1_hits(&cli, &p("idf.toml"))?;
        ensure(idf >= plain, || format!("seed {seed}: IDF {idf} < plain {plain}"))?;
        ensure((plain, idf) == (frozen_plain, frozen_idf), || {
            format!("seed {seed}: regression ({plain}, {idf}) vs frozen ({frozen_plain}, {frozen_idf})")
        })?;
        parts.push(format!("+{}", idf - plain));
    }
    Ok(format!("recall@1 hit margins over 200 questions: {}", parts.join(" ")))
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn criterion_determinism() -> Outcome {
    let script: Vec<Vec<&str>> = vec![
        vec!["gen", "--pairs", "80", "--seed", "3", "--out-dir", "d"],
        vec!["validate", "--store", "d/store.emb", "--index", "d/store.idx"],
        vec!["idf", "--tokens", "d/tokens.tsv", "--out", "d/idf.tsv"],
        vec!["aggregate", "--store", "d/store.emb", "--index", "d/store.idx", "--weights", "1/3,1/3,1/3", "--out", "u.emb"],
        vec![
            "aggregate", "--store", "d/store.emb", "--index", "d/store.idx", "--weights", "1,0,0", "--idf", "d/idf.tsv",
            "--tokens", "d/tokens.tsv", "--out", "m.emb",
        ],
        vec!["grid", "--store", "d/store.emb", "--index", "d/store.idx", "--step", "2", "--out", "grid.toml"],
        vec![
            "train", "--matrix", "u.emb", "--model", "composite", "--margin", "0.2", "--batch", "16", "--epochs", "8",
            "--seed", "0,5", "--recall-val", "20", "--loss-val", "20", "--out-dir", "tr",
        ],
        vec![
            "train", "--matrix", "u.emb", "--loss", "quadratic", "--side", "paragraph", "--margin", "0.5", "--batch",
            "16", "--epochs", "4", "--corpus-mining", "--out-dir", "tq",
        ],
        vec![
            "pipeline", "--matrix", "u.emb", "--margin", "0.2", "--batch", "16", "--epochs", "4", "--recall-val", "20",
            "--loss-val", "20", "--out-dir", "pl",
        ],
        vec![
            "eval", "--matrix", "u.emb", "--checkpoint", "pl/question-seed0.rrm", "--paragraph-checkpoint",
            "pl/paragraph-seed0.rrm", "--auc", "--out", "ev.toml",
        ],
    ];
    let mut runs = Vec::new();
    for threads in ["1", "4"] {
        let tmp = tempdir()?;
        let cli = Cli { dir: tmp.path().into() };
        let mut stdout = String::new();
        for args in &script {
            stdout.push_str(&cli.ok(&[&["--threads", threads][..], args].concat())?);
        }
        runs.push((tmp, stdout));
    }
    let (a, b) = (runs[0].0.path(), runs[1].0.path());
    let files = files_under(a);
    ensure(files == files_under(b), || "runs produced different file sets".into())?;
    for f in &files {
        let same = std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap();
        // Manifests record the thread flag itself; compare them without it.
        let same = same || {
            let strip = |p: &Path| {
                std::fs::read_to_string(p)
                    .unwrap()
                    .lines()
                    .filter(|l| !l.starts_with("argv"))
                    .collect::<Vec<_>>()
                    .join("\n")
            };
            f.to_string_lossy().ends_with("manifest.toml") && strip(&a.join(f)) == strip(&b.join(f))
        };
        ensure(same, || format!("{} differs between runs", f.display()))?;
    }
    ensure(runs[0].1 == runs[1].1, || "stdout differs between runs".into())?;
    Ok(format!("{} commands, {} files byte-identical at 1 and 4 threads", script.len(), files.len()))
}

// ------------------------------------------------------- real data (opt.)

fn criterion_real_data() -> Option<Outcome> {
    let dir = std::env::var_os("RETFORGE_SQUAD_DEV")?;
    Some((|| {
        let cli = Cli { dir: PathBuf::from(dir) };
        let out = cli.ok(&["grid", "--store", "store.emb", "--index", "store.idx", "--step", "1", "--out", "grid.toml"])?;
        let grid = cli.toml("grid.toml")?;
        let results = grid["results"].as_array().ok_or("no grid results")?;
        let order: Vec<(Vec<f64>, f64)> = results
            .iter()
            .filter_map(|r| {
                let t = r.as_table()?;
                let w = t["weights"].as_array()?.iter().filter_map(|v| v.as_float()).collect();
                Some((w, t["recall_at_1"].as_float()?))
            })
            .collect();
        ensure(order[0].0 == vec![1.0, 0.0, 0.0], || format!("token layer is not first:\n{out}"))?;
        ensure(order[1].0 == vec![0.0, 1.0, 0.0], || format!("first LSTM layer is not second:\n{out}"))?;
        ensure((order[0].1 - 0.415).abs() <= 0.005, || format!("token-layer recall@1 {}", order[0].1))?;
        cli.ok(&["aggregate", "--store", "store.emb", "--index", "store.idx", "--weights", "1,0,0", "--out", "token.emb"])?;
        cli.ok(&["eval", "--matrix", "token.emb", "--out", "token.toml"])?;
        let hits = recall1_hits(&cli, "token.toml")?;
        ensure(hits == 4391, || format!("k = 1 hits {hits}, expected 4391"))?;
        Ok(format!("grid order matches; k = 1 hits {hits}"))
    })())
}

fn main() {
    let criteria: Vec<(u32, &str, fn() -> Outcome)> = vec![
        (1, "metrics match naive oracles", criterion_metrics),
        (2, "gradients match finite differences", criterion_gradients),
        (3, "residual identity and unit-norm outputs", criterion_identity),
        (4, "hard mining equals exhaustive search", criterion_mining),
        (5, "aggregation matches naive loops", criterion_aggregation),
        (6, "synthetic end-to-end improvement", criterion_end_to_end),
        (7, "IDF never hurts recall@1", criterion_idf),
        (8, "repeated commands are byte-identical", criterion_determinism),
    ];
    let mut failed = 0;
    for (id, name, check) in criteria {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {id}: PASS  {name} ({detail}) [{secs:.1}s]"),
            Err(why) => {
                failed += 1;
                println!("criterion {id}: FAIL  {name}: {why} [{secs:.1}s]");
            }
        }
    }
    match criterion_real_data() {
        None => println!("criterion 9: SKIP  real SQuAD dev embeddings (set RETFORGE_SQUAD_DEV to run)"),
        Some(Ok(detail)) => println!("criterion 9: PASS  real-data grid and eval ({detail})"),
        Some(Err(why)) => {
            failed += 1;
            println!("criterion 9: FAIL  real-data grid and eval: {why}");
        }
    }
    if failed > 0 {
        println!("{failed} criterion/criteria failed");
        std::process::exit(1);
    }
}
