use retforge_core::aggregate::{build_matrix, LayerWeights};
use retforge_core::datagen::{generate, SynthSpec};
use retforge_core::metrics::{pairwise_distances, recall_at_k};
use retforge_core::model::{ModelConfig, ModelKind, RetrievalModel};
use retforge_core::train::*;

fn partition(spec: &SynthSpec) -> retforge_core::aggregate::Partition {
    let c = generate(spec).unwrap();
    build_matrix(&c.store, &c.index, &LayerWeights::one_hot(spec.n_layers, spec.signal_layer), None)
        .unwrap()
        .partition()
        .unwrap()
}

fn splits(n: usize) -> Splits {
    make_splits(n, &SplitSpec { recall_validation_questions: n / 4, loss_validation_questions: n / 4, seed: 0 }).unwrap()
}

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig { batch_size: 32, epochs, ..TrainConfig::default() }
}

#[test]
fn synthetic_training_beats_the_baseline() {
    let part = partition(&SynthSpec::default());
    let task = RetrievalTask::question_side(&part.questions, &part.paragraphs, &part.truth).unwrap();
    let model = RetrievalModel::init_params(ModelConfig::new(ModelKind::Fcrr, 64), 0).unwrap();
    let out = train_epochal(model, &task, &cfg(100), &splits(200), |_| {}).unwrap();
    assert!(out.best.rows[0].hits > out.baseline.rows[0].hits);
    let best_so_far: Vec<f64> = out.history.epochs.iter().filter_map(|r| r.best_val_loss).collect();
    assert!(best_so_far.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn three_stage_pipeline_does_not_degrade() {
    let part = partition(&SynthSpec::default());
    let out = pipeline_three_stage(
        &part.questions,
        &part.paragraphs,
        &part.truth,
        ModelConfig::new(ModelKind::Fcrr, 64),
        &cfg(100),
        &splits(200),
        |_, _| {},
    )
    .unwrap();
    let r = &out.report;
    assert!(r.question_side.recall_at_1 >= r.question_side.baseline_recall_at_1);
    assert!(r.paragraph_side.recall_at_1 >= r.paragraph_side.baseline_recall_at_1);
    assert!(r.combined.recall_at_1 >= r.question_side.recall_at_1 - 0.005, "{}", r.to_table());
    assert_eq!(r.to_table().lines().count(), 4);
}

#[test]
fn more_noise_never_helps() {
    let mut last = f64::INFINITY;
    for sigma in [1.0, 3.0, 5.0] {
        let part = partition(&SynthSpec { noise_sigma: sigma, ..SynthSpec::default() });
        let d = pairwise_distances(&part.questions, &part.paragraphs).unwrap();
        let r1 = recall_at_k(&d, &part.truth, &[1]).unwrap().rows[0].fraction;
        assert!(r1 <= last + 0.02, "sigma {sigma}: {r1} > {last}");
        last = r1;
    }
}
