//! Shared fixtures for the benchmarks.

use retforge_core::aggregate::Partition;
use retforge_core::rng::XorShift64Star;
use retforge_core::{build_matrix, generate, LayerWeights, Matrix, SynthCorpus, SynthSpec};

/// Default synthetic corpus scaled to `n_pairs`.
pub fn corpus(n_pairs: usize, dim: usize) -> SynthCorpus {
    generate(&SynthSpec {
        n_pairs,
        dim,
        ..SynthSpec::default()
    })
    .expect("valid spec")
}

/// Signal-layer matrix of [`corpus`], split into questions and paragraphs.
pub fn partition(n_pairs: usize, dim: usize) -> Partition {
    let c = corpus(n_pairs, dim);
    build_matrix(&c.store, &c.index, &LayerWeights::one_hot(c.store.n_layers(), 0), None)
        .and_then(|m| m.partition())
        .expect("pooled corpus")
}

/// Rows with i.i.d. Gaussian entries.
pub fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix<f32> {
    let mut rng = XorShift64Star::new(seed);
    let data = (0..rows * cols).map(|_| rng.gaussian() as f32).collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}
