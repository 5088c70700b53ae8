#![allow(dead_code)]

use retforge_core::linalg::{normalize_in_place, Matrix, Real};
use retforge_core::rng::XorShift64Star;

pub fn gaussian_matrix<T: Real>(rng: &mut XorShift64Star, rows: usize, cols: usize) -> Matrix<T> {
    let data = (0..rows * cols).map(|_| T::cast(rng.gaussian())).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

pub fn unit_matrix<T: Real>(rng: &mut XorShift64Star, rows: usize, cols: usize) -> Matrix<T> {
    let mut m = gaussian_matrix(rng, rows, cols);
    for r in 0..rows {
        normalize_in_place(m.row_mut(r)).unwrap();
    }
    m
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Naive squared distance, straight double loop in f64.
pub fn naive_sq(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        let d = a[i] as f64 - b[i] as f64;
        s += d * d;
    }
    s
}

use retforge_core::model::RetrievalModel;

/// Perturbs every parameter with Gaussian noise of the given scale.
pub fn randomize(model: &mut RetrievalModel<f64>, rng: &mut XorShift64Star, scale: f64) {
    for t in model.tensors_mut() {
        for v in &mut t.values {
            *v = scale * rng.gaussian();
        }
    }
}

/// Largest relative error between back-propagated and central-difference
/// gradients of `Σ coef ⊙ model(x)` over every parameter and input entry.
/// Coordinates whose ±h perturbation flips a ReLU are skipped. Input
/// entries use a larger floor since their gradients can be tiny. Returns
/// `(max error, number of coordinates checked)`.
pub fn model_gradient_error(model: &mut RetrievalModel<f64>, x: &Matrix<f64>, coef: &Matrix<f64>, seed: u64, h: f64) -> (f64, usize) {
    let objective = |m: &mut RetrievalModel<f64>, x: &Matrix<f64>| {
        let y = m.forward(x, true, seed).unwrap();
        let pattern = m.relu_pattern();
        let v: f64 = y.as_slice().iter().zip(coef.as_slice()).map(|(a, b)| a * b).sum();
        (v, pattern)
    };
    let (_, base_pattern) = objective(model, x);
    let dx = model.backward(coef).unwrap();
    let analytic: Vec<Vec<f64>> = model.tensors().iter().map(|t| t.grad.clone().unwrap()).collect();
    let (mut worst, mut checked) = (0.0f64, 0usize);
    for (ti, grads) in analytic.iter().enumerate() {
        for (vi, &g) in grads.iter().enumerate() {
            let orig = model.tensors()[ti].values[vi];
            model.tensors_mut()[ti].values[vi] = orig + h;
            let (up, pu) = objective(model, x);
            model.tensors_mut()[ti].values[vi] = orig - h;
            let (down, pd) = objective(model, x);
            model.tensors_mut()[ti].values[vi] = orig;
            if pu != base_pattern || pd != base_pattern {
                continue;
            }
            let e = rel_err(g, (up - down) / (2.0 * h), 1e-6);
            worst = worst.max(e);
            checked += 1;
        }
    }
    for i in 0..x.as_slice().len() {
        let mut xp = x.clone();
        xp.as_mut_slice()[i] += h;
        let (up, pu) = objective(model, &xp);
        xp.as_mut_slice()[i] -= 2.0 * h;
        let (down, pd) = objective(model, &xp);
        if pu != base_pattern || pd != base_pattern {
            continue;
        }
        let e = rel_err(dx.as_slice()[i], (up - down) / (2.0 * h), 1e-4);
        worst = worst.max(e);
        checked += 1;
    }
    (worst, checked)
}
