use crate::error::{Error, Result};
use crate::linalg::Real;
use crate::model::Tensor;

/// Adam moments for a fixed list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<T: Real>(params: &[Tensor<T>]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: params.iter().map(|t| vec![0.0; t.numel()]).collect(),
            second: params.iter().map(|t| vec![0.0; t.numel()]).collect(),
        }
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.second
    }
}

/// One Adam update using each tensor's `grad` (absent means zero).
///
/// Weight decay is decoupled: `p ← p − lr·wd·p` happens before the Adam delta
/// and does not enter the moments.
pub fn adam_step<T: Real>(params: &mut [Tensor<T>], state: &mut AdamState, lr: f64, weight_decay: f64) -> Result<()> {
    if params.len() != state.first.len() {
        return Err(Error::arg(format!(
            "optimizer tracks {} tensors, got {}",
            state.first.len(),
            params.len()
        )));
    }
    for (i, t) in params.iter().enumerate() {
        let n = t.numel();
        if state.first[i].len() != n || t.grad.as_ref().is_some_and(|g| g.len() != n) {
            return Err(Error::arg(format!("tensor {i}: shape disagrees with optimizer state or gradient")));
        }
    }
    state.step += 1;
    let bias1 = 1.0 - state.beta1.powi(state.step as i32);
    let bias2 = 1.0 - state.beta2.powi(state.step as i32);
    let decay = 1.0 - lr * weight_decay;
    for (i, t) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        for k in 0..t.values.len() {
            let g = t.grad.as_ref().map_or(0.0, |g| g[k].widen());
            m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * g;
            v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * g * g;
            let delta = lr * (m[k] / bias1) / ((v[k] / bias2).sqrt() + state.eps);
            t.values[k] = T::cast(t.values[k].widen() * decay - delta);
        }
    }
    Ok(())
}
