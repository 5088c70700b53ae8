//! Residual retrieval networks.
//!
//! Each block maps unit-norm rows `x` to `normalize(sf · x + f(x))`:
//!
//! * **FCRR**: `f` is a stack of dense layers, ReLU and dropout after every
//!   hidden layer, the last layer linear.
//! * **ConvRR**: the embedding is read as a 1-channel signal of length `dim`;
//!   `f` convolves it with `n_filters` kernels ("same" zero padding, given
//!   stride) and averages each filter over positions, giving one value per
//!   filter. `n_filters` must equal `dim`.
//! * **Composite**: an FCRR block followed by a ConvRR block.
//!
//! The output layer of every residual branch starts at zero, so a freshly
//! initialized model with `sf = 1` is the identity on unit-norm inputs.

mod checkpoint;
mod tape;

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Real};
use crate::rng::XorShift64Star;

pub use checkpoint::{load_checkpoint, load_checkpoint_as, save_checkpoint, CHECKPOINT_MAGIC};
use tape::{ConvGeometry, NodeId, Tape};

/// Rows per independent chunk in [`RetrievalModel::infer`].
const INFER_CHUNK: usize = 256;

/// A named parameter tensor with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    pub shape: Vec<usize>,
    pub values: Vec<T>,
    pub grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            values: vec![T::zero(); n],
            grad: None,
        }
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    fn add_grad(&mut self, delta: &[f64]) {
        let n = self.values.len();
        let g = self.grad.get_or_insert_with(|| vec![T::zero(); n]);
        for (a, d) in g.iter_mut().zip(delta) {
            *a = T::cast(a.widen() + d);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FcrrConfig {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub dropout: f32,
    pub scaling_factor: f32,
}

impl FcrrConfig {
    /// Two layers, hidden width = `dim`, dropout 0.1, sf = 1.
    pub fn for_dim(dim: usize) -> Self {
        Self {
            n_layers: 2,
            hidden_dim: dim,
            dropout: 0.1,
            scaling_factor: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvRrConfig {
    pub n_filters: usize,
    pub kernel_len: usize,
    pub stride: usize,
    pub dropout: f32,
    pub scaling_factor: f32,
}

impl ConvRrConfig {
    /// `dim` filters, kernel 5, stride 2, dropout 0.1, sf = 1.
    pub fn for_dim(dim: usize) -> Self {
        Self {
            n_filters: dim,
            kernel_len: 5,
            stride: 2,
            dropout: 0.1,
            scaling_factor: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Fcrr,
    ConvRr,
    Composite,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Fcrr => "fcrr",
            ModelKind::ConvRr => "convrr",
            ModelKind::Composite => "composite",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fcrr" => Ok(ModelKind::Fcrr),
            "convrr" => Ok(ModelKind::ConvRr),
            "composite" => Ok(ModelKind::Composite),
            other => Err(Error::arg(format!("unknown model kind `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelConfig {
    Fcrr {
        dim: usize,
        fcrr: FcrrConfig,
    },
    ConvRr {
        dim: usize,
        convrr: ConvRrConfig,
    },
    Composite {
        dim: usize,
        fcrr: FcrrConfig,
        convrr: ConvRrConfig,
    },
}

impl ModelConfig {
    /// Default configuration of `kind` for `dim`-dimensional embeddings.
    pub fn new(kind: ModelKind, dim: usize) -> Self {
        match kind {
            ModelKind::Fcrr => ModelConfig::Fcrr {
                dim,
                fcrr: FcrrConfig::for_dim(dim),
            },
            ModelKind::ConvRr => ModelConfig::ConvRr {
                dim,
                convrr: ConvRrConfig::for_dim(dim),
            },
            ModelKind::Composite => ModelConfig::Composite {
                dim,
                fcrr: FcrrConfig::for_dim(dim),
                convrr: ConvRrConfig::for_dim(dim),
            },
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            ModelConfig::Fcrr { .. } => ModelKind::Fcrr,
            ModelConfig::ConvRr { .. } => ModelKind::ConvRr,
            ModelConfig::Composite { .. } => ModelKind::Composite,
        }
    }

    pub fn dim(&self) -> usize {
        match *self {
            ModelConfig::Fcrr { dim, .. } | ModelConfig::ConvRr { dim, .. } | ModelConfig::Composite { dim, .. } => dim,
        }
    }

    pub fn fcrr(&self) -> Option<&FcrrConfig> {
        match self {
            ModelConfig::Fcrr { fcrr, .. } | ModelConfig::Composite { fcrr, .. } => Some(fcrr),
            ModelConfig::ConvRr { .. } => None,
        }
    }

    pub fn convrr(&self) -> Option<&ConvRrConfig> {
        match self {
            ModelConfig::ConvRr { convrr, .. } | ModelConfig::Composite { convrr, .. } => Some(convrr),
            ModelConfig::Fcrr { .. } => None,
        }
    }

    pub fn fcrr_mut(&mut self) -> Option<&mut FcrrConfig> {
        match self {
            ModelConfig::Fcrr { fcrr, .. } | ModelConfig::Composite { fcrr, .. } => Some(fcrr),
            ModelConfig::ConvRr { .. } => None,
        }
    }

    pub fn convrr_mut(&mut self) -> Option<&mut ConvRrConfig> {
        match self {
            ModelConfig::ConvRr { convrr, .. } | ModelConfig::Composite { convrr, .. } => Some(convrr),
            ModelConfig::Fcrr { .. } => None,
        }
    }

    /// Sets the dropout rate of every block.
    pub fn with_dropout(mut self, rate: f32) -> Self {
        if let Some(f) = self.fcrr_mut() {
            f.dropout = rate;
        }
        if let Some(c) = self.convrr_mut() {
            c.dropout = rate;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.dim();
        if dim == 0 {
            return Err(Error::arg("model dimension must be positive"));
        }
        let rate_ok = |r: f32| (0.0..1.0).contains(&r);
        if let Some(f) = self.fcrr() {
            if f.n_layers == 0 || f.hidden_dim == 0 {
                return Err(Error::arg("FCRR needs at least one layer and a positive hidden width"));
            }
            if !rate_ok(f.dropout) || !f.scaling_factor.is_finite() {
                return Err(Error::arg("FCRR dropout must lie in [0, 1) and sf be finite"));
            }
        }
        if let Some(c) = self.convrr() {
            if c.kernel_len == 0 || c.stride == 0 || c.n_filters == 0 {
                return Err(Error::arg("ConvRR kernel, stride and filter count must be positive"));
            }
            if c.n_filters != dim {
                return Err(Error::arg(format!(
                    "ConvRR needs n_filters == dim so the residual add is well-typed ({} != {dim})",
                    c.n_filters
                )));
            }
            if !rate_ok(c.dropout) || !c.scaling_factor.is_finite() {
                return Err(Error::arg("ConvRR dropout must lie in [0, 1) and sf be finite"));
            }
        }
        Ok(())
    }

    /// Parameter names and shapes in storage order.
    fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let dim = self.dim();
        let mut out = Vec::new();
        if let Some(f) = self.fcrr() {
            for l in 0..f.n_layers {
                let fan_in = if l == 0 { dim } else { f.hidden_dim };
                let fan_out = if l + 1 == f.n_layers { dim } else { f.hidden_dim };
                out.push((format!("fcrr.dense{l}.weight"), vec![fan_out, fan_in]));
                out.push((format!("fcrr.dense{l}.bias"), vec![fan_out]));
            }
        }
        if let Some(c) = self.convrr() {
            out.push(("convrr.conv.weight".into(), vec![c.n_filters, c.kernel_len]));
            out.push(("convrr.conv.bias".into(), vec![c.n_filters]));
        }
        out
    }
}

/// The parameter named `name`.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T = f32> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// An FCRR, ConvRR or composite network together with its last recorded
/// training-mode forward pass.
pub struct RetrievalModel<T: Real = f32> {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    recorded: Option<Recorded<T>>,
}

struct Recorded<T: Real> {
    tape: Tape<T>,
    input: NodeId,
    output: NodeId,
}

impl<T: Real> Clone for RetrievalModel<T> {
    fn clone(&self) -> Self {
        Self {
            config: self.config,
            names: self.names.clone(),
            tensors: self.tensors.clone(),
            recorded: None,
        }
    }
}

impl<T: Real> fmt::Debug for RetrievalModel<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RetrievalModel")
            .field("config", &self.config)
            .field("params", &self.names)
            .finish()
    }
}

impl<T: Real> RetrievalModel<T> {
    /// Xavier-uniform weights, zero biases; the output layer of each
    /// residual branch is zero.
    pub fn init_params(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = XorShift64Star::derive(seed, 0x1417);
        let last_fc = config.fcrr().map(|f| f.n_layers - 1);
        let (mut names, mut tensors) = (Vec::new(), Vec::new());
        for (name, shape) in config.layout() {
            let mut tensor = Tensor::zeros(shape.clone());
            let is_output = name == "convrr.conv.weight"
                || last_fc.is_some_and(|l| name == format!("fcrr.dense{l}.weight"));
            if name.ends_with(".weight") && !is_output {
                let (fan_out, fan_in) = (shape[0], shape[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                for v in tensor.values.iter_mut() {
                    *v = T::cast(rng.uniform(-bound, bound));
                }
            }
            names.push(name);
            tensors.push(tensor);
        }
        Ok(Self {
            config,
            names,
            tensors,
            recorded: None,
        })
    }

    /// All parameters set to zero.
    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (names, tensors) = config
            .layout()
            .into_iter()
            .map(|(name, shape)| (name, Tensor::zeros(shape)))
            .unzip();
        Ok(Self {
            config,
            names,
            tensors,
            recorded: None,
        })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: Vec<Param<T>>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != params.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in layout.iter().zip(&params) {
            if *name != p.name || *shape != p.tensor.shape || p.tensor.values.len() != shape.iter().product::<usize>() {
                return Err(Error::Format(format!(
                    "parameter `{}` {:?} does not match expected `{name}` {shape:?}",
                    p.name, p.tensor.shape
                )));
            }
        }
        let (names, tensors) = params.into_iter().map(|p| (p.name, p.tensor)).unzip();
        Ok(Self {
            config,
            names,
            tensors,
            recorded: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind()
    }

    pub fn dim(&self) -> usize {
        self.config.dim()
    }

    /// Parameter names, in storage order.
    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Parameter tensors, parallel to [`Self::names`].
    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.grad = None;
        }
    }

    /// Same network in another float type.
    pub fn cast<U: Real>(&self) -> RetrievalModel<U> {
        RetrievalModel {
            config: self.config,
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    shape: t.shape.clone(),
                    values: t.values.iter().map(|v| U::cast(v.widen())).collect(),
                    grad: None,
                })
                .collect(),
            recorded: None,
        }
    }

    fn build(&self, tape: &mut Tape<T>, x: Matrix<T>, training: bool, seed: u64) -> Result<(NodeId, NodeId)> {
        if x.cols() != self.dim() {
            return Err(Error::arg(format!(
                "input has {} columns, model expects {}",
                x.cols(),
                self.dim()
            )));
        }
        if x.rows() == 0 {
            return Err(Error::arg("empty input batch"));
        }
        let input = tape.input(x);
        let mut h = input;
        let mut pid = 0;
        if let Some(f) = self.config.fcrr() {
            let block_in = h;
            let mut z = h;
            for l in 0..f.n_layers {
                z = tape.dense(z, pid, pid + 1, self.tensors());
                pid += 2;
                if l + 1 < f.n_layers {
                    z = tape.relu(z);
                    if training && f.dropout > 0.0 {
                        z = tape.dropout(z, f.dropout as f64, seed);
                    }
                }
            }
            let r = tape.residual(block_in, z, T::cast(f.scaling_factor as f64));
            h = tape.normalize(r)?;
        }
        if let Some(c) = self.config.convrr() {
            let block_in = h;
            let geom = ConvGeometry::same(self.dim(), c.kernel_len, c.stride);
            let mut z = tape.conv_pool(h, pid, pid + 1, geom, self.tensors());
            if training && c.dropout > 0.0 {
                z = tape.dropout(z, c.dropout as f64, seed);
            }
            let r = tape.residual(block_in, z, T::cast(c.scaling_factor as f64));
            h = tape.normalize(r)?;
        }
        Ok((input, h))
    }

    /// Runs the network. With `training` set, dropout is active (masks drawn
    /// from `seed`) and the pass is recorded for [`Self::backward`].
    pub fn forward(&mut self, x: &Matrix<T>, training: bool, seed: u64) -> Result<Matrix<T>> {
        let mut tape = Tape::new();
        let (input, output) = self.build(&mut tape, x.clone(), training, seed)?;
        let y = tape.value(output).clone();
        self.recorded = training.then_some(Recorded { tape, input, output });
        Ok(y)
    }

    /// Inference-mode forward without recording; rows are processed in
    /// independent chunks in parallel.
    pub fn infer(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        if x.cols() != self.dim() {
            return Err(Error::arg(format!(
                "input has {} columns, model expects {}",
                x.cols(),
                self.dim()
            )));
        }
        let dim = self.dim();
        let chunks: Vec<Matrix<T>> = x
            .as_slice()
            .par_chunks(INFER_CHUNK * dim.max(1))
            .map(|chunk| {
                let m = Matrix::from_vec(chunk.len() / dim, dim, chunk.to_vec())?;
                let mut tape = Tape::new();
                let (_, out) = self.build(&mut tape, m, false, 0)?;
                Ok(tape.into_value(out))
            })
            .collect::<Result<_>>()?;
        let mut data = Vec::with_capacity(x.rows() * dim);
        for c in chunks {
            data.extend(c.into_vec());
        }
        Matrix::from_vec(x.rows(), dim, data)
    }

    /// Gradients of `Σ upstream ⊙ output` for the recorded pass: parameter
    /// gradients are stored in each tensor's `grad`, the input gradient is
    /// returned. Consumes the recording.
    pub fn backward(&mut self, upstream: &Matrix<T>) -> Result<Matrix<T>> {
        let rec = self
            .recorded
            .take()
            .ok_or_else(|| Error::State("backward called without a recorded training forward pass".into()))?;
        let out = rec.tape.value(rec.output);
        if upstream.rows() != out.rows() || upstream.cols() != out.cols() {
            return Err(Error::arg(format!(
                "upstream gradient is {}x{}, output is {}x{}",
                upstream.rows(),
                upstream.cols(),
                out.rows(),
                out.cols()
            )));
        }
        self.zero_grads();
        let dx = rec.tape.backward(rec.output, rec.input, upstream.clone(), &mut self.tensors);
        for t in &mut self.tensors {
            let n = t.values.len();
            t.grad.get_or_insert_with(|| vec![T::zero(); n]);
        }
        Ok(dx)
    }

    /// ReLU sign pattern of the recorded pass (empty if none is recorded).
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.recorded.as_ref().map(|r| r.tape.relu_pattern()).unwrap_or_default()
    }
}
