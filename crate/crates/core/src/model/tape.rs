//! Reverse-mode differentiation over the few row-batched ops the retrieval
//! networks need.
//!
//! Every op works on `[batch, features]` matrices. Nodes are appended in
//! evaluation order, so walking the tape backwards visits each node after all
//! of its consumers.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{normalize_in_place, Matrix, Real};
use crate::rng::XorShift64Star;

use super::Tensor;

pub(crate) type NodeId = usize;
pub(crate) type ParamId = usize;

/// Geometry of a 1-channel "same"-padded 1-D convolution over a length-`len`
/// signal.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub len: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_left: usize,
    pub out_len: usize,
}

impl ConvGeometry {
    pub fn same(len: usize, kernel: usize, stride: usize) -> Self {
        let out_len = len.div_ceil(stride);
        let total_pad = ((out_len - 1) * stride + kernel).saturating_sub(len);
        Self {
            len,
            kernel,
            stride,
            pad_left: total_pad / 2,
            out_len,
        }
    }

    /// Input position read by tap `k` at output position `t`, if inside the signal.
    #[inline]
    pub fn source(&self, t: usize, k: usize) -> Option<usize> {
        (t * self.stride + k).checked_sub(self.pad_left).filter(|&i| i < self.len)
    }
}

enum Op<T> {
    Input,
    Dense { x: NodeId, w: ParamId, b: ParamId },
    Relu { x: NodeId },
    Dropout { x: NodeId, mask: Vec<T> },
    /// Convolution followed by global average pooling over positions.
    ConvPool {
        x: NodeId,
        w: ParamId,
        b: ParamId,
        geom: ConvGeometry,
        /// `windows[r][k]`: mean over positions of the input under tap `k`.
        windows: Matrix<T>,
    },
    Residual { x: NodeId, f: NodeId, scale: T },
    Normalize { x: NodeId, norms: Vec<T> },
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
}

pub(crate) struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

fn accumulate<T: Real>(slot: &mut Option<Matrix<T>>, delta: Matrix<T>) {
    match slot {
        Some(g) => {
            for (a, b) in g.as_mut_slice().iter_mut().zip(delta.as_slice()) {
                *a = *a + *b;
            }
        }
        None => *slot = Some(delta),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Matrix<T> {
        &self.nodes[id].value
    }

    pub fn into_value(mut self, id: NodeId) -> Matrix<T> {
        std::mem::replace(&mut self.nodes[id].value, Matrix::zeros(0, 0))
    }

    pub fn input(&mut self, x: Matrix<T>) -> NodeId {
        self.push(x, Op::Input)
    }

    /// `y = x Wᵀ + b` with `W: [out, in]`.
    pub fn dense(&mut self, x: NodeId, w: ParamId, b: ParamId, params: &[Tensor<T>]) -> NodeId {
        let xv = &self.nodes[x].value;
        let (wt, bt) = (&params[w], &params[b]);
        let (out_dim, in_dim) = (wt.shape[0], wt.shape[1]);
        debug_assert_eq!(xv.cols(), in_dim);
        let mut y = Matrix::zeros(xv.rows(), out_dim);
        if out_dim > 0 {
            y.as_mut_slice()
                .par_chunks_mut(out_dim)
                .enumerate()
                .for_each(|(r, yr)| {
                    let xr = xv.row(r);
                    for (o, slot) in yr.iter_mut().enumerate() {
                        let wo = &wt.values[o * in_dim..(o + 1) * in_dim];
                        let s: f64 = wo.iter().zip(xr).map(|(a, b)| a.widen() * b.widen()).sum();
                        *slot = T::cast(s + bt.values[o].widen());
                    }
                });
        }
        self.push(y, Op::Dense { x, w, b })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut y = self.nodes[x].value.clone();
        for v in y.as_mut_slice() {
            if !(*v > T::zero()) {
                *v = T::zero();
            }
        }
        self.push(y, Op::Relu { x })
    }

    /// Inverted dropout: kept units are scaled by `1 / (1 − rate)`.
    pub fn dropout(&mut self, x: NodeId, rate: f64, seed: u64) -> NodeId {
        let stream = self.nodes.len() as u64;
        let mut rng = XorShift64Star::derive(seed, stream);
        let keep = T::cast(1.0 / (1.0 - rate));
        let xv = &self.nodes[x].value;
        let mask: Vec<T> = (0..xv.as_slice().len())
            .map(|_| if rng.next_f64() < rate { T::zero() } else { keep })
            .collect();
        let data = xv.as_slice().iter().zip(&mask).map(|(a, m)| *a * *m).collect();
        let y = Matrix::from_vec(xv.rows(), xv.cols(), data).expect("shape preserved");
        self.push(y, Op::Dropout { x, mask })
    }

    /// Convolution with `F` filters of `K` taps, then the mean over output
    /// positions: `y[r, f] = b[f] + Σ_k W[f, k] · windows[r, k]`.
    pub fn conv_pool(&mut self, x: NodeId, w: ParamId, b: ParamId, geom: ConvGeometry, params: &[Tensor<T>]) -> NodeId {
        let xv = &self.nodes[x].value;
        let (wt, bt) = (&params[w], &params[b]);
        let (n_filters, kernel) = (wt.shape[0], wt.shape[1]);
        debug_assert_eq!(kernel, geom.kernel);
        let inv_len = 1.0 / geom.out_len as f64;
        let mut windows = Matrix::zeros(xv.rows(), kernel);
        for r in 0..xv.rows() {
            let xr = xv.row(r);
            for k in 0..kernel {
                let s: f64 = (0..geom.out_len)
                    .filter_map(|t| geom.source(t, k))
                    .map(|i| xr[i].widen())
                    .sum();
                windows.set(r, k, T::cast(s * inv_len));
            }
        }
        let mut y = Matrix::zeros(xv.rows(), n_filters);
        for r in 0..xv.rows() {
            let a = windows.row(r);
            for f in 0..n_filters {
                let wf = &wt.values[f * kernel..(f + 1) * kernel];
                let s: f64 = wf.iter().zip(a).map(|(p, q)| p.widen() * q.widen()).sum();
                y.set(r, f, T::cast(s + bt.values[f].widen()));
            }
        }
        self.push(
            y,
            Op::ConvPool {
                x,
                w,
                b,
                geom,
                windows,
            },
        )
    }

    /// `scale · x + f`.
    pub fn residual(&mut self, x: NodeId, f: NodeId, scale: T) -> NodeId {
        let (xv, fv) = (&self.nodes[x].value, &self.nodes[f].value);
        debug_assert_eq!(xv.cols(), fv.cols());
        let data = xv
            .as_slice()
            .iter()
            .zip(fv.as_slice())
            .map(|(a, b)| scale * *a + *b)
            .collect();
        let y = Matrix::from_vec(xv.rows(), xv.cols(), data).expect("shape preserved");
        self.push(y, Op::Residual { x, f, scale })
    }

    /// Row-wise L2 normalization.
    pub fn normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let mut y = self.nodes[x].value.clone();
        let mut norms = Vec::with_capacity(y.rows());
        for r in 0..y.rows() {
            let n = normalize_in_place(y.row_mut(r))
                .ok_or_else(|| Error::Numeric(format!("row {r} has zero norm before L2 normalization")))?;
            norms.push(n);
        }
        Ok(self.push(y, Op::Normalize { x, norms }))
    }

    /// Sign pattern of every ReLU input; finite differences that change it
    /// straddle a kink.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu { x } = node.op {
                out.extend(self.nodes[x].value.as_slice().iter().map(|v| *v > T::zero()));
            }
        }
        out
    }

    /// Back-propagates `upstream` from `output`, adding parameter gradients
    /// into `params[*].grad`, and returns the gradient for node `input`.
    pub fn backward(&self, output: NodeId, input: NodeId, upstream: Matrix<T>, params: &mut [Tensor<T>]) -> Matrix<T> {
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output] = Some(upstream);
        for id in (0..=output).rev() {
            let Some(g) = grads[id].take() else { continue };
            if id == input {
                grads[id] = Some(g);
                continue;
            }
            match &self.nodes[id].op {
                Op::Input => {}
                Op::Dense { x, w, b } => {
                    let xv = &self.nodes[*x].value;
                    let (out_dim, in_dim) = (params[*w].shape[0], params[*w].shape[1]);
                    let mut dw = vec![0f64; out_dim * in_dim];
                    let db: Vec<f64> = (0..out_dim)
                        .map(|o| (0..g.rows()).map(|r| g.get(r, o).widen()).sum())
                        .collect();
                    dw.par_chunks_mut(in_dim.max(1)).enumerate().for_each(|(o, dwo)| {
                        for r in 0..g.rows() {
                            let go = g.get(r, o).widen();
                            if go == 0.0 {
                                continue;
                            }
                            for (slot, xi) in dwo.iter_mut().zip(xv.row(r)) {
                                *slot += go * xi.widen();
                            }
                        }
                    });
                    let wv = &params[*w].values;
                    let mut dx = Matrix::zeros(g.rows(), in_dim);
                    dx.as_mut_slice()
                        .par_chunks_mut(in_dim.max(1))
                        .enumerate()
                        .for_each(|(r, dxr)| {
                            let gr = g.row(r);
                            let mut acc = vec![0f64; in_dim];
                            for (o, go) in gr.iter().enumerate() {
                                let go = go.widen();
                                if go == 0.0 {
                                    continue;
                                }
                                for (a, wi) in acc.iter_mut().zip(&wv[o * in_dim..(o + 1) * in_dim]) {
                                    *a += go * wi.widen();
                                }
                            }
                            for (slot, a) in dxr.iter_mut().zip(acc) {
                                *slot = T::cast(a);
                            }
                        });
                    params[*w].add_grad(&dw);
                    params[*b].add_grad(&db);
                    accumulate(&mut grads[*x], dx);
                }
                Op::Relu { x } => {
                    let xv = &self.nodes[*x].value;
                    let mut dx = g;
                    for (d, v) in dx.as_mut_slice().iter_mut().zip(xv.as_slice()) {
                        if !(*v > T::zero()) {
                            *d = T::zero();
                        }
                    }
                    accumulate(&mut grads[*x], dx);
                }
                Op::Dropout { x, mask } => {
                    let mut dx = g;
                    for (d, m) in dx.as_mut_slice().iter_mut().zip(mask) {
                        *d = *d * *m;
                    }
                    accumulate(&mut grads[*x], dx);
                }
                Op::ConvPool {
                    x,
                    w,
                    b,
                    geom,
                    windows,
                } => {
                    let (n_filters, kernel) = (params[*w].shape[0], params[*w].shape[1]);
                    let mut dw = vec![0f64; n_filters * kernel];
                    let mut db = vec![0f64; n_filters];
                    let wv = params[*w].values.clone();
                    let inv_len = 1.0 / geom.out_len as f64;
                    let mut dx = Matrix::zeros(g.rows(), geom.len);
                    for r in 0..g.rows() {
                        let (gr, a) = (g.row(r), windows.row(r));
                        let mut da = vec![0f64; kernel];
                        for f in 0..n_filters {
                            let gf = gr[f].widen();
                            db[f] += gf;
                            for k in 0..kernel {
                                dw[f * kernel + k] += gf * a[k].widen();
                                da[k] += gf * wv[f * kernel + k].widen();
                            }
                        }
                        let mut dxr = vec![0f64; geom.len];
                        for (k, dak) in da.iter().enumerate() {
                            for t in 0..geom.out_len {
                                if let Some(i) = geom.source(t, k) {
                                    dxr[i] += dak * inv_len;
                                }
                            }
                        }
                        for (slot, v) in dx.row_mut(r).iter_mut().zip(dxr) {
                            *slot = T::cast(v);
                        }
                    }
                    params[*w].add_grad(&dw);
                    params[*b].add_grad(&db);
                    accumulate(&mut grads[*x], dx);
                }
                Op::Residual { x, f, scale } => {
                    let mut dx = g.clone();
                    for v in dx.as_mut_slice() {
                        *v = *v * *scale;
                    }
                    accumulate(&mut grads[*x], dx);
                    accumulate(&mut grads[*f], g);
                }
                Op::Normalize { x, norms } => {
                    // dx = (g − y (y·g)) / n
                    let y = &self.nodes[id].value;
                    let mut dx = Matrix::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let yg: f64 = yr.iter().zip(gr).map(|(a, b)| a.widen() * b.widen()).sum();
                        let n = norms[r].widen();
                        for ((slot, yi), gi) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *slot = T::cast((gi.widen() - yi.widen() * yg) / n);
                        }
                    }
                    accumulate(&mut grads[*x], dx);
                }
            }
        }
        grads[input]
            .take()
            .unwrap_or_else(|| Matrix::zeros(self.nodes[input].value.rows(), self.nodes[input].value.cols()))
    }
}
