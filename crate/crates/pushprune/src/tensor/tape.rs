//! Reverse-mode differentiation tape.
//!
//! A [`Tape`] records one forward pass as a topologically ordered list of
//! nodes; [`Tape::grad`] replays the backward rules in reverse. Tapes are
//! built per training step and dropped afterwards — there is no persistent
//! graph. Construction is single-threaded; parallelism lives inside the
//! gemm kernels, which partition work deterministically.

use std::sync::Arc;

use super::gemm::{self, Layout};
use super::linalg;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op {
    Leaf,
    Matmul { a: Var, b: Var },
    Transpose { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    RowBroadcastAdd { x: Var, bias: Var },
    ChannelBiasAdd { x: Var, bias: Var },
    Relu { x: Var },
    Recip { x: Var },
    Sum { x: Var },
    Trace { x: Var },
    OffdiagAbsSum { x: Var },
    Shrink { x: Var, eps_rel: f64, trace_was_zero: bool },
    SolveSpd { a: Var, b: Var, chol: Arc<Vec<f64>> },
    GatherRows { x: Var, idx: Arc<Vec<usize>> },
    GatherCols { x: Var, idx: Arc<Vec<usize>> },
    Center { x: Var },
    Conv2d { input: Var, filters: Var, stride: usize, pad: usize },
    MaxPool2d { x: Var, switches: Arc<Vec<usize>> },
    AvgPool2d { x: Var, k: usize, stride: usize, pad: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Arc<Vec<f64>>, train: bool },
    ConcatChannels { parts: Vec<Var> },
    Reshape { x: Var },
    SoftmaxCrossEntropy { logits: Var, labels: Arc<Vec<usize>>, probs: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// One forward pass worth of recorded operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Output spatial extent of a conv/pool window sweep.
pub(crate) fn out_extent(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Tensor value of a recorded node.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Record an input. Gradients are produced for it iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Record a constant (no gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    // ── arithmetic ───────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 {
            return Err(Error::Dimension(format!(
                "matmul requires rank-2 operands, got {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (m, k) = (ta.rows(), ta.cols());
        let (k2, n) = (tb.rows(), tb.cols());
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner extents disagree: {:?} · {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut c = vec![0.0; m * n];
        gemm::dgemm(m, k, n, ta.data(), Layout::Normal, tb.data(), Layout::Normal, &mut c, false);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_vec([m, n], c)?, Op::Matmul { a, b }, needs))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).transpose2()?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Transpose { x }, needs))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension(format!(
                "{what} requires equal shapes, got {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_vec(shape, data)?, Op::Add { a, b }, needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_vec(shape, data)?, Op::Sub { a, b }, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_vec(shape, data)?, Op::Mul { a, b }, needs))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v * c);
        let needs = self.needs(x);
        self.push(t, Op::Scale { x, c }, needs)
    }

    /// `[n×d] + [d]`, the only broadcast allowed on 2-D data.
    pub fn row_broadcast_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let tx = self.value(x);
        let tb = self.value(bias);
        if tx.rank() != 2 || tb.rank() != 1 || tx.cols() != tb.shape()[0] {
            return Err(Error::Dimension(format!(
                "row_broadcast_add: {:?} + {:?}",
                tx.shape(),
                tb.shape()
            )));
        }
        let (n, d) = (tx.rows(), tx.cols());
        let mut data = tx.data().to_vec();
        for i in 0..n {
            for j in 0..d {
                data[i * d + j] += tb.data()[j];
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(Tensor::from_vec([n, d], data)?, Op::RowBroadcastAdd { x, bias }, needs))
    }

    /// `[N,F,H,W] + [F]`, per-channel bias.
    pub fn channel_bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let tx = self.value(x);
        let tb = self.value(bias);
        if tx.rank() != 4 || tb.rank() != 1 || tx.shape()[1] != tb.shape()[0] {
            return Err(Error::Dimension(format!(
                "channel_bias_add: {:?} + {:?}",
                tx.shape(),
                tb.shape()
            )));
        }
        let (n, f, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        let hw = h * w;
        let mut data = tx.data().to_vec();
        for ni in 0..n {
            for fi in 0..f {
                let base = (ni * f + fi) * hw;
                let bv = tb.data()[fi];
                for p in 0..hw {
                    data[base + p] += bv;
                }
            }
        }
        let shape = tx.shape().to_vec();
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(Tensor::from_vec(shape, data)?, Op::ChannelBiasAdd { x, bias }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(0.0));
        let needs = self.needs(x);
        self.push(t, Op::Relu { x }, needs)
    }

    /// Elementwise reciprocal.
    pub fn recip(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| 1.0 / v);
        let needs = self.needs(x);
        self.push(t, Op::Recip { x }, needs)
    }

    /// Sum of all elements → scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, needs)
    }

    fn square(&self, v: Var, what: &str) -> Result<usize> {
        let t = self.value(v);
        if t.rank() != 2 || t.rows() != t.cols() {
            return Err(Error::Dimension(format!(
                "{what} requires a square matrix, got {:?}",
                t.shape()
            )));
        }
        Ok(t.rows())
    }

    pub fn trace(&mut self, x: Var) -> Result<Var> {
        let d = self.square(x, "trace")?;
        let t = self.value(x);
        let s: f64 = (0..d).map(|i| t.at2(i, i)).sum();
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(s), Op::Trace { x }, needs))
    }

    /// Σ_{i≠j} |x_ij| → scalar.
    pub fn offdiag_abs_sum(&mut self, x: Var) -> Result<Var> {
        let d = self.square(x, "offdiag_abs_sum")?;
        let t = self.value(x);
        let mut s = 0.0;
        for i in 0..d {
            for j in 0..d {
                if i != j {
                    s += t.at2(i, j).abs();
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(s), Op::OffdiagAbsSum { x }, needs))
    }

    /// x + ε·I with ε = eps_rel · trace(x)/d, or ε = eps_rel when the trace
    /// is zero. Keeps a PSD matrix strictly positive-definite.
    pub fn shrink(&mut self, x: Var, eps_rel: f64) -> Result<Var> {
        let d = self.square(x, "shrink")?;
        let t = self.value(x);
        let tr: f64 = (0..d).map(|i| t.at2(i, i)).sum();
        let trace_was_zero = tr == 0.0;
        let eps = if trace_was_zero { eps_rel } else { eps_rel * tr / d as f64 };
        let mut data = t.data().to_vec();
        for i in 0..d {
            data[i * d + i] += eps;
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::from_vec([d, d], data)?,
            Op::Shrink { x, eps_rel, trace_was_zero },
            needs,
        ))
    }

    /// X with A·X = B, A symmetric positive-definite. Differentiable in both
    /// operands; A is symmetrized before factorization so the gradient is
    /// exact for arbitrary perturbations.
    pub fn solve_spd(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.square(a, "solve_spd")?;
        let tb = self.value(b);
        if tb.rank() != 2 || tb.rows() != d {
            return Err(Error::Dimension(format!(
                "solve_spd: A is {d}×{d} but B is {:?}",
                tb.shape()
            )));
        }
        let n = tb.cols();
        let ta = self.value(a);
        let mut sym = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                sym[i * d + j] = 0.5 * (ta.at2(i, j) + ta.at2(j, i));
            }
        }
        let l = linalg::cholesky(&sym, d)?;
        let x = linalg::spd_solve_with_factor(&l, d, tb.data(), n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::from_vec([d, n], x)?,
            Op::SolveSpd { a, b, chol: Arc::new(l) },
            needs,
        ))
    }

    /// Select rows of a 2-D tensor (duplicates allowed).
    pub fn gather_rows(&mut self, x: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::Dimension(format!("gather_rows on {:?}", t.shape())));
        }
        let (n, d) = (t.rows(), t.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Contract(format!("gather_rows index {bad} out of {n}")));
        }
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx.iter() {
            data.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::from_vec([idx.len(), d], data)?, Op::GatherRows { x, idx }, needs))
    }

    /// Select columns of a 2-D tensor.
    pub fn gather_cols(&mut self, x: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::Dimension(format!("gather_cols on {:?}", t.shape())));
        }
        let (n, d) = (t.rows(), t.cols());
        if let Some(&bad) = idx.iter().find(|&&j| j >= d) {
            return Err(Error::Contract(format!("gather_cols index {bad} out of {d}")));
        }
        let m = idx.len();
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            for (jj, &j) in idx.iter().enumerate() {
                data[i * m + jj] = t.data()[i * d + j];
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::from_vec([n, m], data)?, Op::GatherCols { x, idx }, needs))
    }

    /// Subtract per-column means: X̃ = (I − n⁻¹·11ᵀ)·X.
    pub fn center(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::Dimension(format!("center on {:?}", t.shape())));
        }
        let (n, d) = (t.rows(), t.cols());
        if n == 0 {
            return Err(Error::Contract("center requires at least one row".into()));
        }
        let mut means = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                means[j] += t.data()[i * d + j];
            }
        }
        for m in means.iter_mut() {
            *m /= n as f64;
        }
        let mut data = t.data().to_vec();
        for i in 0..n {
            for j in 0..d {
                data[i * d + j] -= means[j];
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::from_vec([n, d], data)?, Op::Center { x }, needs))
    }

    /// Cross-correlation conv: input [N,C,H,W] ⋆ filters [F,C,kh,kw].
    pub fn conv2d(&mut self, input: Var, filters: Var, stride: usize, pad: usize) -> Result<Var> {
        let ti = self.value(input);
        let tf = self.value(filters);
        if ti.rank() != 4 || tf.rank() != 4 {
            return Err(Error::Dimension(format!(
                "conv2d requires rank-4 operands, got {:?} and {:?}",
                ti.shape(),
                tf.shape()
            )));
        }
        let (n, c, h, w) = (ti.shape()[0], ti.shape()[1], ti.shape()[2], ti.shape()[3]);
        let (f, cf, kh, kw) = (tf.shape()[0], tf.shape()[1], tf.shape()[2], tf.shape()[3]);
        if c != cf {
            return Err(Error::Dimension(format!(
                "conv2d channel mismatch: input C={c}, filters C={cf}"
            )));
        }
        if stride == 0 {
            return Err(Error::Contract("conv2d stride must be positive".into()));
        }
        let (oh, ow) = match (out_extent(h, kh, stride, pad), out_extent(w, kw, stride, pad)) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => (oh, ow),
            _ => {
                return Err(Error::Dimension(format!(
                    "conv2d output extent nonpositive for input {h}×{w}, kernel {kh}×{kw}, stride {stride}, pad {pad}"
                )))
            }
        };

        let ckk = c * kh * kw;
        let ohw = oh * ow;
        let mut out = vec![0.0; n * f * ohw];
        let mut cols = vec![0.0; ckk * ohw];
        for ni in 0..n {
            im2col(ti.data(), ni, c, h, w, kh, kw, stride, pad, oh, ow, &mut cols);
            gemm::dgemm(
                f,
                ckk,
                ohw,
                tf.data(),
                Layout::Normal,
                &cols,
                Layout::Normal,
                &mut out[ni * f * ohw..(ni + 1) * f * ohw],
                false,
            );
        }
        let needs = self.needs(input) || self.needs(filters);
        Ok(self.push(
            Tensor::from_vec([n, f, oh, ow], out)?,
            Op::Conv2d { input, filters, stride, pad },
            needs,
        ))
    }

    /// Max pooling; padding cells never win. Returns the output var; the
    /// argmax switches are recorded on the tape node (used by backward and
    /// retrievable for utility tracing).
    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let (shape, switches, out) = {
            let t = self.value(x);
            if t.rank() != 4 {
                return Err(Error::Dimension(format!("maxpool2d on {:?}", t.shape())));
            }
            let (n, c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]);
            let (oh, ow) = match (out_extent(h, k, stride, pad), out_extent(w, k, stride, pad)) {
                (Some(oh), Some(ow)) if oh > 0 && ow > 0 => (oh, ow),
                _ => {
                    return Err(Error::Dimension(format!(
                        "maxpool2d output extent nonpositive for {h}×{w}, k={k}, stride={stride}, pad={pad}"
                    )))
                }
            };
            let mut out = vec![0.0; n * c * oh * ow];
            let mut switches = vec![0usize; n * c * oh * ow];
            let data = t.data();
            let mut oidx = 0;
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * h * w;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = f64::NEG_INFINITY;
                            let mut best_idx = usize::MAX;
                            for ky in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let idx = base + iy as usize * w + ix as usize;
                                    if data[idx] > best {
                                        best = data[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                            debug_assert!(best_idx != usize::MAX, "empty pooling window");
                            out[oidx] = best;
                            switches[oidx] = best_idx;
                            oidx += 1;
                        }
                    }
                }
            }
            (vec![n, c, oh, ow], switches, out)
        };
        let needs = self.needs(x);
        let switches = Arc::new(switches);
        Ok(self.push(Tensor::from_vec(shape, out)?, Op::MaxPool2d { x, switches }, needs))
    }

    /// Average pooling; padding cells are excluded from the divisor.
    pub fn avgpool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 4 {
            return Err(Error::Dimension(format!("avgpool2d on {:?}", t.shape())));
        }
        let (n, c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]);
        let (oh, ow) = match (out_extent(h, k, stride, pad), out_extent(w, k, stride, pad)) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => (oh, ow),
            _ => {
                return Err(Error::Dimension(format!(
                    "avgpool2d output extent nonpositive for {h}×{w}, k={k}, stride={stride}, pad={pad}"
                )))
            }
        };
        let mut out = vec![0.0; n * c * oh * ow];
        let data = t.data();
        let mut oidx = 0;
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = 0.0;
                        let mut cnt = 0usize;
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                s += data[base + iy as usize * w + ix as usize];
                                cnt += 1;
                            }
                        }
                        out[oidx] = s / cnt as f64;
                        oidx += 1;
                    }
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::from_vec([n, c, oh, ow], out)?,
            Op::AvgPool2d { x, k, stride, pad },
            needs,
        ))
    }

    /// Batch normalization over the channel axis (axis 1 of rank-4 input, or
    /// the feature axis of rank-2 input). In train form the batch statistics
    /// are computed here and returned so the caller can update running
    /// statistics; in eval form the provided running statistics are used.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (channels, _m) = bn_extents(self.value(x))?;
        check_bn_params(self.value(gamma), self.value(beta), channels)?;
        let shape = self.value(x).shape().to_vec();
        let (mean, var) = bn_batch_stats(self.value(x), channels);
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let xhat = bn_normalize(self.value(x), channels, &mean, &inv_std);
        let out = bn_affine(&xhat, &shape, self.value(gamma).data(), self.value(beta).data());
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let xhat_t = Tensor::from_vec(shape.clone(), xhat)?;
        let out_t = Tensor::from_vec(shape, out)?;
        let var_out = self.push(
            out_t,
            Op::BatchNorm { x, gamma, beta, xhat: xhat_t, inv_std: Arc::new(inv_std), train: true },
            needs,
        );
        Ok((var_out, mean, var))
    }

    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        run_mean: &[f64],
        run_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (channels, _m) = bn_extents(self.value(x))?;
        check_bn_params(self.value(gamma), self.value(beta), channels)?;
        if run_mean.len() != channels || run_var.len() != channels {
            return Err(Error::Dimension("batchnorm running stats length mismatch".into()));
        }
        let shape = self.value(x).shape().to_vec();
        let inv_std: Vec<f64> = run_var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let xhat = bn_normalize(self.value(x), channels, run_mean, &inv_std);
        let out = bn_affine(&xhat, &shape, self.value(gamma).data(), self.value(beta).data());
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let xhat_t = Tensor::from_vec(shape.clone(), xhat)?;
        let out_t = Tensor::from_vec(shape, out)?;
        Ok(self.push(
            out_t,
            Op::BatchNorm { x, gamma, beta, xhat: xhat_t, inv_std: Arc::new(inv_std), train: false },
            needs,
        ))
    }

    /// Concatenate rank-4 tensors along the channel axis. All other extents
    /// must agree.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero branches".into()));
        }
        let first = self.value(parts[0]).shape().to_vec();
        if first.len() != 4 {
            return Err(Error::Dimension(format!("concat_channels on {first:?}")));
        }
        let (n, h, w) = (first[0], first[2], first[3]);
        let mut total_c = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != 4 || s[0] != n || s[2] != h || s[3] != w {
                return Err(Error::Dimension(format!(
                    "concat_channels extent mismatch: {:?} vs {:?}",
                    first,
                    s
                )));
            }
            total_c += s[1];
        }
        let hw = h * w;
        let mut out = vec![0.0; n * total_c * hw];
        for ni in 0..n {
            let mut c_off = 0;
            for &p in parts {
                let t = self.value(p);
                let pc = t.shape()[1];
                let src = &t.data()[ni * pc * hw..(ni + 1) * pc * hw];
                let dst = &mut out[(ni * total_c + c_off) * hw..(ni * total_c + c_off + pc) * hw];
                dst.copy_from_slice(src);
                c_off += pc;
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::from_vec([n, total_c, h, w], out)?,
            Op::ConcatChannels { parts: parts.to_vec() },
            needs,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Reshape { x }, needs))
    }

    /// Mean softmax cross-entropy of logits [n×k] against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: Arc<Vec<usize>>) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 {
            return Err(Error::Dimension(format!("softmax_cross_entropy on {:?}", t.shape())));
        }
        let (n, k) = (t.rows(), t.cols());
        if labels.len() != n {
            return Err(Error::Contract(format!(
                "labels length {} does not match batch {n}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Contract(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &t.data()[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..k {
                let e = (row[j] - max).exp();
                probs[i * k + j] = e;
                z += e;
            }
            for j in 0..k {
                probs[i * k + j] /= z;
            }
            loss -= row[labels[i]] - max - z.ln();
        }
        let mean = loss / n as f64;
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(mean),
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs: Tensor::from_vec([n, k], probs)?,
            },
            needs,
        ))
    }

    /// Max-pool argmax switches of a recorded maxpool node (flat indices into
    /// its input tensor), for utility tracing.
    pub fn pool_switches(&self, v: Var) -> Option<Arc<Vec<usize>>> {
        match &self.nodes[v.0].op {
            Op::MaxPool2d { switches, .. } => Some(Arc::clone(switches)),
            _ => None,
        }
    }

    // ── backward ─────────────────────────────────────────────────────

    /// ∂loss/∂leaf for each requested leaf. Leaves the loss does not reach
    /// get zero gradients of the leaf's shape.
    pub fn grad(&self, loss: Var, leaves: &[Var]) -> Result<Vec<Tensor>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "grad requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_step(i, &g, &mut grads);
            // keep the gradient for leaves so it can be handed out below
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }

        let mut out = Vec::with_capacity(leaves.len());
        for &leaf in leaves {
            let shape = self.value(leaf).shape().to_vec();
            match grads.get(leaf.0).and_then(|g| g.as_ref()) {
                Some(g) => out.push(Tensor::from_vec(shape, g.clone())?),
                None => out.push(Tensor::zeros(shape)),
            }
        }
        Ok(out)
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Vec<f64>>],
        target: Var,
        mut write: impl FnMut(&mut [f64]),
    ) {
        if !self.needs(target) {
            return;
        }
        let numel = self.value(target).numel();
        let slot = &mut grads[target.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; numel]);
        }
        write(slot.as_mut().unwrap());
    }

    fn backward_step(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let ta = self.value(*a);
                let tb = self.value(*b);
                let (m, k) = (ta.rows(), ta.cols());
                let n = tb.cols();
                self.accumulate(grads, *a, |ga| {
                    gemm::dgemm(m, n, k, g, Layout::Normal, tb.data(), Layout::Transposed, ga, true);
                });
                self.accumulate(grads, *b, |gb| {
                    gemm::dgemm(k, m, n, ta.data(), Layout::Transposed, g, Layout::Normal, gb, true);
                });
            }
            Op::Transpose { x } => {
                let (r, c) = {
                    let t = self.value(*x);
                    (t.rows(), t.cols())
                };
                self.accumulate(grads, *x, |gx| {
                    // g has shape [c, r]
                    for i2 in 0..c {
                        for j in 0..r {
                            gx[j * c + i2] += g[i2 * r + j];
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, |ga| axpy(ga, g, 1.0));
                self.accumulate(grads, *b, |gb| axpy(gb, g, 1.0));
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, |ga| axpy(ga, g, 1.0));
                self.accumulate(grads, *b, |gb| axpy(gb, g, -1.0));
            }
            Op::Mul { a, b } => {
                let ta = self.value(*a).data().to_vec();
                let tb = self.value(*b).data().to_vec();
                self.accumulate(grads, *a, |ga| {
                    for ((ga_i, g_i), b_i) in ga.iter_mut().zip(g).zip(&tb) {
                        *ga_i += g_i * b_i;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for ((gb_i, g_i), a_i) in gb.iter_mut().zip(g).zip(&ta) {
                        *gb_i += g_i * a_i;
                    }
                });
            }
            Op::Scale { x, c } => {
                let c = *c;
                self.accumulate(grads, *x, |gx| axpy(gx, g, c));
            }
            Op::RowBroadcastAdd { x, bias } => {
                let d = self.value(*bias).numel();
                let n = self.value(*x).rows();
                self.accumulate(grads, *x, |gx| axpy(gx, g, 1.0));
                self.accumulate(grads, *bias, |gb| {
                    for i2 in 0..n {
                        for j in 0..d {
                            gb[j] += g[i2 * d + j];
                        }
                    }
                });
            }
            Op::ChannelBiasAdd { x, bias } => {
                let s = self.value(*x).shape().to_vec();
                let (n, f, hw) = (s[0], s[1], s[2] * s[3]);
                self.accumulate(grads, *x, |gx| axpy(gx, g, 1.0));
                self.accumulate(grads, *bias, |gb| {
                    for ni in 0..n {
                        for fi in 0..f {
                            let base = (ni * f + fi) * hw;
                            let mut s2 = 0.0;
                            for p in 0..hw {
                                s2 += g[base + p];
                            }
                            gb[fi] += s2;
                        }
                    }
                });
            }
            Op::Relu { x } => {
                let out = self.value(Var(i)).data().to_vec();
                self.accumulate(grads, *x, |gx| {
                    for ((gx_i, g_i), o) in gx.iter_mut().zip(g).zip(&out) {
                        if *o > 0.0 {
                            *gx_i += g_i;
                        }
                    }
                });
            }
            Op::Recip { x } => {
                let out = self.value(Var(i)).data().to_vec();
                self.accumulate(grads, *x, |gx| {
                    for ((gx_i, g_i), o) in gx.iter_mut().zip(g).zip(&out) {
                        *gx_i -= g_i * o * o;
                    }
                });
            }
            Op::Sum { x } => {
                let gs = g[0];
                self.accumulate(grads, *x, |gx| {
                    for v in gx.iter_mut() {
                        *v += gs;
                    }
                });
            }
            Op::Trace { x } => {
                let d = self.value(*x).rows();
                let gs = g[0];
                self.accumulate(grads, *x, |gx| {
                    for j in 0..d {
                        gx[j * d + j] += gs;
                    }
                });
            }
            Op::OffdiagAbsSum { x } => {
                let t = self.value(*x);
                let d = t.rows();
                let gs = g[0];
                let vals = t.data().to_vec();
                self.accumulate(grads, *x, |gx| {
                    for r in 0..d {
                        for c2 in 0..d {
                            if r != c2 {
                                gx[r * d + c2] += gs * vals[r * d + c2].signum();
                            }
                        }
                    }
                });
            }
            Op::Shrink { x, eps_rel, trace_was_zero } => {
                let d = self.value(*x).rows();
                let scale = if *trace_was_zero { 0.0 } else { eps_rel / d as f64 };
                let gtrace: f64 = (0..d).map(|j| g[j * d + j]).sum();
                self.accumulate(grads, *x, |gx| {
                    axpy(gx, g, 1.0);
                    if scale != 0.0 {
                        for j in 0..d {
                            gx[j * d + j] += scale * gtrace;
                        }
                    }
                });
            }
            Op::SolveSpd { a, b, chol } => {
                let x_val = self.value(Var(i));
                let (d, n) = (x_val.rows(), x_val.cols());
                // gB = S⁻¹·G
                let ginv = linalg::spd_solve_with_factor(chol, d, g, n);
                self.accumulate(grads, *b, |gb| axpy(gb, &ginv, 1.0));
                // gA = −sym(S⁻¹·G·Xᵀ)
                let xd = x_val.data().to_vec();
                self.accumulate(grads, *a, |ga| {
                    let mut m = vec![0.0; d * d];
                    gemm::dgemm(d, n, d, &ginv, Layout::Normal, &xd, Layout::Transposed, &mut m, false);
                    for r in 0..d {
                        for c2 in 0..d {
                            ga[r * d + c2] -= 0.5 * (m[r * d + c2] + m[c2 * d + r]);
                        }
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let d = self.value(*x).cols();
                self.accumulate(grads, *x, |gx| {
                    for (out_row, &src_row) in idx.iter().enumerate() {
                        for j in 0..d {
                            gx[src_row * d + j] += g[out_row * d + j];
                        }
                    }
                });
            }
            Op::GatherCols { x, idx } => {
                let (n, d) = {
                    let t = self.value(*x);
                    (t.rows(), t.cols())
                };
                let m = idx.len();
                self.accumulate(grads, *x, |gx| {
                    for r in 0..n {
                        for (jj, &j) in idx.iter().enumerate() {
                            gx[r * d + j] += g[r * m + jj];
                        }
                    }
                });
            }
            Op::Center { x } => {
                let (n, d) = {
                    let t = self.value(*x);
                    (t.rows(), t.cols())
                };
                let mut gmeans = vec![0.0; d];
                for r in 0..n {
                    for j in 0..d {
                        gmeans[j] += g[r * d + j];
                    }
                }
                for v in gmeans.iter_mut() {
                    *v /= n as f64;
                }
                self.accumulate(grads, *x, |gx| {
                    for r in 0..n {
                        for j in 0..d {
                            gx[r * d + j] += g[r * d + j] - gmeans[j];
                        }
                    }
                });
            }
            Op::Conv2d { input, filters, stride, pad } => {
                self.conv2d_backward(i, *input, *filters, *stride, *pad, g, grads);
            }
            Op::MaxPool2d { x, switches, .. } => {
                self.accumulate(grads, *x, |gx| {
                    for (o, &src) in switches.iter().enumerate() {
                        gx[src] += g[o];
                    }
                });
            }
            Op::AvgPool2d { x, k, stride, pad } => {
                let (k, stride, pad) = (*k, *stride, *pad);
                let s_in = self.value(*x).shape().to_vec();
                let s_out = self.value(Var(i)).shape().to_vec();
                let (n, c, h, w) = (s_in[0], s_in[1], s_in[2], s_in[3]);
                let (oh, ow) = (s_out[2], s_out[3]);
                self.accumulate(grads, *x, |gx| {
                    let mut oidx = 0;
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * h * w;
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let mut cells = Vec::with_capacity(k * k);
                                    for ky in 0..k {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..k {
                                            let ix = (ox * stride + kx) as isize - pad as isize;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            cells.push(base + iy as usize * w + ix as usize);
                                        }
                                    }
                                    let share = g[oidx] / cells.len() as f64;
                                    for idx in cells {
                                        gx[idx] += share;
                                    }
                                    oidx += 1;
                                }
                            }
                        }
                    }
                });
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let channels = inv_std.len();
                let total = xhat.numel();
                let m = total / channels;
                let gamma_v = self.value(*gamma).data().to_vec();
                let xh = xhat.data();
                let per_channel = channel_indexer(xhat.shape());

                // gβ and gγ are the same in train and eval
                self.accumulate(grads, *beta, |gb| {
                    for (pos, gi) in g.iter().enumerate() {
                        gb[per_channel(pos)] += gi;
                    }
                });
                self.accumulate(grads, *gamma, |gg| {
                    for (pos, gi) in g.iter().enumerate() {
                        gg[per_channel(pos)] += gi * xh[pos];
                    }
                });

                if *train {
                    // gX = γ·inv_std/m · (m·G − ΣG − x̂·Σ(G∘x̂)) per channel
                    let mut sum_g = vec![0.0; channels];
                    let mut sum_gx = vec![0.0; channels];
                    for (pos, gi) in g.iter().enumerate() {
                        let c2 = per_channel(pos);
                        sum_g[c2] += gi;
                        sum_gx[c2] += gi * xh[pos];
                    }
                    self.accumulate(grads, *x, |gx| {
                        for pos in 0..total {
                            let c2 = per_channel(pos);
                            let coeff = gamma_v[c2] * inv_std[c2] / m as f64;
                            gx[pos] +=
                                coeff * (m as f64 * g[pos] - sum_g[c2] - xh[pos] * sum_gx[c2]);
                        }
                    });
                } else {
                    self.accumulate(grads, *x, |gx| {
                        for pos in 0..total {
                            let c2 = per_channel(pos);
                            gx[pos] += g[pos] * gamma_v[c2] * inv_std[c2];
                        }
                    });
                }
            }
            Op::ConcatChannels { parts } => {
                let out_shape = self.value(Var(i)).shape().to_vec();
                let (n, total_c, hw) = (out_shape[0], out_shape[1], out_shape[2] * out_shape[3]);
                let mut c_off = 0;
                for &p in parts {
                    let pc = self.value(p).shape()[1];
                    self.accumulate(grads, p, |gp| {
                        for ni in 0..n {
                            let src = &g[(ni * total_c + c_off) * hw..(ni * total_c + c_off + pc) * hw];
                            let dst = &mut gp[ni * pc * hw..(ni + 1) * pc * hw];
                            for (d2, s2) in dst.iter_mut().zip(src) {
                                *d2 += s2;
                            }
                        }
                    });
                    c_off += pc;
                }
            }
            Op::Reshape { x } => {
                self.accumulate(grads, *x, |gx| axpy(gx, g, 1.0));
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let (n, k) = (probs.rows(), probs.cols());
                let gs = g[0];
                let pd = probs.data();
                self.accumulate(grads, *logits, |gl| {
                    let scale = gs / n as f64;
                    for r in 0..n {
                        for j in 0..k {
                            let delta = if labels[r] == j { 1.0 } else { 0.0 };
                            gl[r * k + j] += scale * (pd[r * k + j] - delta);
                        }
                    }
                });
            }
        }
    }

    fn conv2d_backward(
        &self,
        node: usize,
        input: Var,
        filters: Var,
        stride: usize,
        pad: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let ti = self.value(input);
        let tf = self.value(filters);
        let out_shape = self.value(Var(node)).shape().to_vec();
        let (n, c, h, w) = (ti.shape()[0], ti.shape()[1], ti.shape()[2], ti.shape()[3]);
        let (f, kh, kw) = (tf.shape()[0], tf.shape()[2], tf.shape()[3]);
        let (oh, ow) = (out_shape[2], out_shape[3]);
        let ckk = c * kh * kw;
        let ohw = oh * ow;

        let needs_input = self.needs(input);
        let needs_filters = self.needs(filters);
        if !needs_input && !needs_filters {
            return;
        }

        let mut gfilters = vec![0.0; f * ckk];
        let mut ginput = vec![0.0; n * c * h * w];
        let mut cols = vec![0.0; ckk * ohw];
        let mut gcols = vec![0.0; ckk * ohw];
        for ni in 0..n {
            let gout_n = &g[ni * f * ohw..(ni + 1) * f * ohw];
            if needs_filters {
                im2col(ti.data(), ni, c, h, w, kh, kw, stride, pad, oh, ow, &mut cols);
                // gW[f,ckk] += gOut[f,ohw] · colsᵀ
                gemm::dgemm(
                    f,
                    ohw,
                    ckk,
                    gout_n,
                    Layout::Normal,
                    &cols,
                    Layout::Transposed,
                    &mut gfilters,
                    true,
                );
            }
            if needs_input {
                // gCols[ckk,ohw] = Wᵀ · gOut
                gemm::dgemm(
                    ckk,
                    f,
                    ohw,
                    tf.data(),
                    Layout::Transposed,
                    gout_n,
                    Layout::Normal,
                    &mut gcols,
                    false,
                );
                col2im_add(&gcols, ni, c, h, w, kh, kw, stride, pad, oh, ow, &mut ginput);
            }
        }
        if needs_filters {
            self.accumulate(grads, filters, |gf| axpy(gf, &gfilters, 1.0));
        }
        if needs_input {
            self.accumulate(grads, input, |gi| axpy(gi, &ginput, 1.0));
        }
    }
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

/// Maps a flat position of a [n,c,...] tensor to its channel (axis 1 of
/// rank 4, axis 1 of rank 2).
fn channel_indexer(shape: &[usize]) -> impl Fn(usize) -> usize {
    let (channels, inner) = match shape.len() {
        2 => (shape[1], 1),
        4 => (shape[1], shape[2] * shape[3]),
        _ => unreachable!("batchnorm input rank checked at construction"),
    };
    move |pos: usize| (pos / inner) % channels
}

fn bn_extents(t: &Tensor) -> Result<(usize, usize)> {
    match t.rank() {
        2 => Ok((t.cols(), t.rows())),
        4 => Ok((t.shape()[1], t.shape()[0] * t.shape()[2] * t.shape()[3])),
        _ => Err(Error::Dimension(format!(
            "batchnorm requires rank 2 or 4 input, got {:?}",
            t.shape()
        ))),
    }
}

fn check_bn_params(gamma: &Tensor, beta: &Tensor, channels: usize) -> Result<()> {
    if gamma.shape() != [channels] || beta.shape() != [channels] {
        return Err(Error::Dimension(format!(
            "batchnorm scale/shift must be [{channels}], got {:?} and {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok(())
}

fn bn_batch_stats(t: &Tensor, channels: usize) -> (Vec<f64>, Vec<f64>) {
    let per_channel = channel_indexer(t.shape());
    let m = t.numel() / channels;
    let mut mean = vec![0.0; channels];
    for (pos, v) in t.data().iter().enumerate() {
        mean[per_channel(pos)] += v;
    }
    for v in mean.iter_mut() {
        *v /= m as f64;
    }
    let mut var = vec![0.0; channels];
    for (pos, v) in t.data().iter().enumerate() {
        let c = per_channel(pos);
        let d = v - mean[c];
        var[c] += d * d;
    }
    for v in var.iter_mut() {
        *v /= m as f64;
    }
    (mean, var)
}

fn bn_normalize(t: &Tensor, _channels: usize, mean: &[f64], inv_std: &[f64]) -> Vec<f64> {
    let per_channel = channel_indexer(t.shape());
    t.data()
        .iter()
        .enumerate()
        .map(|(pos, v)| {
            let c = per_channel(pos);
            (v - mean[c]) * inv_std[c]
        })
        .collect()
}

fn bn_affine(xhat: &[f64], shape: &[usize], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let per_channel = channel_indexer(shape);
    xhat.iter()
        .enumerate()
        .map(|(pos, v)| {
            let c = per_channel(pos);
            gamma[c] * v + beta[c]
        })
        .collect()
}

/// One sample's im2col: writes [C·kh·kw, oh·ow] into `cols`.
#[allow(clippy::too_many_arguments)]
fn im2col(
    input: &[f64],
    sample: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [f64],
) {
    let ohw = oh * ow;
    for ci in 0..c {
        let base = (sample * c + ci) * h * w;
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        let v = if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                            input[base + iy as usize * w + ix as usize]
                        } else {
                            0.0
                        };
                        cols[row * ohw + oy * ow + ox] = v;
                    }
                }
            }
        }
    }
}

/// Adjoint of `im2col`: accumulates [C·kh·kw, oh·ow] back into the input
/// gradient of one sample.
#[allow(clippy::too_many_arguments)]
fn col2im_add(
    cols: &[f64],
    sample: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    ginput: &mut [f64],
) {
    let ohw = oh * ow;
    for ci in 0..c {
        let base = (sample * c + ci) * h * w;
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        ginput[base + iy as usize * w + ix as usize] +=
                            cols[row * ohw + oy * ow + ox];
                    }
                }
            }
        }
    }
}
