//! Operation tape and reverse-mode differentiation.
//!
//! Every op appends one node holding its output value and whatever it needs
//! for the vector-Jacobian product. Nodes are only ever appended after their
//! inputs, so reverse index order is a valid reverse topological order.

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{bail, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Valid,
    Same,
}

/// Running statistics of one batch-norm layer (channel axis last).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNormState {
    pub const DEFAULT_MOMENTUM: f64 = 0.9;
    pub const DEFAULT_EPSILON: f64 = 1e-5;

    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: Self::DEFAULT_MOMENTUM,
            epsilon: Self::DEFAULT_EPSILON,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, k: Var, b: Var, pad_h: usize, pad_w: usize },
    Dense { x: Var, w: Var, b: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
    Relu { x: Var },
    Sigmoid { x: Var },
    Dropout { x: Var, mask: Vec<f64> },
    MaxPool { x: Var, argmax: Vec<usize> },
    AvgPool { x: Var, k: usize },
    Mul { a: Var, b: Var },
    Add { a: Var, b: Var },
    ScaleRows { x: Var, w: Var },
    Slice { x: Var, axis: usize, start: usize },
    Concat { a: Var, b: Var, axis: usize },
    Reshape { x: Var },
    SwapAxes { x: Var, a: usize, b: usize },
    SumAxis { x: Var, axis: usize },
    MeanAxis { x: Var, axis: usize },
    Sum { x: Var },
    Softmax { x: Var },
    CrossEntropy { p: Var, labels: Vec<usize>, floor: f64 },
    SoftmaxCrossEntropy { x: Var, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` did not reach the loss.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

/// Probability floor inside `cross_entropy`.
pub const CE_FLOOR: f64 = 1e-12;

/// Record of executed ops.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        bail!(Shape, "{}: shapes {:?} and {:?} differ", what, a.shape(), b.shape());
    }
    Ok(())
}

fn pool_out_len(w: usize, k: usize, padding: Padding) -> usize {
    match padding {
        Padding::Valid => w / k,
        Padding::Same => w.div_ceil(k),
    }
}

fn same_pad(k: usize) -> usize {
    (k - 1) / 2
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient (a parameter).
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that does not receive a gradient (input data).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Stride-1 convolution of `x: [B,H,W,Cin]` with `k: [kh,kw,Cin,Cout]` plus `b: [Cout]`.
    ///
    /// `Same` padding zero-pads `k - 1` per spatial axis, the odd element trailing.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Var, padding: Padding) -> Result<Var> {
        let (xs, ks, bs) = (self.shape(x), self.shape(k), self.shape(b));
        if xs.len() != 4 || ks.len() != 4 {
            bail!(Shape, "conv2d wants [B,H,W,C] input and [kh,kw,Cin,Cout] kernel, got {:?} and {:?}", xs, ks);
        }
        let (nb, h, w, cin) = (xs[0], xs[1], xs[2], xs[3]);
        let (kh, kw, kcin, cout) = (ks[0], ks[1], ks[2], ks[3]);
        if kcin != cin || bs != [cout] {
            bail!(Shape, "conv2d channel mismatch: input {:?}, kernel {:?}, bias {:?}", xs, ks, bs);
        }
        let (pad_h, pad_w, oh, ow) = match padding {
            Padding::Valid => {
                if kh > h || kw > w {
                    bail!(Shape, "kernel {}x{} larger than input {}x{}", kh, kw, h, w);
                }
                (0, 0, h - kh + 1, w - kw + 1)
            }
            Padding::Same => (same_pad(kh), same_pad(kw), h, w),
        };
        let xv = self.value(x).data();
        let kv = self.value(k).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; nb * oh * ow * cout];
        for n in 0..nb {
            for r in 0..oh {
                for c in 0..ow {
                    let o = ((n * oh + r) * ow + c) * cout;
                    let orow = &mut out[o..o + cout];
                    orow.copy_from_slice(bv);
                    for i in 0..kh {
                        let Some(ih) = (r + i).checked_sub(pad_h).filter(|&v| v < h) else { continue };
                        for j in 0..kw {
                            let Some(iw) = (c + j).checked_sub(pad_w).filter(|&v| v < w) else { continue };
                            let xi = ((n * h + ih) * w + iw) * cin;
                            for ci in 0..cin {
                                let xval = xv[xi + ci];
                                let ki = ((i * kw + j) * cin + ci) * cout;
                                for (o, kk) in orow.iter_mut().zip(&kv[ki..ki + cout]) {
                                    *o += xval * kk;
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![nb, oh, ow, cout], out)?;
        Ok(self.push(value, Op::Conv2d { x, k, b, pad_h, pad_w }, &[x, k, b]))
    }

    /// `x[..., Din] . w[Din, Dout] + b[Dout]` applied over all leading axes.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if ws.len() != 2 || xs.last() != Some(&ws[0]) || bs != [ws[1]] {
            bail!(Shape, "dense: input {:?}, weights {:?}, bias {:?}", xs, ws, bs);
        }
        let (din, dout) = (ws[0], ws[1]);
        let rows = self.value(x).len() / din;
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; rows * dout];
        for r in 0..rows {
            let orow = &mut out[r * dout..(r + 1) * dout];
            orow.copy_from_slice(bv);
            for (d, &xval) in xv[r * din..(r + 1) * din].iter().enumerate() {
                for (o, ww) in orow.iter_mut().zip(&wv[d * dout..(d + 1) * dout]) {
                    *o += xval * ww;
                }
            }
        }
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = dout;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Dense { x, w, b }, &[x, w, b]))
    }

    /// Batch normalization over every axis but the last.
    ///
    /// Train mode normalizes by the (biased) batch statistics and folds them
    /// into the running statistics; infer mode uses the running statistics.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, state: &mut BatchNormState, mode: Mode) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let c = *xs.last().unwrap_or(&0);
        if c == 0 || self.value(x).is_empty() {
            bail!(DegenerateInput, "batch norm over an empty batch {:?}", xs);
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || state.channels() != c {
            bail!(Shape, "batch norm expects {} channels", c);
        }
        let xv = self.value(x).data();
        let m = xv.len() / c;
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                for row in xv.chunks_exact(c) {
                    for (a, v) in mean.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                mean.iter_mut().for_each(|a| *a /= m as f64);
                let mut var = vec![0.0; c];
                for row in xv.chunks_exact(c) {
                    for ((a, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                        *a += (v - mu) * (v - mu);
                    }
                }
                var.iter_mut().for_each(|a| *a /= m as f64);
                for ch in 0..c {
                    state.running_mean[ch] = state.momentum * state.running_mean[ch] + (1.0 - state.momentum) * mean[ch];
                    state.running_var[ch] = state.momentum * state.running_var[ch] + (1.0 - state.momentum) * var[ch];
                }
                (mean, var)
            }
            Mode::Infer => (state.running_mean.clone(), state.running_var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.epsilon).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for (i, v) in xv.iter().enumerate() {
            let ch = i % c;
            xhat[i] = (v - mean[ch]) * inv_std[ch];
            out[i] = g[ch] * xhat[i] + bt[ch];
        }
        let value = Tensor::new(xs, out)?;
        let op = Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats: mode == Mode::Train };
        Ok(self.push(value, op, &[x, gamma, beta]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let value = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| a.max(0.0)).collect()).unwrap();
        self.push(value, Op::Relu { x }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let value = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| sigmoid(a)).collect()).unwrap();
        self.push(value, Op::Sigmoid { x }, &[x])
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - rate)`; identity at inference.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            bail!(Config, "dropout rate {} outside [0, 1)", rate);
        }
        if mode == Mode::Infer || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let v = self.value(x);
        let mask: Vec<f64> = (0..v.len()).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect();
        let out = v.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor::new(v.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Dropout { x, mask }, &[x]))
    }

    fn pool_geometry(&self, x: Var, k: usize, padding: Padding) -> Result<(usize, usize, usize, usize)> {
        if k == 0 {
            bail!(Config, "pooling window must be positive");
        }
        let xs = self.shape(x);
        if xs.len() != 4 {
            bail!(Shape, "pooling wants [B,H,W,C], got {:?}", xs);
        }
        let (outer, w, c) = Tensor::axis_extents(xs, 2);
        let ow = pool_out_len(w, k, padding);
        if ow == 0 {
            bail!(Shape, "pool window {} longer than axis of {}", k, w);
        }
        Ok((outer, w, c, ow))
    }

    /// Non-overlapping `1 x k` max pooling along the width axis of `[B,H,W,C]`.
    pub fn max_pool(&mut self, x: Var, k: usize, padding: Padding) -> Result<Var> {
        let (outer, w, c, ow) = self.pool_geometry(x, k, padding)?;
        let xv = self.value(x).data();
        let mut out = vec![0.0; outer * ow * c];
        let mut argmax = vec![0usize; out.len()];
        for o in 0..outer {
            for p in 0..ow {
                let end = ((p + 1) * k).min(w);
                for ch in 0..c {
                    let mut best = (o * w + p * k) * c + ch;
                    for t in p * k + 1..end {
                        let i = (o * w + t) * c + ch;
                        if xv[i] > xv[best] {
                            best = i;
                        }
                    }
                    let oi = (o * ow + p) * c + ch;
                    out[oi] = xv[best];
                    argmax[oi] = best;
                }
            }
        }
        let mut shape = self.shape(x).to_vec();
        shape[2] = ow;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::MaxPool { x, argmax }, &[x]))
    }

    /// Non-overlapping `1 x k` mean pooling; partial windows average their present elements.
    pub fn avg_pool(&mut self, x: Var, k: usize, padding: Padding) -> Result<Var> {
        let (outer, w, c, ow) = self.pool_geometry(x, k, padding)?;
        let xv = self.value(x).data();
        let mut out = vec![0.0; outer * ow * c];
        for o in 0..outer {
            for p in 0..ow {
                let end = ((p + 1) * k).min(w);
                let n = (end - p * k) as f64;
                for ch in 0..c {
                    let s: f64 = (p * k..end).map(|t| xv[(o * w + t) * c + ch]).sum();
                    out[(o * ow + p) * c + ch] = s / n;
                }
            }
        }
        let mut shape = self.shape(x).to_vec();
        shape[2] = ow;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::AvgPool { x, k }, &[x]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let (av, bv) = (self.value(a), self.value(b));
        let out = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(av.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let (av, bv) = (self.value(a), self.value(b));
        let out = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    /// Multiplies every last-axis row of `x` by the matching scalar of `w`
    /// (`w` has the shape of `x` without its last axis).
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.is_empty() || self.shape(w) != &xs[..xs.len() - 1] {
            bail!(Shape, "scale_rows: {:?} cannot scale {:?}", self.shape(w), xs);
        }
        let c = *xs.last().unwrap();
        let wv = self.value(w).data();
        let out = self.value(x).data().iter().enumerate().map(|(i, v)| v * wv[i / c]).collect();
        let value = Tensor::new(xs.to_vec(), out)?;
        Ok(self.push(value, Op::ScaleRows { x, w }, &[x, w]))
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || start + len > xs[axis] {
            bail!(Shape, "slice {}..{} out of range on axis {} of {:?}", start, start + len, axis, xs);
        }
        let (outer, n, inner) = Tensor::axis_extents(&xs, axis);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut shape = xs;
        shape[axis] = len;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Slice { x, axis, start }, &[x]))
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (as_, bs) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let compatible = as_.len() == bs.len()
            && axis < as_.len()
            && as_.iter().zip(&bs).enumerate().all(|(i, (p, q))| i == axis || p == q);
        if !compatible {
            bail!(Shape, "cannot concat {:?} and {:?} on axis {}", as_, bs, axis);
        }
        let (outer, na, inner) = Tensor::axis_extents(&as_, axis);
        let nb = bs[axis];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for o in 0..outer {
            out.extend_from_slice(&av[o * na * inner..(o + 1) * na * inner]);
            out.extend_from_slice(&bv[o * nb * inner..(o + 1) * nb * inner]);
        }
        let mut shape = as_;
        shape[axis] = na + nb;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Concat { a, b, axis }, &[a, b]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    pub fn swap_axes(&mut self, x: Var, a: usize, b: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if a >= xs.len() || b >= xs.len() {
            bail!(Shape, "swap_axes({}, {}) on rank {}", a, b, xs.len());
        }
        let mut shape = xs.clone();
        shape.swap(a, b);
        let src = swap_index_map(&xs, a, b);
        let xv = self.value(x).data();
        let out = src.iter().map(|&i| xv[i]).collect();
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::SwapAxes { x, a, b }, &[x]))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = self.reduce_axis(x, axis, 1.0)?;
        Ok(self.push(value, Op::SumAxis { x, axis }, &[x]))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self.shape(x).get(axis).unwrap_or(&0);
        if n == 0 {
            bail!(Shape, "mean over empty or missing axis {}", axis);
        }
        let value = self.reduce_axis(x, axis, 1.0 / n as f64)?;
        Ok(self.push(value, Op::MeanAxis { x, axis }, &[x]))
    }

    fn reduce_axis(&self, x: Var, axis: usize, scale: f64) -> Result<Tensor> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            bail!(Shape, "axis {} out of range for {:?}", axis, xs);
        }
        let (outer, n, inner) = Tensor::axis_extents(&xs, axis);
        let xv = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for t in 0..n {
                let src = &xv[(o * n + t) * inner..(o * n + t + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        if scale != 1.0 {
            out.iter_mut().for_each(|v| *v *= scale);
        }
        let mut shape = xs;
        shape.remove(axis);
        Tensor::new(shape, out)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    /// Softmax over the last axis, max-shifted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let Some(&c) = xs.last() else { bail!(Shape, "softmax of a scalar") };
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(c) {
            softmax_in_place(row);
        }
        let value = Tensor::new(xs, out)?;
        Ok(self.push(value, Op::Softmax { x }, &[x]))
    }

    /// Mean over rows of `-ln(p[label] + CE_FLOOR)` for `p: [B,C]`.
    pub fn cross_entropy(&mut self, p: Var, labels: &[usize]) -> Result<Var> {
        let c = self.check_labels(p, labels)?;
        let pv = self.value(p).data();
        let loss = labels.iter().enumerate().map(|(r, &l)| -(pv[r * c + l] + CE_FLOOR).ln()).sum::<f64>() / labels.len() as f64;
        let op = Op::CrossEntropy { p, labels: labels.to_vec(), floor: CE_FLOOR };
        Ok(self.push(Tensor::scalar(loss), op, &[p]))
    }

    /// Fused softmax and cross-entropy on logits `[B,C]`, averaged over rows.
    pub fn softmax_cross_entropy(&mut self, x: Var, labels: &[usize]) -> Result<Var> {
        let c = self.check_labels(x, labels)?;
        let mut probs = self.value(x).data().to_vec();
        let mut loss = 0.0;
        for (r, row) in probs.chunks_exact_mut(c).enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[labels[r]];
            softmax_in_place(row);
        }
        loss /= labels.len() as f64;
        let op = Op::SoftmaxCrossEntropy { x, labels: labels.to_vec(), probs };
        Ok(self.push(Tensor::scalar(loss), op, &[x]))
    }

    fn check_labels(&self, x: Var, labels: &[usize]) -> Result<usize> {
        let xs = self.shape(x);
        if xs.len() != 2 || xs[0] != labels.len() || labels.is_empty() {
            bail!(Shape, "expected [{}, C] scores, got {:?}", labels.len(), xs);
        }
        let c = xs[1];
        if let Some(&l) = labels.iter().find(|&&l| l >= c) {
            bail!(Contract, "label {} out of range for {} classes", l, c);
        }
        Ok(c)
    }

    /// Fingerprint of every piecewise branch taken (ReLU signs, max-pool winners).
    ///
    /// Two evaluations with equal fingerprints lie on the same smooth piece.
    pub fn branch_fingerprint(&self) -> u64 {
        let mut h = Fnv::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => {
                    for &v in self.value(*x).data() {
                        h.byte((v > 0.0) as u8);
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.iter().for_each(|&i| h.word(i as u64)),
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            bail!(Contract, "backward needs a scalar loss, got shape {:?}", self.shape(loss));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.vjp(node, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                match (g, &node.op) {
                    (Some(g), Op::Leaf) => Some(Tensor::new(node.value.shape().to_vec(), g).unwrap()),
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn vjp(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, k, b, pad_h, pad_w } => {
                let (xs, ks) = (self.shape(*x), self.shape(*k));
                let (nb, h, w, cin) = (xs[0], xs[1], xs[2], xs[3]);
                let (kh, kw, cout) = (ks[0], ks[1], ks[3]);
                let (oh, ow) = (out_shape[1], out_shape[2]);
                let (xv, kv) = (self.value(*x).data(), self.value(*k).data());
                let (want_x, want_k) = (self.wants(*x), self.wants(*k));
                let mut dx = if want_x { vec![0.0; xv.len()] } else { Vec::new() };
                let mut dk = if want_k { vec![0.0; kv.len()] } else { Vec::new() };
                let mut db = vec![0.0; cout];
                for n in 0..nb {
                    for r in 0..oh {
                        for c in 0..ow {
                            let o = ((n * oh + r) * ow + c) * cout;
                            let grow = &g[o..o + cout];
                            for (d, gg) in db.iter_mut().zip(grow) {
                                *d += gg;
                            }
                            for i in 0..kh {
                                let Some(ih) = (r + i).checked_sub(*pad_h).filter(|&v| v < h) else { continue };
                                for j in 0..kw {
                                    let Some(iw) = (c + j).checked_sub(*pad_w).filter(|&v| v < w) else { continue };
                                    let xi = ((n * h + ih) * w + iw) * cin;
                                    for ci in 0..cin {
                                        let ki = ((i * kw + j) * cin + ci) * cout;
                                        if want_k {
                                            let xval = xv[xi + ci];
                                            for (d, gg) in dk[ki..ki + cout].iter_mut().zip(grow) {
                                                *d += xval * gg;
                                            }
                                        }
                                        if want_x {
                                            dx[xi + ci] += dot(&kv[ki..ki + cout], grow);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if want_x {
                    accumulate(grads, *x, dx);
                }
                if want_k {
                    accumulate(grads, *k, dk);
                }
                if self.wants(*b) {
                    accumulate(grads, *b, db);
                }
            }
            Op::Dense { x, w, b } => {
                let ws = self.shape(*w);
                let (din, dout) = (ws[0], ws[1]);
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                let rows = xv.len() / din;
                if self.wants(*x) {
                    let mut dx = vec![0.0; xv.len()];
                    for r in 0..rows {
                        let grow = &g[r * dout..(r + 1) * dout];
                        for d in 0..din {
                            dx[r * din + d] = dot(&wv[d * dout..(d + 1) * dout], grow);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; wv.len()];
                    for r in 0..rows {
                        let grow = &g[r * dout..(r + 1) * dout];
                        for d in 0..din {
                            let xval = xv[r * din + d];
                            for (a, gg) in dw[d * dout..(d + 1) * dout].iter_mut().zip(grow) {
                                *a += xval * gg;
                            }
                        }
                    }
                    accumulate(grads, *w, dw);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; dout];
                    for grow in g.chunks_exact(dout) {
                        for (a, gg) in db.iter_mut().zip(grow) {
                            *a += gg;
                        }
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let c = inv_std.len();
                let m = g.len() / c;
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (i, (gg, xh)) in g.iter().zip(xhat).enumerate() {
                    dgamma[i % c] += gg * xh;
                    dbeta[i % c] += gg;
                }
                if self.wants(*x) {
                    let dx = if *batch_stats {
                        // dxhat = g * gamma; dx = inv_std / m * (m dxhat - sum dxhat - xhat sum(dxhat xhat))
                        let (sum_d, sum_dx) = (&dbeta, &dgamma);
                        g.iter()
                            .zip(xhat)
                            .enumerate()
                            .map(|(i, (gg, xh))| {
                                let ch = i % c;
                                gv[ch] * inv_std[ch] / m as f64 * (m as f64 * gg - sum_d[ch] - xh * sum_dx[ch])
                            })
                            .collect()
                    } else {
                        g.iter().enumerate().map(|(i, gg)| gg * gv[i % c] * inv_std[i % c]).collect()
                    };
                    accumulate(grads, *x, dx);
                }
                if self.wants(*gamma) {
                    accumulate(grads, *gamma, dgamma);
                }
                if self.wants(*beta) {
                    accumulate(grads, *beta, dbeta);
                }
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                let dx = g.iter().zip(xv).map(|(gg, v)| if *v > 0.0 { *gg } else { 0.0 }).collect();
                accumulate(grads, *x, dx);
            }
            Op::Sigmoid { x } => {
                let y = node.value.data();
                let dx = g.iter().zip(y).map(|(gg, s)| gg * s * (1.0 - s)).collect();
                accumulate(grads, *x, dx);
            }
            Op::Dropout { x, mask } => {
                let dx = g.iter().zip(mask).map(|(gg, m)| gg * m).collect();
                accumulate(grads, *x, dx);
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (gg, &i) in g.iter().zip(argmax) {
                    dx[i] += gg;
                }
                accumulate(grads, *x, dx);
            }
            Op::AvgPool { x, k } => {
                let xs = self.shape(*x);
                let (outer, w, c) = Tensor::axis_extents(xs, 2);
                let ow = out_shape[2];
                let mut dx = vec![0.0; self.value(*x).len()];
                for o in 0..outer {
                    for p in 0..ow {
                        let end = ((p + 1) * k).min(w);
                        let n = (end - p * k) as f64;
                        for ch in 0..c {
                            let gg = g[(o * ow + p) * c + ch] / n;
                            for t in p * k..end {
                                dx[(o * w + t) * c + ch] += gg;
                            }
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    accumulate(grads, *a, g.iter().zip(bv).map(|(gg, y)| gg * y).collect());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.iter().zip(av).map(|(gg, y)| gg * y).collect());
                }
            }
            Op::Add { a, b } => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::ScaleRows { x, w } => {
                let c = *out_shape.last().unwrap();
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                if self.wants(*x) {
                    accumulate(grads, *x, g.iter().enumerate().map(|(i, gg)| gg * wv[i / c]).collect());
                }
                if self.wants(*w) {
                    let dw = g.chunks_exact(c).zip(xv.chunks_exact(c)).map(|(gr, xr)| dot(gr, xr)).collect();
                    accumulate(grads, *w, dw);
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x);
                let (outer, n, inner) = Tensor::axis_extents(xs, *axis);
                let len = out_shape[*axis];
                let mut dx = vec![0.0; self.value(*x).len()];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                accumulate(grads, *x, dx);
            }
            Op::Concat { a, b, axis } => {
                let (outer, na, inner) = Tensor::axis_extents(self.shape(*a), *axis);
                let nb = self.shape(*b)[*axis];
                let (mut da, mut db) = (Vec::new(), Vec::new());
                for o in 0..outer {
                    let base = o * (na + nb) * inner;
                    da.extend_from_slice(&g[base..base + na * inner]);
                    db.extend_from_slice(&g[base + na * inner..base + (na + nb) * inner]);
                }
                if self.wants(*a) {
                    accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    accumulate(grads, *b, db);
                }
            }
            Op::Reshape { x } => accumulate(grads, *x, g.to_vec()),
            Op::SwapAxes { x, a, b } => {
                let src = swap_index_map(self.shape(*x), *a, *b);
                let mut dx = vec![0.0; g.len()];
                for (gg, &i) in g.iter().zip(&src) {
                    dx[i] = *gg;
                }
                accumulate(grads, *x, dx);
            }
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let scale = match node.op {
                    Op::MeanAxis { .. } => 1.0 / self.shape(*x)[*axis] as f64,
                    _ => 1.0,
                };
                let (outer, n, inner) = Tensor::axis_extents(self.shape(*x), *axis);
                let mut dx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for t in 0..n {
                        for d in 0..inner {
                            dx[(o * n + t) * inner + d] = g[o * inner + d] * scale;
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Sum { x } => accumulate(grads, *x, vec![g[0]; self.value(*x).len()]),
            Op::Softmax { x } => {
                let c = *out_shape.last().unwrap();
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for ((dr, gr), yr) in dx.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(y.chunks_exact(c)) {
                    let s = dot(gr, yr);
                    for ((d, gg), yy) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = yy * (gg - s);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::CrossEntropy { p, labels, floor } => {
                let pv = self.value(*p).data();
                let c = self.shape(*p)[1];
                let scale = g[0] / labels.len() as f64;
                let mut dp = vec![0.0; pv.len()];
                for (r, &l) in labels.iter().enumerate() {
                    dp[r * c + l] = -scale / (pv[r * c + l] + floor);
                }
                accumulate(grads, *p, dp);
            }
            Op::SoftmaxCrossEntropy { x, labels, probs } => {
                let c = self.shape(*x)[1];
                let scale = g[0] / labels.len() as f64;
                let mut dx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    dx[r * c + l] -= scale;
                }
                accumulate(grads, *x, dx);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
        slot => *slot = Some(contrib),
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

/// For each output position of `swap_axes(shape, a, b)`, the flat input index it reads.
fn swap_index_map(shape: &[usize], a: usize, b: usize) -> Vec<usize> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let mut out_shape = shape.to_vec();
    out_shape.swap(a, b);
    let mut strides = in_strides.clone();
    strides.swap(a, b);
    let n: usize = shape.iter().product();
    let mut idx = vec![0usize; rank];
    let mut map = Vec::with_capacity(n);
    for _ in 0..n {
        map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

/// 64-bit FNV-1a.
pub(crate) struct Fnv(u64);

impl Fnv {
    pub(crate) fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
    pub(crate) fn byte(&mut self, b: u8) {
        self.0 ^= b as u64;
        self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
    }
    pub(crate) fn word(&mut self, w: u64) {
        w.to_le_bytes().iter().for_each(|&b| self.byte(b));
    }
    pub(crate) fn finish(&self) -> u64 {
        self.0
    }
}
