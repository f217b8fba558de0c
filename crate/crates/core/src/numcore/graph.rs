//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operator application as a node. Nodes are
//! appended in evaluation order, so walking them backwards is a valid
//! topological order for the reverse sweep.

use std::cmp::Ordering;

use super::kernels::{col2im, gemm, im2col, Window};
use super::tensor::{Precision, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch statistics produced by a training-mode batch norm, used by the
/// caller to update running estimates.
#[derive(Debug, Clone)]
pub struct BnStats {
    pub mean: Vec<f64>,
    /// Unbiased per-channel variance.
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    AddBroadcastChannels(Var, Var),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    RowDot(Var, Var),
    Relu(Var),
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        stride: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    LogSumExp {
        x: Var,
        softmax: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<u32>,
        ignore: u32,
        count: usize,
    },
    SumAll(Var),
    MeanAll(Var),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Computation tape.
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn rank_err(op: &'static str, shape: &[usize], reason: &str) -> Error {
    Error::InvalidShape {
        op,
        shape: shape.to_vec(),
        reason: reason.to_string(),
    }
}

fn add_into(acc: &mut Option<Tensor>, delta: Tensor) {
    match acc {
        Some(t) => {
            for (a, d) in t.data_mut().iter_mut().zip(delta.data()) {
                *a += d;
            }
        }
        None => *acc = Some(delta),
    }
}

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Graph {
            nodes: Vec::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let value = value.rounded(self.precision);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Adds an input tensor. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A gradient-free copy of `v`'s current value.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn binary_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary_same("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary_same("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary_same("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x * factor).collect())
            .expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, factor), rg)
    }

    /// `[N, D] + [D]`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        if tx.ndim() != 2 || tb.shape() != [tx.shape()[1]] {
            return Err(shape_err("add_row_bias", tx.shape(), tb.shape()));
        }
        let d = tx.shape()[1];
        let mut out = tx.clone();
        for row in out.data_mut().chunks_mut(d.max(1)) {
            for (o, bias) in row.iter_mut().zip(tb.data()) {
                *o += bias;
            }
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(out, Op::AddRowBias(x, b), rg))
    }

    /// `[N, C, ...] + [C]`, broadcasting over all trailing axes.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        if tx.ndim() < 2 || tb.shape() != [tx.shape()[1]] {
            return Err(shape_err("add_channel_bias", tx.shape(), tb.shape()));
        }
        let c = tx.shape()[1];
        let spatial: usize = tx.shape()[2..].iter().product();
        let mut out = tx.clone();
        for (i, plane) in out.data_mut().chunks_mut(spatial.max(1)).enumerate() {
            let bias = tb.data()[i % c];
            plane.iter_mut().for_each(|o| *o += bias);
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(out, Op::AddChannelBias(x, b), rg))
    }

    /// `[N, C, H, W] + [N, C]`: adds one value per (sample, channel) plane.
    pub fn add_broadcast_channels(&mut self, x: Var, v: Var) -> Result<Var> {
        let (tx, tv) = (self.value(x), self.value(v));
        if tx.ndim() != 4 || tv.shape() != &tx.shape()[..2] {
            return Err(shape_err("add_broadcast_channels", tx.shape(), tv.shape()));
        }
        let spatial = tx.shape()[2] * tx.shape()[3];
        let mut out = tx.clone();
        for (plane, add) in out.data_mut().chunks_mut(spatial.max(1)).zip(tv.data()) {
            plane.iter_mut().for_each(|o| *o += add);
        }
        let rg = self.rg(&[x, v]);
        Ok(self.push(out, Op::AddBroadcastChannels(x, v), rg))
    }

    /// `[M, K] · [K, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 2 || tb.ndim() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        let t = Tensor::new([m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    /// `[M, K] · [N, K]ᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 2 || tb.ndim() != 2 || ta.shape()[1] != tb.shape()[1] {
            return Err(shape_err("matmul_bt", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), true, &mut out, false);
        let t = Tensor::new([m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::MatMulBt(a, b), rg))
    }

    /// Fully connected layer: `x · wᵀ + b` with `w` shaped `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul_bt(x, w)?;
        self.add_row_bias(y, b)
    }

    /// Row-wise dot product of two `[N, D]` tensors, giving `[N]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 2 || ta.shape() != tb.shape() {
            return Err(shape_err("row_dot", ta.shape(), tb.shape()));
        }
        let (n, d) = (ta.shape()[0], ta.shape()[1]);
        let out = (0..n)
            .map(|i| {
                ta.data()[i * d..(i + 1) * d]
                    .iter()
                    .zip(&tb.data()[i * d..(i + 1) * d])
                    .map(|(x, y)| x * y)
                    .sum()
            })
            .collect();
        let t = Tensor::new([n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::RowDot(a, b), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let t = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| v.max(0.0)).collect())
            .expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::Relu(x), rg)
    }

    fn conv_window(&self, op: &'static str, x: &Tensor, w: &Tensor) -> Result<(usize, usize, Window)> {
        if x.ndim() != 4 || w.ndim() != 4 || w.shape()[2] != w.shape()[3] {
            return Err(shape_err(op, x.shape(), w.shape()));
        }
        let [n, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        Ok((
            n,
            c,
            Window {
                channels: c,
                height: h,
                width: wd,
                kernel: w.shape()[2],
                stride: 1,
                pad: 0,
            },
        ))
    }

    /// 2-D convolution, `x: [N, C, H, W]`, `w: [O, C, k, k]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (n, c, mut win) = self.conv_window("conv2d", tx, tw)?;
        if tw.shape()[1] != c {
            return Err(shape_err("conv2d", tx.shape(), tw.shape()));
        }
        if stride == 0 || win.height + 2 * pad < win.kernel || win.width + 2 * pad < win.kernel {
            return Err(rank_err("conv2d", tx.shape(), "input smaller than kernel"));
        }
        win.stride = stride;
        win.pad = pad;
        let o = tw.shape()[0];
        let (ho, wo) = (win.out_height(), win.out_width());
        let (rows, cols) = (win.col_rows(), win.col_cols());
        let img = c * win.height * win.width;
        let mut out = vec![0.0; n * o * cols];
        let mut col = vec![0.0; rows * cols];
        for i in 0..n {
            im2col(&tx.data()[i * img..(i + 1) * img], &win, &mut col);
            gemm(o, rows, cols, tw.data(), false, &col, false, &mut out[i * o * cols..(i + 1) * o * cols], false);
        }
        let t = Tensor::new([n, o, ho, wo], out)?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(t, Op::Conv2d { x, w, stride, pad }, rg))
    }

    /// Transposed convolution without padding, `x: [N, I, H, W]`,
    /// `w: [I, O, k, k]`; output is `[N, O, (H-1)·s + k, (W-1)·s + k]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.ndim() != 4 || tw.ndim() != 4 || tw.shape()[0] != tx.shape()[1] || tw.shape()[2] != tw.shape()[3] {
            return Err(shape_err("conv_transpose2d", tx.shape(), tw.shape()));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv_transpose2d: stride 0".into()));
        }
        let [n, ci, h, wd] = [tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]];
        let (co, k) = (tw.shape()[1], tw.shape()[2]);
        let win = Window {
            channels: co,
            height: (h - 1) * stride + k,
            width: (wd - 1) * stride + k,
            kernel: k,
            stride,
            pad: 0,
        };
        let (rows, cols) = (win.col_rows(), h * wd);
        let out_img = co * win.height * win.width;
        let mut out = vec![0.0; n * out_img];
        let mut col = vec![0.0; rows * cols];
        for i in 0..n {
            gemm(rows, ci, cols, tw.data(), true, &tx.data()[i * ci * cols..(i + 1) * ci * cols], false, &mut col, false);
            col2im(&col, &win, &mut out[i * out_img..(i + 1) * out_img]);
        }
        let t = Tensor::new([n, co, win.height, win.width], out)?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(t, Op::ConvTranspose2d { x, w, stride }, rg))
    }

    /// Per-channel batch normalization over `[N, C, ...]`.
    ///
    /// In training mode normalizes with batch statistics and returns them;
    /// in eval mode normalizes with the supplied running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Option<BnStats>)> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        if tx.ndim() < 2 {
            return Err(rank_err("batch_norm", tx.shape(), "expected [N, C, ...]"));
        }
        let (n, c) = (tx.shape()[0], tx.shape()[1]);
        if tg.shape() != [c] || tb.shape() != [c] {
            return Err(shape_err("batch_norm", tx.shape(), tg.shape()));
        }
        let spatial: usize = tx.shape()[2..].iter().product();
        let m = n * spatial;
        let train = running.is_none();
        let (mean, var_biased, stats) = match running {
            Some((rm, rv)) => {
                if rm.len() != c || rv.len() != c {
                    return Err(shape_err("batch_norm", tx.shape(), &[rm.len()]));
                }
                (rm.to_vec(), rv.to_vec(), None)
            }
            None => {
                if m == 0 {
                    return Err(rank_err("batch_norm", tx.shape(), "empty batch in training mode"));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..n {
                        let base = (b * c + ch) * spatial;
                        s += tx.data()[base..base + spatial].iter().sum::<f64>();
                    }
                    mean[ch] = s / m as f64;
                    let mut ss = 0.0;
                    for b in 0..n {
                        let base = (b * c + ch) * spatial;
                        ss += tx.data()[base..base + spatial].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
                    }
                    var[ch] = ss / m as f64;
                }
                let unbiased = var
                    .iter()
                    .map(|v| if m > 1 { v * m as f64 / (m - 1) as f64 } else { *v })
                    .collect();
                let stats = BnStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
        };
        let inv_std: Vec<f64> = var_biased.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; tx.numel()];
        let mut out = vec![0.0; tx.numel()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * spatial;
                for s in 0..spatial {
                    let h = (tx.data()[base + s] - mean[ch]) * inv_std[ch];
                    xhat[base + s] = h;
                    out[base + s] = tg.data()[ch] * h + tb.data()[ch];
                }
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        let v = self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        );
        Ok((v, stats))
    }

    /// 2×2 max pooling with stride 2 (odd trailing rows/columns dropped).
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.ndim() != 4 || tx.shape()[2] < 2 || tx.shape()[3] < 2 {
            return Err(rank_err("max_pool2", tx.shape(), "expected [N, C, H>=2, W>=2]"));
        }
        let [n, c, h, w] = [tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]];
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if tx.data()[idx] > tx.data()[best] {
                            best = idx;
                        }
                    }
                    out.push(tx.data()[best]);
                    argmax.push(best);
                }
            }
        }
        let t = Tensor::new([n, c, ho, wo], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::MaxPool2 { x, argmax }, rg))
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.ndim() != 4 {
            return Err(rank_err("global_avg_pool", tx.shape(), "expected [N, C, H, W]"));
        }
        let (n, c) = (tx.shape()[0], tx.shape()[1]);
        let spatial = tx.shape()[2] * tx.shape()[3];
        if spatial == 0 {
            return Err(rank_err("global_avg_pool", tx.shape(), "empty spatial extent"));
        }
        let out = tx
            .data()
            .chunks(spatial)
            .map(|p| p.iter().sum::<f64>() / spatial as f64)
            .collect();
        let t = Tensor::new([n, c], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::GlobalAvgPool(x), rg))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(rank_err("concat", &base, "axis out of range"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(shape_err("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(parts);
        Ok(self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Scales every row of `[N, D]` to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.ndim() != 2 {
            return Err(rank_err("l2_normalize", tx.shape(), "expected [N, D]"));
        }
        let d = tx.shape()[1];
        let mut norms = Vec::with_capacity(tx.shape()[0]);
        let mut out = Vec::with_capacity(tx.numel());
        for (i, row) in tx.data().chunks(d.max(1)).enumerate().take(tx.shape()[0]) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > NORM_EPS) {
                return Err(Error::DegenerateNorm { op: "l2_normalize", row: i });
            }
            norms.push(norm);
            out.extend(row.iter().map(|v| v / norm));
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::L2Normalize { x, norms }, rg))
    }

    /// Row-wise `log Σ exp` of `[N, D]`, giving `[N]`.
    ///
    /// The max is subtracted before exponentiation, and the exponentials are
    /// summed in ascending order of their arguments, so the result does not
    /// depend on the column order.
    pub fn log_sum_exp(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.ndim() != 2 || tx.shape()[1] == 0 {
            return Err(rank_err("log_sum_exp", tx.shape(), "expected [N, D] with D > 0"));
        }
        let (n, d) = (tx.shape()[0], tx.shape()[1]);
        let mut out = Vec::with_capacity(n);
        let mut softmax = vec![0.0; n * d];
        let mut sorted = Vec::with_capacity(d);
        for i in 0..n {
            let row = &tx.data()[i * d..(i + 1) * d];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !m.is_finite() {
                return Err(Error::NonFinite(format!("log_sum_exp row {i} max {m}")));
            }
            sorted.clear();
            sorted.extend_from_slice(row);
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
            let s: f64 = sorted.iter().map(|v| (v - m).exp()).sum();
            out.push(m + s.ln());
            for (p, v) in softmax[i * d..(i + 1) * d].iter_mut().zip(row) {
                *p = (v - m).exp() / s;
            }
        }
        let t = Tensor::new([n], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::LogSumExp { x, softmax }, rg))
    }

    /// Mean softmax cross-entropy over logits `[N, C, ...]` (class axis 1).
    ///
    /// `labels` holds one class index per `(n, ...)` position; positions
    /// labelled `ignore` contribute neither loss nor gradient.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[u32], ignore: u32) -> Result<Var> {
        let tl = self.value(logits);
        if tl.ndim() < 2 {
            return Err(rank_err("softmax_cross_entropy", tl.shape(), "expected [N, C, ...]"));
        }
        let (n, c) = (tl.shape()[0], tl.shape()[1]);
        let spatial: usize = tl.shape()[2..].iter().product();
        if labels.len() != n * spatial {
            return Err(shape_err("softmax_cross_entropy", tl.shape(), &[labels.len()]));
        }
        let mut probs = vec![0.0; tl.numel()];
        let mut total = 0.0;
        let mut count = 0;
        let mut col = vec![0.0; c];
        for b in 0..n {
            for s in 0..spatial {
                let label = labels[b * spatial + s];
                for (ch, v) in col.iter_mut().enumerate() {
                    *v = tl.data()[(b * c + ch) * spatial + s];
                }
                let m = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = col.iter().map(|v| (v - m).exp()).sum();
                for (ch, v) in col.iter().enumerate() {
                    probs[(b * c + ch) * spatial + s] = (v - m).exp() / z;
                }
                if label == ignore {
                    continue;
                }
                if label as usize >= c {
                    return Err(Error::InvalidArgument(format!(
                        "label {label} outside {c} classes"
                    )));
                }
                total += m + z.ln() - col[label as usize];
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::NoValidPixels);
        }
        let t = Tensor::scalar(total / count as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            t,
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
                ignore,
                count,
            },
            rg,
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.numel() == 0 {
            return Err(rank_err("mean_all", tx.shape(), "empty tensor"));
        }
        let s = tx.data().iter().sum::<f64>() / tx.numel() as f64;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::MeanAll(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(rank_err("backward", lt.shape(), "loss must be a scalar"));
        }
        if !lt.all_finite() {
            return Err(Error::NonFinite(format!("loss value {}", lt.item())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lt.shape().to_vec(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(mut g) = grads[idx].take() else { continue };
            self.precision.round_slice(g.data_mut());
            for (parent, delta) in self.vjp(node, &g)? {
                if self.nodes[parent.0].requires_grad {
                    add_into(&mut grads[parent.0], delta);
                }
            }
            grads[idx] = Some(g);
        }
        for g in grads.iter_mut().flatten() {
            self.precision.round_slice(g.data_mut());
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Vector-Jacobian products of one node with respect to its inputs.
    fn vjp(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let gd = g.data();
        let like = |v: Var, data: Vec<f64>| Tensor::new(self.shape(v).to_vec(), data).expect("shape preserved");
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, like(*b, gd.iter().map(|v| -v).collect())));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    out.push((*a, like(*a, gd.iter().zip(tb.data()).map(|(g, y)| g * y).collect())));
                }
                if self.needs(*b) {
                    out.push((*b, like(*b, gd.iter().zip(ta.data()).map(|(g, x)| g * x).collect())));
                }
            }
            Op::Scale(a, f) => out.push((*a, like(*a, gd.iter().map(|v| v * f).collect()))),
            Op::AddRowBias(x, b) => {
                out.push((*x, g.clone()));
                if self.needs(*b) {
                    let d = self.shape(*b)[0];
                    let mut db = vec![0.0; d];
                    for row in gd.chunks(d.max(1)) {
                        db.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                    }
                    out.push((*b, like(*b, db)));
                }
            }
            Op::AddChannelBias(x, b) => {
                out.push((*x, g.clone()));
                if self.needs(*b) {
                    let c = self.shape(*b)[0];
                    let spatial: usize = g.shape()[2..].iter().product();
                    let mut db = vec![0.0; c];
                    for (i, plane) in gd.chunks(spatial.max(1)).enumerate() {
                        db[i % c] += plane.iter().sum::<f64>();
                    }
                    out.push((*b, like(*b, db)));
                }
            }
            Op::AddBroadcastChannels(x, v) => {
                out.push((*x, g.clone()));
                if self.needs(*v) {
                    let spatial = g.shape()[2] * g.shape()[3];
                    let dv = gd.chunks(spatial.max(1)).map(|p| p.iter().sum()).collect();
                    out.push((*v, like(*v, dv)));
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, gd, false, tb.data(), true, &mut da, false);
                    out.push((*a, like(*a, da)));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, gd, false, &mut db, false);
                    out.push((*b, like(*b, db)));
                }
            }
            Op::MatMulBt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, gd, false, tb.data(), false, &mut da, false);
                    out.push((*a, like(*a, da)));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; n * k];
                    gemm(n, m, k, gd, true, ta.data(), false, &mut db, false);
                    out.push((*b, like(*b, db)));
                }
            }
            Op::RowDot(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let d = ta.shape()[1];
                let scaled = |other: &Tensor| {
                    other
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, v)| v * gd[i / d.max(1)])
                        .collect::<Vec<_>>()
                };
                if self.needs(*a) {
                    out.push((*a, like(*a, scaled(tb))));
                }
                if self.needs(*b) {
                    out.push((*b, like(*b, scaled(ta))));
                }
            }
            Op::Relu(x) => {
                let tx = self.value(*x);
                out.push((
                    *x,
                    like(*x, gd.iter().zip(tx.data()).map(|(g, v)| if *v > 0.0 { *g } else { 0.0 }).collect()),
                ));
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (n, c, mut win) = self.conv_window("conv2d", tx, tw)?;
                win.stride = *stride;
                win.pad = *pad;
                let o = tw.shape()[0];
                let (rows, cols) = (win.col_rows(), win.col_cols());
                let img = c * win.height * win.width;
                let mut col = vec![0.0; rows * cols];
                let mut dw = vec![0.0; tw.numel()];
                let mut dx = vec![0.0; tx.numel()];
                for i in 0..n {
                    let go = &gd[i * o * cols..(i + 1) * o * cols];
                    if self.needs(*w) {
                        im2col(&tx.data()[i * img..(i + 1) * img], &win, &mut col);
                        gemm(o, cols, rows, go, false, &col, true, &mut dw, true);
                    }
                    if self.needs(*x) {
                        gemm(rows, o, cols, tw.data(), true, go, false, &mut col, false);
                        col2im(&col, &win, &mut dx[i * img..(i + 1) * img]);
                    }
                }
                if self.needs(*x) {
                    out.push((*x, like(*x, dx)));
                }
                if self.needs(*w) {
                    out.push((*w, like(*w, dw)));
                }
            }
            Op::ConvTranspose2d { x, w, stride } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let [n, ci, h, wd] = [tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]];
                let (co, k) = (tw.shape()[1], tw.shape()[2]);
                let win = Window {
                    channels: co,
                    height: (h - 1) * stride + k,
                    width: (wd - 1) * stride + k,
                    kernel: k,
                    stride: *stride,
                    pad: 0,
                };
                let (rows, cols) = (win.col_rows(), h * wd);
                let out_img = co * win.height * win.width;
                let mut col = vec![0.0; rows * cols];
                let mut dw = vec![0.0; tw.numel()];
                let mut dx = vec![0.0; tx.numel()];
                for i in 0..n {
                    im2col(&gd[i * out_img..(i + 1) * out_img], &win, &mut col);
                    if self.needs(*x) {
                        gemm(ci, rows, cols, tw.data(), false, &col, false, &mut dx[i * ci * cols..(i + 1) * ci * cols], false);
                    }
                    if self.needs(*w) {
                        gemm(ci, cols, rows, &tx.data()[i * ci * cols..(i + 1) * ci * cols], false, &col, true, &mut dw, true);
                    }
                }
                if self.needs(*x) {
                    out.push((*x, like(*x, dx)));
                }
                if self.needs(*w) {
                    out.push((*w, like(*w, dw)));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let tx = self.value(*x);
                let tg = self.value(*gamma);
                let (n, c) = (tx.shape()[0], tx.shape()[1]);
                let spatial: usize = tx.shape()[2..].iter().product();
                let m = (n * spatial) as f64;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * spatial;
                        for s in 0..spatial {
                            dgamma[ch] += gd[base + s] * xhat[base + s];
                            dbeta[ch] += gd[base + s];
                        }
                    }
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; tx.numel()];
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * spatial;
                            let scale = tg.data()[ch] * inv_std[ch];
                            for s in 0..spatial {
                                dx[base + s] = if *train {
                                    scale / m * (m * gd[base + s] - dbeta[ch] - xhat[base + s] * dgamma[ch])
                                } else {
                                    scale * gd[base + s]
                                };
                            }
                        }
                    }
                    out.push((*x, like(*x, dx)));
                }
                if self.needs(*gamma) {
                    out.push((*gamma, like(*gamma, dgamma)));
                }
                if self.needs(*beta) {
                    out.push((*beta, like(*beta, dbeta)));
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (g, &i) in gd.iter().zip(argmax) {
                    dx[i] += g;
                }
                out.push((*x, like(*x, dx)));
            }
            Op::GlobalAvgPool(x) => {
                let tx = self.value(*x);
                let spatial = tx.shape()[2] * tx.shape()[3];
                let dx = (0..tx.numel()).map(|i| gd[i / spatial] / spatial as f64).collect();
                out.push((*x, like(*x, dx)));
            }
            Op::Concat { parts, axis } => {
                let shape = g.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = self.shape(p)[*axis] * inner;
                    if self.needs(p) {
                        let mut dp = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            dp.extend_from_slice(&gd[o * total + offset..o * total + offset + chunk]);
                        }
                        out.push((p, like(p, dp)));
                    }
                    offset += chunk;
                }
            }
            Op::L2Normalize { x, norms } => {
                let y = &node.value;
                let d = y.shape()[1];
                let mut dx = vec![0.0; y.numel()];
                for (i, norm) in norms.iter().enumerate() {
                    let yr = &y.data()[i * d..(i + 1) * d];
                    let gr = &gd[i * d..(i + 1) * d];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dx[i * d + j] = (gr[j] - yr[j] * dot) / norm;
                    }
                }
                out.push((*x, like(*x, dx)));
            }
            Op::LogSumExp { x, softmax } => {
                let d = self.shape(*x)[1];
                let dx = softmax.iter().enumerate().map(|(i, p)| p * gd[i / d]).collect();
                out.push((*x, like(*x, dx)));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels,
                ignore,
                count,
            } => {
                let shape = self.shape(*logits);
                let (n, c) = (shape[0], shape[1]);
                let spatial: usize = shape[2..].iter().product();
                let scale = gd[0] / *count as f64;
                let mut dl = vec![0.0; probs.len()];
                for b in 0..n {
                    for s in 0..spatial {
                        let label = labels[b * spatial + s];
                        if label == *ignore {
                            continue;
                        }
                        for ch in 0..c {
                            let i = (b * c + ch) * spatial + s;
                            let onehot = if ch == label as usize { 1.0 } else { 0.0 };
                            dl[i] = (probs[i] - onehot) * scale;
                        }
                    }
                }
                out.push((*logits, like(*logits, dl)));
            }
            Op::SumAll(x) => {
                let n = self.value(*x).numel();
                out.push((*x, like(*x, vec![gd[0]; n])));
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).numel();
                out.push((*x, like(*x, vec![gd[0] / n as f64; n])));
            }
            Op::Reshape(x) => out.push((*x, like(*x, gd.to_vec()))),
        }
        Ok(out)
    }
}
