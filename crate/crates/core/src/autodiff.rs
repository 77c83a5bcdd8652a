//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Operations
//! append a node and return its [`Var`] handle; inputs always refer to earlier
//! nodes, so the node list is already in topological order and
//! [`Tape::backward`] is a single reverse sweep.
//!
//! Gradients accumulate: calling `backward` twice without
//! [`Tape::zero_grad`] adds the second pass onto the first.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::quantizer::{self, PrecisionParam, QuantCache};
use crate::tensor::Tensor;

/// Variance floor used by batch normalization.
pub const BN_VAR_FLOOR: f32 = 1e-5;
/// Weight of the previous running statistic in the batch-norm update.
pub const BN_MOMENTUM: f32 = 0.9;

/// Handle of a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kh: usize, kw: usize, stride: usize, pad: usize) -> Result<Self> {
        let [n, c, h, w] = match input {
            &[n, c, h, w] => [n, c, h, w],
            other => {
                return Err(Error::Shape(format!(
                    "conv2d expects NCHW input, got {other:?}"
                )))
            }
        };
        if stride == 0 {
            return Err(Error::Shape("conv2d stride must be at least 1".into()));
        }
        if kh == 0 || kw == 0 || kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::Shape(format!(
                "kernel {kh}x{kw} does not fit input {h}x{w} with padding {pad}"
            )));
        }
        let span_h = h + 2 * pad - kh;
        let span_w = w + 2 * pad - kw;
        if !span_h.is_multiple_of(stride) || !span_w.is_multiple_of(stride) {
            return Err(Error::Shape(format!(
                "input {h}x{w}, kernel {kh}x{kw}, pad {pad} leaves a remainder at stride {stride}"
            )));
        }
        Ok(ConvGeom {
            n,
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh: span_h / stride + 1,
            ow: span_w / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.n * self.oh * self.ow
    }
}

/// Running statistics owned by a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState {
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
}

impl BnState {
    pub fn new(channels: usize) -> Self {
        BnState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }
}

#[derive(Debug)]
struct BnCache {
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
    /// Whether the variance was a live function of the batch (not floored,
    /// not running statistics).
    var_live: Vec<bool>,
    training: bool,
    channels: usize,
    inner: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Relu {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    GlobalAvgPool {
        x: Var,
    },
    Im2Col {
        x: Var,
        geom: ConvGeom,
    },
    ColsToNchw {
        x: Var,
        n: usize,
        f: usize,
        hw: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: BnCache,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
    FakeQuantize {
        x: Var,
        beta: Option<Var>,
        cache: QuantCache,
    },
    QuantizeGrad {
        x: Var,
        bits: u32,
        seed: u64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        &[r, c] => Ok((r, c)),
        other => Err(Error::Shape(format!(
            "{op} expects a matrix, got {other:?}"
        ))),
    }
}

/// `a[m×k] · b[k×n]`, accumulating each output row in a fixed order.
fn gemm(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `c[m×n] · b[k×n]ᵀ` → `[m×k]`.
fn gemm_nt(c: &[f32], b: &[f32], m: usize, n: usize, k: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * k];
    for i in 0..m {
        let crow = &c[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = crow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a[m×k]ᵀ · c[m×n]` → `[k×n]`.
fn gemm_tn(a: &[f32], c: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; k * n];
    for i in 0..m {
        let crow = &c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &cv) in orow.iter_mut().zip(crow) {
                *o += aip * cv;
            }
        }
    }
    out
}

fn im2col(x: &[f32], g: &ConvGeom) -> Vec<f32> {
    let cols = g.positions();
    let mut out = vec![0.0f32; g.patch_len() * cols];
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for n in 0..g.n {
                    let plane = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let base = (n * g.oh + oy) * g.ow;
                        for ox in 0..g.ow {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && (ix as usize) < g.w {
                                dst[base + ox] = plane[iy as usize * g.w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im(cols: &[f32], g: &ConvGeom) -> Vec<f32> {
    let positions = g.positions();
    let mut out = vec![0.0f32; g.n * g.c * g.h * g.w];
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * positions..(row + 1) * positions];
                for n in 0..g.n {
                    let offset = (n * g.c + c) * g.h * g.w;
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let base = (n * g.oh + oy) * g.ow;
                        for ox in 0..g.ow {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && (ix as usize) < g.w {
                                out[offset + iy as usize * g.w + ix as usize] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn accumulate(grads: &mut [Option<Vec<f32>>], var: Var, contribution: Vec<f32>) {
    match &mut grads[var.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = dims2(ta, "matmul")?;
        let (k2, n) = dims2(tb, "matmul")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let out = Tensor::new(vec![m, n], gemm(ta.data(), tb.data(), m, k, n))?;
        Ok(self.push(out, Op::MatMul { a, b }))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Dimension {
                op,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul { a, b }))
    }

    /// Adds a `[n]` bias to every row of a `[m×n]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (_, n) = dims2(tx, "add_bias")?;
        if tb.shape() != [n] {
            return Err(Error::Dimension {
                op: "add_bias",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddBias { x, bias }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| v.max(0.0)).collect();
        let out = Tensor::new(tx.shape().to_vec(), data).expect("shape preserved");
        self.push(out, Op::Relu { x })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        self.push(Tensor::scalar(total as f32), Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.is_empty() {
            return Err(Error::Empty("mean"));
        }
        let total: f64 = tx.data().iter().map(|&v| v as f64).sum();
        let out = Tensor::scalar((total / tx.numel() as f64) as f32);
        Ok(self.push(out, Op::Mean { x }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape { x }))
    }

    /// Collapses every dimension after the first.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape();
        let n = *shape
            .first()
            .ok_or_else(|| Error::Shape("flatten of rank-0 tensor".into()))?;
        let rest: usize = shape[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    /// `[N×C×H×W]` → `[N×C]` by spatial averaging.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let [n, c, h, w] = match tx.shape() {
            &[n, c, h, w] => [n, c, h, w],
            other => {
                return Err(Error::Shape(format!(
                    "global_avg_pool expects NCHW, got {other:?}"
                )))
            }
        };
        let hw = h * w;
        let data = tx
            .data()
            .chunks(hw)
            .map(|plane| (plane.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32)
            .collect();
        let out = Tensor::new(vec![n, c], data)?;
        Ok(self.push(out, Op::GlobalAvgPool { x }))
    }

    /// Unfolds every receptive field of `x` into a column:
    /// `[C·kh·kw × N·H'·W']`.
    pub fn im2col(
        &mut self,
        x: Var,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let tx = self.value(x);
        let geom = ConvGeom::new(tx.shape(), kh, kw, stride, pad)?;
        let out = Tensor::new(
            vec![geom.patch_len(), geom.positions()],
            im2col(tx.data(), &geom),
        )?;
        Ok(self.push(out, Op::Im2Col { x, geom }))
    }

    fn cols_to_nchw(&mut self, x: Var, n: usize, oh: usize, ow: usize) -> Result<Var> {
        let tx = self.value(x);
        let (f, cols) = dims2(tx, "cols_to_nchw")?;
        let hw = oh * ow;
        debug_assert_eq!(cols, n * hw);
        let mut data = vec![0.0f32; f * cols];
        for fi in 0..f {
            for ni in 0..n {
                let src = &tx.data()[fi * cols + ni * hw..fi * cols + (ni + 1) * hw];
                data[(ni * f + fi) * hw..(ni * f + fi + 1) * hw].copy_from_slice(src);
            }
        }
        let out = Tensor::new(vec![n, f, oh, ow], data)?;
        Ok(self.push(out, Op::ColsToNchw { x, n, f, hw }))
    }

    /// Zero-padded cross-correlation, lowered to patch extraction followed by
    /// a single GEMM so its backward reuses `matmul`'s.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (
            self.value(x).shape().to_vec(),
            self.value(w).shape().to_vec(),
        );
        let [f, c, kh, kw] = match ws.as_slice() {
            &[f, c, kh, kw] => [f, c, kh, kw],
            _ => {
                return Err(Error::Shape(format!(
                    "conv2d expects FCkhkw weights, got {ws:?}"
                )))
            }
        };
        if xs.len() != 4 || xs[1] != c {
            return Err(Error::Dimension {
                op: "conv2d",
                lhs: xs,
                rhs: ws,
            });
        }
        let geom = ConvGeom::new(&xs, kh, kw, stride, pad)?;
        let cols = self.im2col(x, kh, kw, stride, pad)?;
        let wmat = self.reshape(w, &[f, c * kh * kw])?;
        let out = self.matmul(wmat, cols)?;
        self.cols_to_nchw(out, geom.n, geom.oh, geom.ow)
    }

    /// Per-channel normalization over the batch (and spatial dimensions for
    /// NCHW input). In training mode the batch statistics are used and folded
    /// into `state`; otherwise the running statistics are used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BnState,
        training: bool,
    ) -> Result<Var> {
        let tx = self.value(x);
        let shape = tx.shape().to_vec();
        let (n, channels, inner) = match shape.as_slice() {
            &[n, c] => (n, c, 1),
            &[n, c, h, w] => (n, c, h * w),
            other => {
                return Err(Error::Shape(format!(
                    "batch_norm expects NC or NCHW, got {other:?}"
                )))
            }
        };
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.shape() != [channels] || tb.shape() != [channels] {
            return Err(Error::Dimension {
                op: "batch_norm",
                lhs: shape,
                rhs: tg.shape().to_vec(),
            });
        }
        if state.running_mean.len() != channels {
            return Err(Error::Length(format!(
                "batch_norm state has {} channels, input has {channels}",
                state.running_mean.len()
            )));
        }
        if training && n < 2 {
            return Err(Error::SingleSampleBatchNorm);
        }
        let count = n * inner;
        let data = tx.data();
        let mut mean = vec![0.0f32; channels];
        let mut inv_std = vec![0.0f32; channels];
        let mut var_live = vec![false; channels];
        for c in 0..channels {
            if training {
                let mut sum = 0.0f64;
                for ni in 0..n {
                    let off = (ni * channels + c) * inner;
                    sum += data[off..off + inner]
                        .iter()
                        .map(|&v| v as f64)
                        .sum::<f64>();
                }
                let mu = sum / count as f64;
                let mut sq = 0.0f64;
                for ni in 0..n {
                    let off = (ni * channels + c) * inner;
                    sq += data[off..off + inner]
                        .iter()
                        .map(|&v| {
                            let d = v as f64 - mu;
                            d * d
                        })
                        .sum::<f64>();
                }
                let var = (sq / count as f64) as f32;
                mean[c] = mu as f32;
                var_live[c] = var >= BN_VAR_FLOOR;
                inv_std[c] = 1.0 / var.max(BN_VAR_FLOOR).sqrt();
                let unbiased = (sq / (count - 1) as f64) as f32;
                state.running_mean[c] =
                    BN_MOMENTUM * state.running_mean[c] + (1.0 - BN_MOMENTUM) * mu as f32;
                state.running_var[c] =
                    BN_MOMENTUM * state.running_var[c] + (1.0 - BN_MOMENTUM) * unbiased;
            } else {
                mean[c] = state.running_mean[c];
                inv_std[c] = 1.0 / state.running_var[c].max(BN_VAR_FLOOR).sqrt();
            }
        }
        let mut xhat = vec![0.0f32; data.len()];
        let mut out = vec![0.0f32; data.len()];
        for ni in 0..n {
            for c in 0..channels {
                let off = (ni * channels + c) * inner;
                let (g, b) = (tg.data()[c], tb.data()[c]);
                for i in off..off + inner {
                    let xh = (data[i] - mean[c]) * inv_std[c];
                    xhat[i] = xh;
                    out[i] = g * xh + b;
                }
            }
        }
        let cache = BnCache {
            xhat,
            inv_std,
            var_live,
            training,
            channels,
            inner,
        };
        let out = Tensor::new(shape, out)?;
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                cache,
            },
        ))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (n, k) = dims2(tl, "softmax_cross_entropy")?;
        if labels.len() != n {
            return Err(Error::Length(format!(
                "{} labels for {n} rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: k,
            });
        }
        let mut probs = vec![0.0f32; n * k];
        let mut loss = 0.0f64;
        for (i, row) in tl.data().chunks(k).enumerate() {
            let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
            let sum: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
            let log_sum = sum.ln();
            for (j, &v) in row.iter().enumerate() {
                probs[i * k + j] = ((v as f64 - max).exp() / sum) as f32;
            }
            loss -= row[labels[i]] as f64 - max - log_sum;
        }
        let out = Tensor::scalar((loss / n as f64) as f32);
        Ok(self.push(
            out,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Fake-quantizes `x` at the precision held by `p`. The gradient with
    /// respect to `beta` is accumulated into the leaf `beta`.
    pub fn fake_quantize(&mut self, x: Var, p: &PrecisionParam, beta: Var) -> Result<Var> {
        let (out, cache) = quantizer::fake_quantize(self.value(x), p)?;
        Ok(self.push(
            out,
            Op::FakeQuantize {
                x,
                beta: Some(beta),
                cache,
            },
        ))
    }

    /// Fake-quantizes `x` at a fixed bit width; no precision gradient.
    pub fn fake_quantize_fixed(&mut self, x: Var, bits: u32) -> Result<Var> {
        let (out, cache) = quantizer::fake_quantize_bits(self.value(x), bits)?;
        Ok(self.push(
            out,
            Op::FakeQuantize {
                x,
                beta: None,
                cache,
            },
        ))
    }

    /// Identity in the forward pass; stochastically rounds the incoming
    /// gradient to `bits` in the backward pass.
    pub fn quantize_grad(&mut self, x: Var, bits: u32, seed: u64) -> Var {
        let out = self.value(x).clone();
        self.push(out, Op::QuantizeGrad { x, bits, seed })
    }

    /// Back-propagates from a scalar `root`, adding into the stored gradients
    /// of every node that `root` depends on.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_value = self.value(root);
        if root_value.numel() != 1 {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for k in (0..=root.0).rev() {
            let Some(g) = grads[k].take() else { continue };
            self.propagate(k, &g, &mut grads)?;
            let node = &mut self.nodes[k];
            match &mut node.grad {
                Some(existing) => {
                    for (e, v) in existing.data_mut().iter_mut().zip(&g) {
                        *e += v;
                    }
                }
                slot @ None => *slot = Some(Tensor::new(node.value.shape().to_vec(), g)?),
            }
        }
        Ok(())
    }

    fn propagate(&self, k: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) -> Result<()> {
        let node = &self.nodes[k];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, kk) = dims2(ta, "matmul")?;
                let (_, n) = dims2(tb, "matmul")?;
                accumulate(grads, *a, gemm_nt(g, tb.data(), m, n, kk));
                accumulate(grads, *b, gemm_tn(ta.data(), g, m, kk, n));
            }
            Op::Add { a, b } => {
                accumulate(grads, *a, g.to_vec());
                accumulate(grads, *b, g.to_vec());
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                accumulate(
                    grads,
                    *a,
                    g.iter().zip(tb.data()).map(|(d, y)| d * y).collect(),
                );
                accumulate(
                    grads,
                    *b,
                    g.iter().zip(ta.data()).map(|(d, x)| d * x).collect(),
                );
            }
            Op::AddBias { x, bias } => {
                let n = self.value(*bias).numel();
                let mut db = vec![0.0f32; n];
                for row in g.chunks(n) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                accumulate(grads, *x, g.to_vec());
                accumulate(grads, *bias, db);
            }
            Op::Relu { x } => {
                let tx = self.value(*x);
                let dx = g
                    .iter()
                    .zip(tx.data())
                    .map(|(&d, &v)| if v > 0.0 { d } else { 0.0 })
                    .collect();
                accumulate(grads, *x, dx);
            }
            Op::Sum { x } => {
                accumulate(grads, *x, vec![g[0]; self.value(*x).numel()]);
            }
            Op::Mean { x } => {
                let n = self.value(*x).numel();
                accumulate(grads, *x, vec![g[0] / n as f32; n]);
            }
            Op::Reshape { x } => accumulate(grads, *x, g.to_vec()),
            Op::GlobalAvgPool { x } => {
                let shape = self.value(*x).shape();
                let hw = shape[2] * shape[3];
                let scale = 1.0 / hw as f32;
                let dx = g
                    .iter()
                    .flat_map(|&d| std::iter::repeat_n(d * scale, hw))
                    .collect();
                accumulate(grads, *x, dx);
            }
            Op::Im2Col { x, geom } => accumulate(grads, *x, col2im(g, geom)),
            Op::ColsToNchw { x, n, f, hw } => {
                let cols = n * hw;
                let mut dx = vec![0.0f32; f * cols];
                for fi in 0..*f {
                    for ni in 0..*n {
                        let src = &g[(ni * f + fi) * hw..(ni * f + fi + 1) * hw];
                        dx[fi * cols + ni * hw..fi * cols + (ni + 1) * hw].copy_from_slice(src);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                cache,
            } => {
                let tg = self.value(*gamma);
                let (channels, inner) = (cache.channels, cache.inner);
                let n = g.len() / (channels * inner);
                let count = (n * inner) as f32;
                let mut dgamma = vec![0.0f32; channels];
                let mut dbeta = vec![0.0f32; channels];
                // Per-channel sums of dxhat and dxhat·xhat.
                let mut sum_dxh = vec![0.0f64; channels];
                let mut sum_dxh_xh = vec![0.0f64; channels];
                for ni in 0..n {
                    for c in 0..channels {
                        let off = (ni * channels + c) * inner;
                        for i in off..off + inner {
                            dgamma[c] += g[i] * cache.xhat[i];
                            dbeta[c] += g[i];
                            let dxh = (g[i] * tg.data()[c]) as f64;
                            sum_dxh[c] += dxh;
                            sum_dxh_xh[c] += dxh * cache.xhat[i] as f64;
                        }
                    }
                }
                let mut dx = vec![0.0f32; g.len()];
                for ni in 0..n {
                    for c in 0..channels {
                        let off = (ni * channels + c) * inner;
                        let mean_dxh = (sum_dxh[c] / count as f64) as f32;
                        let mean_dxh_xh = (sum_dxh_xh[c] / count as f64) as f32;
                        for i in off..off + inner {
                            let dxh = g[i] * tg.data()[c];
                            dx[i] = match cache_mode(cache, c) {
                                BnMode::Running => dxh * cache.inv_std[c],
                                BnMode::Floored => (dxh - mean_dxh) * cache.inv_std[c],
                                BnMode::Live => {
                                    (dxh - mean_dxh - cache.xhat[i] * mean_dxh_xh)
                                        * cache.inv_std[c]
                                }
                            };
                        }
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *gamma, dgamma);
                accumulate(grads, *beta, dbeta);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = g[0] / n as f32;
                let mut dl = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    dl[i * k + l] -= 1.0;
                }
                for d in &mut dl {
                    *d *= scale;
                }
                accumulate(grads, *logits, dl);
            }
            Op::FakeQuantize { x, beta, cache } => {
                let upstream = Tensor::new(cache.shape.clone(), g.to_vec())?;
                let (dx, dbeta) = quantizer::fake_quantize_backward(&upstream, cache)?;
                accumulate(grads, *x, dx.into_data());
                if let Some(b) = beta {
                    let n = self.value(*b).numel();
                    let mut db = vec![0.0f32; n];
                    db[0] = dbeta as f32;
                    accumulate(grads, *b, db);
                }
            }
            Op::QuantizeGrad { x, bits, seed } => {
                let upstream = Tensor::new(node.value.shape().to_vec(), g.to_vec())?;
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let q = quantizer::quantize_gradient(&upstream, *bits, &mut rng)?;
                accumulate(grads, *x, q.into_data());
            }
        }
        Ok(())
    }
}

enum BnMode {
    Running,
    Floored,
    Live,
}

fn cache_mode(cache: &BnCache, c: usize) -> BnMode {
    if !cache.training {
        BnMode::Running
    } else if cache.var_live[c] {
        BnMode::Live
    } else {
        BnMode::Floored
    }
}
