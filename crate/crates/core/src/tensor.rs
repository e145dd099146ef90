//! Dense f32 tensors and a reverse-mode differentiation tape.
//!
//! Values are immutable once created; a [`Tape`] records operations during the
//! forward pass and replays them in reverse to accumulate gradients. The op
//! set is exactly what the fragment classifier needs: 3x3 same-padded
//! convolution, 2x2 max-pooling, batch normalization, dense layers, ReLU,
//! softmax, cross-entropy (with a fused softmax+CE backward rule), feature
//! concatenation and the Kronecker (outer) product, plus small elementwise
//! and reduction helpers for tests and losses.

use std::sync::Arc;

use crate::error::{Error, Result};

/// Dense n-dimensional array of f32 in row-major order.
///
/// Cloning is cheap (shared storage). Mutation via [`Tensor::data_mut`]
/// copies on write, so tensors behave as immutable values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
}

impl Tensor {
    /// Builds a tensor, validating that the shape matches the payload and
    /// that every value is finite. NaN/Inf at the boundary is an error, never
    /// a silent state.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f32>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::contract(format!(
                "tensor shape {shape:?} has a zero extent"
            )));
        }
        if numel != data.len() {
            return Err(Error::contract(format!(
                "tensor shape {shape:?} implies {numel} values, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::contract(format!(
                "non-finite value {} at index {pos}",
                data[pos]
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    /// Internal constructor for op outputs; skips the finiteness scan.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f32>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let numel = shape.iter().product();
        Tensor::from_raw(shape, vec![0.0; numel])
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Tensor {
        let numel = shape.iter().product();
        Tensor::from_raw(shape, vec![value; numel])
    }

    pub fn scalar(value: f32) -> Tensor {
        Tensor::from_raw(vec![1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Copy-on-write mutable access.
    pub fn data_mut(&mut self) -> &mut [f32] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bit-exact equality, distinguishing -0.0/+0.0 and comparing NaN bits.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Batch-statistics vs running-statistics selector for batchnorm and the
/// layers built on it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Running statistics of one batchnorm layer. Updated in train mode with
/// momentum 0.9, read in infer mode.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState {
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
}

impl BnState {
    pub fn new(features: usize) -> BnState {
        BnState {
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
        }
    }

    pub fn features(&self) -> usize {
        self.running_mean.len()
    }
}

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        k: f32,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    Relu {
        a: Var,
    },
    Flatten {
        a: Var,
    },
    Dense {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv3x3 {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        mode: Mode,
    },
    Concat {
        a: Var,
        b: Var,
    },
    StackRows {
        a: Var,
        b: Var,
    },
    TakeRows {
        x: Var,
        start: usize,
        row_size: usize,
    },
    Kronecker {
        a: Var,
        b: Var,
    },
    Softmax {
        x: Var,
    },
    CrossEntropy {
        probs: Var,
        labels: Vec<usize>,
    },
    /// Fused rule recorded when cross_entropy is applied directly to a
    /// softmax output; backward writes (p - onehot) straight to the logits.
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Var,
        labels: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`. `None` for nodes that do not require
    /// gradients; parameters untouched by the loss get an all-zero tensor.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Records a forward computation so gradients can be accumulated in reverse.
///
/// Single-owner by construction: a tape belongs to one training step and is
/// dropped afterwards. Inputs always precede the operations consuming them,
/// so one reverse sweep visits every node exactly once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Interprets a tensor as a stack of feature rows: `[N, F]` gives N rows of
/// F features, `[N, H, W, C]` gives N*H*W rows of C features (per-channel
/// statistics over batch and space).
fn rows_features(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [n, f] => Some((*n, *f)),
        [n, h, w, c] => Some((n * h * w, *c)),
        _ => None,
    }
}

/// Spatial view: `[H, W, C]` is a single image, `[N, H, W, C]` a batch.
fn spatial_dims(shape: &[usize]) -> Option<(usize, usize, usize, usize)> {
    match shape {
        [h, w, c] => Some((1, *h, *w, *c)),
        [n, h, w, c] => Some((*n, *h, *w, *c)),
        _ => None,
    }
}

fn rows_view(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [k] => Some((1, *k)),
        [n, k] => Some((*n, *k)),
        _ => None,
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn val(&self, v: Var) -> Tensor {
        self.nodes[v.0].value.clone()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf; backward() reports its gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_binary(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_binary(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_binary(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    fn elementwise_binary(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(f32, f32) -> f32,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape() != tb.shape() {
            return Err(Error::contract(format!(
                "{name}: shape {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let out: Vec<f32> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let req = self.req(a) || self.req(b);
        Ok(self.push(Tensor::from_raw(ta.shape().to_vec(), out), op, req))
    }

    pub fn scale(&mut self, a: Var, k: f32) -> Var {
        let ta = self.val(a);
        let out: Vec<f32> = ta.data().iter().map(|&x| x * k).collect();
        let req = self.req(a);
        self.push(
            Tensor::from_raw(ta.shape().to_vec(), out),
            Op::Scale { a, k },
            req,
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let ta = self.val(a);
        let s: f32 = ta.data().iter().sum();
        let req = self.req(a);
        self.push(Tensor::scalar(s), Op::Sum { a }, req)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let ta = self.val(a);
        let s: f32 = ta.data().iter().sum();
        let req = self.req(a);
        self.push(
            Tensor::scalar(s / ta.numel() as f32),
            Op::Mean { a },
            req,
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.val(a);
        let out: Vec<f32> = ta.data().iter().map(|&x| x.max(0.0)).collect();
        let req = self.req(a);
        self.push(
            Tensor::from_raw(ta.shape().to_vec(), out),
            Op::Relu { a },
            req,
        )
    }

    /// Collapses everything past the batch dimension: `[N,H,W,C] -> [N,H*W*C]`,
    /// `[H,W,C] -> [1,H*W*C]`, `[F] -> [1,F]`; rank-2 passes through.
    pub fn flatten(&mut self, a: Var) -> Var {
        let ta = self.val(a);
        let shape = match *ta.shape() {
            [n, h, w, c] => vec![n, h * w * c],
            [h, w, c] => vec![1, h * w * c],
            [n, f] => vec![n, f],
            [f] => vec![1, f],
            _ => vec![1, ta.numel()],
        };
        let req = self.req(a);
        self.push(
            Tensor::from_raw(shape, ta.data().to_vec()),
            Op::Flatten { a },
            req,
        )
    }

    /// 3x3 convolution with zero same-padding; spatial extent is preserved.
    /// Accepts `[H,W,Ci]` or `[N,H,W,Ci]` input with weight `[3,3,Ci,Co]`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let tx = self.val(x);
        let tw = self.val(w);
        let (n, h, wd, ci) = spatial_dims(tx.shape()).ok_or_else(|| {
            Error::contract(format!(
                "conv3x3: input rank {} (shape {:?}), expected 3 or 4",
                tx.rank(),
                tx.shape()
            ))
        })?;
        match *tw.shape() {
            [3, 3, wci, _] if wci == ci => {}
            [kh, kw, _, _] if kh != 3 || kw != 3 => {
                return Err(Error::contract(format!(
                    "conv3x3: kernel is {kh}x{kw}, expected 3x3"
                )));
            }
            [_, _, wci, _] => {
                return Err(Error::contract(format!(
                    "conv3x3: input channels {ci} != weight input channels {wci}"
                )));
            }
            _ => {
                return Err(Error::contract(format!(
                    "conv3x3: weight rank {} (shape {:?}), expected [3,3,Cin,Cout]",
                    tw.rank(),
                    tw.shape()
                )));
            }
        }
        let co = tw.shape()[3];
        let bias = match b {
            Some(bv) => {
                let tb = self.val(bv);
                if tb.shape() != [co] {
                    return Err(Error::contract(format!(
                        "conv3x3: bias shape {:?} != [{co}]",
                        tb.shape()
                    )));
                }
                Some(tb)
            }
            None => None,
        };

        let mut out = vec![0.0f32; n * h * wd * co];
        let xd = tx.data();
        let wd_ = tw.data();
        for ni in 0..n {
            for y in 0..h {
                for xx in 0..wd {
                    let o_off = ((ni * h + y) * wd + xx) * co;
                    let orow = &mut out[o_off..o_off + co];
                    if let Some(tb) = &bias {
                        orow.copy_from_slice(tb.data());
                    }
                    for dy in 0..3usize {
                        let yy = y as isize + dy as isize - 1;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        for dx in 0..3usize {
                            let xs = xx as isize + dx as isize - 1;
                            if xs < 0 || xs >= wd as isize {
                                continue;
                            }
                            let i_off = ((ni * h + yy as usize) * wd + xs as usize) * ci;
                            let k_off = (dy * 3 + dx) * ci * co;
                            for i in 0..ci {
                                let v = xd[i_off + i];
                                let wrow = &wd_[k_off + i * co..k_off + (i + 1) * co];
                                for (acc, &wv) in orow.iter_mut().zip(wrow) {
                                    *acc += v * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
        let shape = if tx.rank() == 3 {
            vec![h, wd, co]
        } else {
            vec![n, h, wd, co]
        };
        let req = self.req(x) || self.req(w) || b.is_some_and(|bv| self.req(bv));
        Ok(self.push(
            Tensor::from_raw(shape, out),
            Op::Conv3x3 { x, w, b },
            req,
        ))
    }

    /// 2x2 max-pooling with stride 2. Ties go to the first cell in row-major
    /// window order so the backward pass is deterministic.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let tx = self.val(x);
        let (n, h, w, c) = spatial_dims(tx.shape()).ok_or_else(|| {
            Error::contract(format!(
                "maxpool2: input rank {} (shape {:?}), expected 3 or 4",
                tx.rank(),
                tx.shape()
            ))
        })?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::contract(format!(
                "maxpool2: spatial extents must be even, got {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xd = tx.data();
        let mut out = vec![0.0f32; n * oh * ow * c];
        let mut argmax = vec![0u32; out.len()];
        for ni in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_idx = 0u32;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let idx =
                                    ((ni * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                                if xd[idx] > best {
                                    best = xd[idx];
                                    best_idx = idx as u32;
                                }
                            }
                        }
                        let o = ((ni * oh + oy) * ow + ox) * c + ch;
                        out[o] = best;
                        argmax[o] = best_idx;
                    }
                }
            }
        }
        let shape = if tx.rank() == 3 {
            vec![oh, ow, c]
        } else {
            vec![n, oh, ow, c]
        };
        let req = self.req(x);
        Ok(self.push(
            Tensor::from_raw(shape, out),
            Op::MaxPool2 { x, argmax },
            req,
        ))
    }

    /// Batch normalization over feature rows (see [`rows_features`]): train
    /// mode normalizes by batch statistics (epsilon 1e-5) and updates the
    /// running state with momentum 0.9; infer mode normalizes by the running
    /// state. Output is `gamma * xhat + beta`.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BnState,
        mode: Mode,
    ) -> Result<Var> {
        let tx = self.val(x);
        let (rows, feats) = rows_features(tx.shape()).ok_or_else(|| {
            Error::contract(format!(
                "batchnorm: input rank {} (shape {:?}), expected 2 or 4",
                tx.rank(),
                tx.shape()
            ))
        })?;
        if mode == Mode::Train && rows < 2 {
            return Err(Error::contract(format!(
                "batchnorm: train mode needs at least 2 rows, got {rows}"
            )));
        }
        let tg = self.val(gamma);
        let tb = self.val(beta);
        if tg.shape() != [feats] || tb.shape() != [feats] {
            return Err(Error::contract(format!(
                "batchnorm: gamma {:?} / beta {:?} must both be [{feats}]",
                tg.shape(),
                tb.shape()
            )));
        }
        if state.features() != feats {
            return Err(Error::contract(format!(
                "batchnorm: running state has {} features, input has {feats}",
                state.features()
            )));
        }

        let xd = tx.data();
        let mut mean = vec![0.0f64; feats];
        let mut inv_std = vec![0.0f32; feats];
        match mode {
            Mode::Train => {
                for r in 0..rows {
                    for (m, &v) in mean.iter_mut().zip(&xd[r * feats..(r + 1) * feats]) {
                        *m += v as f64;
                    }
                }
                for m in mean.iter_mut() {
                    *m /= rows as f64;
                }
                let mut var = vec![0.0f64; feats];
                for r in 0..rows {
                    for c in 0..feats {
                        let d = xd[r * feats + c] as f64 - mean[c];
                        var[c] += d * d;
                    }
                }
                for v in var.iter_mut() {
                    *v /= rows as f64;
                }
                for c in 0..feats {
                    inv_std[c] = (1.0 / (var[c] + BN_EPSILON).sqrt()) as f32;
                    state.running_mean[c] = (BN_MOMENTUM * state.running_mean[c] as f64
                        + (1.0 - BN_MOMENTUM) * mean[c])
                        as f32;
                    state.running_var[c] = (BN_MOMENTUM * state.running_var[c] as f64
                        + (1.0 - BN_MOMENTUM) * var[c])
                        as f32;
                }
            }
            Mode::Infer => {
                for c in 0..feats {
                    mean[c] = state.running_mean[c] as f64;
                    inv_std[c] =
                        (1.0 / (state.running_var[c] as f64 + BN_EPSILON).sqrt()) as f32;
                }
            }
        }

        let gd = tg.data();
        let bd = tb.data();
        let mut xhat = vec![0.0f32; xd.len()];
        let mut out = vec![0.0f32; xd.len()];
        for r in 0..rows {
            for c in 0..feats {
                let i = r * feats + c;
                let xh = (xd[i] as f64 - mean[c]) as f32 * inv_std[c];
                xhat[i] = xh;
                out[i] = gd[c] * xh + bd[c];
            }
        }
        let req = self.req(x) || self.req(gamma) || self.req(beta);
        Ok(self.push(
            Tensor::from_raw(tx.shape().to_vec(), out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
            },
            req,
        ))
    }

    /// Affine map `out = x @ w + b` for `x: [N,F]`, `w: [F,G]`, `b: [G]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let tx = self.val(x);
        let tw = self.val(w);
        let (n, f) = match *tx.shape() {
            [n, f] => (n, f),
            _ => {
                return Err(Error::contract(format!(
                    "dense: input rank {} (shape {:?}), expected [N,F]",
                    tx.rank(),
                    tx.shape()
                )))
            }
        };
        let (wf, g) = match *tw.shape() {
            [wf, g] => (wf, g),
            _ => {
                return Err(Error::contract(format!(
                    "dense: weight rank {} (shape {:?}), expected [F,G]",
                    tw.rank(),
                    tw.shape()
                )))
            }
        };
        if wf != f {
            return Err(Error::contract(format!(
                "dense: input features {f} != weight rows {wf}"
            )));
        }
        let bias = match b {
            Some(bv) => {
                let tb = self.val(bv);
                if tb.shape() != [g] {
                    return Err(Error::contract(format!(
                        "dense: bias shape {:?} != [{g}]",
                        tb.shape()
                    )));
                }
                Some(tb)
            }
            None => None,
        };
        let xd = tx.data();
        let wd = tw.data();
        let mut out = vec![0.0f32; n * g];
        for ni in 0..n {
            let orow = &mut out[ni * g..(ni + 1) * g];
            if let Some(tb) = &bias {
                orow.copy_from_slice(tb.data());
            }
            for fi in 0..f {
                let v = xd[ni * f + fi];
                let wrow = &wd[fi * g..(fi + 1) * g];
                for (acc, &wv) in orow.iter_mut().zip(wrow) {
                    *acc += v * wv;
                }
            }
        }
        let req = self.req(x) || self.req(w) || b.is_some_and(|bv| self.req(bv));
        Ok(self.push(
            Tensor::from_raw(vec![n, g], out),
            Op::Dense { x, w, b },
            req,
        ))
    }

    /// Row-wise softmax with max-subtraction; rows sum to 1 within 1e-6.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.val(x);
        let (n, k) = rows_view(tx.shape()).ok_or_else(|| {
            Error::contract(format!(
                "softmax: input rank {} (shape {:?}), expected 1 or 2",
                tx.rank(),
                tx.shape()
            ))
        })?;
        let xd = tx.data();
        let mut out = vec![0.0f32; xd.len()];
        for r in 0..n {
            let row = &xd[r * k..(r + 1) * k];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let orow = &mut out[r * k..(r + 1) * k];
            let mut denom = 0.0f32;
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = (v - max).exp();
                denom += *o;
            }
            for o in orow.iter_mut() {
                *o /= denom;
            }
        }
        let req = self.req(x);
        Ok(self.push(
            Tensor::from_raw(tx.shape().to_vec(), out),
            Op::Softmax { x },
            req,
        ))
    }

    /// Per-row negative log likelihood `-ln p[label]` for probabilities
    /// `[N,K]` (or `[K]`) and one class index per row.
    ///
    /// When `probs` was produced by [`Tape::softmax`] on this tape, the
    /// backward rule is fused: the gradient `(p - onehot)` flows directly to
    /// the logits, bypassing the softmax Jacobian.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let tp = self.val(probs);
        let (n, k) = rows_view(tp.shape()).ok_or_else(|| {
            Error::contract(format!(
                "cross_entropy: probs rank {} (shape {:?}), expected 1 or 2",
                tp.rank(),
                tp.shape()
            ))
        })?;
        if labels.len() != n {
            return Err(Error::contract(format!(
                "cross_entropy: {n} rows but {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::contract(format!(
                "cross_entropy: label {bad} out of range for {k} classes"
            )));
        }
        let pd = tp.data();
        let losses: Vec<f32> = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| -pd[r * k + l].ln())
            .collect();
        let value = Tensor::from_raw(vec![n], losses);
        let op = match self.nodes[probs.0].op {
            Op::Softmax { x } => Op::SoftmaxCrossEntropy {
                logits: x,
                probs,
                labels: labels.to_vec(),
            },
            _ => Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
        };
        let req = self.req(probs);
        Ok(self.push(value, op, req))
    }

    /// `[phi1 || phi2]` per row; operands must have equal feature dims.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        let (na, fa) = rows_view(ta.shape()).ok_or_else(|| {
            Error::contract(format!("concat: lhs shape {:?}, expected 1 or 2 dims", ta.shape()))
        })?;
        let (nb, fb) = rows_view(tb.shape()).ok_or_else(|| {
            Error::contract(format!("concat: rhs shape {:?}, expected 1 or 2 dims", tb.shape()))
        })?;
        if na != nb || fa != fb {
            return Err(Error::contract(format!(
                "concat: shape {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut out = vec![0.0f32; na * 2 * fa];
        for r in 0..na {
            out[r * 2 * fa..r * 2 * fa + fa].copy_from_slice(&ta.data()[r * fa..(r + 1) * fa]);
            out[r * 2 * fa + fa..(r + 1) * 2 * fa]
                .copy_from_slice(&tb.data()[r * fa..(r + 1) * fa]);
        }
        let shape = if ta.rank() == 1 {
            vec![2 * fa]
        } else {
            vec![na, 2 * fa]
        };
        let req = self.req(a) || self.req(b);
        Ok(self.push(Tensor::from_raw(shape, out), Op::Concat { a, b }, req))
    }

    /// Stacks two batches along the leading dimension:
    /// `[Na, ...] + [Nb, ...] -> [Na+Nb, ...]`. Trailing dims must agree.
    pub fn stack_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.rank() < 2 || ta.rank() != tb.rank() || ta.shape()[1..] != tb.shape()[1..] {
            return Err(Error::contract(format!(
                "stack_rows: shape {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut shape = ta.shape().to_vec();
        shape[0] += tb.shape()[0];
        let mut out = Vec::with_capacity(ta.numel() + tb.numel());
        out.extend_from_slice(ta.data());
        out.extend_from_slice(tb.data());
        let req = self.req(a) || self.req(b);
        Ok(self.push(Tensor::from_raw(shape, out), Op::StackRows { a, b }, req))
    }

    /// Selects `len` consecutive leading-dimension rows starting at `start`.
    pub fn take_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.val(x);
        if tx.rank() < 2 {
            return Err(Error::contract(format!(
                "take_rows: input rank {} (shape {:?}), expected >= 2",
                tx.rank(),
                tx.shape()
            )));
        }
        let n = tx.shape()[0];
        if start + len > n || len == 0 {
            return Err(Error::contract(format!(
                "take_rows: rows [{start}, {}) out of range for {n} rows",
                start + len
            )));
        }
        let row_size: usize = tx.shape()[1..].iter().product();
        let mut shape = tx.shape().to_vec();
        shape[0] = len;
        let out = tx.data()[start * row_size..(start + len) * row_size].to_vec();
        let req = self.req(x);
        Ok(self.push(
            Tensor::from_raw(shape, out),
            Op::TakeRows {
                x,
                start,
                row_size,
            },
            req,
        ))
    }

    /// Kronecker (outer) product per row, flattened row-major:
    /// `out[m*D + q] = phi1[m] * phi2[q]`.
    pub fn kronecker(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        let (na, fa) = rows_view(ta.shape()).ok_or_else(|| {
            Error::contract(format!(
                "kronecker: lhs shape {:?}, expected 1 or 2 dims",
                ta.shape()
            ))
        })?;
        let (nb, fb) = rows_view(tb.shape()).ok_or_else(|| {
            Error::contract(format!(
                "kronecker: rhs shape {:?}, expected 1 or 2 dims",
                tb.shape()
            ))
        })?;
        if na != nb || fa != fb {
            return Err(Error::contract(format!(
                "kronecker: shape {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let d = fa;
        let mut out = vec![0.0f32; na * d * d];
        for r in 0..na {
            let arow = &ta.data()[r * d..(r + 1) * d];
            let brow = &tb.data()[r * d..(r + 1) * d];
            let orow = &mut out[r * d * d..(r + 1) * d * d];
            for (m, &av) in arow.iter().enumerate() {
                for (q, &bv) in brow.iter().enumerate() {
                    orow[m * d + q] = av * bv;
                }
            }
        }
        let shape = if ta.rank() == 1 {
            vec![d * d]
        } else {
            vec![na, d * d]
        };
        let req = self.req(a) || self.req(b);
        Ok(self.push(Tensor::from_raw(shape, out), Op::Kronecker { a, b }, req))
    }

    /// Reverse sweep from a scalar loss. Returns gradients for every node
    /// that requires them; parameters the loss never touched get exact zeros.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.distribute(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let out = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| {
                if !n.requires_grad {
                    return None;
                }
                let buf = grads[i]
                    .take()
                    .unwrap_or_else(|| vec![0.0; n.value.numel()]);
                Some(Tensor::from_raw(n.value.shape().to_vec(), buf))
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn accumulate(
        &self,
        target: Var,
        grads: &mut [Option<Vec<f32>>],
        write: impl FnOnce(&mut [f32]),
    ) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        let buf = grads[target.0]
            .get_or_insert_with(|| vec![0.0; self.nodes[target.0].value.numel()]);
        write(buf);
    }

    fn distribute(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                self.accumulate(*a, grads, |d| {
                    for (dv, gv) in d.iter_mut().zip(g) {
                        *dv += gv;
                    }
                });
                self.accumulate(*b, grads, |d| {
                    for (dv, gv) in d.iter_mut().zip(g) {
                        *dv += gv;
                    }
                });
            }
            Op::Sub { a, b } => {
                self.accumulate(*a, grads, |d| {
                    for (dv, gv) in d.iter_mut().zip(g) {
                        *dv += gv;
                    }
                });
                self.accumulate(*b, grads, |d| {
                    for (dv, gv) in d.iter_mut().zip(g) {
                        *dv -= gv;
                    }
                });
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                self.accumulate(*a, grads, |d| {
                    for ((dv, gv), bv) in d.iter_mut().zip(g).zip(tb.data()) {
                        *dv += gv * bv;
                    }
                });
                self.accumulate(*b, grads, |d| {
                    for ((dv, gv), av) in d.iter_mut().zip(g).zip(ta.data()) {
                        *dv += gv * av;
                    }
                });
            }
            Op::Scale { a, k } => {
                let k = *k;
                self.accumulate(*a, grads, |d| {
                    for (dv, gv) in d.iter_mut().zip(g) {
                        *dv += gv * k;
                    }
                });
            }
            Op::Sum { a } => {
                self.accumulate(*a, grads, |d| {
                    for dv in d.iter_mut() {
                        *dv += g[0];
                    }
                });
            }
            Op::Mean { a } => {
                let n = self.nodes[a.0].value.numel() as f32;
                self.accumulate(*a, grads, |d| {
                    for dv in d.iter_mut() {
                        *dv += g[0] / n;
                    }
                });
            }
            Op::Relu { a } => {
                let ta = &self.nodes[a.0].value;
                self.accumulate(*a, grads, |d| {
                    for ((dv, gv), xv) in d.iter_mut().zip(g).zip(ta.data()) {
                        if *xv > 0.0 {
                            *dv += gv;
                        }
                    }
                });
            }
            Op::Flatten { a } => {
                self.accumulate(*a, grads, |d| {
                    for (dv, gv) in d.iter_mut().zip(g) {
                        *dv += gv;
                    }
                });
            }
            Op::Dense { x, w, b } => {
                let tx = &self.nodes[x.0].value;
                let tw = &self.nodes[w.0].value;
                let (n, f) = (tx.shape()[0], tx.shape()[1]);
                let gg = tw.shape()[1];
                self.accumulate(*w, grads, |dw| {
                    for ni in 0..n {
                        let grow = &g[ni * gg..(ni + 1) * gg];
                        for fi in 0..f {
                            let v = tx.data()[ni * f + fi];
                            let drow = &mut dw[fi * gg..(fi + 1) * gg];
                            for (dv, gv) in drow.iter_mut().zip(grow) {
                                *dv += v * gv;
                            }
                        }
                    }
                });
                self.accumulate(*x, grads, |dx| {
                    for ni in 0..n {
                        let grow = &g[ni * gg..(ni + 1) * gg];
                        for fi in 0..f {
                            let wrow = &tw.data()[fi * gg..(fi + 1) * gg];
                            let dot: f32 = grow.iter().zip(wrow).map(|(a, b)| a * b).sum();
                            dx[ni * f + fi] += dot;
                        }
                    }
                });
                if let Some(bv) = b {
                    self.accumulate(*bv, grads, |db| {
                        for ni in 0..n {
                            let grow = &g[ni * gg..(ni + 1) * gg];
                            for (dv, gv) in db.iter_mut().zip(grow) {
                                *dv += gv;
                            }
                        }
                    });
                }
            }
            Op::Conv3x3 { x, w, b } => {
                let tx = &self.nodes[x.0].value;
                let tw = &self.nodes[w.0].value;
                let (n, h, wd, ci) = spatial_dims(tx.shape()).unwrap();
                let co = tw.shape()[3];
                self.accumulate(*w, grads, |dw| {
                    for ni in 0..n {
                        for y in 0..h {
                            for xx in 0..wd {
                                let grow = &g[((ni * h + y) * wd + xx) * co..][..co];
                                for dy in 0..3usize {
                                    let yy = y as isize + dy as isize - 1;
                                    if yy < 0 || yy >= h as isize {
                                        continue;
                                    }
                                    for dx in 0..3usize {
                                        let xs = xx as isize + dx as isize - 1;
                                        if xs < 0 || xs >= wd as isize {
                                            continue;
                                        }
                                        let i_off =
                                            ((ni * h + yy as usize) * wd + xs as usize) * ci;
                                        let k_off = (dy * 3 + dx) * ci * co;
                                        for i in 0..ci {
                                            let v = tx.data()[i_off + i];
                                            let drow =
                                                &mut dw[k_off + i * co..k_off + (i + 1) * co];
                                            for (dv, gv) in drow.iter_mut().zip(grow) {
                                                *dv += v * gv;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                self.accumulate(*x, grads, |dinp| {
                    for ni in 0..n {
                        for y in 0..h {
                            for xx in 0..wd {
                                let grow = &g[((ni * h + y) * wd + xx) * co..][..co];
                                for dy in 0..3usize {
                                    let yy = y as isize + dy as isize - 1;
                                    if yy < 0 || yy >= h as isize {
                                        continue;
                                    }
                                    for dx in 0..3usize {
                                        let xs = xx as isize + dx as isize - 1;
                                        if xs < 0 || xs >= wd as isize {
                                            continue;
                                        }
                                        let i_off =
                                            ((ni * h + yy as usize) * wd + xs as usize) * ci;
                                        let k_off = (dy * 3 + dx) * ci * co;
                                        for i in 0..ci {
                                            let wrow = &tw.data()
                                                [k_off + i * co..k_off + (i + 1) * co];
                                            let dot: f32 = grow
                                                .iter()
                                                .zip(wrow)
                                                .map(|(a, b)| a * b)
                                                .sum();
                                            dinp[i_off + i] += dot;
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                if let Some(bv) = b {
                    self.accumulate(*bv, grads, |db| {
                        for chunk in g.chunks_exact(co) {
                            for (dv, gv) in db.iter_mut().zip(chunk) {
                                *dv += gv;
                            }
                        }
                    });
                }
            }
            Op::MaxPool2 { x, argmax } => {
                self.accumulate(*x, grads, |dx| {
                    for (o, &src) in argmax.iter().enumerate() {
                        dx[src as usize] += g[o];
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
            } => {
                let feats = inv_std.len();
                let rows = xhat.len() / feats;
                let mut sum_g = vec![0.0f32; feats];
                let mut sum_gx = vec![0.0f32; feats];
                for r in 0..rows {
                    for c in 0..feats {
                        let i = r * feats + c;
                        sum_g[c] += g[i];
                        sum_gx[c] += g[i] * xhat[i];
                    }
                }
                self.accumulate(*gamma, grads, |dg| {
                    for (dv, sv) in dg.iter_mut().zip(&sum_gx) {
                        *dv += sv;
                    }
                });
                self.accumulate(*beta, grads, |db| {
                    for (dv, sv) in db.iter_mut().zip(&sum_g) {
                        *dv += sv;
                    }
                });
                let tg = &self.nodes[gamma.0].value;
                // Train mode: the batch statistics are functions of x, so the
                // mean projections enter the gradient. Infer mode: running
                // stats are constants and the map is affine in x.
                self.accumulate(*x, grads, |dx| match mode {
                    Mode::Train => {
                        let rn = rows as f32;
                        for r in 0..rows {
                            for c in 0..feats {
                                let idx = r * feats + c;
                                dx[idx] += tg.data()[c]
                                    * inv_std[c]
                                    * (g[idx] - sum_g[c] / rn - xhat[idx] * sum_gx[c] / rn);
                            }
                        }
                    }
                    Mode::Infer => {
                        for r in 0..rows {
                            for c in 0..feats {
                                let idx = r * feats + c;
                                dx[idx] += tg.data()[c] * inv_std[c] * g[idx];
                            }
                        }
                    }
                });
            }
            Op::Concat { a, b } => {
                let fa = self.nodes[a.0].value.shape().last().copied().unwrap();
                let rows = self.nodes[a.0].value.numel() / fa;
                self.accumulate(*a, grads, |da| {
                    for r in 0..rows {
                        let grow = &g[r * 2 * fa..r * 2 * fa + fa];
                        for (dv, gv) in da[r * fa..(r + 1) * fa].iter_mut().zip(grow) {
                            *dv += gv;
                        }
                    }
                });
                self.accumulate(*b, grads, |db| {
                    for r in 0..rows {
                        let grow = &g[r * 2 * fa + fa..(r + 1) * 2 * fa];
                        for (dv, gv) in db[r * fa..(r + 1) * fa].iter_mut().zip(grow) {
                            *dv += gv;
                        }
                    }
                });
            }
            Op::StackRows { a, b } => {
                let na = self.nodes[a.0].value.numel();
                self.accumulate(*a, grads, |da| {
                    for (dv, gv) in da.iter_mut().zip(&g[..na]) {
                        *dv += gv;
                    }
                });
                self.accumulate(*b, grads, |db| {
                    for (dv, gv) in db.iter_mut().zip(&g[na..]) {
                        *dv += gv;
                    }
                });
            }
            Op::TakeRows { x, start, row_size } => {
                let offset = start * row_size;
                self.accumulate(*x, grads, |dx| {
                    for (dv, gv) in dx[offset..offset + g.len()].iter_mut().zip(g) {
                        *dv += gv;
                    }
                });
            }
            Op::Kronecker { a, b } => {
                let ta = &self.nodes[a.0].value;
                let tb = &self.nodes[b.0].value;
                let d = ta.shape().last().copied().unwrap();
                let rows = ta.numel() / d;
                self.accumulate(*a, grads, |da| {
                    for r in 0..rows {
                        let brow = &tb.data()[r * d..(r + 1) * d];
                        for m in 0..d {
                            let grow = &g[r * d * d + m * d..r * d * d + (m + 1) * d];
                            let dot: f32 = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                            da[r * d + m] += dot;
                        }
                    }
                });
                self.accumulate(*b, grads, |db| {
                    for r in 0..rows {
                        let arow = &ta.data()[r * d..(r + 1) * d];
                        for (m, &av) in arow.iter().enumerate() {
                            let grow = &g[r * d * d + m * d..r * d * d + (m + 1) * d];
                            for (dv, gv) in db[r * d..(r + 1) * d].iter_mut().zip(grow) {
                                *dv += av * gv;
                            }
                        }
                    }
                });
            }
            Op::Softmax { x } => {
                let probs = &self.nodes[i].value;
                let (n, k) = rows_view(probs.shape()).unwrap();
                self.accumulate(*x, grads, |dx| {
                    for r in 0..n {
                        let prow = &probs.data()[r * k..(r + 1) * k];
                        let grow = &g[r * k..(r + 1) * k];
                        let dot: f32 = prow.iter().zip(grow).map(|(p, gv)| p * gv).sum();
                        for c in 0..k {
                            dx[r * k + c] += prow[c] * (grow[c] - dot);
                        }
                    }
                });
            }
            Op::CrossEntropy { probs, labels } => {
                let tp = &self.nodes[probs.0].value;
                let (_, k) = rows_view(tp.shape()).unwrap();
                self.accumulate(*probs, grads, |dp| {
                    for (r, &l) in labels.iter().enumerate() {
                        dp[r * k + l] -= g[r] / tp.data()[r * k + l];
                    }
                });
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let tp = &self.nodes[probs.0].value;
                let (_, k) = rows_view(tp.shape()).unwrap();
                self.accumulate(*logits, grads, |dl| {
                    for (r, &l) in labels.iter().enumerate() {
                        let prow = &tp.data()[r * k..(r + 1) * k];
                        let drow = &mut dl[r * k..(r + 1) * k];
                        for (c, (dv, &pv)) in drow.iter_mut().zip(prow).enumerate() {
                            let onehot = if c == l { 1.0 } else { 0.0 };
                            *dv += g[r] * (pv - onehot);
                        }
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f32, b: f32, tol: f32) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_vec(vec![1, 1, 1], vec![3.5]).unwrap());
        // 3x3x1x1 kernel, center tap only
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = tape.input(Tensor::from_vec(vec![3, 3, 1, 1], k).unwrap());
        let b = tape.input(Tensor::zeros(vec![1]));
        let out = tape.conv3x3(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(out).data(), &[3.5]);
    }

    #[test]
    fn conv_all_ones_zero_padding() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::filled(vec![3, 3, 1], 1.0));
        let w = tape.input(Tensor::filled(vec![3, 3, 1, 1], 1.0));
        let out = tape.conv3x3(x, w, None).unwrap();
        let d = tape.value(out).data().to_vec();
        // zero padding: corners see 2x2 windows, edges 2x3, center 3x3
        assert_eq!(d, vec![4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn conv_preserves_spatial_extent() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(vec![96, 96, 3]));
        let w = tape.input(Tensor::zeros(vec![3, 3, 3, 32]));
        let out = tape.conv3x3(x, w, None).unwrap();
        assert_eq!(tape.value(out).shape(), &[96, 96, 32]);
    }

    #[test]
    fn conv_channel_mismatch_names_dimension() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(vec![4, 4, 4]));
        let w = tape.input(Tensor::zeros(vec![3, 3, 3, 8]));
        let err = tape.conv3x3(x, w, None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("input channels 4"), "got: {msg}");
    }

    #[test]
    fn maxpool_halves_extent_and_keeps_constants() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(vec![96, 96, 32]));
        let out = tape.maxpool2(x).unwrap();
        assert_eq!(tape.value(out).shape(), &[48, 48, 32]);

        let c = tape.input(Tensor::filled(vec![4, 4, 2], 0.25));
        let out = tape.maxpool2(c).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let out = tape.maxpool2(x).unwrap();
        assert_eq!(tape.value(out).data(), &[4.0]);
        let loss = tape.sum(out);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn maxpool_rejects_odd_extent() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(vec![3, 4, 1]));
        assert!(tape.maxpool2(x).is_err());
    }

    #[test]
    fn batchnorm_constant_batch_is_zero() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::filled(vec![4, 3], 7.25));
        let g = tape.input(Tensor::filled(vec![3], 1.0));
        let b = tape.input(Tensor::zeros(vec![3]));
        let mut state = BnState::new(3);
        let out = tape.batchnorm(x, g, b, &mut state, Mode::Train).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batchnorm_unit_variance_pair() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_vec(vec![2, 2], vec![-1.0, 1.0, 1.0, -1.0]).unwrap());
        let g = tape.input(Tensor::filled(vec![2], 1.0));
        let b = tape.input(Tensor::zeros(vec![2]));
        let mut state = BnState::new(2);
        let out = tape.batchnorm(x, g, b, &mut state, Mode::Train).unwrap();
        for (&got, &want) in tape.value(out).data().iter().zip(&[-1.0, 1.0, 1.0, -1.0]) {
            assert!(close(got, want, 1e-4), "{got} vs {want}");
        }
    }

    #[test]
    fn batchnorm_zero_gamma_yields_beta() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_vec(vec![2, 2], vec![0.3, -0.4, 1.9, 2.2]).unwrap());
        let g = tape.input(Tensor::zeros(vec![2]));
        let b = tape.input(Tensor::from_vec(vec![2], vec![0.5, -0.25]).unwrap());
        let mut state = BnState::new(2);
        let out = tape.batchnorm(x, g, b, &mut state, Mode::Train).unwrap();
        assert_eq!(tape.value(out).data(), &[0.5, -0.25, 0.5, -0.25]);
    }

    #[test]
    fn batchnorm_requires_two_rows_in_train_mode() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(vec![1, 4]));
        let g = tape.input(Tensor::filled(vec![4], 1.0));
        let b = tape.input(Tensor::zeros(vec![4]));
        let mut state = BnState::new(4);
        assert!(tape.batchnorm(x, g, b, &mut state, Mode::Train).is_err());
        // but infer mode on a single row is fine
        let out = tape.batchnorm(x, g, b, &mut state, Mode::Infer);
        assert!(out.is_ok());
    }

    #[test]
    fn batchnorm_updates_running_stats_with_momentum() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_vec(vec![2, 1], vec![2.0, 6.0]).unwrap());
        let g = tape.input(Tensor::filled(vec![1], 1.0));
        let b = tape.input(Tensor::zeros(vec![1]));
        let mut state = BnState::new(1);
        tape.batchnorm(x, g, b, &mut state, Mode::Train).unwrap();
        // mean 4, biased var 4; running = 0.9*init + 0.1*batch
        assert!(close(state.running_mean[0], 0.4, 1e-6));
        assert!(close(state.running_var[0], 0.9 + 0.4, 1e-6));
    }

    #[test]
    fn dense_identity_weight() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_vec(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let w = tape.input(Tensor::from_vec(vec![3, 3], eye).unwrap());
        let b = tape.input(Tensor::zeros(vec![3]));
        let out = tape.dense(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(out).data(), tape.value(x).data());
    }

    #[test]
    fn dense_inner_dim_mismatch() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(vec![2, 3]));
        let w = tape.input(Tensor::zeros(vec![4, 5]));
        let err = tape.dense(x, w, None).unwrap_err();
        assert!(err.to_string().contains("input features 3"));
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_vec(vec![4], vec![-2.0, -0.5, 0.0, 3.0]).unwrap());
        let out = tape.relu(x);
        assert_eq!(tape.value(out).data(), &[0.0, 0.0, 0.0, 3.0]);
    }

    #[test]
    fn uniform_logits_give_ln_k_loss() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(vec![1, 8]));
        let p = tape.softmax(x).unwrap();
        let loss = tape.cross_entropy(p, &[3]).unwrap();
        let got = tape.value(loss).data()[0];
        assert!(close(got, (8.0f32).ln(), 1e-6), "{got}");
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let logits = vec![0.3, -1.2, 2.0, 0.0, 1.1];
        let mut tape = Tape::new();
        let a = tape.input(Tensor::from_vec(vec![5], logits.clone()).unwrap());
        let pa = tape.softmax(a).unwrap();
        let shifted: Vec<f32> = logits.iter().map(|v| v + 100.0).collect();
        let b = tape.input(Tensor::from_vec(vec![5], shifted).unwrap());
        let pb = tape.softmax(b).unwrap();
        for (x, y) in tape.value(pa).data().iter().zip(tape.value(pb).data()) {
            assert!(close(*x, *y, 1e-6));
        }
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(vec![1, 8]));
        let p = tape.softmax(x).unwrap();
        assert!(tape.cross_entropy(p, &[8]).is_err());
    }

    #[test]
    fn fused_softmax_ce_gradient_is_p_minus_onehot() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let p = tape.softmax(x).unwrap();
        let ce = tape.cross_entropy(p, &[1]).unwrap();
        let loss = tape.sum(ce);
        let probs = tape.value(p).data().to_vec();
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(x).unwrap().data().to_vec();
        for (c, &gv) in g.iter().enumerate() {
            let want = probs[c] - if c == 1 { 1.0 } else { 0.0 };
            assert!(close(gv, want, 1e-6), "class {c}: {gv} vs {want}");
        }
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::from_vec(vec![4], vec![0.5, -1.5, 2.0, 0.0]).unwrap());
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, -3.0, 4.0, 0.0]);
    }

    #[test]
    fn unused_parameter_gets_exact_zero_gradient() {
        let mut tape = Tape::new();
        let used = tape.param(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap());
        let unused = tape.param(Tensor::from_vec(vec![3], vec![5.0, 6.0, 7.0]).unwrap());
        let loss = tape.sum(used);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(tape.backward(w).is_err());
    }

    #[test]
    fn concat_and_kronecker_values() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap());
        let b = tape.input(Tensor::from_vec(vec![2], vec![3.0, 4.0]).unwrap());
        let cc = tape.concat(a, b).unwrap();
        assert_eq!(tape.value(cc).data(), &[1.0, 2.0, 3.0, 4.0]);
        let kk = tape.kronecker(a, b).unwrap();
        assert_eq!(tape.value(kk).data(), &[3.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.input(Tensor::from_vec(vec![4, 4, 2], (0..32).map(|i| (i as f32) * 0.37 - 3.0).collect()).unwrap());
            let w = tape.input(Tensor::from_vec(vec![3, 3, 2, 3], (0..54).map(|i| ((i * 7) % 13) as f32 * 0.11 - 0.5).collect()).unwrap());
            let c = tape.conv3x3(x, w, None).unwrap();
            let p = tape.maxpool2(c).unwrap();
            tape.value(p).clone()
        };
        assert!(run().bitwise_eq(&run()));
    }

    fn upsample2(t: &Tensor) -> Tensor {
        let &[h, w, c] = t.shape() else { panic!() };
        let mut out = vec![0.0f32; 4 * h * w * c];
        for y in 0..2 * h {
            for x in 0..2 * w {
                for ch in 0..c {
                    out[(y * 2 * w + x) * c + ch] = t.data()[((y / 2) * w + x / 2) * c + ch];
                }
            }
        }
        Tensor::from_raw(vec![2 * h, 2 * w, c], out)
    }

    proptest! {
        #[test]
        fn maxpool_of_upsample_is_identity(
            vals in proptest::collection::vec(-100.0f32..100.0, 24)
        ) {
            let t = Tensor::from_vec(vec![3, 4, 2], vals).unwrap();
            let up = upsample2(&t);
            let mut tape = Tape::new();
            let x = tape.input(up);
            let out = tape.maxpool2(x).unwrap();
            prop_assert!(tape.value(out).bitwise_eq(&t));
        }

        #[test]
        fn softmax_rows_are_distributions(
            vals in proptest::collection::vec(-30.0f32..30.0, 12)
        ) {
            let mut tape = Tape::new();
            let x = tape.input(Tensor::from_vec(vec![3, 4], vals).unwrap());
            let p = tape.softmax(x).unwrap();
            let d = tape.value(p).data();
            for row in d.chunks(4) {
                let s: f32 = row.iter().sum();
                prop_assert!((s - 1.0).abs() <= 1e-6);
                prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }
}
