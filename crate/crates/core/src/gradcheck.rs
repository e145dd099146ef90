//! Finite-difference verification of the tape's gradients.
//!
//! Every check compares the tape's analytic f32 gradients against central
//! finite differences of an independent f64 re-implementation of the same
//! forward math. The reference functions here never call into [`crate::tensor`];
//! they are direct transcriptions of the layer definitions, so a bug shared
//! by the tape's forward and backward passes still shows up as a mismatch.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::fen::FenConfig;
use crate::fusion::{FusionConfig, FusionKind};
use crate::model::PairModel;
use crate::tensor::{BnState, Mode, Tape, Tensor, Var, BN_EPSILON};

/// Central-difference step and comparison tolerances.
#[derive(Clone, Copy, Debug)]
pub struct Tolerance {
    pub step: f64,
    pub rel: f64,
    pub abs_floor: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance {
            step: 1e-3,
            rel: 1e-3,
            abs_floor: 1e-5,
        }
    }
}

impl Tolerance {
    pub fn accepts(&self, analytic: f64, fd: f64) -> bool {
        let diff = (analytic - fd).abs();
        diff <= self.abs_floor.max(self.rel * analytic.abs().max(fd.abs()))
    }
}

/// Outcome of one gradient check.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub passed: bool,
    pub gradients_checked: usize,
    pub worst_abs_diff: f64,
    pub forward_max_diff: f64,
}

impl std::fmt::Display for CheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {}: {} gradients, worst |ad-fd| {:.3e}, forward |f32-f64| {:.3e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.gradients_checked,
            self.worst_abs_diff,
            self.forward_max_diff
        )
    }
}

// ---------------------------------------------------------------------------
// f64 reference forwards (independent of the tape)
// ---------------------------------------------------------------------------

pub fn ref_conv3x3(
    x: &[f64],
    dims: (usize, usize, usize, usize),
    w: &[f64],
    co: usize,
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let (n, h, wd, ci) = dims;
    let mut out = vec![0.0; n * h * wd * co];
    for ni in 0..n {
        for y in 0..h {
            for xx in 0..wd {
                for o in 0..co {
                    let mut acc = bias.map_or(0.0, |b| b[o]);
                    for dy in 0..3i64 {
                        for dx in 0..3i64 {
                            let yy = y as i64 + dy - 1;
                            let xs = xx as i64 + dx - 1;
                            if yy < 0 || yy >= h as i64 || xs < 0 || xs >= wd as i64 {
                                continue;
                            }
                            for i in 0..ci {
                                let xv = x[((ni * h + yy as usize) * wd + xs as usize) * ci + i];
                                let wv = w[(((dy as usize * 3) + dx as usize) * ci + i) * co + o];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((ni * h + y) * wd + xx) * co + o] = acc;
                }
            }
        }
    }
    out
}

pub fn ref_maxpool2(x: &[f64], dims: (usize, usize, usize, usize)) -> Vec<f64> {
    let (n, h, w, c) = dims;
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; n * oh * ow * c];
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let v = x[((ni * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch];
                            if v > best {
                                best = v;
                            }
                        }
                    }
                    out[((ni * oh + oy) * ow + ox) * c + ch] = best;
                }
            }
        }
    }
    out
}

pub fn ref_batchnorm_train(
    x: &[f64],
    rows: usize,
    feats: usize,
    gamma: &[f64],
    beta: &[f64],
) -> Vec<f64> {
    let mut mean = vec![0.0; feats];
    for r in 0..rows {
        for c in 0..feats {
            mean[c] += x[r * feats + c];
        }
    }
    for m in mean.iter_mut() {
        *m /= rows as f64;
    }
    let mut var = vec![0.0; feats];
    for r in 0..rows {
        for c in 0..feats {
            let d = x[r * feats + c] - mean[c];
            var[c] += d * d;
        }
    }
    for v in var.iter_mut() {
        *v /= rows as f64;
    }
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..feats {
            let xh = (x[r * feats + c] - mean[c]) / (var[c] + BN_EPSILON).sqrt();
            out[r * feats + c] = gamma[c] * xh + beta[c];
        }
    }
    out
}

pub fn ref_batchnorm_infer(
    x: &[f64],
    rows: usize,
    feats: usize,
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..feats {
            let xh = (x[r * feats + c] - running_mean[c])
                / (running_var[c] + BN_EPSILON).sqrt();
            out[r * feats + c] = gamma[c] * xh + beta[c];
        }
    }
    out
}

pub fn ref_dense(
    x: &[f64],
    n: usize,
    f: usize,
    w: &[f64],
    g: usize,
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let mut out = vec![0.0; n * g];
    for ni in 0..n {
        for gi in 0..g {
            let mut acc = bias.map_or(0.0, |b| b[gi]);
            for fi in 0..f {
                acc += x[ni * f + fi] * w[fi * g + gi];
            }
            out[ni * g + gi] = acc;
        }
    }
    out
}

pub fn ref_relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

pub fn ref_softmax(x: &[f64], rows: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let row = &x[r * k..(r + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for (o, &v) in out[r * k..(r + 1) * k].iter_mut().zip(row) {
            *o = (v - max).exp();
            denom += *o;
        }
        for o in out[r * k..(r + 1) * k].iter_mut() {
            *o /= denom;
        }
    }
    out
}

pub fn ref_cross_entropy(probs: &[f64], k: usize, labels: &[usize]) -> Vec<f64> {
    labels
        .iter()
        .enumerate()
        .map(|(r, &l)| -probs[r * k + l].ln())
        .collect()
}

pub fn ref_concat(a: &[f64], b: &[f64], rows: usize, f: usize) -> Vec<f64> {
    let mut out = vec![0.0; 2 * rows * f];
    for r in 0..rows {
        out[r * 2 * f..r * 2 * f + f].copy_from_slice(&a[r * f..(r + 1) * f]);
        out[r * 2 * f + f..(r + 1) * 2 * f].copy_from_slice(&b[r * f..(r + 1) * f]);
    }
    out
}

pub fn ref_kronecker(a: &[f64], b: &[f64], rows: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * d * d];
    for r in 0..rows {
        for m in 0..d {
            for q in 0..d {
                out[r * d * d + m * d + q] = a[r * d + m] * b[r * d + q];
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// harness
// ---------------------------------------------------------------------------

fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f32, hi: f32) -> Tensor {
    let numel = shape.iter().product();
    let data: Vec<f32> = (0..numel).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Random tensor with every value bounded away from the ReLU kink so a
/// 1e-3 perturbation cannot cross it.
fn rand_tensor_kink_safe(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let numel = shape.iter().product();
    let data: Vec<f32> = (0..numel)
        .map(|_| {
            let mag = rng.random_range(0.05f32..1.0);
            if rng.random_range(0..2) == 0 {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Random tensor whose 2x2 pooling windows have no near-ties, so the argmax
/// is stable under the finite-difference step.
fn rand_tensor_pool_safe(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Tensor {
    'outer: for _ in 0..100 {
        let t = rand_tensor(rng, vec![h, w, c], -1.0, 1.0);
        let d = t.data();
        for oy in 0..h / 2 {
            for ox in 0..w / 2 {
                for ch in 0..c {
                    let mut vals = [0.0f32; 4];
                    for (k, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
                        vals[k] = d[((2 * oy + dy) * w + 2 * ox + dx) * c + ch];
                    }
                    for i in 0..4 {
                        for j in i + 1..4 {
                            if (vals[i] - vals[j]).abs() < 5e-3 {
                                continue 'outer;
                            }
                        }
                    }
                }
            }
        }
        return t;
    }
    unreachable!("pool-safe tensor generation failed to converge");
}

/// Signed weights for turning a tensor-valued op into a scalar loss; the
/// 1/numel scaling keeps loss magnitudes O(1) for well-conditioned FD.
fn random_functional(rng: &mut ChaCha8Rng, numel: usize) -> Vec<f32> {
    let scale = 1.0 / numel as f32;
    (0..numel)
        .map(|_| if rng.random_range(0..2) == 0 { scale } else { -scale })
        .collect()
}

fn dot_f64(a: &[f64], r: &[f32]) -> f64 {
    a.iter().zip(r).map(|(&x, &w)| x * w as f64).sum()
}

/// Compares tape gradients of `sum(build(inputs) * R)` against central finite
/// differences of `dot(reference(inputs), R)` computed in f64.
fn fd_check(
    name: String,
    inputs: &[Tensor],
    build: &mut dyn FnMut(&mut Tape, &[Var]) -> Result<Var>,
    reference: &dyn Fn(&[Vec<f64>]) -> Vec<f64>,
    rng: &mut ChaCha8Rng,
    tol: &Tolerance,
) -> CheckReport {
    // analytic pass
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars).expect("gradcheck graph must build");
    let out_tensor = tape.value(out).clone();
    let functional = random_functional(rng, out_tensor.numel());
    let r = tape.input(Tensor::from_raw(
        out_tensor.shape().to_vec(),
        functional.clone(),
    ));
    let weighted = tape.mul(out, r).expect("functional shape matches");
    let loss = tape.sum(weighted);
    let grads = tape.backward(loss).expect("scalar loss");

    // forward agreement between the implementation and the reference
    let xs64: Vec<Vec<f64>> = inputs.iter().map(to_f64).collect();
    let ref_out = reference(&xs64);
    let forward_max_diff = out_tensor
        .data()
        .iter()
        .zip(&ref_out)
        .map(|(&a, &b)| (a as f64 - b).abs())
        .fold(0.0, f64::max);

    // central differences on the reference
    let mut passed = true;
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for (ti, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[ti]).expect("param gradient");
        for e in 0..input.numel() {
            let mut plus = xs64.clone();
            plus[ti][e] += tol.step;
            let mut minus = xs64.clone();
            minus[ti][e] -= tol.step;
            let fd = (dot_f64(&reference(&plus), &functional)
                - dot_f64(&reference(&minus), &functional))
                / (2.0 * tol.step);
            let ad = analytic.data()[e] as f64;
            let diff = (ad - fd).abs();
            if diff > worst {
                worst = diff;
            }
            if !tol.accepts(ad, fd) {
                passed = false;
            }
            checked += 1;
        }
    }
    CheckReport {
        name,
        passed,
        gradients_checked: checked,
        worst_abs_diff: worst,
        forward_max_diff,
    }
}

/// Runs the finite-difference check for every differentiable op, one round
/// per seed. Pass `seeds = 10` for the full verification sweep.
pub fn run_op_suite(base_seed: u64, seeds: u64, tol: &Tolerance) -> Vec<CheckReport> {
    let mut reports = Vec::new();
    for round in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::rng::derive_seed(
            base_seed,
            0x6f70_7375697465, // "opsuite"
            round,
        ));
        reports.extend(op_round(&mut rng, round, tol));
    }
    reports
}

fn op_round(rng: &mut ChaCha8Rng, round: u64, tol: &Tolerance) -> Vec<CheckReport> {
    let mut out = Vec::new();
    let tag = |n: &str| format!("{n} (seed {round})");

    // conv3x3 with bias, single image
    {
        let x = rand_tensor(rng, vec![5, 4, 2], -1.0, 1.0);
        let w = rand_tensor(rng, vec![3, 3, 2, 3], -1.0, 1.0);
        let b = rand_tensor(rng, vec![3], -0.5, 0.5);
        out.push(fd_check(
            tag("conv3x3"),
            &[x, w, b],
            &mut |t, v| t.conv3x3(v[0], v[1], Some(v[2])),
            &|xs| ref_conv3x3(&xs[0], (1, 5, 4, 2), &xs[1], 3, Some(&xs[2])),
            rng,
            tol,
        ));
    }
    // conv3x3 without bias, batched
    {
        let x = rand_tensor(rng, vec![2, 4, 4, 2], -1.0, 1.0);
        let w = rand_tensor(rng, vec![3, 3, 2, 2], -1.0, 1.0);
        out.push(fd_check(
            tag("conv3x3/batched"),
            &[x, w],
            &mut |t, v| t.conv3x3(v[0], v[1], None),
            &|xs| ref_conv3x3(&xs[0], (2, 4, 4, 2), &xs[1], 2, None),
            rng,
            tol,
        ));
    }
    // maxpool2
    {
        let x = rand_tensor_pool_safe(rng, 4, 6, 2);
        out.push(fd_check(
            tag("maxpool2"),
            &[x],
            &mut |t, v| t.maxpool2(v[0]),
            &|xs| ref_maxpool2(&xs[0], (1, 4, 6, 2)),
            rng,
            tol,
        ));
    }
    // batchnorm, train mode, [N,F]
    {
        let x = rand_tensor(rng, vec![6, 5], -1.0, 1.0);
        let g = rand_tensor(rng, vec![5], 0.5, 1.5);
        let b = rand_tensor(rng, vec![5], -0.5, 0.5);
        out.push(fd_check(
            tag("batchnorm/train"),
            &[x, g, b],
            &mut |t, v| {
                let mut state = BnState::new(5);
                t.batchnorm(v[0], v[1], v[2], &mut state, Mode::Train)
            },
            &|xs| ref_batchnorm_train(&xs[0], 6, 5, &xs[1], &xs[2]),
            rng,
            tol,
        ));
    }
    // batchnorm, train mode, spatial [N,H,W,C]
    {
        let x = rand_tensor(rng, vec![2, 4, 4, 3], -1.0, 1.0);
        let g = rand_tensor(rng, vec![3], 0.5, 1.5);
        let b = rand_tensor(rng, vec![3], -0.5, 0.5);
        out.push(fd_check(
            tag("batchnorm/spatial"),
            &[x, g, b],
            &mut |t, v| {
                let mut state = BnState::new(3);
                t.batchnorm(v[0], v[1], v[2], &mut state, Mode::Train)
            },
            &|xs| ref_batchnorm_train(&xs[0], 32, 3, &xs[1], &xs[2]),
            rng,
            tol,
        ));
    }
    // batchnorm, infer mode
    {
        let x = rand_tensor(rng, vec![4, 5], -1.0, 1.0);
        let g = rand_tensor(rng, vec![5], 0.5, 1.5);
        let b = rand_tensor(rng, vec![5], -0.5, 0.5);
        let rm: Vec<f32> = (0..5).map(|_| rng.random_range(-0.5..0.5)).collect();
        let rv: Vec<f32> = (0..5).map(|_| rng.random_range(0.5..1.5)).collect();
        let rm64: Vec<f64> = rm.iter().map(|&v| v as f64).collect();
        let rv64: Vec<f64> = rv.iter().map(|&v| v as f64).collect();
        out.push(fd_check(
            tag("batchnorm/infer"),
            &[x, g, b],
            &mut |t, v| {
                let mut state = BnState {
                    running_mean: rm.clone(),
                    running_var: rv.clone(),
                };
                t.batchnorm(v[0], v[1], v[2], &mut state, Mode::Infer)
            },
            &|xs| ref_batchnorm_infer(&xs[0], 4, 5, &xs[1], &xs[2], &rm64, &rv64),
            rng,
            tol,
        ));
    }
    // dense
    {
        let x = rand_tensor(rng, vec![3, 4], -1.0, 1.0);
        let w = rand_tensor(rng, vec![4, 5], -1.0, 1.0);
        let b = rand_tensor(rng, vec![5], -0.5, 0.5);
        out.push(fd_check(
            tag("dense"),
            &[x, w, b],
            &mut |t, v| t.dense(v[0], v[1], Some(v[2])),
            &|xs| ref_dense(&xs[0], 3, 4, &xs[1], 5, Some(&xs[2])),
            rng,
            tol,
        ));
    }
    // relu
    {
        let x = rand_tensor_kink_safe(rng, vec![24]);
        out.push(fd_check(
            tag("relu"),
            &[x],
            &mut |t, v| Ok(t.relu(v[0])),
            &|xs| ref_relu(&xs[0]),
            rng,
            tol,
        ));
    }
    // softmax
    {
        let x = rand_tensor(rng, vec![4, 6], -2.0, 2.0);
        out.push(fd_check(
            tag("softmax"),
            &[x],
            &mut |t, v| t.softmax(v[0]),
            &|xs| ref_softmax(&xs[0], 4, 6),
            rng,
            tol,
        ));
    }
    // fused softmax + cross-entropy
    {
        let x = rand_tensor(rng, vec![4, 8], -2.0, 2.0);
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..8)).collect();
        let labels_ref = labels.clone();
        out.push(fd_check(
            tag("softmax+cross_entropy"),
            &[x],
            &mut |t, v| {
                let p = t.softmax(v[0])?;
                t.cross_entropy(p, &labels)
            },
            &|xs| ref_cross_entropy(&ref_softmax(&xs[0], 4, 8), 8, &labels_ref),
            rng,
            tol,
        ));
    }
    // cross-entropy on raw probabilities
    {
        let p = rand_tensor(rng, vec![3, 5], 0.05, 1.0);
        let labels: Vec<usize> = (0..3).map(|_| rng.random_range(0..5)).collect();
        let labels_ref = labels.clone();
        out.push(fd_check(
            tag("cross_entropy"),
            &[p],
            &mut |t, v| t.cross_entropy(v[0], &labels),
            &|xs| ref_cross_entropy(&xs[0], 5, &labels_ref),
            rng,
            tol,
        ));
    }
    // concat
    {
        let a = rand_tensor(rng, vec![3, 4], -1.0, 1.0);
        let b = rand_tensor(rng, vec![3, 4], -1.0, 1.0);
        out.push(fd_check(
            tag("concat"),
            &[a, b],
            &mut |t, v| t.concat(v[0], v[1]),
            &|xs| ref_concat(&xs[0], &xs[1], 3, 4),
            rng,
            tol,
        ));
    }
    // kronecker
    {
        let a = rand_tensor(rng, vec![2, 5], -1.0, 1.0);
        let b = rand_tensor(rng, vec![2, 5], -1.0, 1.0);
        out.push(fd_check(
            tag("kronecker"),
            &[a, b],
            &mut |t, v| t.kronecker(v[0], v[1]),
            &|xs| ref_kronecker(&xs[0], &xs[1], 2, 5),
            rng,
            tol,
        ));
    }
    // elementwise and reductions
    {
        let a = rand_tensor(rng, vec![3, 4], -1.0, 1.0);
        let b = rand_tensor(rng, vec![3, 4], -1.0, 1.0);
        out.push(fd_check(
            tag("add"),
            &[a.clone(), b.clone()],
            &mut |t, v| t.add(v[0], v[1]),
            &|xs| xs[0].iter().zip(&xs[1]).map(|(x, y)| x + y).collect(),
            rng,
            tol,
        ));
        out.push(fd_check(
            tag("sub"),
            &[a.clone(), b.clone()],
            &mut |t, v| t.sub(v[0], v[1]),
            &|xs| xs[0].iter().zip(&xs[1]).map(|(x, y)| x - y).collect(),
            rng,
            tol,
        ));
        out.push(fd_check(
            tag("mul"),
            &[a.clone(), b],
            &mut |t, v| t.mul(v[0], v[1]),
            &|xs| xs[0].iter().zip(&xs[1]).map(|(x, y)| x * y).collect(),
            rng,
            tol,
        ));
        out.push(fd_check(
            tag("scale"),
            &[a.clone()],
            &mut |t, v| Ok(t.scale(v[0], 0.75)),
            &|xs| xs[0].iter().map(|x| x * 0.75).collect(),
            rng,
            tol,
        ));
        out.push(fd_check(
            tag("sum"),
            &[a.clone()],
            &mut |t, v| Ok(t.sum(v[0])),
            &|xs| vec![xs[0].iter().sum()],
            rng,
            tol,
        ));
        out.push(fd_check(
            tag("mean"),
            &[a.clone()],
            &mut |t, v| Ok(t.mean(v[0])),
            &|xs| vec![xs[0].iter().sum::<f64>() / xs[0].len() as f64],
            rng,
            tol,
        ));
        out.push(fd_check(
            tag("flatten"),
            &[a],
            &mut |t, v| Ok(t.flatten(v[0])),
            &|xs| xs[0].clone(),
            rng,
            tol,
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// full-network check
// ---------------------------------------------------------------------------

/// Trainable tensors as f64, in the model's canonical order: per conv block
/// (weight, gamma, beta), then (fc weight, gamma, beta), per hidden layer
/// (weight, gamma, beta), then (out weight, out bias).
fn trainables_f64(model: &mut PairModel) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    model.for_each_trainable_mut(|_, t| {
        out.push(t.data().iter().map(|&v| v as f64).collect());
    });
    out
}

/// Reference forward of the whole pair classifier (train-mode batchnorm),
/// returning the mean cross-entropy loss. Pure f64, independent of the tape.
///
/// When `pattern` is given, the relu activation signs and maxpool argmax
/// choices are appended to it. Two evaluations with different patterns
/// straddle a kink, and a secant across a kink does not estimate the
/// gradient — callers use the pattern to reject such intervals.
fn ref_pair_loss(
    fen_cfg: &FenConfig,
    fusion_cfg: &FusionConfig,
    tensors: &[Vec<f64>],
    x1: &[f64],
    x2: &[f64],
    batch: usize,
    labels: &[usize],
    mut pattern: Option<&mut Vec<u8>>,
) -> f64 {
    let nb = fen_cfg.block_channels.len();
    // both fragment batches run through the tower pooled, matching the
    // implementation's shared-batchnorm semantics
    let pooled_n = 2 * batch;
    let mut act: Vec<f64> = x1.iter().chain(x2).copied().collect();
    {
        let mut side = fen_cfg.input_side;
        let mut ci = fen_cfg.input_channels;
        for (i, &co) in fen_cfg.block_channels.iter().enumerate() {
            let w = &tensors[3 * i];
            let gamma = &tensors[3 * i + 1];
            let beta = &tensors[3 * i + 2];
            act = ref_conv3x3(&act, (pooled_n, side, side, ci), w, co, None);
            act = ref_batchnorm_train(&act, pooled_n * side * side, co, gamma, beta);
            if let Some(rec) = pattern.as_deref_mut() {
                rec.extend(act.iter().map(|&v| (v > 0.0) as u8));
            }
            act = ref_relu(&act);
            act = ref_maxpool2_rec(&act, (pooled_n, side, side, co), pattern.as_deref_mut());
            side /= 2;
            ci = co;
        }
        let flat = fen_cfg.flattened_dim();
        let fd = fen_cfg.feature_dim;
        act = ref_dense(&act, pooled_n, flat, &tensors[3 * nb], fd, None);
        act = ref_batchnorm_train(&act, pooled_n, fd, &tensors[3 * nb + 1], &tensors[3 * nb + 2]);
    }
    let fd = fen_cfg.feature_dim;
    let phi1 = act[..batch * fd].to_vec();
    let phi2 = act[batch * fd..].to_vec();
    let mut h = match fusion_cfg.kind {
        FusionKind::Concat => ref_concat(&phi1, &phi2, batch, fd),
        FusionKind::Kronecker => ref_kronecker(&phi1, &phi2, batch, fd),
    };
    let mut dim = fusion_cfg.combined_dim();
    let head_base = 3 * nb + 3;
    for (j, &hj) in fusion_cfg.hidden_dims.iter().enumerate() {
        let w = &tensors[head_base + 3 * j];
        let gamma = &tensors[head_base + 3 * j + 1];
        let beta = &tensors[head_base + 3 * j + 2];
        h = ref_dense(&h, batch, dim, w, hj, None);
        h = ref_batchnorm_train(&h, batch, hj, gamma, beta);
        if let Some(rec) = pattern.as_deref_mut() {
            rec.extend(h.iter().map(|&v| (v > 0.0) as u8));
        }
        h = ref_relu(&h);
        dim = hj;
    }
    let out_w = &tensors[head_base + 3 * fusion_cfg.hidden_dims.len()];
    let out_b = &tensors[head_base + 3 * fusion_cfg.hidden_dims.len() + 1];
    let logits = ref_dense(&h, batch, dim, out_w, fusion_cfg.num_classes, Some(out_b));
    let probs = ref_softmax(&logits, batch, fusion_cfg.num_classes);
    let losses = ref_cross_entropy(&probs, fusion_cfg.num_classes, labels);
    losses.iter().sum::<f64>() / losses.len() as f64
}

/// [`ref_maxpool2`] that can record the argmax choice per window.
fn ref_maxpool2_rec(
    x: &[f64],
    dims: (usize, usize, usize, usize),
    mut rec: Option<&mut Vec<u8>>,
) -> Vec<f64> {
    let (n, h, w, c) = dims;
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; n * oh * ow * c];
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_k = 0u8;
                    for (k, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
                        let v = x[((ni * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch];
                        if v > best {
                            best = v;
                            best_k = k as u8;
                        }
                    }
                    out[((ni * oh + oy) * ow + ox) * c + ch] = best;
                    if let Some(r) = rec.as_deref_mut() {
                        r.push(best_k);
                    }
                }
            }
        }
    }
    out
}

/// Finite-difference step for the composed network check. The per-op step of
/// 1e-3 is too coarse here: perturbing a first-layer weight moves every
/// downstream activation, and the secant picks up relu/argmax kink crossings
/// plus batchnorm curvature. 1e-4 keeps truncation error well inside the
/// 1e-3 relative tolerance while f64 evaluation keeps roundoff negligible;
/// kink-straddling intervals are rejected via the activation pattern.
pub const NETWORK_FD_STEP: f64 = 1e-4;

/// Finite-difference check of the full desk-scale network on `samples`
/// randomly selected parameters. The head's final layer gets fresh non-zero
/// weights so its gradient path is informative.
pub fn check_network(
    kind: FusionKind,
    seed: u64,
    samples: usize,
    tol: &Tolerance,
) -> CheckReport {
    let fen_cfg = FenConfig::desk();
    let fusion_cfg = FusionConfig::desk(kind);
    let mut model = PairModel::init(fen_cfg.clone(), fusion_cfg.clone(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(crate::rng::derive_seed(
        seed,
        0x6e6574_636865636b, // "netcheck"
        kind as u64,
    ));
    {
        let dim = *fusion_cfg.hidden_dims.last().unwrap();
        model.head.out_weight = crate::nn::he_uniform(&mut rng, vec![dim, 8], dim);
        model.head.out_bias =
            crate::nn::he_uniform(&mut rng, vec![8], 8);
    }

    let batch = 4;
    let numel = batch * fen_cfg.input_side * fen_cfg.input_side * fen_cfg.input_channels;
    let x1 = rand_tensor(
        &mut rng,
        vec![batch, fen_cfg.input_side, fen_cfg.input_side, 3],
        -1.0,
        1.0,
    );
    let x2 = rand_tensor(
        &mut rng,
        vec![batch, fen_cfg.input_side, fen_cfg.input_side, 3],
        -1.0,
        1.0,
    );
    debug_assert_eq!(x1.numel(), numel);
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..8)).collect();

    // analytic gradients from the implementation
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let v1 = tape.input(x1.clone());
    let v2 = tape.input(x2.clone());
    let logits = model
        .forward_logits(&mut tape, &bound, v1, v2, Mode::Train)
        .unwrap();
    let probs = tape.softmax(logits).unwrap();
    let ce = tape.cross_entropy(probs, &labels).unwrap();
    let loss = tape.mean(ce);
    let grads = tape.backward(loss).unwrap();
    let vars = bound.trainable_vars();

    // reference loss closure over the f64 parameter snapshot
    let mut tensors = trainables_f64(&mut model);
    let x1_64 = to_f64(&x1);
    let x2_64 = to_f64(&x2);

    // forward agreement
    let impl_loss = tape.value(loss).data()[0] as f64;
    let ref_loss = ref_pair_loss(
        &fen_cfg, &fusion_cfg, &tensors, &x1_64, &x2_64, batch, &labels, None,
    );
    let forward_max_diff = (impl_loss - ref_loss).abs();

    let mut passed = true;
    let mut worst = 0.0f64;
    let mut accepted = 0usize;
    let mut attempts = 0usize;
    while accepted < samples && attempts < samples * 20 {
        attempts += 1;
        let ti = rng.random_range(0..tensors.len());
        let e = rng.random_range(0..tensors[ti].len());
        let orig = tensors[ti][e];
        let mut pat_plus = Vec::new();
        tensors[ti][e] = orig + NETWORK_FD_STEP;
        let lp = ref_pair_loss(
            &fen_cfg,
            &fusion_cfg,
            &tensors,
            &x1_64,
            &x2_64,
            batch,
            &labels,
            Some(&mut pat_plus),
        );
        let mut pat_minus = Vec::new();
        tensors[ti][e] = orig - NETWORK_FD_STEP;
        let lm = ref_pair_loss(
            &fen_cfg,
            &fusion_cfg,
            &tensors,
            &x1_64,
            &x2_64,
            batch,
            &labels,
            Some(&mut pat_minus),
        );
        tensors[ti][e] = orig;
        if pat_plus != pat_minus {
            // a relu or argmax flipped inside the interval; the secant does
            // not estimate the gradient there, draw another parameter
            continue;
        }
        accepted += 1;
        let fd = (lp - lm) / (2.0 * NETWORK_FD_STEP);
        let ad = grads.get(vars[ti]).expect("trainable gradient").data()[e] as f64;
        let diff = (ad - fd).abs();
        if diff > worst {
            worst = diff;
        }
        if !tol.accepts(ad, fd) {
            passed = false;
        }
    }
    if accepted < samples {
        passed = false;
    }
    CheckReport {
        name: format!("network/{} (seed {seed})", fusion_cfg.kind.as_str()),
        passed,
        gradients_checked: accepted,
        worst_abs_diff: worst,
        forward_max_diff,
    }
}

/// Per-op sweep plus the full desk-scale network for both fusion kinds.
/// This is the suite behind the `gradcheck` CLI subcommand.
pub fn run_full_suite(base_seed: u64, seeds: u64, tol: &Tolerance) -> Vec<CheckReport> {
    let mut reports = run_op_suite(base_seed, seeds, tol);
    for round in 0..seeds {
        let seed = crate::rng::derive_seed(base_seed, 0x6e6574, round); // "net"
        reports.push(check_network(FusionKind::Concat, seed, 10, tol));
        reports.push(check_network(FusionKind::Kronecker, seed, 10, tol));
    }
    reports
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tolerance_floor_and_relative_band() {
        let tol = Tolerance::default();
        assert!(tol.accepts(0.0, 9e-6));
        assert!(!tol.accepts(0.0, 2e-5));
        assert!(tol.accepts(1.0, 1.0009));
        assert!(!tol.accepts(1.0, 1.002));
    }

    #[test]
    fn single_seed_op_sweep_passes() {
        let reports = run_op_suite(12345, 1, &Tolerance::default());
        for r in &reports {
            assert!(r.passed, "{r}");
        }
        assert_eq!(reports.len(), 20);
    }

    #[test]
    fn network_check_passes_for_both_kinds() {
        let tol = Tolerance::default();
        for kind in [FusionKind::Concat, FusionKind::Kronecker] {
            let report = check_network(kind, 7, 20, &tol);
            assert!(report.passed, "{report}");
            assert!(report.forward_max_diff < 1e-4, "{report}");
        }
    }
}
