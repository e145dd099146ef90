//! Synthetic corpora on which the relative-position task is solvable at
//! desk scale, plus the closed-form mean-color baseline that certifies the
//! label signal is actually present.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::ImageRGB;
use crate::rng::derive_seed;
use crate::sampler::{Fragment, NON_CENTER_CELLS};

const IMAGE_TAG: u64 = 0x73796e7468; // "synth"

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyntheticKind {
    /// 2-D linear color ramp with random orientation; the mean color of a
    /// fragment is an injective affine function of its position, so relative
    /// position is recoverable from mean color difference alone.
    Gradient,
    /// Random-phase, random-period checkerboards.
    Checker,
    /// Sums of random Gaussian color blobs.
    Blobs,
}

impl SyntheticKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SyntheticKind::Gradient => "gradient",
            SyntheticKind::Checker => "checker",
            SyntheticKind::Blobs => "blobs",
        }
    }

    pub fn parse(s: &str) -> Result<SyntheticKind> {
        match s {
            "gradient" => Ok(SyntheticKind::Gradient),
            "checker" => Ok(SyntheticKind::Checker),
            "blobs" => Ok(SyntheticKind::Blobs),
            other => Err(Error::contract(format!(
                "unknown synthetic kind `{other}` (expected gradient|checker|blobs)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub frame_side: usize,
    pub count: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(kind: SyntheticKind, frame_side: usize, count: usize, seed: u64) -> Result<Self> {
        if count == 0 {
            return Err(Error::contract("count must be at least 1"));
        }
        if frame_side == 0 {
            return Err(Error::contract("frame_side must be positive"));
        }
        Ok(SyntheticSpec {
            kind,
            frame_side,
            count,
            seed,
        })
    }
}

/// Generates the corpus; image `i` depends only on (seed, kind, i).
pub fn generate(spec: &SyntheticSpec) -> Vec<ImageRGB> {
    (0..spec.count).map(|i| generate_one(spec, i)).collect()
}

pub fn generate_one(spec: &SyntheticSpec, index: usize) -> ImageRGB {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        spec.seed,
        IMAGE_TAG ^ spec.kind.as_str().len() as u64,
        index as u64,
    ));
    match spec.kind {
        SyntheticKind::Gradient => gradient_image(spec.frame_side, &mut rng),
        SyntheticKind::Checker => checker_image(spec.frame_side, &mut rng),
        SyntheticKind::Blobs => blobs_image(spec.frame_side, &mut rng),
    }
}

/// Two color slope vectors along orthogonal spatial axes (randomly rotated).
/// Constraints keep every channel strictly monotonic along its gradient and
/// the two slopes well-separated in color space, so all 8 neighbor
/// displacements produce distinct mean-color offsets.
fn gradient_image(side: usize, rng: &mut ChaCha8Rng) -> ImageRGB {
    let (a, b) = loop {
        let a: Vec<f64> = (0..3).map(|_| rng.random_range(-60.0..60.0)).collect();
        let b: Vec<f64> = (0..3).map(|_| rng.random_range(-60.0..60.0)).collect();
        let ok_channels = (0..3).all(|c| {
            let hyp = (a[c] * a[c] + b[c] * b[c]).sqrt();
            hyp >= 25.0 && a[c].abs() + b[c].abs() <= 127.0
        });
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if ok_channels && (dot / (na * nb)).abs() <= 0.866 {
            break (a, b);
        }
    };
    let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (u, v) = ((phi.cos(), phi.sin()), (-phi.sin(), phi.cos()));

    let mut pixels = Vec::with_capacity(3 * side * side);
    let half = (side as f64 - 1.0) / 2.0;
    for y in 0..side {
        for x in 0..side {
            // normalized coordinates in [-1, 1]
            let px = (x as f64 - half) / half.max(1.0);
            let py = (y as f64 - half) / half.max(1.0);
            let s = u.0 * px + u.1 * py;
            let t = v.0 * px + v.1 * py;
            for c in 0..3 {
                let val = 128.0 + a[c] * s / 2.0 + b[c] * t / 2.0;
                pixels.push(val.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    ImageRGB::new(side, side, pixels).expect("valid dimensions")
}

fn checker_image(side: usize, rng: &mut ChaCha8Rng) -> ImageRGB {
    let cell = rng.random_range(side / 16..=side / 4).max(2);
    let (ox, oy) = (rng.random_range(0..cell), rng.random_range(0..cell));
    let c0: [u8; 3] = std::array::from_fn(|_| rng.random_range(0..128));
    let c1: [u8; 3] = std::array::from_fn(|_| rng.random_range(128..=255));
    let mut pixels = Vec::with_capacity(3 * side * side);
    for y in 0..side {
        for x in 0..side {
            let parity = ((x + ox) / cell + (y + oy) / cell) % 2;
            let c = if parity == 0 { c0 } else { c1 };
            pixels.extend_from_slice(&c);
        }
    }
    ImageRGB::new(side, side, pixels).expect("valid dimensions")
}

fn blobs_image(side: usize, rng: &mut ChaCha8Rng) -> ImageRGB {
    let count = rng.random_range(3..=6);
    struct Blob {
        cx: f64,
        cy: f64,
        inv_two_sigma2: f64,
        amp: [f64; 3],
    }
    let blobs: Vec<Blob> = (0..count)
        .map(|_| {
            let sigma = rng.random_range(side as f64 / 8.0..side as f64 / 3.0);
            Blob {
                cx: rng.random_range(0.0..side as f64),
                cy: rng.random_range(0.0..side as f64),
                inv_two_sigma2: 1.0 / (2.0 * sigma * sigma),
                amp: std::array::from_fn(|_| rng.random_range(-120.0..120.0)),
            }
        })
        .collect();
    let mut pixels = Vec::with_capacity(3 * side * side);
    for y in 0..side {
        for x in 0..side {
            let mut acc = [128.0f64; 3];
            for blob in &blobs {
                let dx = x as f64 - blob.cx;
                let dy = y as f64 - blob.cy;
                let w = (-(dx * dx + dy * dy) * blob.inv_two_sigma2).exp();
                for c in 0..3 {
                    acc[c] += blob.amp[c] * w;
                }
            }
            for c in 0..3 {
                pixels.push(acc[c].round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    ImageRGB::new(side, side, pixels).expect("valid dimensions")
}

// ---------------------------------------------------------------------------
// analytic baseline
// ---------------------------------------------------------------------------

fn fragment_mean(frag: &Fragment) -> [f64; 3] {
    let d = frag.pixels.data();
    let mut sum = [0.0f64; 3];
    for px in d.chunks_exact(3) {
        for c in 0..3 {
            sum[c] += px[c] as f64;
        }
    }
    let n = (d.len() / 3) as f64;
    sum.map(|s| s / n)
}

/// Mean color of the left/right (axis 1) or top/bottom (axis 0) half.
fn half_mean(frag: &Fragment, axis: usize, upper: bool) -> [f64; 3] {
    let side = frag.pixels.shape()[0];
    let d = frag.pixels.data();
    let mut sum = [0.0f64; 3];
    let mut count = 0.0;
    for y in 0..side {
        for x in 0..side {
            let coord = if axis == 0 { y } else { x };
            let in_half = if upper { coord >= side / 2 } else { coord < side / 2 };
            if in_half {
                let i = (y * side + x) * 3;
                for c in 0..3 {
                    sum[c] += d[i + c] as f64;
                }
                count += 1.0;
            }
        }
    }
    sum.map(|s| s / count)
}

/// Closed-form relative-position classifier, independent of the network:
/// estimates the local color gradient from the central fragment's half-mean
/// differences, then picks the neighbor displacement whose predicted
/// mean-color offset best correlates with the observed one.
pub fn mean_color_baseline(central: &Fragment, neighbor: &Fragment) -> usize {
    let gx: Vec<f64> = half_mean(central, 1, true)
        .iter()
        .zip(half_mean(central, 1, false))
        .map(|(hi, lo)| hi - lo)
        .collect();
    let gy: Vec<f64> = half_mean(central, 0, true)
        .iter()
        .zip(half_mean(central, 0, false))
        .map(|(hi, lo)| hi - lo)
        .collect();
    let mc = fragment_mean(central);
    let mn = fragment_mean(neighbor);
    let delta: Vec<f64> = mn.iter().zip(mc).map(|(n, c)| n - c).collect();

    let mut best = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    for (idx, &(row, col)) in NON_CENTER_CELLS.iter().enumerate() {
        let dy = row as f64 - 1.0;
        let dx = col as f64 - 1.0;
        let pred: Vec<f64> = (0..3).map(|c| dx * gx[c] + dy * gy[c]).collect();
        let norm: f64 = pred.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let score: f64 = pred.iter().zip(&delta).map(|(p, d)| p * d).sum::<f64>() / norm;
        if score > best_score {
            best_score = score;
            best = idx;
        }
    }
    best
}
