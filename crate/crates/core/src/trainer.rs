//! SGD training over fragment pairs, and seeded evaluation.
//!
//! Fresh pairs are sampled per image per epoch (on-the-fly augmentation);
//! validation uses one frozen seeded pair per image. Everything derives from
//! (seed, epoch, image index), so a (seed, config, data) triple fully
//! determines the metric trajectory.

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::ImageRGB;
use crate::metrics::MetricsRecord;
use crate::model::{stack_pixels, PairModel};
use crate::rng::derive_seed;
use crate::sampler::{sample_pair, Fragment, PairSample, RelativePositionLabel, SamplerConfig};
use crate::tensor::{Mode, Tape};

const TRAIN_PAIR_TAG: u64 = 0x7472_7061; // "trpa"
const SHUFFLE_TAG: u64 = 0x7368_7566; // "shuf"
const EVAL_PAIR_TAG: u64 = 0x6576_7061; // "evpa"

/// Optimization hyperparameters. Plain SGD; momentum is available but
/// defaults to off. Mean-reduced loss is what makes lr 0.1 sane.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(
        learning_rate: f32,
        momentum: f32,
        batch_size: usize,
        epochs: usize,
        seed: u64,
    ) -> Result<TrainConfig> {
        // lr 0 is degenerate but legal: it must leave parameters bit-identical
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(Error::contract(format!(
                "learning rate must be finite and non-negative, got {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::contract(format!(
                "momentum must be in [0, 1), got {momentum}"
            )));
        }
        if batch_size < 2 {
            return Err(Error::contract(format!(
                "batch size must be at least 2 for batchnorm, got {batch_size}"
            )));
        }
        Ok(TrainConfig {
            learning_rate,
            momentum,
            batch_size,
            epochs,
            seed,
        })
    }

    pub fn with_defaults(epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig::new(0.1, 0.0, 64, epochs, seed).expect("defaults are valid")
    }
}

/// SGD state: momentum buffers aligned with the model's canonical
/// trainable order (unused while momentum is 0).
pub struct Sgd {
    lr: f32,
    momentum: f32,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(cfg: &TrainConfig) -> Sgd {
        Sgd {
            lr: cfg.learning_rate,
            momentum: cfg.momentum,
            velocity: Vec::new(),
        }
    }

    /// Applies `p -= lr * step` to every trainable, where `step` is the raw
    /// gradient or the momentum-averaged one. The first parameter element is
    /// re-derived independently and compared bit-for-bit as an update probe.
    pub fn step(
        &mut self,
        model: &mut PairModel,
        grads: &[crate::tensor::Tensor],
    ) -> Result<()> {
        let lr = self.lr;
        let momentum = self.momentum;
        if self.velocity.is_empty() && momentum > 0.0 {
            self.velocity = grads.iter().map(|g| vec![0.0; g.numel()]).collect();
        }
        let mut idx = 0usize;
        let mut probe: Option<(f32, f32, f32)> = None; // (before, step, after)
        let velocity = &mut self.velocity;
        model.for_each_trainable_mut(|_, t| {
            let g = &grads[idx];
            debug_assert_eq!(g.shape(), t.shape());
            let data = t.data_mut();
            if momentum > 0.0 {
                let v = &mut velocity[idx];
                for ((p, &gv), vv) in data.iter_mut().zip(g.data()).zip(v.iter_mut()) {
                    *vv = momentum * *vv + gv;
                    *p -= lr * *vv;
                }
                if idx == 0 {
                    probe = Some((
                        data[0] + lr * velocity[0][0],
                        velocity[0][0],
                        data[0],
                    ));
                }
            } else {
                if idx == 0 && !data.is_empty() {
                    let before = data[0];
                    let step_val = g.data()[0];
                    probe = Some((before, step_val, before - lr * step_val));
                }
                for (p, &gv) in data.iter_mut().zip(g.data()) {
                    *p -= lr * gv;
                }
            }
            idx += 1;
        });
        if let Some((_, _, expected)) = probe {
            let mut actual = None;
            model.for_each_trainable_mut(|_, t| {
                if actual.is_none() {
                    actual = Some(t.data()[0]);
                }
            });
            let actual = actual.expect("model has parameters");
            assert_eq!(
                actual.to_bits(),
                expected.to_bits(),
                "sgd probe: p_after != p_before - lr*grad"
            );
        }
        Ok(())
    }
}

fn sample_epoch_pairs(
    sampler_cfg: &SamplerConfig,
    images: &[ImageRGB],
    seed: u64,
    epoch: usize,
) -> Result<Vec<PairSample>> {
    images
        .iter()
        .enumerate()
        .map(|(idx, img)| {
            let s = derive_seed(seed, TRAIN_PAIR_TAG ^ (epoch as u64), idx as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            sample_pair(sampler_cfg, img, &mut rng)
        })
        .collect()
}

/// One SGD epoch over fresh pairs. Returns the mean training loss.
pub fn train_epoch(
    model: &mut PairModel,
    sgd: &mut Sgd,
    sampler_cfg: &SamplerConfig,
    images: &[ImageRGB],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::contract("empty dataset"));
    }
    let pairs = sample_epoch_pairs(sampler_cfg, images, cfg.seed, epoch)?;
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut shuffle_rng =
        ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SHUFFLE_TAG, epoch as u64));
    order.shuffle(&mut shuffle_rng);

    let mut total_loss = 0.0f64;
    let mut total_samples = 0usize;
    for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
        if chunk.len() < 2 {
            // batchnorm needs at least 2 rows; drop a trailing singleton
            continue;
        }
        let batch: Vec<&PairSample> = chunk.iter().map(|&i| &pairs[i]).collect();
        let x1 = stack_pixels(batch.iter().map(|p| &p.central))?;
        let x2 = stack_pixels(batch.iter().map(|p| &p.neighbor))?;
        let labels: Vec<usize> = batch.iter().map(|p| p.label.class_index()).collect();

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let v1 = tape.input(x1);
        let v2 = tape.input(x2);
        let logits = model.forward_logits(&mut tape, &bound, v1, v2, Mode::Train)?;
        let probs = tape.softmax(logits)?;
        let ce = tape.cross_entropy(probs, &labels)?;
        let loss = tape.mean(ce);
        let loss_val = tape.value(loss).data()[0];
        if !loss_val.is_finite() {
            return Err(Error::NonFiniteLoss { batch: batch_idx });
        }
        let grads = tape.backward(loss)?;
        let vars = bound.trainable_vars();
        let grad_tensors: Vec<crate::tensor::Tensor> = vars
            .iter()
            .map(|&v| grads.get(v).expect("trainable gradient").clone())
            .collect();
        sgd.step(model, &grad_tensors)?;

        total_loss += loss_val as f64 * chunk.len() as f64;
        total_samples += chunk.len();
    }
    if total_samples == 0 {
        return Err(Error::contract(
            "no trainable batches (dataset smaller than 2 samples)",
        ));
    }
    Ok(total_loss / total_samples as f64)
}

/// Anything that can classify (central, neighbor) pairs.
pub trait PairPredictor {
    fn predict_pairs(&mut self, pairs: &[(&Fragment, &Fragment)]) -> Result<Vec<usize>>;
}

impl PairPredictor for PairModel {
    fn predict_pairs(&mut self, pairs: &[(&Fragment, &Fragment)]) -> Result<Vec<usize>> {
        let rows = self.predict_batch(pairs)?;
        Ok(rows
            .iter()
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect())
    }
}

const EVAL_CHUNK: usize = 256;

/// Accuracy over one frozen seeded pair per validation image.
pub fn evaluate(
    predictor: &mut dyn PairPredictor,
    sampler_cfg: &SamplerConfig,
    images: &[ImageRGB],
    seed: u64,
) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::contract("empty validation set"));
    }
    let pairs: Vec<PairSample> = images
        .iter()
        .enumerate()
        .map(|(idx, img)| {
            let s = derive_seed(seed, EVAL_PAIR_TAG, idx as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            sample_pair(sampler_cfg, img, &mut rng)
        })
        .collect::<Result<_>>()?;
    let mut correct = 0usize;
    for chunk in pairs.chunks(EVAL_CHUNK) {
        let refs: Vec<(&Fragment, &Fragment)> =
            chunk.iter().map(|p| (&p.central, &p.neighbor)).collect();
        let preds = predictor.predict_pairs(&refs)?;
        correct += preds
            .iter()
            .zip(chunk)
            .filter(|(&pred, p)| pred == p.label.class_index())
            .count();
    }
    Ok(correct as f64 / pairs.len() as f64)
}

/// Outcome of a (possibly early-stopped) training run.
pub struct TrainOutcome {
    pub metrics: Vec<MetricsRecord>,
    pub epochs_run: usize,
}

/// Full training loop: per epoch, one pass of SGD then a validation pass.
/// `start_epoch` continues a fine-tuned run's epoch numbering. Stops early
/// once validation accuracy reaches `stop_at_accuracy`.
#[allow(clippy::too_many_arguments)]
pub fn train(
    model: &mut PairModel,
    sampler_cfg: &SamplerConfig,
    train_images: &[ImageRGB],
    val_images: &[ImageRGB],
    cfg: &TrainConfig,
    start_epoch: usize,
    stop_at_accuracy: Option<f64>,
    mut on_epoch: impl FnMut(&MetricsRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    let mut sgd = Sgd::new(cfg);
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for e in 0..cfg.epochs {
        let epoch = start_epoch + e;
        let train_loss = train_epoch(model, &mut sgd, sampler_cfg, train_images, cfg, epoch)?;
        let val_accuracy = evaluate(model, sampler_cfg, val_images, cfg.seed)?;
        let record = MetricsRecord {
            epoch,
            train_loss,
            val_accuracy,
        };
        on_epoch(&record)?;
        metrics.push(record);
        if stop_at_accuracy.is_some_and(|t| val_accuracy >= t) {
            break;
        }
    }
    Ok(TrainOutcome {
        epochs_run: metrics.len(),
        metrics,
    })
}

/// Predictor that reads the true label off the fragment's ground-truth cell.
/// Only for tests and consistency checks; a real model never sees cells.
pub struct OraclePredictor;

impl PairPredictor for OraclePredictor {
    fn predict_pairs(&mut self, pairs: &[(&Fragment, &Fragment)]) -> Result<Vec<usize>> {
        pairs
            .iter()
            .map(|(_, neighbor)| {
                RelativePositionLabel::from_cell(neighbor.cell)
                    .map(|l| l.class_index())
                    .ok_or_else(|| Error::contract("neighbor fragment sits on the center cell"))
            })
            .collect()
    }
}
