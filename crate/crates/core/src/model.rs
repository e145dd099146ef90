//! The full pair classifier: one shared feature extractor applied to both
//! fragments, a combination layer, and the classification head.
//!
//! Parameter tensors are visited in a fixed canonical order everywhere
//! (SGD updates, checkpoints), which is what makes training runs and
//! checkpoint files bit-reproducible.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fen::{BoundFen, FenConfig, FenParams};
use crate::fusion::{combine, BoundHead, FusionConfig, HeadParams};
use crate::rng::derive_seed;
use crate::sampler::Fragment;
use crate::tensor::{Mode, Tape, Tensor, Var};

const INIT_TAG: u64 = 0x696e6974; // "init"

/// Feature extractor + head with their configs.
#[derive(Clone, Debug, PartialEq)]
pub struct PairModel {
    pub fen: FenParams,
    pub head: HeadParams,
}

/// Tape bindings for every trainable tensor, in canonical order.
pub struct BoundModel {
    pub fen: BoundFen,
    pub head: BoundHead,
}

impl BoundModel {
    /// Trainable vars in the same canonical order as
    /// [`PairModel::for_each_trainable_mut`].
    pub fn trainable_vars(&self) -> Vec<Var> {
        let mut vars = Vec::new();
        for &(w, gamma, beta) in &self.fen.blocks {
            vars.extend([w, gamma, beta]);
        }
        vars.extend([self.fen.fc_weight, self.fen.fc_gamma, self.fen.fc_beta]);
        for &(w, gamma, beta) in &self.head.hidden {
            vars.extend([w, gamma, beta]);
        }
        vars.extend([self.head.out_weight, self.head.out_bias]);
        vars
    }
}

/// Mutable view of one stored tensor (trainable or batchnorm running stat).
pub enum StoredMut<'a> {
    Tensor(&'a mut Tensor),
    Raw(&'a mut Vec<f32>),
}

impl PairModel {
    /// Fresh parameters from a seed. The fusion feature dim must match the
    /// extractor's output dim.
    pub fn init(fen_cfg: FenConfig, fusion_cfg: FusionConfig, seed: u64) -> Result<PairModel> {
        if fen_cfg.feature_dim != fusion_cfg.feature_dim {
            return Err(Error::contract(format!(
                "fen feature_dim {} != fusion feature_dim {}",
                fen_cfg.feature_dim, fusion_cfg.feature_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, INIT_TAG, 0));
        let fen = FenParams::init(fen_cfg, &mut rng);
        let head = HeadParams::init(fusion_cfg, &mut rng);
        Ok(PairModel { fen, head })
    }

    pub fn fen_config(&self) -> &FenConfig {
        &self.fen.cfg
    }

    pub fn fusion_config(&self) -> &FusionConfig {
        &self.head.cfg
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        BoundModel {
            fen: self.fen.bind(tape),
            head: self.head.bind(tape),
        }
    }

    /// Shared-extractor forward producing `[N, 8]` logits.
    pub fn forward_logits(
        &mut self,
        tape: &mut Tape,
        bound: &BoundModel,
        x1: Var,
        x2: Var,
        mode: Mode,
    ) -> Result<Var> {
        let (phi1, phi2) = self.fen.forward_shared(tape, &bound.fen, x1, x2, mode)?;
        let combined = combine(tape, self.head.cfg.kind, phi1, phi2)?;
        self.head.forward_logits(tape, &bound.head, combined, mode)
    }

    /// Batched inference: probabilities for each (central, neighbor) pair.
    pub fn predict_batch(&mut self, pairs: &[(&Fragment, &Fragment)]) -> Result<Vec<Vec<f32>>> {
        if pairs.is_empty() {
            return Ok(Vec::new());
        }
        let x1 = stack_pixels(pairs.iter().map(|(a, _)| *a))?;
        let x2 = stack_pixels(pairs.iter().map(|(_, b)| *b))?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let v1 = tape.input(x1);
        let v2 = tape.input(x2);
        let logits = self.forward_logits(&mut tape, &bound, v1, v2, Mode::Infer)?;
        let probs = tape.softmax(logits)?;
        let k = self.head.cfg.num_classes;
        Ok(tape
            .value(probs)
            .data()
            .chunks(k)
            .map(|row| row.to_vec())
            .collect())
    }

    /// Visits every trainable tensor, canonical order, mutably.
    pub fn for_each_trainable_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        for (i, b) in self.fen.blocks.iter_mut().enumerate() {
            f(&format!("fen.block{i}.conv.weight"), &mut b.weight);
            f(&format!("fen.block{i}.bn.gamma"), &mut b.bn.gamma);
            f(&format!("fen.block{i}.bn.beta"), &mut b.bn.beta);
        }
        f("fen.fc.weight", &mut self.fen.fc_weight);
        f("fen.fc_bn.gamma", &mut self.fen.fc_bn.gamma);
        f("fen.fc_bn.beta", &mut self.fen.fc_bn.beta);
        for (i, (w, bn)) in self.head.hidden.iter_mut().enumerate() {
            f(&format!("head.hidden{i}.weight"), w);
            f(&format!("head.hidden{i}.bn.gamma"), &mut bn.gamma);
            f(&format!("head.hidden{i}.bn.beta"), &mut bn.beta);
        }
        f("head.out.weight", &mut self.head.out_weight);
        f("head.out.bias", &mut self.head.out_bias);
    }

    /// Visits every stored tensor — trainables plus batchnorm running
    /// statistics — in canonical order. This is the checkpoint layout.
    pub fn for_each_stored_mut(&mut self, mut f: impl FnMut(&str, StoredMut<'_>)) {
        for (i, b) in self.fen.blocks.iter_mut().enumerate() {
            f(
                &format!("fen.block{i}.conv.weight"),
                StoredMut::Tensor(&mut b.weight),
            );
            f(
                &format!("fen.block{i}.bn.gamma"),
                StoredMut::Tensor(&mut b.bn.gamma),
            );
            f(
                &format!("fen.block{i}.bn.beta"),
                StoredMut::Tensor(&mut b.bn.beta),
            );
            f(
                &format!("fen.block{i}.bn.running_mean"),
                StoredMut::Raw(&mut b.bn.state.running_mean),
            );
            f(
                &format!("fen.block{i}.bn.running_var"),
                StoredMut::Raw(&mut b.bn.state.running_var),
            );
        }
        f("fen.fc.weight", StoredMut::Tensor(&mut self.fen.fc_weight));
        f(
            "fen.fc_bn.gamma",
            StoredMut::Tensor(&mut self.fen.fc_bn.gamma),
        );
        f(
            "fen.fc_bn.beta",
            StoredMut::Tensor(&mut self.fen.fc_bn.beta),
        );
        f(
            "fen.fc_bn.running_mean",
            StoredMut::Raw(&mut self.fen.fc_bn.state.running_mean),
        );
        f(
            "fen.fc_bn.running_var",
            StoredMut::Raw(&mut self.fen.fc_bn.state.running_var),
        );
        for (i, (w, bn)) in self.head.hidden.iter_mut().enumerate() {
            f(&format!("head.hidden{i}.weight"), StoredMut::Tensor(w));
            f(
                &format!("head.hidden{i}.bn.gamma"),
                StoredMut::Tensor(&mut bn.gamma),
            );
            f(
                &format!("head.hidden{i}.bn.beta"),
                StoredMut::Tensor(&mut bn.beta),
            );
            f(
                &format!("head.hidden{i}.bn.running_mean"),
                StoredMut::Raw(&mut bn.state.running_mean),
            );
            f(
                &format!("head.hidden{i}.bn.running_var"),
                StoredMut::Raw(&mut bn.state.running_var),
            );
        }
        f(
            "head.out.weight",
            StoredMut::Tensor(&mut self.head.out_weight),
        );
        f("head.out.bias", StoredMut::Tensor(&mut self.head.out_bias));
    }

    /// Snapshot of (name, shape, values) for every stored tensor.
    pub fn stored_tensors(&mut self) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        let mut out = Vec::new();
        self.for_each_stored_mut(|name, stored| {
            let (shape, values) = match stored {
                StoredMut::Tensor(t) => (t.shape().to_vec(), t.data().to_vec()),
                StoredMut::Raw(v) => (vec![v.len()], v.clone()),
            };
            out.push((name.to_string(), shape, values));
        });
        out
    }
}

/// Stacks fragment pixel tensors `[s,s,3]` into one `[B,s,s,3]` batch.
pub fn stack_pixels<'a>(frags: impl Iterator<Item = &'a Fragment>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut shape: Option<Vec<usize>> = None;
    let mut count = 0usize;
    for frag in frags {
        match &shape {
            None => shape = Some(frag.pixels.shape().to_vec()),
            Some(s) => {
                if frag.pixels.shape() != &s[..] {
                    return Err(Error::contract(format!(
                        "fragment shape {:?} differs from {:?}",
                        frag.pixels.shape(),
                        s
                    )));
                }
            }
        }
        data.extend_from_slice(frag.pixels.data());
        count += 1;
    }
    let shape = shape.ok_or_else(|| Error::contract("cannot stack zero fragments"))?;
    let mut full = vec![count];
    full.extend(shape);
    Ok(Tensor::from_raw(full, data))
}
