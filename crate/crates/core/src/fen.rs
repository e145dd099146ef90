//! Feature Extraction Network: a VGG-style stack of 3x3 conv + batchnorm +
//! ReLU + 2x2 maxpool blocks, closed by a fully-connected layer with
//! batchnorm (no activation after the final BN). One code path serves both
//! the full-scale shape and a desk-scale shape via [`FenConfig`].
//!
//! Conv and FC layers feeding straight into batchnorm carry no bias; the BN
//! shift makes one redundant.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{he_uniform, BnLayer};
use crate::tensor::{Mode, Tape, Tensor, Var};

/// Architecture parameters of the feature extractor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FenConfig {
    pub input_side: usize,
    pub input_channels: usize,
    pub block_channels: Vec<usize>,
    pub feature_dim: usize,
}

impl FenConfig {
    pub fn new(
        input_side: usize,
        input_channels: usize,
        block_channels: Vec<usize>,
        feature_dim: usize,
    ) -> Result<FenConfig> {
        if block_channels.is_empty() {
            return Err(Error::contract("at least one conv block is required"));
        }
        if feature_dim == 0 {
            return Err(Error::contract("feature_dim must be positive"));
        }
        if input_channels == 0 || input_side == 0 {
            return Err(Error::contract("input dimensions must be positive"));
        }
        let divisor = 1usize << block_channels.len();
        if input_side % divisor != 0 {
            return Err(Error::contract(format!(
                "input side {input_side} not divisible by 2^{} = {divisor}",
                block_channels.len()
            )));
        }
        Ok(FenConfig {
            input_side,
            input_channels,
            block_channels,
            feature_dim,
        })
    }

    /// Full-scale architecture: 96x96x3 in, blocks [32,64,128,256,512],
    /// 512-dim features.
    pub fn paper() -> FenConfig {
        FenConfig::new(96, 3, vec![32, 64, 128, 256, 512], 512).expect("valid")
    }

    /// Desk-scale architecture: 32x32x3 in, blocks [8,16,32], 64-dim features.
    pub fn desk() -> FenConfig {
        FenConfig::new(32, 3, vec![8, 16, 32], 64).expect("valid")
    }

    /// Spatial side after all pooling stages.
    pub fn final_side(&self) -> usize {
        self.input_side >> self.block_channels.len()
    }

    /// Flattened activation count feeding the final dense layer.
    pub fn flattened_dim(&self) -> usize {
        self.final_side() * self.final_side() * *self.block_channels.last().unwrap()
    }

    /// Layer-by-layer output shapes, input row included.
    pub fn shape_chain(&self) -> Vec<(String, Vec<usize>)> {
        let mut chain = vec![(
            "Input".to_string(),
            vec![self.input_side, self.input_side, self.input_channels],
        )];
        let mut side = self.input_side;
        for &ch in &self.block_channels {
            chain.push(("Conv+BN+ReLU".to_string(), vec![side, side, ch]));
            side /= 2;
            chain.push(("Maxpooling".to_string(), vec![side, side, ch]));
        }
        chain.push(("Fully Connected+BN".to_string(), vec![self.feature_dim]));
        chain
    }

    /// Stored-value counts per parameterized layer: conv weights plus all
    /// four batchnorm vectors (gamma, beta, running mean, running var).
    pub fn parameter_counts(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        let mut ci = self.input_channels;
        for (i, &co) in self.block_channels.iter().enumerate() {
            out.push((format!("block{i}"), 9 * ci * co + 4 * co));
            ci = co;
        }
        out.push((
            "fc".to_string(),
            self.flattened_dim() * self.feature_dim + 4 * self.feature_dim,
        ));
        out
    }

    pub fn total_parameter_count(&self) -> usize {
        self.parameter_counts().iter().map(|(_, n)| n).sum()
    }
}

/// One conv block: bias-free 3x3 conv weights plus spatial batchnorm.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub weight: Tensor,
    pub bn: BnLayer,
}

/// All parameters of the feature extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct FenParams {
    pub cfg: FenConfig,
    pub blocks: Vec<ConvBlock>,
    pub fc_weight: Tensor,
    pub fc_bn: BnLayer,
}

/// Tape handles for one binding of the (shared) parameters. Plain indices,
/// so both fragment branches can reuse the same binding — that is what makes
/// the weights shared.
#[derive(Clone, Debug)]
pub struct BoundFen {
    pub blocks: Vec<(Var, Var, Var)>, // (conv weight, gamma, beta)
    pub fc_weight: Var,
    pub fc_gamma: Var,
    pub fc_beta: Var,
}

impl FenParams {
    pub fn init(cfg: FenConfig, rng: &mut ChaCha8Rng) -> FenParams {
        let mut blocks = Vec::with_capacity(cfg.block_channels.len());
        let mut ci = cfg.input_channels;
        for &co in &cfg.block_channels {
            blocks.push(ConvBlock {
                weight: he_uniform(rng, vec![3, 3, ci, co], 9 * ci),
                bn: BnLayer::new(co),
            });
            ci = co;
        }
        let flat = cfg.flattened_dim();
        let fc_weight = he_uniform(rng, vec![flat, cfg.feature_dim], flat);
        let fc_bn = BnLayer::new(cfg.feature_dim);
        FenParams {
            cfg,
            blocks,
            fc_weight,
            fc_bn,
        }
    }

    /// Lifts every trainable tensor onto the tape once. Apply the returned
    /// binding to both fragments so gradients from the two branches
    /// accumulate into the same parameters.
    pub fn bind(&self, tape: &mut Tape) -> BoundFen {
        BoundFen {
            blocks: self
                .blocks
                .iter()
                .map(|b| {
                    (
                        tape.param(b.weight.clone()),
                        tape.param(b.bn.gamma.clone()),
                        tape.param(b.bn.beta.clone()),
                    )
                })
                .collect(),
            fc_weight: tape.param(self.fc_weight.clone()),
            fc_gamma: tape.param(self.fc_bn.gamma.clone()),
            fc_beta: tape.param(self.fc_bn.beta.clone()),
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let cfg = &self.cfg;
        let ok = match *x.shape() {
            [h, w, c] => h == cfg.input_side && w == cfg.input_side && c == cfg.input_channels,
            [_, h, w, c] => {
                h == cfg.input_side && w == cfg.input_side && c == cfg.input_channels
            }
            _ => false,
        };
        if !ok {
            return Err(Error::contract(format!(
                "fen input shape {:?} does not match config {}x{}x{}",
                x.shape(),
                cfg.input_side,
                cfg.input_side,
                cfg.input_channels
            )));
        }
        Ok(())
    }

    /// Runs the block sequence and the final dense+BN, producing `[N, feature_dim]`.
    /// Train mode updates the batchnorm running statistics in place.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        bound: &BoundFen,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        self.check_input(tape.value(x))?;
        let mut h = x;
        for (block, &(w, gamma, beta)) in self.blocks.iter_mut().zip(&bound.blocks) {
            h = tape.conv3x3(h, w, None)?;
            h = tape.batchnorm(h, gamma, beta, &mut block.bn.state, mode)?;
            h = tape.relu(h);
            h = tape.maxpool2(h)?;
        }
        h = tape.flatten(h);
        h = tape.dense(h, bound.fc_weight, None)?;
        tape.batchnorm(h, bound.fc_gamma, bound.fc_beta, &mut self.fc_bn.state, mode)
    }

    /// Applies the identical parameter set to both fragment batches (weight
    /// sharing). The two batches run through the tower as one pooled batch,
    /// so batchnorm statistics cover centrals and neighbors together — the
    /// same distribution the running stats describe at inference. Inputs
    /// must be batched (`[N, side, side, C]`).
    pub fn forward_shared(
        &mut self,
        tape: &mut Tape,
        bound: &BoundFen,
        f1: Var,
        f2: Var,
        mode: Mode,
    ) -> Result<(Var, Var)> {
        let n1 = match *tape.value(f1).shape() {
            [n, _, _, _] => n,
            _ => {
                return Err(Error::contract(format!(
                    "fen shared forward needs batched [N,side,side,C] inputs, got {:?}",
                    tape.value(f1).shape()
                )))
            }
        };
        let n2 = tape.value(f2).shape()[0];
        let pooled = tape.stack_rows(f1, f2)?;
        let phi_all = self.forward(tape, bound, pooled, mode)?;
        let phi1 = tape.take_rows(phi_all, 0, n1)?;
        let phi2 = tape.take_rows(phi_all, n1, n2)?;
        Ok((phi1, phi2))
    }
}
