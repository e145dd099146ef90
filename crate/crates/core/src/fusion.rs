//! Combination layer and classification head.
//!
//! Two fragment features are merged either by concatenation (the following
//! dense layer then realizes a linear combination of both features) or by
//! the Kronecker product (all pairwise feature products, modeling
//! co-occurrences explicitly at the cost of a feature_dim^2 input to the
//! head). The head is a stack of dense+BN+ReLU layers and a final dense
//! layer with 8 outputs followed by softmax.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{he_uniform, BnLayer};
use crate::sampler::NUM_CLASSES;
use crate::tensor::{Mode, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionKind {
    Concat,
    Kronecker,
}

impl FusionKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            FusionKind::Concat => "concat",
            FusionKind::Kronecker => "kron",
        }
    }

    pub fn parse(s: &str) -> Result<FusionKind> {
        match s {
            "concat" => Ok(FusionKind::Concat),
            "kron" | "kronecker" => Ok(FusionKind::Kronecker),
            other => Err(Error::contract(format!(
                "unknown fusion kind `{other}` (expected concat|kron)"
            ))),
        }
    }
}

/// Head architecture: combination kind, incoming feature dim, hidden stack.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FusionConfig {
    pub kind: FusionKind,
    pub feature_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
}

impl FusionConfig {
    pub fn new(
        kind: FusionKind,
        feature_dim: usize,
        hidden_dims: Vec<usize>,
        num_classes: usize,
    ) -> Result<FusionConfig> {
        if num_classes != NUM_CLASSES {
            return Err(Error::contract(format!(
                "num_classes must be {NUM_CLASSES}, got {num_classes}"
            )));
        }
        if hidden_dims.is_empty() {
            return Err(Error::contract("hidden_dims must be non-empty"));
        }
        if feature_dim == 0 {
            return Err(Error::contract("feature_dim must be positive"));
        }
        Ok(FusionConfig {
            kind,
            feature_dim,
            hidden_dims,
            num_classes,
        })
    }

    /// Full-scale head: 512-dim features, hidden stack [512, 512].
    pub fn paper(kind: FusionKind) -> FusionConfig {
        FusionConfig::new(kind, 512, vec![512, 512], NUM_CLASSES).expect("valid")
    }

    /// Desk-scale head: 64-dim features, hidden stack [128].
    pub fn desk(kind: FusionKind) -> FusionConfig {
        FusionConfig::new(kind, 64, vec![128], NUM_CLASSES).expect("valid")
    }

    /// Width of the combined vector entering the first dense layer.
    pub fn combined_dim(&self) -> usize {
        match self.kind {
            FusionKind::Concat => 2 * self.feature_dim,
            FusionKind::Kronecker => self.feature_dim * self.feature_dim,
        }
    }

    /// Weight count of the first dense layer after the combination.
    pub fn first_dense_weights(&self) -> usize {
        self.combined_dim() * self.hidden_dims[0]
    }
}

/// An 8-way distribution over neighbor locations.
#[derive(Clone, Debug)]
pub struct LocationDistribution {
    pub probs: Tensor,
}

impl LocationDistribution {
    pub fn new(probs: Tensor) -> Result<LocationDistribution> {
        if probs.shape() != [NUM_CLASSES] {
            return Err(Error::contract(format!(
                "location distribution must have shape [{NUM_CLASSES}], got {:?}",
                probs.shape()
            )));
        }
        let sum: f32 = probs.data().iter().sum();
        if (sum - 1.0).abs() > 1e-6 || probs.data().iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::contract(format!(
                "location distribution must be a probability vector (sum {sum})"
            )));
        }
        Ok(LocationDistribution { probs })
    }

    /// Most probable class; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        let d = self.probs.data();
        let mut best = 0;
        for (i, &v) in d.iter().enumerate() {
            if v > d[best] {
                best = i;
            }
        }
        best
    }
}

/// `[phi1 || phi2]`.
pub fn combine_concat(tape: &mut Tape, phi1: Var, phi2: Var) -> Result<Var> {
    tape.concat(phi1, phi2)
}

/// Outer product flattened row-major: `out[m*D + n] = phi1[m] * phi2[n]`.
/// The flattening order is part of the checkpoint-format contract.
pub fn combine_kronecker(tape: &mut Tape, phi1: Var, phi2: Var) -> Result<Var> {
    tape.kronecker(phi1, phi2)
}

pub fn combine(tape: &mut Tape, kind: FusionKind, phi1: Var, phi2: Var) -> Result<Var> {
    match kind {
        FusionKind::Concat => combine_concat(tape, phi1, phi2),
        FusionKind::Kronecker => combine_kronecker(tape, phi1, phi2),
    }
}

/// Classification head parameters: bias-free dense+BN per hidden layer and a
/// final dense layer with bias producing the 8 logits.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub cfg: FusionConfig,
    pub hidden: Vec<(Tensor, BnLayer)>,
    pub out_weight: Tensor,
    pub out_bias: Tensor,
}

/// Tape handles for one binding of the head parameters.
#[derive(Clone, Debug)]
pub struct BoundHead {
    pub hidden: Vec<(Var, Var, Var)>, // (weight, gamma, beta)
    pub out_weight: Var,
    pub out_bias: Var,
}

impl HeadParams {
    /// Hidden layers use fan-in-scaled init; the final layer starts at zero
    /// so an untrained head predicts the uniform distribution.
    pub fn init(cfg: FusionConfig, rng: &mut ChaCha8Rng) -> HeadParams {
        let mut hidden = Vec::with_capacity(cfg.hidden_dims.len());
        let mut dim = cfg.combined_dim();
        for &h in &cfg.hidden_dims {
            hidden.push((he_uniform(rng, vec![dim, h], dim), BnLayer::new(h)));
            dim = h;
        }
        let out_weight = Tensor::zeros(vec![dim, cfg.num_classes]);
        let out_bias = Tensor::zeros(vec![cfg.num_classes]);
        HeadParams {
            cfg,
            hidden,
            out_weight,
            out_bias,
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundHead {
        BoundHead {
            hidden: self
                .hidden
                .iter()
                .map(|(w, bn)| {
                    (
                        tape.param(w.clone()),
                        tape.param(bn.gamma.clone()),
                        tape.param(bn.beta.clone()),
                    )
                })
                .collect(),
            out_weight: tape.param(self.out_weight.clone()),
            out_bias: tape.param(self.out_bias.clone()),
        }
    }

    /// Dense+BN+ReLU stack then the final dense layer; returns `[N, 8]` logits.
    pub fn forward_logits(
        &mut self,
        tape: &mut Tape,
        bound: &BoundHead,
        combined: Var,
        mode: Mode,
    ) -> Result<Var> {
        let got = tape.value(combined).shape().last().copied().unwrap_or(0);
        if got != self.cfg.combined_dim() {
            return Err(Error::contract(format!(
                "combined dim {got} does not match {} fusion ({} expected)",
                self.cfg.kind.as_str(),
                self.cfg.combined_dim()
            )));
        }
        let mut h = tape.flatten(combined);
        for ((_, bn), &(w, gamma, beta)) in self.hidden.iter_mut().zip(&bound.hidden) {
            h = tape.dense(h, w, None)?;
            h = tape.batchnorm(h, gamma, beta, &mut bn.state, mode)?;
            h = tape.relu(h);
        }
        tape.dense(h, bound.out_weight, Some(bound.out_bias))
    }

    /// Full classification: combine, head, softmax. Returns `[N, 8]` probabilities.
    pub fn classify(
        &mut self,
        tape: &mut Tape,
        bound: &BoundHead,
        phi1: Var,
        phi2: Var,
        mode: Mode,
    ) -> Result<Var> {
        let combined = combine(tape, self.cfg.kind, phi1, phi2)?;
        let logits = self.forward_logits(tape, bound, combined, mode)?;
        tape.softmax(logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_chacha::rand_core::SeedableRng;

    fn tvec(v: Vec<f32>) -> Tensor {
        let n = v.len();
        Tensor::from_vec(vec![n], v).unwrap()
    }

    #[test]
    fn concat_dims_under_paper_config() {
        assert_eq!(FusionConfig::paper(FusionKind::Concat).combined_dim(), 1024);
        assert_eq!(
            FusionConfig::paper(FusionKind::Kronecker).combined_dim(),
            512 * 512
        );
    }

    #[test]
    fn desk_kronecker_first_dense_weight_count() {
        let cfg = FusionConfig::desk(FusionKind::Kronecker);
        assert_eq!(cfg.first_dense_weights(), 524_288);
    }

    #[test]
    fn kronecker_one_hot_scatters_phi1() {
        let mut tape = Tape::new();
        let phi1 = tape.input(tvec(vec![2.0, 3.0, 5.0]));
        let e1 = tape.input(tvec(vec![0.0, 1.0, 0.0]));
        let out = combine_kronecker(&mut tape, phi1, e1).unwrap();
        assert_eq!(
            tape.value(out).data(),
            &[0.0, 2.0, 0.0, 0.0, 3.0, 0.0, 0.0, 5.0, 0.0]
        );
    }

    #[test]
    fn concat_gradient_equals_split_dense_graphs() {
        // dense(concat(a, b), W) must behave exactly like
        // dense(a, W_top) + dense(b, W_bottom), gradients included.
        let a = Tensor::from_vec(vec![1, 3], vec![0.3, -0.7, 1.1]).unwrap();
        let b = Tensor::from_vec(vec![1, 3], vec![0.9, 0.2, -0.4]).unwrap();
        let w: Vec<f32> = (0..12).map(|i| (i as f32) * 0.13 - 0.7).collect();

        let mut t1 = Tape::new();
        let (va, vb) = (t1.param(a.clone()), t1.param(b.clone()));
        let cc = combine_concat(&mut t1, va, vb).unwrap();
        let w1 = t1.input(Tensor::from_vec(vec![6, 2], w.clone()).unwrap());
        let d1 = t1.dense(cc, w1, None).unwrap();
        let l1 = t1.sum(d1);
        let g1 = t1.backward(l1).unwrap();

        let mut t2 = Tape::new();
        let (ua, ub) = (t2.param(a), t2.param(b));
        let wtop = t2.input(Tensor::from_vec(vec![3, 2], w[..6].to_vec()).unwrap());
        let wbot = t2.input(Tensor::from_vec(vec![3, 2], w[6..].to_vec()).unwrap());
        let da = t2.dense(ua, wtop, None).unwrap();
        let db = t2.dense(ub, wbot, None).unwrap();
        let s = t2.add(da, db).unwrap();
        let l2 = t2.sum(s);
        let g2 = t2.backward(l2).unwrap();

        for (x, y) in g1.get(va).unwrap().data().iter().zip(g2.get(ua).unwrap().data()) {
            assert!((x - y).abs() < 1e-6);
        }
        for (x, y) in g1.get(vb).unwrap().data().iter().zip(g2.get(ub).unwrap().data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_initialized_head_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut head = HeadParams::init(FusionConfig::desk(FusionKind::Concat), &mut rng);
        let mut tape = Tape::new();
        let bound = head.bind(&mut tape);
        let phi1 = tape.input(Tensor::filled(vec![2, 64], 0.3));
        let phi2 = tape.input(Tensor::filled(vec![2, 64], -0.8));
        let probs = head
            .classify(&mut tape, &bound, phi1, phi2, Mode::Infer)
            .unwrap();
        for &p in tape.value(probs).data() {
            assert_eq!(p, 0.125);
        }
    }

    #[test]
    fn classify_rejects_mismatched_combination() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // head expects kronecker width 64*64 but is fed a concat-width vector
        let mut head = HeadParams::init(FusionConfig::desk(FusionKind::Kronecker), &mut rng);
        let mut tape = Tape::new();
        let bound = head.bind(&mut tape);
        let combined = tape.input(Tensor::zeros(vec![2, 128]));
        assert!(head
            .forward_logits(&mut tape, &bound, combined, Mode::Infer)
            .is_err());
    }

    #[test]
    fn swapping_inputs_changes_the_prediction() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = FusionConfig::desk(FusionKind::Concat);
        let mut head = HeadParams::init(cfg, &mut rng);
        // give the final layer nonzero weights so outputs are informative
        head.out_weight = he_uniform(&mut rng, vec![128, 8], 128);
        let phi1 = Tensor::from_raw(vec![2, 64], (0..128).map(|i| (i as f32 * 0.01).sin()).collect());
        let phi2 = Tensor::from_raw(vec![2, 64], (0..128).map(|i| (i as f32 * 0.03).cos()).collect());
        let run = |head: &mut HeadParams, a: &Tensor, b: &Tensor| {
            let mut tape = Tape::new();
            let bound = head.bind(&mut tape);
            let va = tape.input(a.clone());
            let vb = tape.input(b.clone());
            let p = head.classify(&mut tape, &bound, va, vb, Mode::Infer).unwrap();
            tape.value(p).clone()
        };
        let fw = run(&mut head, &phi1, &phi2);
        let bw = run(&mut head, &phi2, &phi1);
        assert!(!fw.bitwise_eq(&bw));
    }

    #[test]
    fn location_distribution_validates_and_argmaxes() {
        let ok = LocationDistribution::new(Tensor::filled(vec![8], 0.125)).unwrap();
        assert_eq!(ok.argmax(), 0);
        let mut v = vec![0.0f32; 8];
        v[5] = 1.0;
        let d = LocationDistribution::new(Tensor::from_vec(vec![8], v).unwrap()).unwrap();
        assert_eq!(d.argmax(), 5);
        assert!(LocationDistribution::new(Tensor::filled(vec![8], 0.2)).is_err());
        assert!(LocationDistribution::new(Tensor::filled(vec![4], 0.25)).is_err());
    }

    proptest! {
        #[test]
        fn kronecker_is_bilinear(
            a in proptest::collection::vec(-2.0f32..2.0, 5),
            b in proptest::collection::vec(-2.0f32..2.0, 5),
            k in -3.0f32..3.0
        ) {
            let mut tape = Tape::new();
            let va = tape.input(tvec(a.clone()));
            let vb = tape.input(tvec(b.clone()));
            let scaled_a = tape.scale(va, k);
            let lhs = combine_kronecker(&mut tape, scaled_a, vb).unwrap();
            let base = combine_kronecker(&mut tape, va, vb).unwrap();
            let rhs = tape.scale(base, k);
            for (x, y) in tape.value(lhs).data().iter().zip(tape.value(rhs).data()) {
                prop_assert!((x - y).abs() <= 1e-6 * x.abs().max(y.abs()).max(1.0));
            }
        }

        #[test]
        fn kronecker_swap_is_transpose_permutation(
            a in proptest::collection::vec(-2.0f32..2.0, 4),
            b in proptest::collection::vec(-2.0f32..2.0, 4)
        ) {
            let mut tape = Tape::new();
            let va = tape.input(tvec(a));
            let vb = tape.input(tvec(b));
            let ab = combine_kronecker(&mut tape, va, vb).unwrap();
            let ba = combine_kronecker(&mut tape, vb, va).unwrap();
            let (ab, ba) = (tape.value(ab).data(), tape.value(ba).data());
            for m in 0..4 {
                for n in 0..4 {
                    prop_assert_eq!(ab[m * 4 + n].to_bits(), ba[n * 4 + m].to_bits());
                }
            }
        }

        #[test]
        fn concat_preserves_squared_norm(
            a in proptest::collection::vec(-2.0f32..2.0, 6),
            b in proptest::collection::vec(-2.0f32..2.0, 6)
        ) {
            let mut tape = Tape::new();
            let va = tape.input(tvec(a.clone()));
            let vb = tape.input(tvec(b.clone()));
            let cc = combine_concat(&mut tape, va, vb).unwrap();
            let norm =
                |v: &[f32]| v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>();
            let lhs = norm(tape.value(cc).data());
            let rhs = norm(&a) + norm(&b);
            prop_assert!((lhs - rhs).abs() <= 1e-6 * rhs.max(1.0));
        }

        #[test]
        fn classify_rows_sum_to_one(seed in 0u64..50) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cfg = FusionConfig::desk(FusionKind::Concat);
            let mut head = HeadParams::init(cfg, &mut rng);
            head.out_weight = he_uniform(&mut rng, vec![128, 8], 128);
            let mut tape = Tape::new();
            let bound = head.bind(&mut tape);
            let phi1 = tape.input(he_uniform(&mut rng, vec![3, 64], 64));
            let phi2 = tape.input(he_uniform(&mut rng, vec![3, 64], 64));
            let probs = head.classify(&mut tape, &bound, phi1, phi2, Mode::Infer).unwrap();
            for row in tape.value(probs).data().chunks(8) {
                let s: f32 = row.iter().sum();
                prop_assert!((s - 1.0).abs() <= 1e-6);
            }
        }
    }
}
