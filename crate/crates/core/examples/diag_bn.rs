use frag_core::fen::FenConfig;
use frag_core::fusion::{FusionConfig, FusionKind};
use frag_core::model::{stack_pixels, PairModel};
use frag_core::sampler::{sample_pair, SamplerConfig};
use frag_core::synthetic::{generate, SyntheticKind, SyntheticSpec};
use frag_core::tensor::{Mode, Tape};
use frag_core::trainer::{evaluate, train_epoch, Sgd, TrainConfig};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn acc_in_mode(model: &mut PairModel, images: &[frag_core::image::ImageRGB], scfg: &SamplerConfig, seed: u64, mode: Mode) -> f64 {
    let pairs: Vec<_> = images.iter().enumerate().map(|(i, img)| {
        let mut rng = ChaCha8Rng::seed_from_u64(frag_core::rng::derive_seed(seed, 0x65767061, i as u64));
        sample_pair(scfg, img, &mut rng).unwrap()
    }).collect();
    let x1 = stack_pixels(pairs.iter().map(|p| &p.central)).unwrap();
    let x2 = stack_pixels(pairs.iter().map(|p| &p.neighbor)).unwrap();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let v1 = tape.input(x1);
    let v2 = tape.input(x2);
    let logits = model.forward_logits(&mut tape, &bound, v1, v2, mode).unwrap();
    let lt = tape.value(logits);
    let mut correct = 0;
    for (r, p) in pairs.iter().enumerate() {
        let row = &lt.data()[r * 8..(r + 1) * 8];
        let mut best = 0;
        for k in 0..8 { if row[k] > row[best] { best = k; } }
        if best == p.label.class_index() { correct += 1; }
    }
    correct as f64 / pairs.len() as f64
}

fn main() {
    let train_images = generate(&SyntheticSpec::new(SyntheticKind::Gradient, 132, 200, 100).unwrap());
    let val_images = generate(&SyntheticSpec::new(SyntheticKind::Gradient, 132, 50, 200).unwrap());
    let mut model = PairModel::init(FenConfig::desk(), FusionConfig::desk(FusionKind::Concat), 42).unwrap();
    let cfg = TrainConfig::new(0.1, 0.0, 16, 100, 42).unwrap();
    let scfg = SamplerConfig::desk(0);
    let mut sgd = Sgd::new(&cfg);
    for e in 0..40 {
        let loss = train_epoch(&mut model, &mut sgd, &scfg, &train_images, &cfg, e).unwrap();
        if e % 5 == 4 {
            let val_infer = evaluate(&mut model, &scfg, &val_images, cfg.seed).unwrap();
            let val_train_mode = acc_in_mode(&mut model, &val_images, &scfg, cfg.seed, Mode::Train);
            let train_infer = acc_in_mode(&mut model, &train_images[..50], &scfg, 777, Mode::Infer);
            println!("epoch {e:3} loss {loss:.4}  val/infer {val_infer:.3}  val/batchstats {val_train_mode:.3}  train/infer {train_infer:.3}");
        }
    }
}
