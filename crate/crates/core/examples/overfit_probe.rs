use frag_core::fen::FenConfig;
use frag_core::fusion::{FusionConfig, FusionKind};
use frag_core::model::PairModel;
use frag_core::sampler::SamplerConfig;
use frag_core::synthetic::{generate, SyntheticKind, SyntheticSpec};
use frag_core::trainer::{train, TrainConfig};

fn run(lr: f32, momentum: f32, batch: usize) {
    let images = generate(&SyntheticSpec::new(SyntheticKind::Gradient, 132, 50, 17).unwrap());
    let mut model = PairModel::init(FenConfig::desk(), FusionConfig::desk(FusionKind::Concat), 3).unwrap();
    let cfg = TrainConfig::new(lr, momentum, batch, 200, 5).unwrap();
    let scfg = SamplerConfig::desk(0);
    let outcome = train(&mut model, &scfg, &images, &images, &cfg, 0, Some(0.9), |_| Ok(())).unwrap();
    let best = outcome.metrics.iter().map(|r| r.val_accuracy).fold(0.0, f64::max);
    println!("lr={lr} mom={momentum} batch={batch}: best {best:.3} in {} epochs", outcome.epochs_run);
}

fn main() {
    run(0.1, 0.0, 50);
    run(0.1, 0.0, 32);
    run(0.03, 0.9, 16);
    run(0.01, 0.9, 16);
}
