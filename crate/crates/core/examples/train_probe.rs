use frag_core::fen::FenConfig;
use frag_core::fusion::{FusionConfig, FusionKind};
use frag_core::model::PairModel;
use frag_core::sampler::SamplerConfig;
use frag_core::synthetic::{generate, SyntheticKind, SyntheticSpec};
use frag_core::trainer::{train, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let kind = if args.get(1).map(|s| s.as_str()) == Some("kron") {
        FusionKind::Kronecker
    } else {
        FusionKind::Concat
    };
    let lr: f32 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let batch: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(64);

    let t0 = std::time::Instant::now();
    let train_spec = SyntheticSpec::new(SyntheticKind::Gradient, 132, 200, 100).unwrap();
    let val_spec = SyntheticSpec::new(SyntheticKind::Gradient, 132, 50, 200).unwrap();
    let train_images = generate(&train_spec);
    let val_images = generate(&val_spec);
    println!("corpus generated in {:.2?}", t0.elapsed());

    let mut model = PairModel::init(FenConfig::desk(), FusionConfig::desk(kind), 42).unwrap();
    let cfg = TrainConfig::new(lr, 0.0, batch, 100, 42).unwrap();
    let scfg = SamplerConfig::desk(0);
    let t1 = std::time::Instant::now();
    let outcome = train(
        &mut model, &scfg, &train_images, &val_images, &cfg, 0, Some(0.90),
        |r| {
            eprintln!("epoch {:3}  loss {:.4}  val_acc {:.3}  [{:.1?}]", r.epoch, r.train_loss, r.val_accuracy, t1.elapsed());
            Ok(())
        },
    )
    .unwrap();
    println!(
        "{} lr={} batch={}: {} epochs, final acc {:.3}, {:.2?}",
        kind.as_str(), lr, batch,
        outcome.epochs_run,
        outcome.metrics.last().unwrap().val_accuracy,
        t1.elapsed()
    );
}
