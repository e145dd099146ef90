//! Training-loop integration: capacity sanity (overfit a small corpus) and
//! reproducibility of whole runs down to the checkpoint bytes.

use frag_core::checkpoint::save_checkpoint;
use frag_core::fen::FenConfig;
use frag_core::fusion::{FusionConfig, FusionKind};
use frag_core::model::PairModel;
use frag_core::sampler::SamplerConfig;
use frag_core::synthetic::{generate, SyntheticKind, SyntheticSpec};
use frag_core::trainer::{train, TrainConfig};

fn gradient_corpus(count: usize, seed: u64) -> Vec<frag_core::image::ImageRGB> {
    let spec = SyntheticSpec::new(SyntheticKind::Gradient, 132, count, seed).unwrap();
    generate(&spec)
}

/// Capacity check: 50 images must be learnable to >= 0.9 train-pair
/// accuracy within 200 epochs at desk scale.
#[test]
fn overfits_fifty_images_within_two_hundred_epochs() {
    let images = gradient_corpus(50, 17);
    let mut model = PairModel::init(
        FenConfig::desk(),
        FusionConfig::desk(FusionKind::Concat),
        3,
    )
    .unwrap();
    let cfg = TrainConfig::new(0.1, 0.0, 16, 200, 5).unwrap();
    let scfg = SamplerConfig::desk(0);
    // validation here is the training set: this is the overfit property
    let outcome = train(
        &mut model,
        &scfg,
        &images,
        &images,
        &cfg,
        0,
        Some(0.9),
        |_| Ok(()),
    )
    .unwrap();
    let best = outcome
        .metrics
        .iter()
        .map(|r| r.val_accuracy)
        .fold(0.0, f64::max);
    assert!(
        best >= 0.9,
        "train accuracy only reached {best} after {} epochs",
        outcome.epochs_run
    );
    assert!(outcome.epochs_run <= 200);
}

/// (seed, config, data) determine the trajectory and the checkpoint bytes.
#[test]
fn identical_runs_write_identical_checkpoints() {
    let train_images = gradient_corpus(10, 1);
    let val_images = gradient_corpus(4, 2);
    let dir = tempfile::tempdir().unwrap();

    let run = |path: &std::path::Path| {
        let mut model = PairModel::init(
            FenConfig::desk(),
            FusionConfig::desk(FusionKind::Kronecker),
            77,
        )
        .unwrap();
        let cfg = TrainConfig::new(0.05, 0.0, 4, 3, 123).unwrap();
        let scfg = SamplerConfig::desk(0);
        let outcome = train(
            &mut model,
            &scfg,
            &train_images,
            &val_images,
            &cfg,
            0,
            None,
            |_| Ok(()),
        )
        .unwrap();
        save_checkpoint(path, &mut model, outcome.epochs_run, cfg.seed).unwrap();
        outcome.metrics
    };

    let a_path = dir.path().join("a.ckpt");
    let b_path = dir.path().join("b.ckpt");
    let ma = run(&a_path);
    let mb = run(&b_path);
    assert_eq!(ma, mb);
    assert_eq!(
        std::fs::read(&a_path).unwrap(),
        std::fs::read(&b_path).unwrap(),
        "checkpoint bytes differ between identical runs"
    );
}
