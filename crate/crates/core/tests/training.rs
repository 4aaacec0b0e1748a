use std::path::Path;

use candle_core::{DType, Device, Tensor};
use diffdf_core::attacks::{AttackConfig, StructuredKind};
use diffdf_core::data::{
    build_manifest, make_synthetic_sequences, DatasetConfig, PairDataset, SyntheticConfig,
};
use diffdf_core::denoiser::UNetConfig;
use diffdf_core::features::FeatureExtractor;
use diffdf_core::losses::LossWeights;
use diffdf_core::schedule::ScheduleConfig;
use diffdf_core::tensor::max_abs_diff;
use diffdf_core::trainer::{
    load_checkpoint, read_loss_csv, save_checkpoint, train, TrainConfig, Trainer, CHECKPOINT_FILE,
    LOSS_CSV,
};
use diffdf_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 4,
        lr: 2e-3,
        image_size: 16,
        schedule: ScheduleConfig::scaled_linear(20),
        unet: UNetConfig {
            in_channels: 3,
            base_channels: 8,
            channel_multipliers: vec![1, 2],
            norm_groups: 4,
            time_sinusoid_dim: 16,
            time_embed_dim: 16,
            time_in_decoder: false,
        },
        ..TrainConfig::test_scale()
    }
}

fn dataset(dir: &Path, sequences: usize) -> PairDataset {
    let seqs = make_synthetic_sequences(&SyntheticConfig {
        sequences,
        frames: 50,
        canvas: 64,
        object_min: 10,
        object_max: 16,
        max_velocity: 2.0,
        seed: 3,
    })
    .unwrap();
    let fe = FeatureExtractor::stub(0, DType::F32, &Device::Cpu).unwrap();
    let attack = AttackConfig::Structured {
        kind: StructuredKind::Gaussian,
        strength: 0.2,
    };
    build_manifest(&seqs, &DatasetConfig::new(16, 10, 1), &attack, &fe, dir).unwrap();
    PairDataset::load(dir, DType::F32).unwrap()
}

#[test]
fn checkpoint_roundtrip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(&dir.path().join("data"), 2);
    let cfg = TrainConfig {
        epochs: 1,
        ..tiny_config()
    };
    let ckpt = train(&cfg, &ds, &dir.path().join("run"), false).unwrap();
    let a = dir.path().join("a/ck.bin");
    let b = dir.path().join("b/ck.bin");
    save_checkpoint(&ckpt, &a).unwrap();
    let loaded = load_checkpoint(&a).unwrap();
    assert_eq!(loaded.manifest, ckpt.manifest);
    save_checkpoint(&loaded, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(
        std::fs::read(a.with_extension("json")).unwrap(),
        std::fs::read(b.with_extension("json")).unwrap()
    );

    let x = ds.adversarial.narrow(0, 0, 3).unwrap();
    let before = ckpt.model().unwrap().predict(&x, &[5]).unwrap();
    let after = loaded.model().unwrap().predict(&x, &[5]).unwrap();
    assert_eq!(max_abs_diff(&before, &after).unwrap(), 0.0);

    // Bump the version field in the binary header.
    let mut bytes = std::fs::read(&a).unwrap();
    bytes[8] = 9;
    std::fs::write(&a, bytes).unwrap();
    assert!(matches!(
        load_checkpoint(&a),
        Err(Error::FormatVersion { found: 9, .. })
    ));
}

#[test]
fn zero_epochs_returns_initial_state() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(&dir.path().join("data"), 1);
    let cfg = TrainConfig {
        epochs: 0,
        ..tiny_config()
    };
    let ckpt = train(&cfg, &ds, &dir.path().join("run"), false).unwrap();
    assert_eq!(ckpt.manifest.step, 0);
    let fresh = Trainer::new(cfg).unwrap();
    let x = ds.adversarial.narrow(0, 0, 2).unwrap();
    let a = ckpt.model().unwrap().predict(&x, &[3]).unwrap();
    let b = fresh.model().predict(&x, &[3]).unwrap();
    assert_eq!(max_abs_diff(&a, &b).unwrap(), 0.0);
    assert!(read_loss_csv(&dir.path().join("run").join(LOSS_CSV))
        .unwrap()
        .is_empty());
}

#[test]
fn zero_weights_reduce_to_plain_objective() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(&dir.path().join("data"), 1);
    let cfg = TrainConfig {
        epochs: 1,
        weights: LossWeights::new(0.0, 0.0, 0.0).unwrap(),
        ..tiny_config()
    };
    train(&cfg, &ds, &dir.path().join("run"), false).unwrap();
    let rows = read_loss_csv(&dir.path().join("run").join(LOSS_CSV)).unwrap();
    assert_eq!(rows.len(), ds.len().div_ceil(4));
    for (_, b) in rows {
        assert_eq!(b.total, b.simple);
    }
}

#[test]
fn fixed_seed_runs_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(&dir.path().join("data"), 1);
    let cfg = tiny_config();
    train(&cfg, &ds, &dir.path().join("r1"), false).unwrap();
    train(&cfg, &ds, &dir.path().join("r2"), false).unwrap();
    let a = std::fs::read(dir.path().join("r1").join(LOSS_CSV)).unwrap();
    let b = std::fs::read(dir.path().join("r2").join(LOSS_CSV)).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        std::fs::read(dir.path().join("r1").join(CHECKPOINT_FILE)).unwrap(),
        std::fs::read(dir.path().join("r2").join(CHECKPOINT_FILE)).unwrap()
    );
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(&dir.path().join("data"), 1);
    let full = TrainConfig {
        epochs: 3,
        ..tiny_config()
    };
    train(&full, &ds, &dir.path().join("full"), false).unwrap();

    // Stop after one epoch with a mid-epoch checkpoint, then pick up again.
    let per_epoch = ds.len().div_ceil(full.batch_size);
    let part = TrainConfig {
        epochs: 1,
        checkpoint_every: 2,
        ..full.clone()
    };
    let run = dir.path().join("split");
    train(&part, &ds, &run, false).unwrap();
    // Simulate a crash after the last periodic checkpoint by appending a stray row.
    let csv = run.join(LOSS_CSV);
    let mut text = std::fs::read_to_string(&csv).unwrap();
    text.push_str("999,1,1,1,1,1\n");
    std::fs::write(&csv, text).unwrap();
    let resumed = train(
        &TrainConfig {
            checkpoint_every: 2,
            ..full.clone()
        },
        &ds,
        &run,
        true,
    )
    .unwrap();
    assert_eq!(resumed.manifest.step, 3 * per_epoch);

    let a = read_loss_csv(&dir.path().join("full").join(LOSS_CSV)).unwrap();
    let b = read_loss_csv(&csv).unwrap();
    assert_eq!(a, b);
    let x = ds.clean.narrow(0, 0, 2).unwrap();
    let pa = load_checkpoint(&dir.path().join("full").join(CHECKPOINT_FILE))
        .unwrap()
        .model()
        .unwrap();
    let pb = resumed.model().unwrap();
    assert_eq!(
        max_abs_diff(
            &pa.predict(&x, &[4]).unwrap(),
            &pb.predict(&x, &[4]).unwrap()
        )
        .unwrap(),
        0.0
    );
}

#[test]
fn loss_decreases_and_extractor_stays_frozen() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(&dir.path().join("data"), 20);
    assert_eq!(ds.len(), 200);
    let cfg = TrainConfig {
        epochs: 5,
        ..tiny_config()
    };
    let mut trainer = Trainer::new(cfg.clone()).unwrap();
    let before: Vec<Tensor> = trainer.extractor().stub_weights().unwrap();
    drop(trainer);
    let run = dir.path().join("run");
    train(&cfg, &ds, &run, false).unwrap();
    let rows = read_loss_csv(&run.join(LOSS_CSV)).unwrap();
    let per_epoch = ds.len().div_ceil(cfg.batch_size);
    assert_eq!(rows.len(), 5 * per_epoch);
    let mean = |e: usize| {
        rows[e * per_epoch..(e + 1) * per_epoch]
            .iter()
            .map(|r| r.1.total)
            .sum::<f64>()
            / per_epoch as f64
    };
    assert!(
        mean(4) < mean(0),
        "epoch 5 {} vs epoch 1 {}",
        mean(4),
        mean(0)
    );

    trainer =
        Trainer::from_checkpoint(&load_checkpoint(&run.join(CHECKPOINT_FILE)).unwrap()).unwrap();
    for (a, b) in before
        .iter()
        .zip(trainer.extractor().stub_weights().unwrap())
    {
        assert_eq!(max_abs_diff(a, &b).unwrap(), 0.0);
    }

    // The semantic loss backpropagates through the extractor on every step;
    // its weights must still come out untouched.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let idx = Tensor::new(&[0u32, 1, 2, 3], &Device::Cpu).unwrap();
    let (clean, adv) = (
        ds.clean.index_select(&idx, 0).unwrap(),
        ds.adversarial.index_select(&idx, 0).unwrap(),
    );
    for _ in 0..3 {
        let losses = trainer.train_step(&clean, &adv, &mut rng, 1e-2).unwrap();
        assert!(losses.semantic > 0.0);
    }
    for (a, b) in before
        .iter()
        .zip(trainer.extractor().stub_weights().unwrap())
    {
        assert_eq!(max_abs_diff(a, &b).unwrap(), 0.0);
    }
}
