use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sepconv::checkpoint::Checkpoint;
use sepconv::data::{build_dataset_default, DatasetConfig, SamplingConfig, Triplet};
use sepconv::losses::{LossConfig, LossKind};
use sepconv::network::{build_network, NetworkConfig};
use sepconv::synthetic::{moving_triplet, translating_sequence, Texture};
use sepconv::train::{
    checkpoint_path, epoch_order, fine_tune, sample_gradients, train, AdaMaxConfig, LogRecord,
    OptimizerState, TrainConfig, Trainer,
};
use sepconv::{Error, Image};

fn tiny_network() -> NetworkConfig {
    NetworkConfig {
        encoder_channels: vec![2, 3, 4, 4, 4],
        kernel_size: 5,
        input_channels: 6,
    }
}

fn toy_dataset(root: &Path) -> PathBuf {
    for s in 0..3u64 {
        let dir = root.join(format!("src/s{s}"));
        std::fs::create_dir_all(&dir).unwrap();
        let v = [(1.0, 2.0), (-2.0, 1.0), (0.5, -1.5)][s as usize];
        for (i, f) in translating_sequence(&Texture::random(s), 80, 80, 4, v)
            .iter()
            .enumerate()
        {
            f.save(dir.join(format!("{i:04}.png"))).unwrap();
        }
    }
    let config = DatasetConfig {
        sampling: SamplingConfig {
            patch_size: 48,
            max_patches: 3,
            ..Default::default()
        },
        validation_fraction: 0.34,
        ..Default::default()
    };
    let out = root.join("cache");
    build_dataset_default(&root.join("src"), &out, &config).unwrap();
    out
}

fn config(dataset: &Path, checkpoints: &Path, epochs: u64) -> TrainConfig {
    TrainConfig {
        network: tiny_network(),
        batch_size: 2,
        learning_rate: 1e-3,
        epochs,
        dataset: dataset.to_path_buf(),
        checkpoint_dir: checkpoints.to_path_buf(),
        preview_count: 1,
        seed: 17,
        crop: 32,
        ..Default::default()
    }
}

/// Log records without the wall-clock field.
fn losses(records: &[LogRecord]) -> Vec<(String, u64, u64, Option<f64>, Option<f64>)> {
    records
        .iter()
        .map(|r| (r.event.clone(), r.epoch, r.step, r.train_loss, r.val_loss))
        .collect()
}

#[test]
fn same_seed_gives_identical_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_dataset(dir.path());
    let a = train(&config(&data, &dir.path().join("a"), 1), false).unwrap();
    let b = train(&config(&data, &dir.path().join("b"), 1), false).unwrap();
    assert_eq!(losses(&a.epochs), losses(&b.epochs));
    let ca = Checkpoint::load(&a.checkpoints[0]).unwrap();
    let cb = Checkpoint::load(&b.checkpoints[0]).unwrap();
    assert_eq!(ca.params, cb.params);
    assert_eq!(ca.optimizer, cb.optimizer);

    let mut other = config(&data, &dir.path().join("c"), 1);
    other.seed = 18;
    let c = train(&other, false).unwrap();
    assert_ne!(
        Checkpoint::load(&c.checkpoints[0]).unwrap().params,
        ca.params
    );
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_dataset(dir.path());
    let full = train(&config(&data, &dir.path().join("full"), 3), false).unwrap();

    let split = dir.path().join("split");
    train(&config(&data, &split, 1), false).unwrap();
    let resumed = train(&config(&data, &split, 3), true).unwrap();
    assert_eq!(resumed.checkpoints.len(), 2);

    let a = Checkpoint::load(checkpoint_path(&dir.path().join("full"), 3)).unwrap();
    let b = Checkpoint::load(checkpoint_path(&split, 3)).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.optimizer, b.optimizer);
    assert_eq!(a.meta.epoch, 3);
    assert_eq!(losses(&full.epochs[1..]), losses(&resumed.epochs));
}

#[test]
fn fine_tuning_records_lineage() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_dataset(dir.path());
    let base = train(&config(&data, &dir.path().join("base"), 1), false).unwrap();
    let parent = Checkpoint::load(&base.checkpoints[0]).unwrap();

    let ft = fine_tune(
        &base.checkpoints[0],
        LossConfig::new(LossKind::Ssim),
        &config(&data, &dir.path().join("ft"), 1),
        false,
    )
    .unwrap();
    let child = Checkpoint::load(&ft.checkpoints[0]).unwrap();
    assert_eq!(child.meta.parent.as_deref(), Some(parent.id().as_str()));
    assert_eq!(child.meta.loss, "ssim");
    assert_eq!(child.meta.epoch, parent.meta.epoch + 1);
    assert_eq!(
        child.optimizer.as_ref().unwrap().step,
        ft.trainer.optimizer.step
    );
    assert_ne!(child.params, parent.params);

    // a feature loss without weights is refused before any work is done
    let err = fine_tune(
        &base.checkpoints[0],
        LossConfig::new(LossKind::Feature),
        &config(&data, &dir.path().join("ft2"), 1),
        false,
    )
    .unwrap_err();
    assert!(matches!(err, Error::ExtractorUnavailable { .. }));
}

#[test]
fn every_parameter_receives_gradient() {
    let params = build_network(&tiny_network(), 3).unwrap();
    let [a, b, c] = moving_triplet(4, 40, 36, (1.0, -2.0));
    let t = Triplet::new(a, b, c).unwrap();
    let (loss, grads) = sample_gradients(&params, &LossConfig::default(), None, &t).unwrap();
    assert!(loss.is_finite() && loss > 0.0);
    for (name, g) in grads.tensors() {
        assert!(g.iter().all(|v| v.is_finite()), "{name}");
        assert!(
            g.iter().any(|&v| v != 0.0),
            "{name} has an all-zero gradient"
        );
    }
}

#[test]
fn repeated_steps_reduce_loss_on_a_fixed_batch() {
    let params = build_network(&tiny_network(), 5).unwrap();
    let batch: Vec<Triplet> = (0..2)
        .map(|s| {
            let [a, b, c] = moving_triplet(s, 32, 32, (1.0, 1.0));
            Triplet::new(a, b, c).unwrap()
        })
        .collect();
    let mut trainer = Trainer::new(
        params,
        LossConfig::default(),
        1e-2,
        AdaMaxConfig::default(),
        None,
    )
    .unwrap();
    let before = trainer.mean_loss(&batch).unwrap();
    for _ in 0..30 {
        trainer.step(&batch).unwrap();
    }
    assert!(trainer.mean_loss(&batch).unwrap() < before);
    assert_eq!(trainer.optimizer.step, 30);
}

#[test]
fn non_finite_gradient_aborts_without_mutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut params: Vec<(String, Vec<f32>)> = vec![
        ("a".into(), (0..5).map(|_| rng.random()).collect()),
        ("b".into(), (0..3).map(|_| rng.random()).collect()),
    ];
    let mut opt = OptimizerState::new(AdaMaxConfig::default(), [5, 3]);
    let ok = vec![
        ("a".to_string(), vec![0.1f32; 5]),
        ("b".to_string(), vec![0.2f32; 3]),
    ];
    opt.step(&mut params, &ok, 1e-3).unwrap();
    let (snapshot, state) = (params.clone(), opt.clone());
    let bad = vec![
        ("a".to_string(), vec![0.1f32; 5]),
        ("b".to_string(), vec![0.2, f32::NAN, 0.0]),
    ];
    let err = opt.step(&mut params, &bad, 1e-3).unwrap_err();
    assert!(err.to_string().contains('b'), "{err}");
    assert_eq!(params, snapshot);
    assert_eq!(opt, state);
}

#[test]
fn epoch_order_is_a_seeded_permutation() {
    let a = epoch_order(3, 1, 50);
    assert_eq!(a, epoch_order(3, 1, 50));
    assert_ne!(a, epoch_order(3, 2, 50));
    let mut sorted = a.clone();
    sorted.sort();
    assert_eq!(sorted, (0..50).collect::<Vec<_>>());
}

#[test]
fn images_cannot_carry_non_finite_values() {
    let mut d = Image::<f32>::constant(4, 4, 0.5).into_array();
    d[[0, 1, 1]] = f32::INFINITY;
    assert!(Image::new(d).is_err());
}
