mod common;

use gridify_core::data::{gen_random_cloud, surface_cloud, Shape};
use gridify_core::nn::{FourierFeatures, ParamStore, RffConfig};
use gridify_core::train::{train_classify_synth, train_recon_single, ClassifyConfig, ReconConfig, TrainConfig};

#[test]
fn random_cloud_is_uniform_on_the_cube() {
    let c = gen_random_cloud(1000, 3).unwrap();
    assert_eq!((c.len(), c.dim(), c.features()), (1000, 3, 1));
    assert!(c.coords().iter().chain(c.feats()).all(|v| (-1.0..=1.0).contains(v)));

    let big = gen_random_cloud(100_000 / 3 + 1, 4).unwrap();
    let mean = big.coords().iter().sum::<f64>() / big.coords().len() as f64;
    assert!(mean.abs() < 0.02, "mean {mean}");
    assert_eq!(gen_random_cloud(50, 9).unwrap(), gen_random_cloud(50, 9).unwrap());
    assert_ne!(gen_random_cloud(50, 9).unwrap(), gen_random_cloud(50, 10).unwrap());
}

#[test]
fn surface_clouds_are_normalized() {
    let mut r = common::rng(2);
    for shape in [Shape::Sphere, Shape::Cube] {
        let c = surface_cloud(shape, 300, 0.02, &mut r).unwrap();
        let norms: Vec<f64> = c.coords().chunks(3).map(|p| p.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        assert!((norms.iter().copied().fold(0.0, f64::max) - 1.0).abs() < 1e-12);
        assert_eq!(c.features(), 3);
    }
}

#[test]
fn fourier_frequencies_have_requested_spread() {
    let mut store = ParamStore::new();
    let omega = 0.1;
    let cfg = RffConfig { omega, n_frequencies: 10_000, trainable: false, seed: 17 };
    let ff = FourierFeatures::new(&mut store, "f", 1, cfg).unwrap();
    let b = store.value(ff.freqs()).data();
    let mean = b.iter().sum::<f64>() / b.len() as f64;
    let std = (b.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (b.len() - 1) as f64).sqrt();
    assert!((std / omega - 1.0).abs() < 0.05, "std {std}");
}

fn tiny_recon() -> ReconConfig {
    ReconConfig {
        n_train: 16,
        n_val: 8,
        n_points: 64,
        resolutions: vec![3],
        channels: vec![4],
        train: TrainConfig { epochs: 6, warmup_epochs: 1, lr: 0.01, weight_decay: 0.0, batch_size: 2 },
        ..ReconConfig::default()
    }
}

#[test]
fn reconstruction_training_lowers_validation_error() {
    let out = train_recon_single(&tiny_recon(), 3, 4).unwrap();
    assert!(out.row.val_mse < out.initial_val_mse, "{} vs {}", out.row.val_mse, out.initial_val_mse);
    assert_eq!(out.epoch_train_mse.len(), 6);
    assert!(out.epoch_train_mse.iter().all(|v| v.is_finite()));
}

#[test]
fn reconstruction_is_deterministic() {
    let a = train_recon_single(&tiny_recon(), 3, 4).unwrap();
    let b = train_recon_single(&tiny_recon(), 3, 4).unwrap();
    assert_eq!(a.row.val_mse.to_bits(), b.row.val_mse.to_bits());
    assert_eq!(a.store, b.store);
    let other = train_recon_single(&ReconConfig { seed: 2, ..tiny_recon() }, 3, 4).unwrap();
    assert_ne!(a.row.val_mse, other.row.val_mse);
}

#[test]
fn classification_is_deterministic() {
    let cfg = ClassifyConfig {
        n_train: 8,
        n_val: 8,
        n_points: 48,
        resolution: 3,
        channels: 4,
        blocks: 1,
        train: TrainConfig { epochs: 2, warmup_epochs: 1, lr: 0.005, weight_decay: 0.0, batch_size: 4 },
        ..ClassifyConfig::default()
    };
    let a = train_classify_synth(&cfg).unwrap();
    let b = train_classify_synth(&cfg).unwrap();
    assert_eq!(a.epoch_train_loss, b.epoch_train_loss);
    assert_eq!(a.val_accuracy, b.val_accuracy);
    assert!((0.0..=1.0).contains(&a.val_accuracy));
}

#[test]
fn invalid_configs_are_rejected() {
    assert!(ReconConfig { resolutions: vec![], ..tiny_recon() }.validate().is_err());
    assert!(ReconConfig { k: 0, ..tiny_recon() }.validate().is_err());
    let bad = TrainConfig { lr: -1.0, ..tiny_recon().train };
    assert!(ReconConfig { train: bad, ..tiny_recon() }.validate().is_err());
    assert!(ClassifyConfig { dropout: 1.0, ..ClassifyConfig::default() }.validate().is_err());
}
