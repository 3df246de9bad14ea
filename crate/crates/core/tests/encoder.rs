//! Encoder contracts: shapes, determinism, lesion sensitivity, patch-order
//! equivariance without positions, initialisation modes and pre-training.

mod common;

use common::samples;
use xdr_core::encoder::*;
use xdr_core::nn::Module;
use xdr_core::synthfundus::render_image;
use xdr_numerics::Tensor;

fn pretrain(n_per_grade: usize, epochs: usize, seed: u64) -> (Encoder, PretrainReport) {
    let data = samples(n_per_grade, seed);
    let mut enc = Encoder::random(EncoderConfig::default(), seed, InitMode::Generic).unwrap();
    let cfg = PretrainConfig {
        epochs,
        ..PretrainConfig::default()
    };
    let report = pretrain_encoder(&mut enc, &data, &cfg).unwrap();
    (enc, report)
}

#[test]
fn features_are_deterministic_finite_and_64_by_32() {
    let enc = Encoder::random(EncoderConfig::default(), 1, InitMode::Generic).unwrap();
    for s in samples(2, 3) {
        let a = enc.encode(&s.image).unwrap();
        assert_eq!(a.shape(), &[64, 32], "{}", s.id);
        assert!(a.is_finite());
        assert_eq!(a, enc.encode(&s.image).unwrap());
    }
}

#[test]
fn removing_one_lesion_changes_the_features() {
    let (enc, _) = pretrain(4, 2, 5);
    let data = samples(3, 6);
    let mut checked = 0;
    for s in data.iter().filter(|s| !s.lesions.is_empty()) {
        let mut fewer = s.lesions.clone();
        fewer.pop();
        let altered = render_image(&fewer, s.seed).unwrap();
        let a = enc.encode(&s.image).unwrap();
        let b = enc.encode(&altered).unwrap();
        assert_ne!(a, b, "{}", s.id);
        checked += 1;
    }
    assert!(checked >= 9);
}

#[test]
fn without_positions_patch_permutation_permutes_rows() {
    let mut enc = Encoder::random(EncoderConfig::default(), 7, InitMode::Generic).unwrap();
    enc.pos.value = Tensor::zeros(enc.pos.value.shape().to_vec());
    let s = &samples(1, 8)[4];
    let patches = enc.patches(&s.image).unwrap();
    let base = enc.encode_patches(&patches).unwrap();
    let p = patches.rows();
    for shift in [1, 17, 40] {
        let perm: Vec<usize> = (0..p).map(|i| (i * 5 + shift) % p).collect();
        let rows: Vec<&[f64]> = perm.iter().map(|&i| patches.row(i)).collect();
        let out = enc.encode_patches(&Tensor::from_rows(&rows).unwrap()).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            for (a, b) in out.row(k).iter().zip(base.row(i)) {
                assert!((a - b).abs() < 1e-10, "shift {shift} row {k}");
            }
        }
    }
    // With positions back in, the same permutation is no longer equivariant.
    let enc = Encoder::random(EncoderConfig::default(), 7, InitMode::Generic).unwrap();
    let base = enc.encode_patches(&patches).unwrap();
    let rows: Vec<&[f64]> = (0..p).map(|i| patches.row((i + 1) % p)).collect();
    let out = enc.encode_patches(&Tensor::from_rows(&rows).unwrap()).unwrap();
    assert!((0..p).any(|k| out.row(k) != base.row((k + 1) % p)));
}

#[test]
fn generic_init_is_reproducible_and_medical_differs() {
    let cfg = EncoderConfig::default();
    let data = samples(2, 9);
    let pre = PretrainConfig {
        epochs: 1,
        ..PretrainConfig::default()
    };
    let (g1, r1) = init_weights(cfg.clone(), 4, InitMode::Generic, &data, &pre).unwrap();
    let (g2, _) = init_weights(cfg.clone(), 4, InitMode::Generic, &data, &pre).unwrap();
    assert!(r1.is_none());
    assert_eq!(g1.checksum(), g2.checksum());
    assert_eq!(g1.mode, InitMode::Generic);
    let (m, report) = init_weights(cfg, 4, InitMode::Medical, &data, &pre).unwrap();
    assert!(report.is_some());
    assert_eq!(m.mode, InitMode::Medical);
    assert_ne!(m.checksum(), g1.checksum());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("enc.xdrw");
    m.save(&path).unwrap();
    let back = Encoder::load(&path).unwrap();
    assert_eq!(back.mode, InitMode::Medical);
    assert_eq!(back.checksum(), m.checksum());
    assert_eq!(back.config, m.config);
}

#[test]
fn zero_epochs_leave_weights_alone() {
    let (enc, report) = pretrain(2, 0, 10);
    let fresh = Encoder::random(EncoderConfig::default(), 10, InitMode::Generic).unwrap();
    assert_eq!(enc.checksum(), fresh.checksum());
    assert!(report.epoch_losses.is_empty());
    assert!(pretrain_encoder(&mut fresh.clone(), &[], &PretrainConfig::default()).is_err());
}

#[test]
fn epoch_losses_are_finite_and_non_increasing_within_five_percent() {
    let (_, report) = pretrain(20, 6, 11);
    let losses = &report.epoch_losses;
    assert_eq!(losses.len(), 6);
    assert!(losses.iter().all(|l| l.is_finite()));
    for w in losses.windows(2) {
        assert!(w[1] <= w[0] * 1.05, "{losses:?}");
    }
    assert!(report.f1_after > report.f1_before, "{report:?}");
}

#[test]
fn ten_epochs_fit_a_500_sample_set() {
    let (_, report) = pretrain(100, 10, 12);
    assert!(report.f1_after >= 90.0, "proxy macro-F1 {:.1} -> {:.1}", report.f1_before, report.f1_after);
}
