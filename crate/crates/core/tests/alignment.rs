//! Connector and Stage-1 alignment: loss properties, retrieval baselines,
//! and which weights a training run may touch.

mod common;

use common::{fresh_vlm, samples};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use xdr_core::connector::*;
use xdr_core::experiments::caption_vectors;
use xdr_core::nn::Module;
use xdr_numerics::Tensor;

fn unit_vectors(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

#[test]
fn zero_input_with_zero_bias_projects_to_zero() {
    let mut c = Connector::new(ConnectorConfig::default(), 3);
    for p in c.params_mut() {
        if p.name().ends_with(".b") {
            p.value = Tensor::zeros(p.value.shape().to_vec());
        }
    }
    let out = c.project(&Tensor::zeros([64, 32])).unwrap();
    assert_eq!(out.shape(), &[64, 64]);
    assert!(out.data().iter().all(|&v| v == 0.0));
    assert!(c.project(&Tensor::zeros([64, 31])).is_err());
}

#[test]
fn random_retrieval_sits_at_chance() {
    let trials = 100;
    let mut total = 0.0;
    for seed in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = unit_vectors(&mut rng, 256, 64);
        let txt = unit_vectors(&mut rng, 256, 64);
        total += retrieval_at_1(&img, &txt).unwrap();
    }
    let mean = total / trials as f64;
    // Standard error of the mean is about 0.0004 here.
    assert!((mean - 1.0 / 256.0).abs() < 0.002, "{mean}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_is_positive_symmetric_and_relabeling_invariant(seed in 0u64..10_000, n in 2usize..12, tau in 0.05f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = unit_vectors(&mut rng, n, 8);
        let txt = unit_vectors(&mut rng, n, 8);
        let l = contrastive_loss(&img, &txt, tau).unwrap();
        prop_assert!(l > 0.0);
        prop_assert!((contrastive_loss(&txt, &img, tau).unwrap() - l).abs() < 1e-12);
        let perm: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % n).collect();
        if { let mut s = perm.clone(); s.sort(); s.dedup(); s.len() == n } {
            let pi: Vec<_> = perm.iter().map(|&i| img[i].clone()).collect();
            let pt: Vec<_> = perm.iter().map(|&i| txt[i].clone()).collect();
            prop_assert!((contrastive_loss(&pi, &pt, tau).unwrap() - l).abs() < 1e-12);
        }
    }
}

struct Setup {
    vlm: xdr_core::lvlm::Vlm,
    data: Vec<xdr_core::synthfundus::FundusSample>,
    text: Vec<Vec<f64>>,
}

fn setup(per_grade: usize) -> Setup {
    let vlm = fresh_vlm(21);
    let data = samples(per_grade, 22);
    let text = caption_vectors(&vlm.decoder, &vlm.vocab, &data).unwrap();
    Setup { vlm, data, text }
}

fn align(s: &mut Setup, epochs: usize, freeze_encoder: bool) -> AlignReport {
    let cfg = AlignConfig {
        epochs,
        batch_size: 8,
        freeze_encoder,
        ..AlignConfig::default()
    };
    align_train(&mut s.vlm.encoder, &mut s.vlm.connector, &s.data, &s.text, &cfg).unwrap()
}

#[test]
fn zero_epochs_leave_the_connector_alone() {
    let mut s = setup(2);
    let before = s.vlm.connector.checksum();
    let r = align(&mut s, 0, true);
    assert_eq!(r.steps, 0);
    assert!(r.curve.is_empty());
    assert_eq!(s.vlm.connector.checksum(), before);
}

#[test]
fn frozen_encoder_keeps_its_weights_and_loss_descends() {
    let mut s = setup(8);
    let enc = s.vlm.encoder.checksum();
    let con = s.vlm.connector.checksum();
    let r = align(&mut s, 4, true);
    assert_eq!(s.vlm.encoder.checksum(), enc);
    assert_ne!(s.vlm.connector.checksum(), con);
    assert_eq!(r.steps, 4 * 5);
    assert!(r.final_loss < r.initial_loss, "{} -> {}", r.initial_loss, r.final_loss);
    assert!(r.curve.iter().all(|p| p.loss.is_finite() && p.lr > 0.0));
    let text = loss_curve_text(&r.curve);
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), r.steps);
    assert!(text.lines().skip(1).all(|l| l.split_whitespace().count() == 3));
}

#[test]
fn unfrozen_encoder_is_trained_too() {
    let mut s = setup(2);
    let enc = s.vlm.encoder.checksum();
    align(&mut s, 1, false);
    assert_ne!(s.vlm.encoder.checksum(), enc);
}

#[test]
fn alignment_is_reproducible_and_checkpoints_round_trip() {
    let mut a = setup(2);
    let mut b = setup(2);
    assert_eq!(align(&mut a, 2, true), align(&mut b, 2, true));
    assert_eq!(a.vlm.connector.checksum(), b.vlm.connector.checksum());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.xdrw");
    a.vlm.connector.save(&path).unwrap();
    let back = Connector::load(&path).unwrap();
    assert_eq!(back.checksum(), a.vlm.connector.checksum());
    assert_eq!(back.config(), a.vlm.connector.config());
}

#[test]
fn mismatched_pairs_are_rejected() {
    let mut s = setup(1);
    let cfg = AlignConfig::default();
    assert!(align_train(&mut s.vlm.encoder, &mut s.vlm.connector, &s.data, &s.text[1..], &cfg).is_err());
    assert!(align_train(&mut s.vlm.encoder, &mut s.vlm.connector, &[], &[], &cfg).is_err());
}
