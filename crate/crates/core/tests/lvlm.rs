//! Decoder layout, causality, loss masking, cached decoding, vocabulary
//! closure and instruction-tuning contracts.

mod common;

use common::{all_findings, fresh_vlm, samples};
use xdr_core::labels::Grade;
use xdr_core::lvlm::vocab::{EOS, IMG};
use xdr_core::lvlm::*;
use xdr_core::nn::{normal_tensor, rng_for, Module};
use xdr_core::report::{canonicalize, render_concept_answer, render_report};
use xdr_numerics::{cross_entropy, Tensor};

fn small_decoder(seed: u64) -> Decoder {
    Decoder::new(
        DecoderConfig {
            vocab_size: 23,
            dim: 16,
            layers: 2,
            heads: 4,
            mlp_ratio: 2,
            max_positions: 64,
        },
        seed,
    )
    .unwrap()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[test]
fn zeroing_the_suffix_leaves_earlier_logits_bitwise_equal() {
    let mut rng = rng_for(31);
    for case in 0..10u64 {
        let dec = small_decoder(100 + case);
        let len = 6 + 3 * case as usize;
        let x = normal_tensor(&mut rng, &[len, 16], 1.0);
        let full = dec.forward(&x).unwrap();
        let cut = 1 + (case as usize * 7) % (len - 2);
        let mut z = x.clone();
        z.data_mut()[(cut + 1) * 16..].fill(0.0);
        let trimmed = dec.forward(&z).unwrap();
        let v = dec.config.vocab_size;
        let same = full.data()[..(cut + 1) * v]
            .iter()
            .zip(&trimmed.data()[..(cut + 1) * v])
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same, "case {case}: logits at or before {cut} moved");
        assert!(full.is_finite());
        let later_moved = full.data()[(cut + 1) * v..] != trimmed.data()[(cut + 1) * v..];
        assert!(later_moved, "case {case}: suffix change had no effect");
    }
}

#[test]
fn loss_ignores_logits_at_image_and_prompt_positions() {
    let seq = TokenSequence::assemble(4, &[5, 6, 7], Some(&[8, 9, 10]));
    let mut rng = rng_for(2);
    let logits = normal_tensor(&mut rng, &[seq.len(), 23], 2.0);
    let base = generation_loss(&logits, &seq).unwrap();
    let (rows, _) = seq.loss_rows();
    for trial in 0..20 {
        let mut bad = logits.clone();
        for r in 0..seq.len() {
            if !rows.contains(&r) {
                for v in &mut bad.data_mut()[r * 23..(r + 1) * 23] {
                    *v = (trial as f64 + 1.0) * 1e3 * (*v).signum();
                }
            }
        }
        assert_eq!(generation_loss(&bad, &seq).unwrap().to_bits(), base.to_bits());
    }
    let mut touched = logits.clone();
    touched.data_mut()[rows[0] * 23] += 5.0;
    assert_ne!(generation_loss(&touched, &seq).unwrap(), base);
}

#[test]
fn mask_matches_a_hand_built_five_token_case() {
    // <img> <bos> a b <eos>: rows 1, 2 and 3 predict a, b and <eos>.
    let seq = TokenSequence::assemble(1, &[], Some(&[7, 8]));
    assert_eq!(seq.ids, vec![IMG, 0, 7, 8, EOS]);
    let logits = normal_tensor(&mut rng_for(5), &[5, 23], 1.0);
    let targets = [0, 7, 8, EOS, 0];
    let mask = [false, true, true, true, false];
    let expected = cross_entropy(&logits, &targets, &mask).unwrap();
    assert_eq!(generation_loss(&logits, &seq).unwrap().to_bits(), expected.to_bits());
    let uniform = Tensor::zeros([5, 23]);
    assert!((generation_loss(&uniform, &seq).unwrap() - 23f64.ln()).abs() < 1e-12);
}

#[test]
fn cached_greedy_decoding_agrees_with_full_forward() {
    for seed in 0..4 {
        let dec = small_decoder(seed);
        let img = normal_tensor(&mut rng_for(seed + 50), &[6, 16], 1.0);
        let prompt = [4, 5, 6];
        let (ids, truncated) = dec.generate(&img, &prompt, 20).unwrap();
        let (seq, emb) = dec.assemble_input(&img, &prompt, Some(&ids)).unwrap();
        let logits = dec.forward(&emb).unwrap();
        let start = 6 + 1 + prompt.len() - 1;
        for (k, &id) in ids.iter().enumerate() {
            assert_eq!(argmax(logits.row(start + k)), id, "seed {seed} step {k}");
        }
        if !truncated {
            assert_eq!(argmax(logits.row(start + ids.len())), EOS);
        }
        assert_eq!(seq.len(), emb.rows());
        assert_eq!(dec.generate(&img, &prompt, 20).unwrap(), (ids, truncated));
    }
}

#[test]
fn prompt_layout_and_image_rows() {
    let vlm = fresh_vlm(3);
    let prompt = vlm.vocab.tokenize(PromptKind::Diagnosis.text()).unwrap();
    let data = samples(1, 8);
    let a = vlm.project(&data[0]).unwrap();
    let b = vlm.project(&data[4]).unwrap();
    let (seq, ea) = vlm.decoder.assemble_input(&a, &prompt, None).unwrap();
    let (_, eb) = vlm.decoder.assemble_input(&b, &prompt, None).unwrap();
    assert_eq!(seq.len(), 64 + 1 + prompt.len());
    assert!(seq.roles.iter().enumerate().all(|(i, r)| (*r == Role::ImageSlot) == (i < 64)));
    for r in 0..seq.len() {
        assert_eq!(ea.row(r) == eb.row(r), r >= 64, "row {r}");
    }
}

#[test]
fn vocabulary_closes_over_every_rendered_string() {
    let vocab = Vocabulary::standard();
    let corpus = xdr_core::report::grammar_corpus();
    assert_eq!(Vocabulary::build(&corpus), Vocabulary::build(&corpus));
    let mut checked = 0usize;
    let mut check = |text: &str| {
        let ids = vocab.tokenize(text).unwrap_or_else(|e| panic!("{text}: {e}"));
        assert_eq!(vocab.detokenize(&ids), canonicalize(text));
        checked += 1;
    };
    for f in all_findings() {
        check(&render_concept_answer(&f).unwrap());
        for g in Grade::ALL {
            if let Ok(r) = render_report(g, &f) {
                check(&r);
            }
        }
    }
    for p in [PromptKind::Diagnosis, PromptKind::Concept, PromptKind::Generic] {
        check(p.text());
    }
    assert!(checked > 2 * 46656);
    assert!(vocab.tokenize("no dr retinoblastoma").is_err());
}

#[test]
fn generic_mode_builds_one_combined_item_per_sample() {
    let s = &samples(1, 12)[3];
    let multi = training_targets(s, PromptMode::Multitask).unwrap();
    let generic = training_targets(s, PromptMode::Generic).unwrap();
    assert_eq!(multi.len(), 2);
    assert_eq!(generic.len(), 1);
    assert_eq!(generic[0].0, PromptKind::Generic);
    assert_eq!(generic[0].1, format!("{} {}", multi[0].1, multi[1].1));
}

fn tiny_tune(mode: PromptMode, epochs: usize) -> (Vlm, InstructReport) {
    let data: Vec<_> = samples(1, 21).into_iter().take(3).collect();
    let mut vlm = fresh_vlm(9);
    let cfg = InstructConfig {
        epochs,
        batch_size: 2,
        prompt_mode: mode,
        ..InstructConfig::default()
    };
    let report = instruct_tune(&mut vlm, &data, &cfg).unwrap();
    (vlm, report)
}

fn checksums(v: &Vlm) -> [String; 3] {
    [v.encoder.checksum(), v.connector.checksum(), v.decoder.checksum()]
}

#[test]
fn zero_epochs_change_nothing() {
    let (tuned, report) = tiny_tune(PromptMode::Multitask, 0);
    assert_eq!(report.steps, 0);
    assert_eq!(checksums(&tuned), checksums(&fresh_vlm(9)));
}

#[test]
fn tuning_is_bitwise_reproducible_and_mode_keeps_shapes() {
    let (a, ra) = tiny_tune(PromptMode::Multitask, 2);
    let (b, rb) = tiny_tune(PromptMode::Multitask, 2);
    assert_eq!(checksums(&a), checksums(&b));
    assert_eq!(ra, rb);
    assert_eq!(ra.items, 6);
    assert!(ra.curve.iter().all(|p| p.loss.is_finite()));
    let (g, rg) = tiny_tune(PromptMode::Generic, 1);
    assert_eq!(rg.items, 3);
    assert_eq!(g.prompt_mode, PromptMode::Generic);
    let shapes = |v: &Vlm| v.decoder.params().iter().map(|p| p.value.shape().to_vec()).collect::<Vec<_>>();
    assert_eq!(shapes(&g), shapes(&a));
    assert_ne!(checksums(&g), checksums(&a));
}

#[test]
fn stopping_early_keeps_a_prefix_of_the_full_run() {
    let data: Vec<_> = samples(1, 21).into_iter().take(3).collect();
    let cfg = InstructConfig {
        epochs: 4,
        batch_size: 2,
        ..InstructConfig::default()
    };
    let (_, full) = tiny_tune(PromptMode::Multitask, 4);
    let mut vlm = fresh_vlm(9);
    let mut seen = Vec::new();
    let part = instruct_tune_until(&mut vlm, &data, &cfg, |epoch, _| {
        seen.push(epoch);
        Ok(epoch == 2)
    })
    .unwrap();
    assert_eq!(seen, [1, 2]);
    assert_eq!(part.epoch_losses, full.epoch_losses[..2]);
    assert_eq!(part.curve, full.curve[..part.steps]);
}

#[test]
fn checkpoints_and_vocabulary_round_trip() {
    let vlm = fresh_vlm(4);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.xdrw");
    vlm.decoder.save(&p).unwrap();
    assert_eq!(Decoder::load(&p).unwrap().checksum(), vlm.decoder.checksum());
    let text = vlm.vocab.to_text();
    assert_eq!(text.lines().count(), vlm.vocab.len());
    assert_eq!(Vocabulary::from_text(&text).unwrap(), vlm.vocab);
}
