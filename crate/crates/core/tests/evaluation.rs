//! Metric oracles: brute-force recounts, published table arithmetic,
//! scoring policy for degenerate models, rating aggregation.

mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xdr_core::evaluation::*;
use xdr_core::labels::{ConceptFlags, Grade};
use xdr_core::report::{render_concept_answer, render_report};
use xdr_core::synthfundus::FundusSample;

fn random_matrix(rng: &mut ChaCha8Rng, k: usize) -> ConfusionMatrix {
    let counts = (0..k).map(|_| (0..k).map(|_| rng.random_range(0..20u64)).collect()).collect::<Vec<Vec<u64>>>();
    let mut counts = counts;
    for (i, row) in counts.iter_mut().enumerate() {
        row[i] += 1;
    }
    let invalid = (0..k).map(|_| rng.random_range(0..4u64)).collect();
    ConfusionMatrix::from_counts(counts, invalid)
}

#[test]
fn bacc_matches_a_brute_force_recount() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let cm = random_matrix(&mut rng, 5);
        // Expand to individual (truth, prediction) events and recount.
        let mut events = Vec::new();
        for t in 0..5 {
            for p in 0..5 {
                events.extend(std::iter::repeat_n((t, Some(p)), cm.counts[t][p] as usize));
            }
            events.extend(std::iter::repeat_n((t, None), cm.counts[t][5] as usize));
        }
        let mut recall_sum = 0.0;
        for t in 0..5 {
            let mine: Vec<_> = events.iter().filter(|e| e.0 == t).collect();
            let hit = mine.iter().filter(|e| e.1 == Some(t)).count();
            recall_sum += hit as f64 / mine.len() as f64;
        }
        let expected = 100.0 * recall_sum / 5.0;
        assert!((balanced_accuracy(&cm).unwrap() - expected).abs() < 1e-9);
        for (i, c) in per_class_prf(&cm).iter().enumerate() {
            assert!((c.f1 - f1_score(c.precision, c.recall)).abs() < 1e-9);
            let predicted = events.iter().filter(|e| e.1 == Some(i)).count();
            let tp = events.iter().filter(|e| e.0 == i && e.1 == Some(i)).count();
            assert!((c.precision - 100.0 * tp as f64 / predicted as f64).abs() < 1e-9);
        }
    }
}

#[test]
fn multilabel_metrics_match_a_brute_force_recount() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let n = rng.random_range(8..60);
        let mut truth: Vec<ConceptFlags> = (0..n).map(|_| std::array::from_fn(|_| rng.random_bool(0.4))).collect();
        // Keep every concept non-degenerate.
        for k in 0..6 {
            truth[0][k] = true;
            truth[1][k] = false;
        }
        let pred: Vec<ConceptFlags> = (0..n).map(|_| std::array::from_fn(|_| rng.random_bool(0.5))).collect();
        let m = multilabel_concept_metrics(&pred, &truth).unwrap();
        let mut bacc_sum = 0.0;
        for k in 0..6 {
            let count = |p: bool, t: bool| pred.iter().zip(&truth).filter(|(a, b)| a[k] == p && b[k] == t).count() as f64;
            let (tp, fp, tn, fn_) = (count(true, true), count(true, false), count(false, false), count(false, true));
            let bacc = 50.0 * (tp / (tp + fn_) + tn / (tn + fp));
            let f1 = if tp + fp + fn_ == 0.0 { 100.0 } else { 200.0 * tp / (2.0 * tp + fp + fn_) };
            assert!((m.per_concept[k].bacc - bacc).abs() < 1e-9);
            assert!((m.per_concept[k].f1 - f1).abs() < 1e-9);
            bacc_sum += bacc;
        }
        assert!((m.macro_bacc - bacc_sum / 6.0).abs() < 1e-9);
    }
}

#[test]
fn published_per_grade_f1_values_are_reproduced() {
    for (p, r, f) in common::TABLE4 {
        assert_eq!(common::round1(common::prf_from_counts(p, r).f1), f, "P={p} R={r}");
    }
}

#[test]
fn bacc_is_invariant_under_relabeling() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let perms = [[1, 2, 3, 4, 0], [4, 3, 2, 1, 0], [0, 2, 1, 4, 3]];
    for _ in 0..20 {
        let cm = random_matrix(&mut rng, 5);
        for perm in perms {
            let mut counts = vec![vec![0u64; 5]; 5];
            let mut invalid = vec![0u64; 5];
            for t in 0..5 {
                for p in 0..5 {
                    counts[perm[t]][perm[p]] = cm.counts[t][p];
                }
                invalid[perm[t]] = cm.counts[t][5];
            }
            let moved = ConfusionMatrix::from_counts(counts, invalid);
            assert!((balanced_accuracy(&moved).unwrap() - balanced_accuracy(&cm).unwrap()).abs() < 1e-9);
        }
    }
}

#[test]
fn bacc_equals_accuracy_on_balanced_classes() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let per = rng.random_range(1..30);
        let mut cm = ConfusionMatrix::new(5);
        let mut correct = 0;
        for t in 0..5 {
            for _ in 0..per {
                let p = if rng.random_bool(0.6) { Some(t) } else { Some(rng.random_range(0..5)) };
                correct += usize::from(p == Some(t));
                cm.record(t, p);
            }
        }
        let accuracy = 100.0 * correct as f64 / (5 * per) as f64;
        assert!((balanced_accuracy(&cm).unwrap() - accuracy).abs() < 1e-9);
    }
}

#[test]
fn oracle_model_scores_perfectly() {
    let data = common::samples(4, 13);
    let e = evaluate_model(&OracleModel, &data, "oracle", 0, false).unwrap();
    assert_eq!(e.report.diagnosis.bacc, 100.0);
    assert_eq!(e.report.diagnosis.macro_f1, 100.0);
    assert_eq!(e.report.concepts.macro_bacc, 100.0);
    assert_eq!(e.report.concepts.macro_f1, 100.0);
    assert_eq!(e.report.parse_valid, 100.0);
}

#[test]
fn gibberish_model_scores_zero_and_fifty() {
    let data = common::samples(4, 14);
    let e = evaluate_model(&ConstantModel("hello".into()), &data, "gibberish", 0, false).unwrap();
    assert_eq!(e.report.diagnosis.bacc, 0.0);
    assert_eq!(e.report.diagnosis.invalid, data.len() as u64);
    assert_eq!(e.report.concepts.macro_bacc, 50.0);
    assert_eq!(e.report.parse_valid, 0.0);
}

/// Valid text with a uniformly random grade and random findings.
struct Guesser(u64);

impl ReportModel for Guesser {
    fn generate(&self, sample: &FundusSample, task: Task) -> Generation {
        let mut rng = ChaCha8Rng::seed_from_u64(self.0 ^ sample.seed);
        let grade = Grade::ALL[rng.random_range(0..5)];
        let text = match task {
            Task::Diagnosis => render_report(grade, &common::consistent_findings(grade, &mut rng)),
            Task::Concept => render_concept_answer(&common::consistent_findings(grade, &mut rng)),
        }
        .unwrap();
        Generation { text, truncated: false }
    }
}

#[test]
fn random_guessing_sits_near_chance() {
    let data = common::samples(20, 15);
    let mut total = 0.0;
    for seed in 0..10 {
        let b = evaluate_model(&Guesser(seed), &data, "guess", seed, false).unwrap().report.diagnosis.bacc;
        assert!((10.0..=30.0).contains(&b), "seed {seed}: {b}");
        total += b;
    }
    assert!((total / 10.0 - 20.0).abs() < 5.0);
}

#[test]
fn untrained_model_output_is_scored_as_invalid() {
    let data = common::samples(2, 16);
    for seed in 0..10 {
        let vlm = common::fresh_vlm(seed * 3);
        let r = evaluate_model(&vlm, &data, "untrained", seed, true).unwrap().report;
        assert!(r.diagnosis.bacc <= 20.0, "seed {seed}: {}", r.diagnosis.bacc);
        assert!(r.parse_valid < 50.0);
    }
}

#[test]
fn parallel_and_sequential_evaluation_agree() {
    let data = common::samples(3, 17);
    let vlm = common::fresh_vlm(5);
    for model in [&vlm as &dyn ReportModel, &Guesser(3), &OracleModel] {
        let a = evaluate_model(model, &data, "x", 0, false).unwrap();
        let b = evaluate_model(model, &data, "x", 0, true).unwrap();
        assert_eq!(a.report.diagnosis.confusion, b.report.diagnosis.confusion);
        assert_eq!(a.report.to_json(), b.report.to_json());
        assert_eq!(a.predictions, b.predictions);
    }
}

#[test]
fn ratings_reproduce_hand_computed_means() {
    let (csv, means) = common::ratings_fixture();
    let records = read_ratings_csv(csv.as_bytes()).unwrap();
    assert_eq!(records.len(), 500);
    let s = aggregate_ratings(&records).unwrap();
    assert_eq!(s.means, means);
    assert_eq!(s.per_rater.len(), 5);
    let mut reversed = records.clone();
    reversed.reverse();
    assert_eq!(aggregate_ratings(&reversed).unwrap().means, s.means);
    let dup = format!("{csv}r3,s007,10,10,10\n");
    let err = aggregate_ratings(&read_ratings_csv(dup.as_bytes()).unwrap()).unwrap_err();
    assert!(matches!(err, EvalError::DuplicateRating { .. }), "{err}");
}
