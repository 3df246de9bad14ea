//! Exhaustive round trip over every renderable (grade, findings) pair:
//! each of the 64 concept subsets with each of the 5 locations per present
//! concept (6^6 = 46656 location assignments), under every grade that is
//! consistent with the subset.

use std::collections::HashSet;

mod common;

use common::all_findings;
use xdr_core::labels::{Finding, Grade, LesionKind, Location};
use xdr_core::report::*;

#[test]
fn parse_inverts_render_over_the_full_enumeration() {
    let findings = all_findings();
    assert_eq!(findings.len(), 46656);
    let mut seen = HashSet::new();
    let mut combos = 0usize;
    for f in &findings {
        let flags = concept_flags(f);
        for g in Grade::ALL {
            match render_report(g, f) {
                Ok(text) => {
                    assert!(grade_consistent(g, &flags));
                    combos += 1;
                    let p = parse_report(&text);
                    assert!(p.valid, "{text}");
                    assert_eq!(p.grade, Some(g));
                    assert_eq!(p.findings.as_deref(), Some(f.as_slice()));
                    assert!(seen.insert(text));
                }
                Err(_) => assert!(!grade_consistent(g, &flags)),
            }
        }
        let answer = render_concept_answer(f).unwrap();
        let c = parse_concept_answer(&answer);
        assert!(c.valid);
        assert_eq!(c.findings.as_deref(), Some(f.as_slice()));
    }
    assert_eq!(seen.len(), combos);
    assert!(combos > 46656);
}

#[test]
fn reversed_input_order_renders_identically() {
    for f in all_findings().iter().filter(|f| f.len() > 1).take(2000) {
        let mut rev = f.clone();
        rev.reverse();
        assert_eq!(render_concept_answer(&rev).unwrap(), render_concept_answer(f).unwrap());
    }
}

#[test]
fn every_report_prefix_is_rejected() {
    let f = [
        Finding { kind: LesionKind::Hemorrhage, location: Location::Central },
        Finding { kind: LesionKind::Irma, location: Location::InferiorNasal },
    ];
    let text = render_report(Grade::Severe, &f).unwrap();
    let words = canonical_words(&text);
    for n in 0..words.len() {
        let p = parse_report(&words[..n].join(" "));
        assert!(!p.valid);
        assert_eq!(p.grade.is_some(), n >= 5, "prefix {n}");
    }
}

mod robustness {
    use proptest::prelude::*;
    use xdr_core::lvlm::Vocabulary;
    use xdr_core::report::*;

    fn vocabulary_words() -> Vec<String> {
        let v = Vocabulary::standard();
        (0..v.len()).map(|i| v.detokenize(&[i])).filter(|w| !w.is_empty()).collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(512))]

        #[test]
        fn arbitrary_text_never_panics(text in "\\PC{0,200}") {
            let r = parse_report(&text);
            let c = parse_concept_answer(&text);
            let _ = parse_combined(&text);
            prop_assert!(!r.valid || r.grade.is_some());
            prop_assert!(!c.valid || c.findings.is_some());
        }

        #[test]
        fn in_vocabulary_word_salad_never_panics(picks in proptest::collection::vec(0usize..10_000, 0..80)) {
            let words = vocabulary_words();
            let text = picks.iter().map(|&i| words[i % words.len()].as_str()).collect::<Vec<_>>().join(" ");
            let r = parse_report(&text);
            if r.valid {
                let g = r.grade.unwrap();
                prop_assert_eq!(canonicalize(&render_report(g, r.findings.as_deref().unwrap()).unwrap()), canonicalize(&text));
            }
            let _ = parse_concept_answer(&text);
        }
    }
}
