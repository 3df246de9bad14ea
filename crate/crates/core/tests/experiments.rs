//! Runner plumbing on a tiny configuration: artifacts, reproducibility,
//! variant wiring, failure markers and table emission.

mod common;

use std::fs;
use std::path::Path;

use xdr_core::evaluation::{aggregate_ratings, read_ratings_csv};
use xdr_core::experiments::*;
use xdr_core::lvlm::PromptMode;
use xdr_core::encoder::InitMode;

fn tiny(out: &Path) -> ExperimentConfig {
    ExperimentConfig {
        out: out.to_string_lossy().into_owned(),
        per_grade: 20,
        pretrain_epochs: 1,
        align_epochs: 1,
        instruct_epochs: 1,
        ..ExperimentConfig::default()
    }
}

#[test]
fn a_full_run_writes_every_artifact_and_repeats_bit_for_bit() {
    let root = tempfile::tempdir().unwrap();
    let a = root.path().join("a");
    let record = run_pipeline(&tiny(&a)).unwrap();
    for f in [
        CONFIG_FILE,
        ENCODER_FILE,
        CONNECTOR_FILE,
        DECODER_FILE,
        VOCAB_FILE,
        METRICS_JSON,
        METRICS_TEXT,
        PREDICTIONS_FILE,
        RECORD_FILE,
        "pretrain_loss.txt",
        "align_loss.txt",
        "instruct_loss.txt",
    ] {
        assert!(a.join(f).is_file(), "{f} missing");
    }
    assert!(a.join(DATASET_DIR).is_dir());
    assert!(!a.join(STALE_FILE).exists());
    let metrics = record.metrics.as_ref().unwrap();
    assert_eq!(metrics.samples, 20);
    assert_eq!(fs::read_to_string(a.join(METRICS_JSON)).unwrap(), metrics.to_json());
    assert_eq!(content_hash(&a).unwrap(), record.content_hash);
    assert_eq!(ExperimentConfig::load(&a.join(CONFIG_FILE)).unwrap(), record.config);
    assert_eq!(fs::read_to_string(a.join(PREDICTIONS_FILE)).unwrap().lines().count(), 40);

    for parallel in [false, true] {
        assert_eq!(evaluate_run(&a, parallel).unwrap().to_json(), metrics.to_json());
    }

    let b = root.path().join("b");
    let again = run_pipeline(&tiny(&b)).unwrap();
    assert_eq!(fs::read(a.join(METRICS_JSON)).unwrap(), fs::read(b.join(METRICS_JSON)).unwrap());
    assert_eq!(fs::read(a.join(DECODER_FILE)).unwrap(), fs::read(b.join(DECODER_FILE)).unwrap());
    assert_eq!(again.content_hash, record.content_hash);

    let c = root.path().join("c");
    let other = run_pipeline(&ExperimentConfig { seed: 1, ..tiny(&c) }).unwrap();
    assert_ne!(other.content_hash, record.content_hash);
}

#[test]
fn partial_runs_stop_where_asked() {
    let root = tempfile::tempdir().unwrap();
    let mut cache = StageCache::new();
    let d = root.path().join("data");
    let r = run_stages(&tiny(&d), StopAfter::Data, &mut cache).unwrap();
    assert!(r.metrics.is_none() && r.pretrain.is_none());
    assert!(!d.join(ENCODER_FILE).exists());
    let al = root.path().join("align");
    let r = run_stages(&tiny(&al), StopAfter::Align, &mut cache).unwrap();
    assert!(r.stage1_steps > 0 && r.stage2_steps == 0);
    assert!(al.join(CONNECTOR_FILE).is_file() && !al.join(DECODER_FILE).exists());
}

#[test]
fn ablation_suite_wires_each_variant_and_emits_tables() {
    let root = tempfile::tempdir().unwrap();
    let suite = run_ablation_suite(&tiny(root.path()), &[0], root.path()).unwrap();
    assert_eq!(suite.records.len(), 4);
    let by = |v: Variant| suite.records.iter().find(|r| r.config.variant == v).unwrap();

    let full = by(Variant::Full);
    assert!(full.pretrain.is_some() && full.stage1_steps > 0);
    assert_eq!(full.plan.prompt_mode, PromptMode::Multitask);

    let generic = by(Variant::NoMedicalEncoder);
    assert!(generic.pretrain.is_none());
    assert_eq!(generic.plan.encoder_init, InitMode::Generic);

    let single = by(Variant::NoMultistage);
    assert_eq!(single.stage1_steps, 0);
    assert!(!root.path().join("no_multistage_seed0").join("align_loss.txt").exists());
    assert_eq!(single.pretrain, full.pretrain);

    let prompts = by(Variant::NoMultitaskPrompts);
    assert_eq!(prompts.plan.prompt_mode, PromptMode::Generic);
    assert_eq!(prompts.stage1_curve, full.stage1_curve);
    assert_eq!(prompts.stage2_steps * 2, full.stage2_steps);

    assert_eq!(fs::read_to_string(root.path().join("ablation.txt")).unwrap(), suite.table);
    assert_eq!(suite.csv.lines().count(), 1 + 4 + 4, "{}", suite.csv);

    let records = collect_records(root.path()).unwrap();
    assert_eq!(records.len(), 4);
    let (csv, _) = common::ratings_fixture();
    let ratings = aggregate_ratings(&read_ratings_csv(csv.as_bytes()).unwrap()).unwrap();
    let tables = emit_tables(&records, Some(&ratings), true).unwrap();
    let get = |name: &str| &tables.iter().find(|(n, _)| n == name).unwrap().1;
    let m = full.metrics.as_ref().unwrap();

    let t2 = get("table2_diagnosis.csv");
    assert!(t2.contains(&format!("ours,{:.2},{:.2},84.55,79.92", m.diagnosis.bacc, m.diagnosis.macro_f1)), "{t2}");
    assert!(get("table2_diagnosis.txt").contains("not reproduced"));
    assert!(get("table3_ablation.csv").contains("w/o multi-stage fine-tuning (mean)"));
    let t4 = get("table4_grades.csv");
    let p = &m.diagnosis.per_grade[0];
    assert!(t4.lines().nth(1).unwrap().ends_with(&format!(",{:.1},{:.1},{:.1}", p.precision, p.recall, p.f1)));
    assert_eq!(get("table5_ratings.csv").lines().nth(1), Some("ours,72.0,61.0,73.0"));
    assert_eq!(get("table6_concepts.csv").lines().count(), 1 + 6 + 1);

    let plain = emit_tables(&records, None, false).unwrap();
    assert!(plain.iter().all(|(n, body)| !n.starts_with("table5") && !body.contains("84.55")));
    assert_eq!(emit_tables(&[], None, false).unwrap_err(), TableError::NoRuns("full-variant"));
}

#[test]
fn a_failing_stage_leaves_a_stale_marker_naming_it() {
    let root = tempfile::tempdir().unwrap();
    let out = root.path().join("run");
    // A directory where the encoder checkpoint should go makes the save fail.
    fs::create_dir_all(out.join(ENCODER_FILE)).unwrap();
    let err = run_stages(&tiny(&out), StopAfter::Align, &mut StageCache::new()).unwrap_err();
    assert_eq!(err.stage, Stage::Persist);
    assert!(err.to_string().starts_with("[persist]"), "{err}");
    let stale = fs::read_to_string(out.join(STALE_FILE)).unwrap();
    assert_eq!(stale.trim(), err.to_string());
    assert!(!out.join(RECORD_FILE).exists());
}

#[test]
fn bad_configs_fail_at_the_config_stage() {
    let root = tempfile::tempdir().unwrap();
    let out = root.path().join("run");
    let bad = ExperimentConfig {
        train_ratio: 0.9,
        ..tiny(&out)
    };
    let err = run_pipeline(&bad).unwrap_err();
    assert_eq!(err.stage, Stage::Config);
    assert!(!out.exists());
    let path = root.path().join("c.txt");
    fs::write(&path, "seed = 3\nvariant = no_multistage\nwarmup = 4\n").unwrap();
    assert!(ExperimentConfig::load(&path).unwrap_err().to_string().contains("warmup"));
    fs::write(&path, "seed = 3\nvariant = no_multistage\n").unwrap();
    let c = ExperimentConfig::load(&path).unwrap();
    assert_eq!((c.seed, c.variant), (3, Variant::NoMultistage));
    assert_eq!(c.per_grade, ExperimentConfig::default().per_grade);
}
