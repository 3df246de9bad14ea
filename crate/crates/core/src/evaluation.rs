//! Classification metrics, model evaluation through generated text, and
//! aggregation of human ratings. Percentages are on a 0–100 scale.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::io::Read;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labels::{ConceptFlags, Grade, LesionKind};
use crate::report::{parse_combined, parse_concept_answer, parse_report, ParsedConcepts, ParsedReport};
use crate::synthfundus::FundusSample;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("class {0} has no samples")]
    EmptyClass(usize),
    #[error("concept {0:?} has neither positive nor negative samples")]
    DegenerateConcept(LesionKind),
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("prediction and label counts differ ({pred} vs {truth})")]
    CountMismatch { pred: usize, truth: usize },
    #[error("duplicate rating for rater {rater} and sample {sample}")]
    DuplicateRating { rater: String, sample: String },
    #[error("rating {field}={value} for rater {rater}, sample {sample} is outside [0, 100]")]
    RatingRange {
        rater: String,
        sample: String,
        field: &'static str,
        value: f64,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Rows are true classes; columns are predicted classes plus a final
/// column for predictions that could not be parsed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; classes + 1]; classes],
        }
    }

    /// Builds a matrix from explicit counts; `invalid` is the extra column.
    pub fn from_counts(counts: Vec<Vec<u64>>, invalid: Vec<u64>) -> Self {
        let counts = counts
            .into_iter()
            .zip(invalid)
            .map(|(mut row, inv)| {
                row.push(inv);
                row
            })
            .collect();
        ConfusionMatrix { counts }
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn record(&mut self, truth: usize, pred: Option<usize>) {
        let k = self.classes();
        self.counts[truth][pred.unwrap_or(k)] += 1;
    }

    pub fn merge(mut self, other: &ConfusionMatrix) -> Self {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        self
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn invalid(&self) -> u64 {
        let k = self.classes();
        self.counts.iter().map(|r| r[k]).sum()
    }

    fn row_total(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    fn col_total(&self, j: usize) -> u64 {
        self.counts.iter().map(|r| r[j]).sum()
    }
}

/// Mean per-class recall; invalid predictions count as misses.
pub fn balanced_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let k = cm.classes();
    if k == 0 {
        return Err(EvalError::Empty("confusion matrix"));
    }
    let mut sum = 0.0;
    for i in 0..k {
        let n = cm.row_total(i);
        if n == 0 {
            return Err(EvalError::EmptyClass(i));
        }
        sum += cm.counts[i][i] as f64 / n as f64;
    }
    Ok(100.0 * sum / k as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPrf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Harmonic mean, 0 when both inputs are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Per-class precision, recall and F1. A class never predicted has
/// precision 0; a class without samples has recall 0.
pub fn per_class_prf(cm: &ConfusionMatrix) -> Vec<ClassPrf> {
    (0..cm.classes())
        .map(|i| {
            let tp = cm.counts[i][i] as f64;
            let predicted = cm.col_total(i);
            let actual = cm.row_total(i);
            let precision = if predicted == 0 { 0.0 } else { 100.0 * tp / predicted as f64 };
            let recall = if actual == 0 { 0.0 } else { 100.0 * tp / actual as f64 };
            ClassPrf {
                precision,
                recall,
                f1: f1_score(precision, recall),
            }
        })
        .collect()
}

pub fn macro_f1(cm: &ConfusionMatrix) -> f64 {
    let prf = per_class_prf(cm);
    prf.iter().map(|c| c.f1).sum::<f64>() / prf.len().max(1) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    /// Mean of sensitivity and specificity; when one of them is undefined
    /// (no positives or no negatives in truth) the defined one alone.
    pub bacc: f64,
    /// F1 of the positive class; 100 when there are neither true nor
    /// predicted positives.
    pub f1: f64,
}

impl BinaryMetrics {
    pub fn from_counts(tp: u64, fp: u64, tn: u64, fn_: u64, kind: LesionKind) -> Result<Self> {
        let pos = tp + fn_;
        let neg = tn + fp;
        let sensitivity = (pos > 0).then(|| 100.0 * tp as f64 / pos as f64);
        let specificity = (neg > 0).then(|| 100.0 * tn as f64 / neg as f64);
        let bacc = match (sensitivity, specificity) {
            (Some(a), Some(b)) => (a + b) / 2.0,
            (Some(a), None) | (None, Some(a)) => a,
            (None, None) => return Err(EvalError::DegenerateConcept(kind)),
        };
        let denom = 2 * tp + fp + fn_;
        let f1 = if denom == 0 { 100.0 } else { 100.0 * 2.0 * tp as f64 / denom as f64 };
        Ok(BinaryMetrics {
            tp,
            fp,
            tn,
            fn_,
            sensitivity,
            specificity,
            bacc,
            f1,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptMetrics {
    pub per_concept: Vec<BinaryMetrics>,
    pub macro_bacc: f64,
    pub macro_f1: f64,
    pub f1_averaging: String,
}

pub fn multilabel_concept_metrics(pred: &[ConceptFlags], truth: &[ConceptFlags]) -> Result<ConceptMetrics> {
    if pred.len() != truth.len() {
        return Err(EvalError::CountMismatch {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    let per_concept = LesionKind::ALL
        .iter()
        .map(|&kind| {
            let k = kind.index();
            let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
            for (p, t) in pred.iter().zip(truth) {
                match (p[k], t[k]) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, false) => tn += 1,
                    (false, true) => fn_ += 1,
                }
            }
            BinaryMetrics::from_counts(tp, fp, tn, fn_, kind)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_concept.len() as f64;
    Ok(ConceptMetrics {
        macro_bacc: per_concept.iter().map(|m| m.bacc).sum::<f64>() / n,
        macro_f1: per_concept.iter().map(|m| m.f1).sum::<f64>() / n,
        per_concept,
        f1_averaging: "macro over concepts".into(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Diagnosis,
    Concept,
}

/// How a model's text answers the two tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputFormat {
    /// One generation per task.
    Separate,
    /// One generation per sample holding a report then a concept answer.
    Combined,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generation {
    pub text: String,
    pub truncated: bool,
}

/// Anything that turns a fundus sample into report text.
pub trait ReportModel: Sync {
    fn generate(&self, sample: &FundusSample, task: Task) -> Generation;

    fn output_format(&self) -> OutputFormat {
        OutputFormat::Separate
    }
}

/// Emits rendered ground truth.
pub struct OracleModel;

impl ReportModel for OracleModel {
    fn generate(&self, sample: &FundusSample, task: Task) -> Generation {
        let findings = sample.findings();
        let text = match task {
            Task::Diagnosis => crate::report::render_report(sample.grade, &findings),
            Task::Concept => crate::report::render_concept_answer(&findings),
        }
        .expect("generated samples are label-consistent");
        Generation { text, truncated: false }
    }
}

/// Emits the same text for every input.
pub struct ConstantModel(pub String);

impl ReportModel for ConstantModel {
    fn generate(&self, _: &FundusSample, _: Task) -> Generation {
        Generation {
            text: self.0.clone(),
            truncated: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub task: Task,
    pub text: String,
    pub valid: bool,
    pub parsed_grade: Option<Grade>,
    pub parsed_concepts: Option<ConceptFlags>,
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisMetrics {
    pub confusion: ConfusionMatrix,
    pub bacc: f64,
    pub macro_f1: f64,
    pub per_grade: Vec<ClassPrf>,
    pub invalid: u64,
    pub f1_averaging: String,
}

impl DiagnosisMetrics {
    pub fn from_confusion(confusion: ConfusionMatrix) -> Result<Self> {
        Ok(DiagnosisMetrics {
            bacc: balanced_accuracy(&confusion)?,
            macro_f1: macro_f1(&confusion),
            per_grade: per_class_prf(&confusion),
            invalid: confusion.invalid(),
            f1_averaging: "macro over grades".into(),
            confusion,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: String,
    pub seed: u64,
    pub samples: usize,
    pub diagnosis: DiagnosisMetrics,
    pub concepts: ConceptMetrics,
    /// Share of generations (both tasks) that parse, in percent.
    pub parse_valid: f64,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("metrics serialize");
        s.push('\n');
        s
    }

    /// Aligned text tables in the layout of the published result tables.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "variant: {}  seed: {}  test samples: {}", self.variant, self.seed, self.samples);
        let _ = writeln!(s, "parse-valid generations: {:.2}%\n", self.parse_valid);
        let _ = writeln!(s, "{:<28} {:>8} {:>8}", "Diagnosis", "BACC", "F1");
        let _ = writeln!(s, "{:<28} {:>8.2} {:>8.2}", "ours", self.diagnosis.bacc, self.diagnosis.macro_f1);
        let _ = writeln!(s, "(F1 {}; {} invalid outputs)\n", self.diagnosis.f1_averaging, self.diagnosis.invalid);
        let _ = writeln!(s, "{:<28} {:>10} {:>8} {:>8}", "Severity grade", "Precision", "Recall", "F1");
        for (g, m) in Grade::ALL.iter().zip(&self.diagnosis.per_grade) {
            let _ = writeln!(s, "{:<28} {:>10.1} {:>8.1} {:>8.1}", g.title(), m.precision, m.recall, m.f1);
        }
        let _ = writeln!(s, "\n{:<50} {:>8} {:>8}", "Concept", "BACC", "F1");
        for (k, m) in LesionKind::ALL.iter().zip(&self.concepts.per_concept) {
            let _ = writeln!(s, "{:<50} {:>8.1} {:>8.1}", k.title(), m.bacc, m.f1);
        }
        let _ = writeln!(s, "{:<50} {:>8.1} {:>8.1}", "Macro average", self.concepts.macro_bacc, self.concepts.macro_f1);
        s
    }
}

struct SampleOutcome {
    grade: Option<usize>,
    flags: ConceptFlags,
    valid: [bool; 2],
    predictions: Vec<Prediction>,
}

fn score_sample(model: &dyn ReportModel, sample: &FundusSample) -> SampleOutcome {
    let (report, concepts, gens): (ParsedReport, ParsedConcepts, [Generation; 2]) = match model.output_format() {
        OutputFormat::Separate => {
            let d = model.generate(sample, Task::Diagnosis);
            let c = model.generate(sample, Task::Concept);
            (parse_report(&d.text), parse_concept_answer(&c.text), [d, c])
        }
        OutputFormat::Combined => {
            let d = model.generate(sample, Task::Diagnosis);
            let (r, c) = parse_combined(&d.text);
            (r, c, [d.clone(), d])
        }
    };
    let predictions = vec![
        Prediction {
            id: sample.id.clone(),
            task: Task::Diagnosis,
            text: gens[0].text.clone(),
            valid: report.valid,
            parsed_grade: report.grade,
            parsed_concepts: report.concepts(),
            truncated: gens[0].truncated,
        },
        Prediction {
            id: sample.id.clone(),
            task: Task::Concept,
            text: gens[1].text.clone(),
            valid: concepts.valid,
            parsed_grade: None,
            parsed_concepts: concepts.concepts(),
            truncated: gens[1].truncated,
        },
    ];
    SampleOutcome {
        grade: report.grade.map(Grade::index),
        flags: concepts.concepts().unwrap_or([false; 6]),
        valid: [report.valid, concepts.valid],
        predictions,
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub predictions: Vec<Prediction>,
}

/// Generates, parses and scores both tasks on every sample. Unparseable
/// diagnoses land in the invalid column; unparseable concept answers count
/// as all-negative. A diagnosis whose first sentence is intact keeps its
/// grade even when the rest of the report is malformed.
pub fn evaluate_model(
    model: &dyn ReportModel,
    samples: &[FundusSample],
    variant: &str,
    seed: u64,
    parallel: bool,
) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(EvalError::Empty("test set"));
    }
    let outcomes: Vec<SampleOutcome> = if parallel {
        samples.par_iter().map(|s| score_sample(model, s)).collect()
    } else {
        samples.iter().map(|s| score_sample(model, s)).collect()
    };
    let confusion = outcomes
        .iter()
        .zip(samples)
        .map(|(o, s)| {
            let mut cm = ConfusionMatrix::new(5);
            cm.record(s.grade.index(), o.grade);
            cm
        })
        .fold(ConfusionMatrix::new(5), |a, b| a.merge(&b));
    let pred_flags: Vec<ConceptFlags> = outcomes.iter().map(|o| o.flags).collect();
    let true_flags: Vec<ConceptFlags> = samples.iter().map(|s| s.concepts).collect();
    let valid = outcomes.iter().flat_map(|o| o.valid).filter(|&v| v).count();
    let report = MetricsReport {
        variant: variant.to_string(),
        seed,
        samples: samples.len(),
        diagnosis: DiagnosisMetrics::from_confusion(confusion)?,
        concepts: multilabel_concept_metrics(&pred_flags, &true_flags)?,
        parse_valid: 100.0 * valid as f64 / (2 * samples.len()) as f64,
    };
    let predictions = outcomes.into_iter().flat_map(|o| o.predictions).collect();
    Ok(Evaluation { report, predictions })
}

pub fn predictions_jsonl(predictions: &[Prediction]) -> String {
    let mut s = String::new();
    for p in predictions {
        s.push_str(&serde_json::to_string(p).expect("predictions serialize"));
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub rater_id: String,
    pub sample_id: String,
    pub fluency: f64,
    pub accuracy_of_explanation: f64,
    pub clinical_utility: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisMeans {
    pub fluency: f64,
    pub accuracy_of_explanation: f64,
    pub clinical_utility: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingSummary {
    pub records: usize,
    pub means: AxisMeans,
    pub per_rater: BTreeMap<String, AxisMeans>,
}

pub fn read_ratings_csv(reader: impl Read) -> Result<Vec<RatingRecord>> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    r.deserialize().map(|rec| rec.map_err(EvalError::from)).collect()
}

/// Mean that does not depend on the order of `values`.
fn order_free_mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

fn axis_means(records: &[&RatingRecord]) -> AxisMeans {
    let col = |f: fn(&RatingRecord) -> f64| order_free_mean(&mut records.iter().map(|r| f(r)).collect::<Vec<_>>());
    AxisMeans {
        fluency: col(|r| r.fluency),
        accuracy_of_explanation: col(|r| r.accuracy_of_explanation),
        clinical_utility: col(|r| r.clinical_utility),
    }
}

pub fn aggregate_ratings(records: &[RatingRecord]) -> Result<RatingSummary> {
    if records.is_empty() {
        return Err(EvalError::Empty("rating set"));
    }
    let mut seen = HashSet::new();
    for r in records {
        for (field, value) in [
            ("fluency", r.fluency),
            ("accuracy_of_explanation", r.accuracy_of_explanation),
            ("clinical_utility", r.clinical_utility),
        ] {
            if !(0.0..=100.0).contains(&value) {
                return Err(EvalError::RatingRange {
                    rater: r.rater_id.clone(),
                    sample: r.sample_id.clone(),
                    field,
                    value,
                });
            }
        }
        if !seen.insert((&r.rater_id, &r.sample_id)) {
            return Err(EvalError::DuplicateRating {
                rater: r.rater_id.clone(),
                sample: r.sample_id.clone(),
            });
        }
    }
    let all: Vec<&RatingRecord> = records.iter().collect();
    let mut by_rater: BTreeMap<String, Vec<&RatingRecord>> = BTreeMap::new();
    for r in records {
        by_rater.entry(r.rater_id.clone()).or_default().push(r);
    }
    Ok(RatingSummary {
        records: records.len(),
        means: axis_means(&all),
        per_rater: by_rater.into_iter().map(|(k, v)| (k, axis_means(&v))).collect(),
    })
}
