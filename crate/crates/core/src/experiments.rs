//! End-to-end runs: dataset, encoder initialisation, alignment, instruction
//! tuning and evaluation, persisted as a self-contained run directory.

use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::connector::{align_train, loss_curve_text, AlignConfig, AlignReport, Connector, ConnectorConfig, LossPoint};
use crate::encoder::{init_weights, Encoder, EncoderConfig, InitMode, PretrainConfig, PretrainReport};
use crate::evaluation::{evaluate_model, predictions_jsonl, MetricsReport, RatingSummary};
use crate::labels::{Grade, LesionKind};
use crate::lvlm::{instruct_tune, Decoder, DecoderConfig, InstructConfig, PromptMode, Vlm, Vocabulary};
use crate::report::render_report;
use crate::synthfundus::{
    derive_seed, generate_samples, load_samples, split, write_images, DatasetConfig, DatasetManifest, FundusSample,
    GradingRule, Split, IMAGE_DIR,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoMedicalEncoder,
    NoMultitaskPrompts,
    NoMultistage,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::NoMedicalEncoder,
        Variant::NoMultitaskPrompts,
        Variant::NoMultistage,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoMedicalEncoder => "no_medical_encoder",
            Variant::NoMultitaskPrompts => "no_multitask_prompts",
            Variant::NoMultistage => "no_multistage",
        }
    }

    /// Row label in the ablation table.
    pub fn title(self) -> &'static str {
        match self {
            Variant::Full => "full model",
            Variant::NoMedicalEncoder => "w/o medical vision encoder",
            Variant::NoMultitaskPrompts => "w/o multi-task prompts",
            Variant::NoMultistage => "w/o multi-stage fine-tuning",
        }
    }

    /// The only pipeline deviations a variant is allowed to make.
    pub fn plan(self) -> StagePlan {
        StagePlan {
            encoder_init: if self == Variant::NoMedicalEncoder {
                InitMode::Generic
            } else {
                InitMode::Medical
            },
            prompt_mode: if self == Variant::NoMultitaskPrompts {
                PromptMode::Generic
            } else {
                PromptMode::Multitask
            },
            stage1: self != Variant::NoMultistage,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| ConfigError::Value {
                key: "variant".into(),
                value: s.into(),
                expected: "full, no_medical_encoder, no_multitask_prompts or no_multistage",
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePlan {
    pub encoder_init: InitMode,
    pub prompt_mode: PromptMode,
    pub stage1: bool,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected key = value, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("key {0:?} is set twice")]
    Duplicate(String),
    #[error("{key} = {value:?}: expected {expected}")]
    Value {
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Every knob of a run. Read from and written to flat `key = value` text;
/// the variant is the only switch that changes which stages run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub variant: Variant,
    pub out: String,
    pub per_grade: usize,
    pub severe_hemorrhage_count: usize,
    pub severe_soft_exudate_count: usize,
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub test_ratio: f64,
    pub patch_size: usize,
    pub encoder_dim: usize,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub connector_hidden: usize,
    pub decoder_dim: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub max_len: usize,
    pub pretrain_epochs: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    pub align_epochs: usize,
    pub align_batch: usize,
    pub align_lr: f64,
    pub align_tau: f64,
    pub align_freeze_encoder: bool,
    pub instruct_epochs: usize,
    pub instruct_batch: usize,
    pub instruct_lr: f64,
    pub instruct_lr_min: f64,
    pub instruct_freeze_encoder: bool,
    pub parallel_eval: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        let dec = DecoderConfig::with_vocab(1);
        let pre = PretrainConfig::default();
        let align = AlignConfig::default();
        let tune = InstructConfig::default();
        ExperimentConfig {
            seed: 0,
            variant: Variant::Full,
            out: "runs/default".into(),
            per_grade: 500,
            severe_hemorrhage_count: GradingRule::default().severe_hemorrhage_count,
            severe_soft_exudate_count: GradingRule::default().severe_soft_exudate_count,
            train_ratio: 0.8,
            val_ratio: 0.0,
            test_ratio: 0.2,
            patch_size: enc.patch_size,
            encoder_dim: enc.embed_dim,
            encoder_layers: enc.layers,
            encoder_heads: enc.heads,
            connector_hidden: ConnectorConfig::default().hidden_dim,
            decoder_dim: dec.dim,
            decoder_layers: dec.layers,
            decoder_heads: dec.heads,
            max_len: 96,
            pretrain_epochs: pre.epochs,
            pretrain_batch: pre.batch_size,
            pretrain_lr: pre.lr,
            align_epochs: 5,
            align_batch: align.batch_size,
            align_lr: align.lr,
            align_tau: align.tau,
            align_freeze_encoder: align.freeze_encoder,
            instruct_epochs: 4,
            instruct_batch: tune.batch_size,
            instruct_lr: tune.lr,
            instruct_lr_min: tune.lr_min,
            instruct_freeze_encoder: tune.freeze_encoder,
            parallel_eval: true,
        }
    }
}

impl ExperimentConfig {
    /// Parses `key = value` lines over the defaults. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn from_kv(text: &str) -> Result<Self, ConfigError> {
        let Value::Object(mut fields) = serde_json::to_value(ExperimentConfig::default()).expect("config serializes")
        else {
            unreachable!("config is a struct")
        };
        let mut seen = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if seen.insert(key.to_string(), ()).is_some() {
                return Err(ConfigError::Duplicate(key.into()));
            }
            let slot = fields.get_mut(key).ok_or_else(|| ConfigError::UnknownKey(key.into()))?;
            *slot = parse_like(slot, key, value)?;
        }
        let cfg: ExperimentConfig =
            serde_json::from_value(Value::Object(fields)).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::new(Stage::Config, e))?;
        Self::from_kv(&text).map_err(|e| PipelineError::new(Stage::Config, e))
    }

    /// Sorted `key = value` lines; [`ExperimentConfig::from_kv`] reads them back.
    pub fn to_kv(&self) -> String {
        let Value::Object(fields) = serde_json::to_value(self).expect("config serializes") else {
            unreachable!("config is a struct")
        };
        let mut s = String::new();
        for (k, v) in fields {
            let v = match v {
                Value::String(s) => s,
                other => other.to_string(),
            };
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let ratios = [self.train_ratio, self.val_ratio, self.test_ratio];
        if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("split ratios {ratios:?} must be non-negative and sum to 1"));
        }
        if self.train_ratio == 0.0 || self.test_ratio == 0.0 {
            return bad("train and test ratios must both be positive".into());
        }
        if self.per_grade == 0 {
            return bad("per_grade must be positive".into());
        }
        let positive = [
            ("pretrain_batch", self.pretrain_batch),
            ("align_batch", self.align_batch),
            ("instruct_batch", self.instruct_batch),
            ("max_len", self.max_len),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{k} must be positive"));
        }
        let rates = [
            ("pretrain_lr", self.pretrain_lr),
            ("align_lr", self.align_lr),
            ("align_tau", self.align_tau),
            ("instruct_lr", self.instruct_lr),
        ];
        if let Some((k, v)) = rates.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return bad(format!("{k} = {v} must be positive"));
        }
        if !(self.instruct_lr_min.is_finite() && self.instruct_lr_min >= 0.0 && self.instruct_lr_min <= self.instruct_lr) {
            return bad(format!("instruct_lr_min = {} must lie in [0, instruct_lr]", self.instruct_lr_min));
        }
        self.encoder_config().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.decoder_dim % self.decoder_heads.max(1) != 0 || self.decoder_heads == 0 || self.decoder_layers == 0 {
            return bad(format!("decoder dim {} must split into {} heads", self.decoder_dim, self.decoder_heads));
        }
        if self.connector_hidden == 0 {
            return bad("connector_hidden must be positive".into());
        }
        Ok(())
    }

    /// The same config with another variant; nothing else changes.
    pub fn with_variant(&self, variant: Variant) -> Self {
        ExperimentConfig {
            variant,
            ..self.clone()
        }
    }

    pub fn plan(&self) -> StagePlan {
        self.variant.plan()
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            counts: vec![self.per_grade; 5],
            seed: self.seed,
            rule: GradingRule {
                severe_hemorrhage_count: self.severe_hemorrhage_count,
                severe_soft_exudate_count: self.severe_soft_exudate_count,
            },
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            patch_size: self.patch_size,
            embed_dim: self.encoder_dim,
            layers: self.encoder_layers,
            heads: self.encoder_heads,
            ..EncoderConfig::default()
        }
    }

    pub fn connector_config(&self) -> ConnectorConfig {
        ConnectorConfig {
            input_dim: self.encoder_dim,
            hidden_dim: self.connector_hidden,
            output_dim: self.decoder_dim,
        }
    }

    pub fn decoder_config(&self, vocab_size: usize) -> DecoderConfig {
        DecoderConfig {
            dim: self.decoder_dim,
            layers: self.decoder_layers,
            heads: self.decoder_heads,
            ..DecoderConfig::with_vocab(vocab_size)
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain_epochs,
            batch_size: self.pretrain_batch,
            lr: self.pretrain_lr,
            seed: self.stream(Stream::Pretrain),
            ..PretrainConfig::default()
        }
    }

    pub fn align_config(&self) -> AlignConfig {
        AlignConfig {
            epochs: self.align_epochs,
            batch_size: self.align_batch,
            lr: self.align_lr,
            tau: self.align_tau,
            freeze_encoder: self.align_freeze_encoder,
            seed: self.stream(Stream::Align),
            ..AlignConfig::default()
        }
    }

    pub fn instruct_config(&self) -> InstructConfig {
        InstructConfig {
            epochs: self.instruct_epochs,
            batch_size: self.instruct_batch,
            lr: self.instruct_lr,
            lr_min: self.instruct_lr_min,
            freeze_encoder: self.instruct_freeze_encoder,
            prompt_mode: self.plan().prompt_mode,
            seed: self.stream(Stream::Instruct),
            ..InstructConfig::default()
        }
    }

    fn stream(&self, s: Stream) -> u64 {
        derive_seed(self.seed, s as u64)
    }
}

fn parse_like(default: &Value, key: &str, value: &str) -> Result<Value, ConfigError> {
    let err = |expected| ConfigError::Value {
        key: key.into(),
        value: value.into(),
        expected,
    };
    Ok(match default {
        Value::Bool(_) => Value::Bool(value.parse().map_err(|_| err("true or false"))?),
        Value::Number(n) if n.is_u64() => Value::from(value.parse::<u64>().map_err(|_| err("a non-negative integer"))?),
        Value::Number(_) => {
            let x: f64 = value.parse().map_err(|_| err("a number"))?;
            serde_json::Number::from_f64(x).map(Value::Number).ok_or_else(|| err("a finite number"))?
        }
        _ => Value::String(value.to_string()),
    })
}

/// Independent seed streams derived from the global seed. Variants of the
/// same seed therefore share data, initial weights and batch order.
#[derive(Clone, Copy)]
enum Stream {
    Split = 1,
    Encoder = 2,
    Connector = 3,
    Decoder = 4,
    Pretrain = 5,
    Align = 6,
    Instruct = 7,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Config,
    Data,
    Pretrain,
    Align,
    Instruct,
    Evaluate,
    Persist,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::Data => "data",
            Stage::Pretrain => "pretrain",
            Stage::Align => "align",
            Stage::Instruct => "instruct",
            Stage::Evaluate => "evaluate",
            Stage::Persist => "persist",
        })
    }
}

#[derive(Debug, Error)]
#[error("[{stage}] {source}")]
pub struct PipelineError {
    pub stage: Stage,
    #[source]
    pub source: Box<dyn std::error::Error + Send + Sync>,
}

impl PipelineError {
    pub fn new(stage: Stage, e: impl Into<Box<dyn std::error::Error + Send + Sync>>) -> Self {
        PipelineError { stage, source: e.into() }
    }
}

type PResult<T> = Result<T, PipelineError>;

trait AtStage<T> {
    fn at(self, stage: Stage) -> PResult<T>;
}

impl<T, E: Into<Box<dyn std::error::Error + Send + Sync>>> AtStage<T> for Result<T, E> {
    fn at(self, stage: Stage) -> PResult<T> {
        self.map_err(|e| PipelineError::new(stage, e))
    }
}

/// What one run produced. Stored as `run_record.json` next to the
/// checkpoints, predictions and metrics it describes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    pub plan: StagePlan,
    /// SHA-256 over the config snapshot, manifest and every image file.
    pub content_hash: String,
    pub pretrain: Option<PretrainReport>,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub stage1_curve: Vec<LossPoint>,
    pub stage2_curve: Vec<LossPoint>,
    pub metrics: Option<MetricsReport>,
    pub wall_seconds: f64,
    pub stage_seconds: BTreeMap<String, f64>,
}

pub const CONFIG_FILE: &str = "config.txt";
pub const DATASET_DIR: &str = "dataset";
pub const ENCODER_FILE: &str = "encoder.xdrw";
pub const CONNECTOR_FILE: &str = "connector.xdrw";
pub const DECODER_FILE: &str = "decoder.xdrw";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_TEXT: &str = "metrics.txt";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const RECORD_FILE: &str = "run_record.json";
pub const STALE_FILE: &str = "STALE";

struct Dataset {
    manifest: DatasetManifest,
    samples: Vec<FundusSample>,
}

impl Dataset {
    fn part(&self, which: Split) -> Vec<FundusSample> {
        self.manifest
            .records
            .iter()
            .zip(&self.samples)
            .filter(|(r, _)| r.split == which)
            .map(|(_, s)| s.clone())
            .collect()
    }
}

/// In-memory results of stages that several variants share, keyed by the
/// config fields each stage depends on.
#[derive(Default)]
pub struct StageCache {
    datasets: HashMap<String, std::sync::Arc<Dataset>>,
    encoders: HashMap<String, (Encoder, Option<PretrainReport>)>,
    aligned: HashMap<String, (Encoder, Connector, AlignReport)>,
}

impl StageCache {
    pub fn new() -> Self {
        Self::default()
    }
}

fn data_key(c: &ExperimentConfig) -> String {
    format!(
        "{}|{}|{}|{}|{}|{}|{}",
        c.seed, c.per_grade, c.severe_hemorrhage_count, c.severe_soft_exudate_count, c.train_ratio, c.val_ratio, c.test_ratio
    )
}

fn encoder_key(c: &ExperimentConfig) -> String {
    format!(
        "{}|{:?}|{:?}|{:?}",
        data_key(c),
        c.encoder_config(),
        c.plan().encoder_init,
        c.pretrain_config()
    )
}

fn align_key(c: &ExperimentConfig) -> String {
    format!(
        "{}|{:?}|{:?}|{:?}",
        encoder_key(c),
        c.connector_config(),
        c.decoder_config(0),
        c.align_config()
    )
}

/// Stop point for partial runs driven from the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopAfter {
    Data,
    Align,
    Instruct,
    Evaluate,
}

/// Runs every stage and evaluates on the test split.
pub fn run_pipeline(config: &ExperimentConfig) -> PResult<RunRecord> {
    run_stages(config, StopAfter::Evaluate, &mut StageCache::new())
}

/// Runs stages up to `stop`, reusing and filling `cache`. Outputs go to
/// `config.out`; a `STALE` marker stays there until the run succeeds and
/// names the failing stage otherwise.
pub fn run_stages(config: &ExperimentConfig, stop: StopAfter, cache: &mut StageCache) -> PResult<RunRecord> {
    config.validate().at(Stage::Config)?;
    let out = PathBuf::from(&config.out);
    fs::create_dir_all(&out).at(Stage::Persist)?;
    fs::write(out.join(STALE_FILE), "run in progress\n").at(Stage::Persist)?;
    match execute(config, stop, cache, &out) {
        Ok(record) => {
            fs::remove_file(out.join(STALE_FILE)).at(Stage::Persist)?;
            Ok(record)
        }
        Err(e) => {
            let _ = fs::write(out.join(STALE_FILE), format!("{e}\n"));
            Err(e)
        }
    }
}

fn execute(config: &ExperimentConfig, stop: StopAfter, cache: &mut StageCache, out: &Path) -> PResult<RunRecord> {
    let start = Instant::now();
    let plan = config.plan();
    let mut stage_seconds = BTreeMap::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str, stage_seconds: &mut BTreeMap<String, f64>| {
        stage_seconds.insert(name.to_string(), clock.elapsed().as_secs_f64());
        clock = Instant::now();
    };
    fs::write(out.join(CONFIG_FILE), config.to_kv()).at(Stage::Persist)?;

    let data = dataset(config, cache).at(Stage::Data)?;
    let ds_dir = out.join(DATASET_DIR);
    data.manifest.write(&ds_dir).at(Stage::Data)?;
    write_images(&ds_dir, &data.samples).at(Stage::Data)?;
    let content_hash = content_hash(out).at(Stage::Data)?;
    lap("data", &mut stage_seconds);
    let mut record = RunRecord {
        config: config.clone(),
        plan,
        content_hash,
        pretrain: None,
        stage1_steps: 0,
        stage2_steps: 0,
        stage1_curve: Vec::new(),
        stage2_curve: Vec::new(),
        metrics: None,
        wall_seconds: 0.0,
        stage_seconds: BTreeMap::new(),
    };
    if stop == StopAfter::Data {
        return finish(record, start, stage_seconds, out);
    }
    let train = data.part(Split::Train);

    let (encoder, pretrain) = match cache.encoders.get(&encoder_key(config)) {
        Some(hit) => hit.clone(),
        None => {
            let made = init_weights(
                config.encoder_config(),
                config.stream(Stream::Encoder),
                plan.encoder_init,
                &train,
                &config.pretrain_config(),
            )
            .at(Stage::Pretrain)?;
            cache.encoders.insert(encoder_key(config), made.clone());
            made
        }
    };
    record.pretrain = pretrain;
    if let Some(p) = &record.pretrain {
        let text: String = p.epoch_losses.iter().enumerate().map(|(i, l)| format!("{} {l:.10}\n", i + 1)).collect();
        fs::write(out.join("pretrain_loss.txt"), format!("# epoch loss\n{text}")).at(Stage::Persist)?;
    }
    lap("pretrain", &mut stage_seconds);

    let vocab = Vocabulary::standard();
    let decoder = Decoder::new(config.decoder_config(vocab.len()), config.stream(Stream::Decoder)).at(Stage::Align)?;
    let (encoder, connector) = if plan.stage1 {
        let key = align_key(config);
        let (enc, con, report) = match cache.aligned.get(&key) {
            Some(hit) => hit.clone(),
            None => {
                let mut enc = encoder;
                let mut con = Connector::new(config.connector_config(), config.stream(Stream::Connector));
                let captions = caption_vectors(&decoder, &vocab, &train).at(Stage::Align)?;
                let report = align_train(&mut enc, &mut con, &train, &captions, &config.align_config()).at(Stage::Align)?;
                cache.aligned.insert(key, (enc.clone(), con.clone(), report.clone()));
                (enc, con, report)
            }
        };
        record.stage1_steps = report.curve.len();
        fs::write(out.join("align_loss.txt"), loss_curve_text(&report.curve)).at(Stage::Persist)?;
        record.stage1_curve = report.curve;
        (enc, con)
    } else {
        (encoder, Connector::new(config.connector_config(), config.stream(Stream::Connector)))
    };
    encoder.save(&out.join(ENCODER_FILE)).at(Stage::Persist)?;
    connector.save(&out.join(CONNECTOR_FILE)).at(Stage::Persist)?;
    lap("align", &mut stage_seconds);
    if stop == StopAfter::Align {
        return finish(record, start, stage_seconds, out);
    }

    let mut vlm = Vlm {
        encoder,
        connector,
        decoder,
        vocab,
        prompt_mode: plan.prompt_mode,
        max_len: config.max_len,
    };
    let tuned = instruct_tune(&mut vlm, &train, &config.instruct_config()).at(Stage::Instruct)?;
    record.stage2_steps = tuned.steps;
    fs::write(out.join("instruct_loss.txt"), loss_curve_text(&tuned.curve)).at(Stage::Persist)?;
    record.stage2_curve = tuned.curve;
    save_model(&vlm, out).at(Stage::Persist)?;
    lap("instruct", &mut stage_seconds);
    if stop == StopAfter::Instruct {
        return finish(record, start, stage_seconds, out);
    }

    let test = data.part(Split::Test);
    let eval = evaluate_model(&vlm, &test, config.variant.name(), config.seed, config.parallel_eval).at(Stage::Evaluate)?;
    fs::write(out.join(PREDICTIONS_FILE), predictions_jsonl(&eval.predictions)).at(Stage::Persist)?;
    fs::write(out.join(METRICS_JSON), eval.report.to_json()).at(Stage::Persist)?;
    fs::write(out.join(METRICS_TEXT), eval.report.to_text()).at(Stage::Persist)?;
    record.metrics = Some(eval.report);
    lap("evaluate", &mut stage_seconds);
    finish(record, start, stage_seconds, out)
}

fn finish(mut record: RunRecord, start: Instant, stage_seconds: BTreeMap<String, f64>, out: &Path) -> PResult<RunRecord> {
    record.wall_seconds = start.elapsed().as_secs_f64();
    record.stage_seconds = stage_seconds;
    let mut json = serde_json::to_string_pretty(&record).at(Stage::Persist)?;
    json.push('\n');
    fs::write(out.join(RECORD_FILE), json).at(Stage::Persist)?;
    Ok(record)
}

fn dataset(config: &ExperimentConfig, cache: &mut StageCache) -> Result<std::sync::Arc<Dataset>, Box<dyn std::error::Error + Send + Sync>> {
    let key = data_key(config);
    if let Some(d) = cache.datasets.get(&key) {
        return Ok(d.clone());
    }
    let dc = config.dataset_config();
    let samples = generate_samples(&dc)?;
    let manifest = split(
        &DatasetManifest::from_samples(&dc, &samples),
        [config.train_ratio, config.val_ratio, config.test_ratio],
        config.stream(Stream::Split),
    )?;
    let d = std::sync::Arc::new(Dataset { manifest, samples });
    cache.datasets.insert(key, d.clone());
    Ok(d)
}

/// Unit caption vectors of each sample's ground-truth report.
pub fn caption_vectors(decoder: &Decoder, vocab: &Vocabulary, samples: &[FundusSample]) -> crate::nn::Result<Vec<Vec<f64>>> {
    samples
        .iter()
        .map(|s| decoder.caption_vector(&vocab.tokenize(&render_report(s.grade, &s.findings())?)?))
        .collect()
}

/// Hash of everything a run consumes: config snapshot, manifest, metadata
/// and image bytes, each hashed and combined in path order.
pub fn content_hash(run_dir: &Path) -> std::io::Result<String> {
    let ds = run_dir.join(DATASET_DIR);
    let mut files = vec![
        run_dir.join(CONFIG_FILE),
        ds.join(crate::synthfundus::MANIFEST_FILE),
        ds.join(crate::synthfundus::META_FILE),
    ];
    let mut images: Vec<PathBuf> = fs::read_dir(ds.join(IMAGE_DIR))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    images.sort();
    files.extend(images);
    let mut tree = Sha256::new();
    for f in files {
        let rel = f.strip_prefix(run_dir).unwrap_or(&f).to_string_lossy().replace('\\', "/");
        let bytes = fs::read(&f)?;
        if rel == CONFIG_FILE {
            // The output directory does not change what a run computes.
            let text = String::from_utf8_lossy(&bytes);
            let kept: String = text.lines().filter(|l| !l.starts_with("out =")).map(|l| format!("{l}\n")).collect();
            tree.update(blob_hash(kept.as_bytes()));
        } else {
            tree.update(blob_hash(&bytes));
        }
        tree.update(rel.as_bytes());
        tree.update([0u8]);
    }
    Ok(hex::encode(tree.finalize()))
}

fn blob_hash(bytes: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().into()
}

fn save_model(vlm: &Vlm, dir: &Path) -> crate::nn::Result<()> {
    vlm.encoder.save(&dir.join(ENCODER_FILE))?;
    vlm.connector.save(&dir.join(CONNECTOR_FILE))?;
    vlm.decoder.save(&dir.join(DECODER_FILE))?;
    fs::write(dir.join(VOCAB_FILE), vlm.vocab.to_text())?;
    Ok(())
}

/// Rebuilds the trained model and the test split from a run directory.
pub fn load_run(dir: &Path) -> PResult<(ExperimentConfig, Vlm, Vec<FundusSample>)> {
    let config = ExperimentConfig::load(&dir.join(CONFIG_FILE))?;
    let ds = dir.join(DATASET_DIR);
    let manifest = DatasetManifest::read(&ds).at(Stage::Data)?;
    let samples = load_samples(&ds, &manifest).at(Stage::Data)?;
    let test = manifest
        .records
        .iter()
        .zip(samples)
        .filter(|(r, _)| r.split == Split::Test)
        .map(|(_, s)| s)
        .collect();
    let vocab = Vocabulary::from_text(&fs::read_to_string(dir.join(VOCAB_FILE)).at(Stage::Evaluate)?).at(Stage::Evaluate)?;
    let vlm = Vlm {
        encoder: Encoder::load(&dir.join(ENCODER_FILE)).at(Stage::Evaluate)?,
        connector: Connector::load(&dir.join(CONNECTOR_FILE)).at(Stage::Evaluate)?,
        decoder: Decoder::load(&dir.join(DECODER_FILE)).at(Stage::Evaluate)?,
        vocab,
        prompt_mode: config.plan().prompt_mode,
        max_len: config.max_len,
    };
    Ok((config, vlm, test))
}

/// Re-evaluates a finished run from its directory alone.
pub fn evaluate_run(dir: &Path, parallel: bool) -> PResult<MetricsReport> {
    let (config, vlm, test) = load_run(dir)?;
    let eval = evaluate_model(&vlm, &test, config.variant.name(), config.seed, parallel).at(Stage::Evaluate)?;
    Ok(eval.report)
}

#[derive(Clone, Debug)]
pub struct AblationSuite {
    pub records: Vec<RunRecord>,
    pub table: String,
    pub csv: String,
}

/// Every variant for every seed, under `out_root/<variant>_seed<k>`.
/// Stages that variants share are computed once per seed.
pub fn run_ablation_suite(base: &ExperimentConfig, seeds: &[u64], out_root: &Path) -> PResult<AblationSuite> {
    if seeds.is_empty() {
        return Err(PipelineError::new(Stage::Config, "ablation needs at least one seed"));
    }
    let mut records = Vec::new();
    for &seed in seeds {
        let mut cache = StageCache::new();
        for v in Variant::ALL {
            let cfg = ExperimentConfig {
                seed,
                variant: v,
                out: out_root.join(format!("{}_seed{seed}", v.name())).to_string_lossy().into_owned(),
                ..base.clone()
            };
            records.push(run_stages(&cfg, StopAfter::Evaluate, &mut cache)?);
        }
    }
    let (table, csv) = ablation_table(&records).map_err(|e| PipelineError::new(Stage::Persist, e))?;
    fs::create_dir_all(out_root).at(Stage::Persist)?;
    fs::write(out_root.join("ablation.txt"), &table).at(Stage::Persist)?;
    fs::write(out_root.join("ablation.csv"), &csv).at(Stage::Persist)?;
    Ok(AblationSuite { records, table, csv })
}

#[derive(Debug, Error, PartialEq)]
pub enum TableError {
    #[error("missing metric {field} for {run}")]
    Missing { field: &'static str, run: String },
    #[error("no {0} runs to tabulate")]
    NoRuns(&'static str),
}

/// Diagnosis and concept scores of one finished run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scores {
    pub diag_bacc: f64,
    pub diag_f1: f64,
    pub concept_bacc: f64,
    pub concept_f1: f64,
}

pub fn scores(record: &RunRecord) -> Result<Scores, TableError> {
    let run = format!("{} seed {}", record.config.variant, record.config.seed);
    let m = record.metrics.as_ref().ok_or_else(|| TableError::Missing {
        field: "metrics",
        run: run.clone(),
    })?;
    let fields = [
        ("diagnosis.bacc", m.diagnosis.bacc),
        ("diagnosis.macro_f1", m.diagnosis.macro_f1),
        ("concepts.macro_bacc", m.concepts.macro_bacc),
        ("concepts.macro_f1", m.concepts.macro_f1),
    ];
    if let Some((field, _)) = fields.iter().find(|(_, v)| !v.is_finite()) {
        return Err(TableError::Missing { field, run });
    }
    Ok(Scores {
        diag_bacc: m.diagnosis.bacc,
        diag_f1: m.diagnosis.macro_f1,
        concept_bacc: m.concepts.macro_bacc,
        concept_f1: m.concepts.macro_f1,
    })
}

/// Seed-averaged scores per variant, for the variants present.
pub fn variant_means(records: &[RunRecord]) -> Result<BTreeMap<Variant, Scores>, TableError> {
    let mut sums: BTreeMap<Variant, (Scores, usize)> = BTreeMap::new();
    for r in records {
        let s = scores(r)?;
        let e = sums.entry(r.config.variant).or_insert((
            Scores {
                diag_bacc: 0.0,
                diag_f1: 0.0,
                concept_bacc: 0.0,
                concept_f1: 0.0,
            },
            0,
        ));
        e.0.diag_bacc += s.diag_bacc;
        e.0.diag_f1 += s.diag_f1;
        e.0.concept_bacc += s.concept_bacc;
        e.0.concept_f1 += s.concept_f1;
        e.1 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(v, (s, n))| {
            let n = n as f64;
            (
                v,
                Scores {
                    diag_bacc: s.diag_bacc / n,
                    diag_f1: s.diag_f1 / n,
                    concept_bacc: s.concept_bacc / n,
                    concept_f1: s.concept_f1 / n,
                },
            )
        })
        .collect())
}

const ABLATION_HEADER: [&str; 5] = ["variant", "diag BACC", "diag F1", "concept BACC", "concept F1"];

/// Per-seed rows followed by seed means, two decimals.
pub fn ablation_table(records: &[RunRecord]) -> Result<(String, String), TableError> {
    if records.is_empty() {
        return Err(TableError::NoRuns("ablation"));
    }
    let mut rows: Vec<(String, Scores)> = Vec::new();
    for r in records {
        rows.push((format!("{} (seed {})", r.config.variant.title(), r.config.seed), scores(r)?));
    }
    for (v, s) in variant_means(records)? {
        rows.push((format!("{} (mean)", v.title()), s));
    }
    let mut txt = format!(
        "{:<44} {:>10} {:>10} {:>13} {:>11}\n",
        ABLATION_HEADER[0], ABLATION_HEADER[1], ABLATION_HEADER[2], ABLATION_HEADER[3], ABLATION_HEADER[4]
    );
    let mut csv = format!("{}\n", ABLATION_HEADER.join(","));
    for (name, s) in rows {
        let _ = writeln!(
            txt,
            "{name:<44} {:>10.2} {:>10.2} {:>13.2} {:>11.2}",
            s.diag_bacc, s.diag_f1, s.concept_bacc, s.concept_f1
        );
        let _ = writeln!(
            csv,
            "{name},{:.2},{:.2},{:.2},{:.2}",
            s.diag_bacc, s.diag_f1, s.concept_bacc, s.concept_f1
        );
    }
    Ok((txt, csv))
}

/// Published diagnosis scores, shown for orientation only.
pub const REFERENCE_BACC: &str = "84.55";
pub const REFERENCE_F1: &str = "79.92";

/// One artifact per table family, as (file name, contents) pairs. Tables 2,
/// 4 and 6 use the full-variant runs (averaged over seeds), table 3 needs
/// the ablation runs, table 5 appears when ratings are given.
pub fn emit_tables(
    records: &[RunRecord],
    ratings: Option<&RatingSummary>,
    reference: bool,
) -> Result<Vec<(String, String)>, TableError> {
    let full: Vec<&RunRecord> = records.iter().filter(|r| r.config.variant == Variant::Full).collect();
    if full.is_empty() {
        return Err(TableError::NoRuns("full-variant"));
    }
    let metrics: Vec<&MetricsReport> = full
        .iter()
        .map(|r| {
            r.metrics.as_ref().ok_or_else(|| TableError::Missing {
                field: "metrics",
                run: format!("{} seed {}", r.config.variant, r.config.seed),
            })
        })
        .collect::<Result<_, _>>()?;
    let n = metrics.len() as f64;
    let mean = |f: &dyn Fn(&MetricsReport) -> f64| metrics.iter().map(|m| f(m)).sum::<f64>() / n;
    let mut out = Vec::new();

    let owned: Vec<RunRecord> = full.iter().map(|r| (*r).clone()).collect();
    let s = variant_means(&owned)?[&Variant::Full];
    let mut t2 = String::new();
    let mut c2 = String::new();
    if reference {
        let _ = writeln!(
            t2,
            "{:<10} {:>8} {:>8} {:>28} {:>26}",
            "Method", "BACC", "F1", "paper (not reproduced) BACC", "paper (not reproduced) F1"
        );
        let _ = writeln!(t2, "{:<10} {:>8.2} {:>8.2} {:>28} {:>26}", "ours", s.diag_bacc, s.diag_f1, REFERENCE_BACC, REFERENCE_F1);
        let _ = writeln!(c2, "method,bacc,f1,paper (not reproduced) bacc,paper (not reproduced) f1");
        let _ = writeln!(c2, "ours,{:.2},{:.2},{REFERENCE_BACC},{REFERENCE_F1}", s.diag_bacc, s.diag_f1);
    } else {
        let _ = writeln!(t2, "{:<10} {:>8} {:>8}", "Method", "BACC", "F1");
        let _ = writeln!(t2, "{:<10} {:>8.2} {:>8.2}", "ours", s.diag_bacc, s.diag_f1);
        let _ = writeln!(c2, "method,bacc,f1");
        let _ = writeln!(c2, "ours,{:.2},{:.2}", s.diag_bacc, s.diag_f1);
    }
    out.push(("table2_diagnosis.txt".into(), t2));
    out.push(("table2_diagnosis.csv".into(), c2));

    let variants: Vec<Variant> = variant_means(records)?.into_keys().collect();
    if variants.len() > 1 {
        let (t3, c3) = ablation_table(records)?;
        out.push(("table3_ablation.txt".into(), t3));
        out.push(("table3_ablation.csv".into(), c3));
    }

    let mut t4 = format!("{:<28} {:>10} {:>8} {:>8}\n", "Severity grade", "Precision", "Recall", "F1");
    let mut c4 = String::from("grade,precision,recall,f1\n");
    for (i, g) in Grade::ALL.iter().enumerate() {
        let p = mean(&|m| m.diagnosis.per_grade[i].precision);
        let r = mean(&|m| m.diagnosis.per_grade[i].recall);
        let f = mean(&|m| m.diagnosis.per_grade[i].f1);
        let _ = writeln!(t4, "{:<28} {p:>10.1} {r:>8.1} {f:>8.1}", g.title());
        let _ = writeln!(c4, "{},{p:.1},{r:.1},{f:.1}", g.title());
    }
    out.push(("table4_grades.txt".into(), t4));
    out.push(("table4_grades.csv".into(), c4));

    if let Some(r) = ratings {
        let m = &r.means;
        let mut t5 = format!("{:<10} {:>8} {:>26} {:>18}\n", "Method", "Fluency", "Accuracy of Explanation", "Clinical Utility");
        let _ = writeln!(
            t5,
            "{:<10} {:>8.1} {:>26.1} {:>18.1}",
            "ours", m.fluency, m.accuracy_of_explanation, m.clinical_utility
        );
        let c5 = format!(
            "method,fluency,accuracy_of_explanation,clinical_utility\nours,{:.1},{:.1},{:.1}\n",
            m.fluency, m.accuracy_of_explanation, m.clinical_utility
        );
        out.push(("table5_ratings.txt".into(), t5));
        out.push(("table5_ratings.csv".into(), c5));
    }

    let mut t6 = format!("{:<50} {:>8} {:>8}\n", "Concept", "BACC", "F1");
    let mut c6 = String::from("concept,bacc,f1\n");
    for (i, k) in LesionKind::ALL.iter().enumerate() {
        let b = mean(&|m| m.concepts.per_concept[i].bacc);
        let f = mean(&|m| m.concepts.per_concept[i].f1);
        let _ = writeln!(t6, "{:<50} {b:>8.1} {f:>8.1}", k.title());
        let _ = writeln!(c6, "\"{}\",{b:.1},{f:.1}", k.title());
    }
    let _ = writeln!(t6, "{:<50} {:>8.1} {:>8.1}", "Macro average", s.concept_bacc, s.concept_f1);
    let _ = writeln!(c6, "Macro average,{:.1},{:.1}", s.concept_bacc, s.concept_f1);
    out.push(("table6_concepts.txt".into(), t6));
    out.push(("table6_concepts.csv".into(), c6));
    Ok(out)
}

/// Reads every `run_record.json` directly under `root` or one level down.
pub fn collect_records(root: &Path) -> std::io::Result<Vec<RunRecord>> {
    let mut paths = Vec::new();
    if root.join(RECORD_FILE).is_file() {
        paths.push(root.join(RECORD_FILE));
    }
    if root.is_dir() {
        let mut subdirs: Vec<PathBuf> = fs::read_dir(root)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(RECORD_FILE).is_file())
            .collect();
        subdirs.sort();
        paths.extend(subdirs.into_iter().map(|p| p.join(RECORD_FILE)));
    }
    paths
        .into_iter()
        .map(|p| {
            let text = fs::read_to_string(&p)?;
            serde_json::from_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{}: {e}", p.display())))
        })
        .collect()
}
