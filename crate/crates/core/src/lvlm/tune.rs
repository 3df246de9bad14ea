//! The assembled model and stage-2 instruction tuning.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use xdr_numerics::{AdamW, AdamWConfig, Graph, Param, Tensor, Var};

use super::decoder::{Decoder, TokenSequence};
use super::vocab::{PromptKind, Vocabulary};
use crate::connector::{Connector, LossPoint};
use crate::encoder::Encoder;
use crate::evaluation::{Generation, OutputFormat, ReportModel, Task};
use crate::nn::{clipped_step, rng_for, ModelError, Module, Result};
use crate::report::{render_concept_answer, render_report};
use crate::synthfundus::FundusSample;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    /// Diagnosis prompt → report and concept prompt → concept answer.
    Multitask,
    /// One generic prompt → report followed by concept answer.
    Generic,
}

/// Encoder, connector, decoder and vocabulary, ready to answer prompts.
#[derive(Clone, Debug)]
pub struct Vlm {
    pub encoder: Encoder,
    pub connector: Connector,
    pub decoder: Decoder,
    pub vocab: Vocabulary,
    pub prompt_mode: PromptMode,
    pub max_len: usize,
}

impl Vlm {
    pub fn prompt_for(&self, task: Task) -> PromptKind {
        match (self.prompt_mode, task) {
            (PromptMode::Generic, _) => PromptKind::Generic,
            (PromptMode::Multitask, Task::Diagnosis) => PromptKind::Diagnosis,
            (PromptMode::Multitask, Task::Concept) => PromptKind::Concept,
        }
    }

    pub fn project(&self, sample: &FundusSample) -> Result<Tensor> {
        self.connector.project(&self.encoder.encode(&sample.image)?)
    }

    pub fn answer(&self, sample: &FundusSample, prompt: PromptKind) -> Result<Generation> {
        let ids = self.vocab.tokenize(prompt.text())?;
        let (out, truncated) = self.decoder.generate(&self.project(sample)?, &ids, self.max_len)?;
        Ok(Generation {
            text: self.vocab.detokenize(&out),
            truncated,
        })
    }

    /// Parameters in a fixed order: encoder, connector, decoder.
    pub fn params_mut(&mut self, encoder: bool, connector: bool) -> Vec<&mut Param> {
        let mut out = Vec::new();
        if encoder {
            out.extend(self.encoder.params_mut());
        }
        if connector {
            out.extend(self.connector.params_mut());
        }
        out.extend(self.decoder.params_mut());
        out
    }
}

impl ReportModel for Vlm {
    fn generate(&self, sample: &FundusSample, task: Task) -> Generation {
        self.answer(sample, self.prompt_for(task)).unwrap_or_else(|e| Generation {
            text: format!("<error: {e}>"),
            truncated: false,
        })
    }

    fn output_format(&self) -> OutputFormat {
        match self.prompt_mode {
            PromptMode::Multitask => OutputFormat::Separate,
            PromptMode::Generic => OutputFormat::Combined,
        }
    }
}

/// Training targets for one sample under `mode`.
pub fn training_targets(sample: &FundusSample, mode: PromptMode) -> Result<Vec<(PromptKind, String)>> {
    let findings = sample.findings();
    let report = render_report(sample.grade, &findings)?;
    let concepts = render_concept_answer(&findings)?;
    Ok(match mode {
        PromptMode::Multitask => vec![(PromptKind::Diagnosis, report), (PromptKind::Concept, concepts)],
        PromptMode::Generic => vec![(PromptKind::Generic, format!("{report} {concepts}"))],
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstructConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub freeze_encoder: bool,
    pub prompt_mode: PromptMode,
    pub seed: u64,
}

impl Default for InstructConfig {
    fn default() -> Self {
        InstructConfig {
            epochs: 300,
            batch_size: 16,
            lr: 2e-3,
            lr_min: 2e-5,
            weight_decay: 0.01,
            freeze_encoder: false,
            prompt_mode: PromptMode::Multitask,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstructReport {
    pub curve: Vec<LossPoint>,
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    pub items: usize,
}

struct Item {
    sample: usize,
    seq: TokenSequence,
}

fn build_items(vlm: &Vlm, samples: &[FundusSample], mode: PromptMode) -> Result<Vec<Item>> {
    let p = vlm.encoder.config.num_patches();
    let mut prompts = BTreeMap::new();
    let mut items = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        for (kind, target) in training_targets(s, mode)? {
            let prompt = match prompts.get(&(kind as u8)) {
                Some(ids) => Vec::clone(ids),
                None => {
                    let ids = vlm.vocab.tokenize(kind.text())?;
                    prompts.insert(kind as u8, ids.clone());
                    ids
                }
            };
            let response = vlm.vocab.tokenize(&target)?;
            let seq = TokenSequence::assemble(p, &prompt, Some(&response));
            if seq.len() > vlm.decoder.config.max_positions {
                return Err(ModelError::Shape(format!(
                    "training sequence of {} positions exceeds the positional table",
                    seq.len()
                )));
            }
            items.push(Item { sample: i, seq });
        }
    }
    Ok(items)
}

/// Mean next-token loss over the response positions of a minibatch.
/// Each entry pairs an index into `samples` with its assembled sequence;
/// images shared by several entries are encoded once. `frozen` holds
/// precomputed encoder features per sample when the encoder is not trained.
pub fn instruct_loss(
    vlm: &Vlm,
    g: &mut Graph,
    batch: &[(usize, &TokenSequence)],
    samples: &[FundusSample],
    frozen: Option<&[Tensor]>,
) -> Result<Var> {
    let p = vlm.encoder.config.num_patches();
    let mut unique: Vec<usize> = batch.iter().map(|it| it.0).collect();
    unique.sort_unstable();
    unique.dedup();
    let f_v = match frozen {
        Some(feats) => {
            let d = vlm.encoder.config.embed_dim;
            let mut data = Vec::with_capacity(unique.len() * p * d);
            for &i in &unique {
                data.extend_from_slice(feats[i].data());
            }
            g.constant(Tensor::new([unique.len() * p, d], data)?)?
        }
        None => {
            let images: Vec<_> = unique.iter().map(|&i| &samples[i].image).collect();
            let x = g.constant(vlm.encoder.patch_batch(&images)?)?;
            vlm.encoder.forward(g, x, unique.len())?
        }
    };
    let proj = vlm.connector.forward(g, f_v)?;
    let mut parts = Vec::with_capacity(batch.len());
    let mut segments = Vec::with_capacity(batch.len());
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut offset = 0;
    for &(sample, seq) in batch {
        let slot = unique.binary_search(&sample).expect("sample is in the batch");
        let img = g.slice_rows(proj, slot * p, p)?;
        parts.push(vlm.decoder.embed(g, img, seq)?);
        let (r, y) = seq.loss_rows();
        rows.extend(r.into_iter().map(|t| t + offset));
        targets.extend(y);
        segments.push(seq.len());
        offset += seq.len();
    }
    let x = g.concat_rows(&parts)?;
    let h = vlm.decoder.hidden(g, x, &segments)?;
    let logits = vlm.decoder.logits_at(g, h, &rows)?;
    let mask = vec![true; rows.len()];
    Ok(g.cross_entropy(logits, &targets, &mask)?)
}

/// Next-token training on response tokens. Items of both tasks are
/// shuffled together each epoch with a seeded generator.
pub fn instruct_tune(vlm: &mut Vlm, samples: &[FundusSample], cfg: &InstructConfig) -> Result<InstructReport> {
    instruct_tune_until(vlm, samples, cfg, |_, _| Ok(false))
}

/// [`instruct_tune`] that calls `stop(epochs_done, model)` after every epoch
/// and ends early when it returns true. The schedule still spans
/// `cfg.epochs`, so stopping never changes the steps already taken.
pub fn instruct_tune_until(
    vlm: &mut Vlm,
    samples: &[FundusSample],
    cfg: &InstructConfig,
    mut stop: impl FnMut(usize, &Vlm) -> Result<bool>,
) -> Result<InstructReport> {
    if samples.is_empty() {
        return Err(ModelError::Empty("instruction-tuning set"));
    }
    vlm.prompt_mode = cfg.prompt_mode;
    let items = build_items(vlm, samples, cfg.prompt_mode)?;
    let bs = cfg.batch_size.max(1);
    let steps_per_epoch = items.len().div_ceil(bs);
    let mut opt = AdamW::new(AdamWConfig {
        lr_max: cfg.lr,
        lr_min: cfg.lr_min,
        weight_decay: cfg.weight_decay,
        total_steps: (cfg.epochs * steps_per_epoch).max(1),
        ..AdamWConfig::default()
    })?;
    let frozen: Option<Vec<Tensor>> = if cfg.freeze_encoder {
        Some(samples.iter().map(|s| vlm.encoder.encode(&s.image)).collect::<Result<_>>()?)
    } else {
        None
    };
    let mut rng = rng_for(cfg.seed ^ 0x1257_u64);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut curve = Vec::new();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(bs) {
            let batch: Vec<(usize, &TokenSequence)> = chunk.iter().map(|&i| (items[i].sample, &items[i].seq)).collect();
            let mut g = Graph::new();
            let loss = instruct_loss(vlm, &mut g, &batch, samples, frozen.as_deref())?;
            let value = g.value(loss).item();
            sum += value * chunk.len() as f64;
            g.backward(loss)?;
            let mut params = vlm.params_mut(!cfg.freeze_encoder, true);
            g.accumulate_param_grads(params.iter_mut().map(|p| &mut **p));
            let lr = clipped_step(&mut opt, &mut params)?;
            curve.push(LossPoint {
                step: curve.len() + 1,
                lr,
                loss: value,
            });
        }
        epoch_losses.push(sum / items.len() as f64);
        if stop(epoch_losses.len(), vlm)? {
            break;
        }
    }
    Ok(InstructReport {
        steps: curve.len(),
        curve,
        epoch_losses,
        items: items.len(),
    })
}
