//! Patch-based vision transformer producing one feature row per patch, and
//! the supervised concept pre-training that makes it "medical".

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use xdr_numerics::{load_weights, save_weights, AdamW, AdamWConfig, Graph, Param, Tensor, Var};

use crate::evaluation::multilabel_concept_metrics;
use crate::labels::ConceptFlags;
use crate::nn::{clipped_step, normal_tensor, rng_for, Block, KvCache, LayerNorm, Linear, ModelError, Module, Result};
use crate::synthfundus::{FundusSample, Image, CHANNELS, SIDE};

/// Per-channel pixel statistics of the synthetic fundus generator, used to
/// standardize inputs before the patch projection.
pub const PIXEL_MEAN: [f64; CHANNELS] = [0.449, 0.238, 0.118];
pub const PIXEL_STD: [f64; CHANNELS] = [0.315, 0.178, 0.097];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_side: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub pixel_mean: [f64; CHANNELS],
    pub pixel_std: [f64; CHANNELS],
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_side: SIDE,
            patch_size: 8,
            embed_dim: 32,
            layers: 2,
            heads: 4,
            mlp_ratio: 2,
            pixel_mean: PIXEL_MEAN,
            pixel_std: PIXEL_STD,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self;
        if [c.image_side, c.patch_size, c.embed_dim, c.layers, c.heads, c.mlp_ratio].contains(&0) {
            return Err(ModelError::Shape(format!("encoder config has a zero field: {c:?}")));
        }
        if c.image_side % c.patch_size != 0 {
            return Err(ModelError::Shape(format!(
                "image side {} is not divisible by patch size {}",
                c.image_side, c.patch_size
            )));
        }
        if c.embed_dim % c.heads != 0 {
            return Err(ModelError::Shape(format!("embed dim {} is not divisible by {} heads", c.embed_dim, c.heads)));
        }
        if c.pixel_std.iter().any(|s| !(s.is_finite() && *s > 0.0)) || c.pixel_mean.iter().any(|m| !m.is_finite()) {
            return Err(ModelError::Shape(format!("pixel statistics must be finite with positive spread: {c:?}")));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.image_side / self.patch_size).pow(2)
    }

    pub fn patch_len(&self) -> usize {
        CHANNELS * self.patch_size * self.patch_size
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    Medical,
    Generic,
}

/// Splits an `side×side×3` image (row, col, channel order) into row-major
/// patches, each flattened in (row, col, channel) order.
pub fn patchify(image: &[f64], side: usize, patch: usize) -> Result<Tensor> {
    if patch == 0 || side % patch != 0 {
        return Err(ModelError::Shape(format!("image side {side} is not divisible by patch size {patch}")));
    }
    if image.len() != side * side * CHANNELS {
        return Err(ModelError::Shape(format!("image has {} values, expected {}", image.len(), side * side * CHANNELS)));
    }
    let per = side / patch;
    let len = CHANNELS * patch * patch;
    let mut out = Vec::with_capacity(per * per * len);
    for pr in 0..per {
        for pc in 0..per {
            for r in 0..patch {
                let start = ((pr * patch + r) * side + pc * patch) * CHANNELS;
                out.extend_from_slice(&image[start..start + patch * CHANNELS]);
            }
        }
    }
    Ok(Tensor::new([per * per, len], out)?)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, side: usize, patch: usize) -> Result<Vec<f64>> {
    let per = side / patch;
    if patch == 0 || side % patch != 0 || patches.shape() != [per * per, CHANNELS * patch * patch] {
        return Err(ModelError::Shape(format!("patch matrix {:?} does not tile a {side}px image", patches.shape())));
    }
    let mut out = vec![0.0; side * side * CHANNELS];
    for (i, row) in patches.data().chunks(CHANNELS * patch * patch).enumerate() {
        let (pr, pc) = (i / per, i % per);
        for r in 0..patch {
            let start = ((pr * patch + r) * side + pc * patch) * CHANNELS;
            out[start..start + patch * CHANNELS].copy_from_slice(&row[r * patch * CHANNELS..(r + 1) * patch * CHANNELS]);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub mode: InitMode,
    pub patch: Linear,
    pub pos: Param,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
}

impl Encoder {
    /// Seeded random weights tagged with `mode`. Medical weights are
    /// obtained by calling [`pretrain_encoder`] afterwards; see [`init_weights`].
    pub fn random(config: EncoderConfig, seed: u64, mode: InitMode) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed);
        let d = config.embed_dim;
        let patch = Linear::new("encoder.patch", config.patch_len(), d, 1.0 / (config.patch_len() as f64).sqrt(), &mut rng);
        let pos = Param::new("encoder.pos", normal_tensor(&mut rng, &[config.num_patches(), d], 0.1));
        let blocks = (0..config.layers)
            .map(|i| Block::new(&format!("encoder.block{i}"), d, config.heads, config.mlp_ratio, false, config.layers, &mut rng))
            .collect();
        Ok(Encoder {
            config,
            mode,
            patch,
            pos,
            blocks,
            ln_f: LayerNorm::new("encoder.ln_f", d),
        })
    }

    /// Standardized patch rows of one image.
    pub fn patches(&self, image: &Image) -> Result<Tensor> {
        let c = &self.config;
        let mut px = image.to_f64();
        for (i, v) in px.iter_mut().enumerate() {
            let ch = i % CHANNELS;
            *v = (*v - c.pixel_mean[ch]) / c.pixel_std[ch];
        }
        patchify(&px, c.image_side, c.patch_size)
    }

    /// Stacked patch rows of several images.
    pub fn patch_batch(&self, images: &[&Image]) -> Result<Tensor> {
        let mut data = Vec::new();
        for img in images {
            data.extend(self.patches(img)?.into_data());
        }
        Ok(Tensor::new([images.len() * self.config.num_patches(), self.config.patch_len()], data)?)
    }

    /// `patches` holds `batch` images' patch rows stacked; returns features
    /// stacked the same way.
    pub fn forward(&self, g: &mut Graph, patches: Var, batch: usize) -> Result<Var> {
        let p = self.config.num_patches();
        if g.value(patches).shape() != [batch * p, self.config.patch_len()] {
            return Err(ModelError::Shape(format!(
                "encoder input {:?}, expected [{}, {}]",
                g.value(patches).shape(),
                batch * p,
                self.config.patch_len()
            )));
        }
        let x = self.patch.forward(g, patches)?;
        let pos = g.param(&self.pos)?;
        let ids: Vec<usize> = (0..batch).flat_map(|_| 0..p).collect();
        let pos = g.gather_rows(pos, &ids)?;
        let mut x = g.add(x, pos)?;
        let segments = vec![p; batch];
        for b in &self.blocks {
            x = b.forward(g, x, &segments)?;
        }
        self.ln_f.forward(g, x)
    }

    /// Features of one image, `P×D_v`.
    pub fn encode(&self, image: &Image) -> Result<Tensor> {
        self.encode_patches(&self.patches(image)?)
    }

    pub fn encode_patches(&self, patches: &Tensor) -> Result<Tensor> {
        let p = self.config.num_patches();
        if patches.shape() != [p, self.config.patch_len()] {
            return Err(ModelError::Shape(format!("patch matrix {:?}", patches.shape())));
        }
        let mut x = self.patch.infer(patches.data(), p);
        for (v, q) in x.iter_mut().zip(self.pos.value.data()) {
            *v += q;
        }
        for b in &self.blocks {
            x = b.infer(&x, p, &mut KvCache::default());
        }
        let out = self.ln_f.infer(&x);
        let t = Tensor::new([p, self.config.embed_dim], out)?;
        if !t.is_finite() {
            return Err(ModelError::Numerics(xdr_numerics::NumericsError::NonFinite { op: "encode" }));
        }
        Ok(t)
    }

    pub fn checkpoint_tensors(&self) -> Vec<(String, Tensor)> {
        let c = &self.config;
        let mut out = self.named_tensors();
        let mode = match self.mode {
            InitMode::Medical => 1.0,
            InitMode::Generic => 0.0,
        };
        out.push(("meta.init_mode".into(), Tensor::new([1], vec![mode]).expect("scalar")));
        let mut cfg: Vec<f64> = [c.image_side, c.patch_size, c.embed_dim, c.layers, c.heads, c.mlp_ratio]
            .map(|v| v as f64)
            .to_vec();
        cfg.extend(c.pixel_mean);
        cfg.extend(c.pixel_std);
        out.push(("meta.config".into(), Tensor::new([cfg.len()], cfg).expect("config fields")));
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(save_weights(path, &self.checkpoint_tensors())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensors(&load_weights(path)?)
    }

    pub fn from_tensors(entries: &[(String, Tensor)]) -> Result<Self> {
        let get = |name: &str| {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| ModelError::Checkpoint(format!("missing {name}")))
        };
        let cfg = get("meta.config")?.data();
        if cfg.len() != 6 + 2 * CHANNELS {
            return Err(ModelError::Checkpoint(format!("meta.config must hold {} values", 6 + 2 * CHANNELS)));
        }
        let f = |i: usize| cfg[i] as usize;
        let config = EncoderConfig {
            image_side: f(0),
            patch_size: f(1),
            embed_dim: f(2),
            layers: f(3),
            heads: f(4),
            mlp_ratio: f(5),
            pixel_mean: [cfg[6], cfg[7], cfg[8]],
            pixel_std: [cfg[9], cfg[10], cfg[11]],
        };
        let mode = if get("meta.init_mode")?.data().first() == Some(&1.0) {
            InitMode::Medical
        } else {
            InitMode::Generic
        };
        let mut enc = Encoder::random(config, 0, mode)?;
        enc.load_tensors(entries)?;
        Ok(enc)
    }
}

impl Module for Encoder {
    fn params(&self) -> Vec<&Param> {
        let mut out = self.patch.params();
        out.push(&self.pos);
        for b in &self.blocks {
            out.extend(b.params());
        }
        out.extend(Module::params(&self.ln_f));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.patch.params_mut();
        out.push(&mut self.pos);
        for b in &mut self.blocks {
            out.extend(b.params_mut());
        }
        out.extend(Module::params_mut(&mut self.ln_f));
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 10,
            batch_size: 16,
            lr: 3e-3,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epoch_losses: Vec<f64>,
    /// Proxy-task macro F1 (percent) on the training set with the freshly
    /// initialised head and after training.
    pub f1_before: f64,
    pub f1_after: f64,
}

/// Temporary multi-label head used only during pre-training.
struct ConceptHead {
    linear: Linear,
}

impl ConceptHead {
    fn logits(&self, enc: &Encoder, g: &mut Graph, patches: Var, batch: usize) -> Result<Var> {
        let f = enc.forward(g, patches, batch)?;
        let p = enc.config.num_patches();
        let pooled: Vec<Var> = (0..batch)
            .map(|b| {
                let rows = g.slice_rows(f, b * p, p)?;
                Ok(g.mean_rows(rows)?)
            })
            .collect::<Result<_>>()?;
        let pooled = g.concat_rows(&pooled)?;
        self.linear.forward(g, pooled)
    }

    fn predict(&self, enc: &Encoder, samples: &[FundusSample]) -> Result<Vec<ConceptFlags>> {
        samples
            .iter()
            .map(|s| {
                let f = enc.encode(&s.image)?;
                let p = f.rows() as f64;
                let d = f.cols();
                let mean: Vec<f64> = (0..d).map(|j| (0..f.rows()).map(|i| f.get(i, j)).sum::<f64>() / p).collect();
                let z = self.linear.infer(&mean, 1);
                Ok(std::array::from_fn(|k| z[k] > 0.0))
            })
            .collect()
    }
}

fn proxy_f1(head: &ConceptHead, enc: &Encoder, samples: &[FundusSample]) -> Result<f64> {
    let pred = head.predict(enc, samples)?;
    let truth: Vec<ConceptFlags> = samples.iter().map(|s| s.concepts).collect();
    let m = multilabel_concept_metrics(&pred, &truth).map_err(|e| ModelError::Shape(e.to_string()))?;
    Ok(m.macro_f1)
}

/// Negative-to-positive ratio per concept, at least 1, so rare concepts are
/// not learned as "always absent".
fn positive_weights(samples: &[FundusSample]) -> [f64; 6] {
    std::array::from_fn(|k| {
        let pos = samples.iter().filter(|s| s.concepts[k]).count();
        if pos == 0 {
            1.0
        } else {
            ((samples.len() - pos) as f64 / pos as f64).max(1.0)
        }
    })
}

/// Supervised concept pre-training: a 6-way sigmoid head on mean-pooled
/// features, positive-weighted binary cross-entropy, AdamW with cosine decay. The head is
/// dropped afterwards and the encoder is tagged `Medical`.
pub fn pretrain_encoder(enc: &mut Encoder, samples: &[FundusSample], cfg: &PretrainConfig) -> Result<PretrainReport> {
    if samples.is_empty() {
        return Err(ModelError::Empty("pre-training set"));
    }
    let mut rng = rng_for(cfg.seed ^ 0x5eed_0001);
    let d = enc.config.embed_dim;
    let mut head = ConceptHead {
        linear: Linear::new("pretrain.head", d, 6, 1.0 / (d as f64).sqrt(), &mut rng),
    };
    let f1_before = proxy_f1(&head, enc, samples)?;
    if cfg.epochs == 0 {
        return Ok(PretrainReport {
            epoch_losses: Vec::new(),
            f1_before,
            f1_after: f1_before,
        });
    }
    let bs = cfg.batch_size.max(1);
    let steps_per_epoch = samples.len().div_ceil(bs);
    let mut opt = AdamW::new(AdamWConfig {
        lr_max: cfg.lr,
        lr_min: cfg.lr * 0.01,
        weight_decay: cfg.weight_decay,
        total_steps: cfg.epochs * steps_per_epoch,
        ..AdamWConfig::default()
    })?;
    let all_patches: Vec<Tensor> = samples.iter().map(|s| enc.patches(&s.image)).collect::<Result<_>>()?;
    let pos_weight = positive_weights(samples);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(bs) {
            let mut data = Vec::new();
            let mut targets = Vec::new();
            let mut weights = Vec::new();
            for &i in chunk {
                data.extend_from_slice(all_patches[i].data());
                for (k, &f) in samples[i].concepts.iter().enumerate() {
                    targets.push(if f { 1.0 } else { 0.0 });
                    weights.push(if f { pos_weight[k] } else { 1.0 });
                }
            }
            let mut g = Graph::new();
            let x = g.constant(Tensor::new([chunk.len() * enc.config.num_patches(), enc.config.patch_len()], data)?)?;
            let logits = head.logits(enc, &mut g, x, chunk.len())?;
            let loss = g.weighted_bce_with_logits(logits, &targets, &weights)?;
            total += g.value(loss).item() * chunk.len() as f64;
            g.backward(loss)?;
            let mut params = enc.params_mut();
            params.extend(head.linear.params_mut());
            g.accumulate_param_grads(params.iter_mut().map(|p| &mut **p));
            clipped_step(&mut opt, &mut params)?;
        }
        epoch_losses.push(total / samples.len() as f64);
    }
    enc.mode = InitMode::Medical;
    let f1_after = proxy_f1(&head, enc, samples)?;
    Ok(PretrainReport {
        epoch_losses,
        f1_before,
        f1_after,
    })
}

/// Generic: seeded random weights. Medical: the same random weights, then
/// concept pre-training on `pretrain_set`.
pub fn init_weights(
    config: EncoderConfig,
    seed: u64,
    mode: InitMode,
    pretrain_set: &[FundusSample],
    pretrain: &PretrainConfig,
) -> Result<(Encoder, Option<PretrainReport>)> {
    let mut enc = Encoder::random(config, seed, InitMode::Generic)?;
    match mode {
        InitMode::Generic => Ok((enc, None)),
        InitMode::Medical => {
            let report = pretrain_encoder(&mut enc, pretrain_set, pretrain)?;
            enc.mode = InitMode::Medical;
            Ok((enc, Some(report)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_shapes_and_constant_rows() {
        let img = vec![0.25; 64 * 64 * 3];
        let p = patchify(&img, 64, 8).unwrap();
        assert_eq!(p.shape(), &[64, 192]);
        assert!(p.data().iter().all(|&v| v == 0.25));
        assert!(patchify(&img, 64, 7).is_err());
    }

    #[test]
    fn unpatchify_inverts_patchify() {
        let img: Vec<f64> = (0..64 * 64 * 3).map(|i| (i as f64 * 0.731).sin()).collect();
        for patch in [1, 4, 8, 16] {
            let p = patchify(&img, 64, patch).unwrap();
            let back = unpatchify(&p, 64, patch).unwrap();
            assert!(back.iter().zip(&img).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn first_patch_is_top_left_block() {
        let img: Vec<f64> = (0..64 * 64 * 3).map(|i| i as f64).collect();
        let p = patchify(&img, 64, 8).unwrap();
        // row 1 of patch 0 starts at pixel (1, 0)
        assert_eq!(p.get(0, 24), (64 * 3) as f64);
        // patch 1 starts at pixel (0, 8)
        assert_eq!(p.get(1, 0), 24.0);
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::default().validate().is_ok());
        let bad = EncoderConfig { patch_size: 7, ..Default::default() };
        assert!(Encoder::random(bad, 0, InitMode::Generic).is_err());
        let bad = EncoderConfig { heads: 5, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
