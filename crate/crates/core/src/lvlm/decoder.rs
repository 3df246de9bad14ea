//! Multimodal input layout and the causal decoder.

use std::path::Path;

use serde::{Deserialize, Serialize};
use xdr_numerics::{cross_entropy, load_weights, save_weights, Graph, Param, Tensor, Var};

use super::vocab::{BOS, EOS, IMG};
use crate::nn::{normal_tensor, rng_for, Block, KvCache, LayerNorm, ModelError, Module, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    ImageSlot,
    Prompt,
    Response,
}

/// Token ids with a role per position. Image positions carry the `<img>`
/// id; their embeddings come from the connector instead of the table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub roles: Vec<Role>,
}

impl TokenSequence {
    /// `[image × n] <bos> prompt [response <eos>]`.
    pub fn assemble(image_rows: usize, prompt: &[usize], response: Option<&[usize]>) -> Self {
        let mut ids = vec![IMG; image_rows];
        let mut roles = vec![Role::ImageSlot; image_rows];
        ids.push(BOS);
        ids.extend_from_slice(prompt);
        roles.resize(ids.len(), Role::Prompt);
        if let Some(r) = response {
            ids.extend_from_slice(r);
            ids.push(EOS);
            roles.resize(ids.len(), Role::Response);
        }
        TokenSequence { ids, roles }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn image_rows(&self) -> usize {
        self.roles.iter().take_while(|&&r| r == Role::ImageSlot).count()
    }

    /// Positions whose next token is a response token, with that token.
    pub fn loss_rows(&self) -> (Vec<usize>, Vec<usize>) {
        (0..self.len().saturating_sub(1))
            .filter(|&t| self.roles[t + 1] == Role::Response)
            .map(|t| (t, self.ids[t + 1]))
            .unzip()
    }

    /// Per-row targets and mask for a full `len × V` logit matrix.
    pub fn loss_mask(&self) -> (Vec<usize>, Vec<bool>) {
        let mut targets = vec![0; self.len()];
        let mut mask = vec![false; self.len()];
        for (t, y) in self.loss_rows().0.into_iter().zip(self.loss_rows().1) {
            targets[t] = y;
            mask[t] = true;
        }
        (targets, mask)
    }
}

/// Mean next-token cross-entropy over response positions of `seq`, from
/// full per-position logits. Row `t` predicts token `t + 1`.
pub fn generation_loss(logits: &Tensor, seq: &TokenSequence) -> Result<f64> {
    if logits.rows() != seq.len() {
        return Err(ModelError::Shape(format!("{} logit rows for {} tokens", logits.rows(), seq.len())));
    }
    let (targets, mask) = seq.loss_mask();
    if !mask.contains(&true) {
        return Err(ModelError::Empty("response"));
    }
    Ok(cross_entropy(logits, &targets, &mask)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub max_positions: usize,
}

impl DecoderConfig {
    pub fn with_vocab(vocab_size: usize) -> Self {
        DecoderConfig {
            vocab_size,
            dim: 64,
            layers: 2,
            heads: 4,
            mlp_ratio: 2,
            max_positions: 256,
        }
    }
}

/// Causal transformer whose output projection is the transposed token
/// embedding table.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub tok: Param,
    pub pos: Param,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
}

impl Decoder {
    pub fn new(config: DecoderConfig, seed: u64) -> Result<Self> {
        let c = config;
        if [c.vocab_size, c.dim, c.layers, c.heads, c.mlp_ratio, c.max_positions].contains(&0) || c.dim % c.heads != 0 {
            return Err(ModelError::Shape(format!("invalid decoder config {c:?}")));
        }
        let mut rng = rng_for(seed);
        let tok = Param::new("decoder.tok", normal_tensor(&mut rng, &[c.vocab_size, c.dim], 0.1));
        let pos = Param::new("decoder.pos", normal_tensor(&mut rng, &[c.max_positions, c.dim], 0.02));
        let blocks = (0..c.layers)
            .map(|i| Block::new(&format!("decoder.block{i}"), c.dim, c.heads, c.mlp_ratio, true, c.layers, &mut rng))
            .collect();
        Ok(Decoder {
            config,
            tok,
            pos,
            blocks,
            ln_f: LayerNorm::new("decoder.ln_f", c.dim),
        })
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.config.max_positions {
            return Err(ModelError::Shape(format!(
                "sequence of {len} positions exceeds the positional table ({})",
                self.config.max_positions
            )));
        }
        Ok(())
    }

    /// Input embeddings on a graph: connector rows for image slots, table
    /// rows for text, plus positional embeddings over the whole sequence.
    pub fn embed(&self, g: &mut Graph, image_rows: Var, seq: &TokenSequence) -> Result<Var> {
        self.check_len(seq.len())?;
        let p = seq.image_rows();
        let img = g.value(image_rows);
        if img.rows() != p || img.cols() != self.config.dim {
            return Err(ModelError::Shape(format!(
                "image rows {:?} do not fill {p} slots of width {}",
                img.shape(),
                self.config.dim
            )));
        }
        let tok = g.param(&self.tok)?;
        let text = g.gather_rows(tok, &seq.ids[p..])?;
        let x = g.concat_rows(&[image_rows, text])?;
        let pos = g.param(&self.pos)?;
        let pos = g.gather_rows(pos, &(0..seq.len()).collect::<Vec<_>>())?;
        Ok(g.add(x, pos)?)
    }

    /// Final hidden states for stacked sequences of lengths `segments`.
    pub fn hidden(&self, g: &mut Graph, x: Var, segments: &[usize]) -> Result<Var> {
        let mut x = x;
        for b in &self.blocks {
            x = b.forward(g, x, segments)?;
        }
        self.ln_f.forward(g, x)
    }

    /// Logits for selected hidden rows against the tied embedding table.
    pub fn logits_at(&self, g: &mut Graph, hidden: Var, rows: &[usize]) -> Result<Var> {
        let h = g.gather_rows(hidden, rows)?;
        let tok = g.param(&self.tok)?;
        Ok(g.matmul_nt(h, tok)?)
    }

    /// Sequence and input embedding matrix `[F'_V ; <bos> P_T ; Y <eos>]`
    /// with positions added.
    pub fn assemble_input(&self, f_proj: &Tensor, prompt: &[usize], response: Option<&[usize]>) -> Result<(TokenSequence, Tensor)> {
        let seq = TokenSequence::assemble(f_proj.rows(), prompt, response);
        let mut g = Graph::new();
        let img = g.constant(f_proj.clone())?;
        let x = self.embed(&mut g, img, &seq)?;
        Ok((seq, g.value(x).clone()))
    }

    /// Logits at every position for one assembled sequence.
    pub fn forward(&self, embeddings: &Tensor) -> Result<Tensor> {
        if embeddings.cols() != self.config.dim {
            return Err(ModelError::Shape(format!("embedding width {} != {}", embeddings.cols(), self.config.dim)));
        }
        self.check_len(embeddings.rows())?;
        let mut g = Graph::new();
        let x = g.constant(embeddings.clone())?;
        let h = self.hidden(&mut g, x, &[embeddings.rows()])?;
        let rows: Vec<usize> = (0..embeddings.rows()).collect();
        let l = self.logits_at(&mut g, h, &rows)?;
        Ok(g.value(l).clone())
    }

    /// Unit caption vector: mean of the caption's token embeddings, normalised.
    pub fn caption_vector(&self, ids: &[usize]) -> Result<Vec<f64>> {
        let d = self.config.dim;
        let rows: Vec<&[f64]> = ids.iter().map(|&i| &self.tok.value.data()[i * d..(i + 1) * d]).collect();
        if rows.is_empty() {
            return Err(ModelError::Empty("caption"));
        }
        crate::connector::pool(&Tensor::from_rows(&rows)?)
    }

    fn tied_logits(&self, h: &[f64]) -> Vec<f64> {
        let d = self.config.dim;
        self.tok.value.data().chunks(d).map(|e| e.iter().zip(h).map(|(a, b)| a * b).sum()).collect()
    }

    /// Greedy decoding with a key/value cache. Returns the generated ids
    /// (without `<eos>`) and whether decoding stopped before `<eos>`.
    pub fn generate(&self, f_proj: &Tensor, prompt: &[usize], max_len: usize) -> Result<(Vec<usize>, bool)> {
        let d = self.config.dim;
        let (seq, prefix) = self.assemble_input(f_proj, prompt, None)?;
        let mut caches = vec![KvCache::default(); self.blocks.len()];
        let mut x = prefix.into_data();
        let mut rows = seq.len();
        let mut out = Vec::new();
        loop {
            for (b, c) in self.blocks.iter().zip(&mut caches) {
                x = b.infer(&x, rows, c);
            }
            let last = self.ln_f.infer(&x[(rows - 1) * d..]);
            let logits = self.tied_logits(&last);
            let mut best = 0;
            for (i, &v) in logits.iter().enumerate() {
                if v > logits[best] {
                    best = i;
                }
            }
            if best == EOS {
                return Ok((out, false));
            }
            out.push(best);
            let position = seq.len() + out.len() - 1;
            if out.len() >= max_len || position >= self.config.max_positions {
                return Ok((out, true));
            }
            x = self.tok.value.data()[best * d..(best + 1) * d]
                .iter()
                .zip(&self.pos.value.data()[position * d..(position + 1) * d])
                .map(|(a, b)| a + b)
                .collect();
            rows = 1;
        }
    }

    pub fn checkpoint_tensors(&self) -> Vec<(String, Tensor)> {
        let c = &self.config;
        let mut out = self.named_tensors();
        let cfg = [c.vocab_size, c.dim, c.layers, c.heads, c.mlp_ratio, c.max_positions].map(|v| v as f64);
        out.push(("meta.config".into(), Tensor::new([6], cfg.to_vec()).expect("six fields")));
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(save_weights(path, &self.checkpoint_tensors())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let entries = load_weights(path)?;
        let cfg = entries
            .iter()
            .find(|(n, _)| n == "meta.config")
            .map(|(_, t)| t.data().to_vec())
            .filter(|v| v.len() == 6)
            .ok_or_else(|| ModelError::Checkpoint("missing meta.config".into()))?;
        let f = |i: usize| cfg[i] as usize;
        let config = DecoderConfig {
            vocab_size: f(0),
            dim: f(1),
            layers: f(2),
            heads: f(3),
            mlp_ratio: f(4),
            max_positions: f(5),
        };
        let mut dec = Decoder::new(config, 0)?;
        dec.load_tensors(&entries)?;
        Ok(dec)
    }
}

impl Module for Decoder {
    fn params(&self) -> Vec<&Param> {
        let mut out = vec![&self.tok, &self.pos];
        for b in &self.blocks {
            out.extend(b.params());
        }
        out.extend(Module::params(&self.ln_f));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = vec![&mut self.tok, &mut self.pos];
        for b in &mut self.blocks {
            out.extend(b.params_mut());
        }
        out.extend(Module::params_mut(&mut self.ln_f));
        out
    }
}
