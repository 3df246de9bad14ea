//! Vision-language connector and stage-1 contrastive alignment.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use xdr_numerics::{load_weights, save_weights, AdamW, AdamWConfig, Graph, Param, Tensor, Var};

use crate::encoder::Encoder;
use crate::nn::{clipped_step, rng_for, Linear, ModelError, Module, Result};
use crate::synthfundus::FundusSample;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectorConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
}

impl Default for ConnectorConfig {
    fn default() -> Self {
        ConnectorConfig {
            input_dim: 32,
            hidden_dim: 64,
            output_dim: 64,
        }
    }
}

/// Two-layer perceptron `D_v → H → D_t` with GELU, applied row-wise.
#[derive(Clone, Debug)]
pub struct Connector {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Connector {
    pub fn new(config: ConnectorConfig, seed: u64) -> Self {
        let mut rng = rng_for(seed);
        let c = config;
        Connector {
            fc1: Linear::new("connector.fc1", c.input_dim, c.hidden_dim, 1.0 / (c.input_dim as f64).sqrt(), &mut rng),
            fc2: Linear::new("connector.fc2", c.hidden_dim, c.output_dim, 1.0 / (c.hidden_dim as f64).sqrt(), &mut rng),
        }
    }

    pub fn config(&self) -> ConnectorConfig {
        ConnectorConfig {
            input_dim: self.fc1.input_dim(),
            hidden_dim: self.fc1.output_dim(),
            output_dim: self.fc2.output_dim(),
        }
    }

    fn check_width(&self, cols: usize) -> Result<()> {
        if cols != self.fc1.input_dim() {
            return Err(ModelError::Shape(format!(
                "connector expects width {}, got {cols}",
                self.fc1.input_dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, f_v: Var) -> Result<Var> {
        self.check_width(g.value(f_v).cols())?;
        let h = self.fc1.forward(g, f_v)?;
        let h = g.gelu(h)?;
        self.fc2.forward(g, h)
    }

    /// Projected features `P×D_t`.
    pub fn project(&self, f_v: &Tensor) -> Result<Tensor> {
        self.check_width(f_v.cols())?;
        let rows = f_v.rows();
        let mut h = self.fc1.infer(f_v.data(), rows);
        for v in &mut h {
            *v = xdr_numerics::kernels::gelu(*v);
        }
        Ok(Tensor::new([rows, self.fc2.output_dim()], self.fc2.infer(&h, rows))?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(save_weights(path, &self.named_tensors())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let entries = load_weights(path)?;
        let shape = |name: &str| {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.shape().to_vec())
                .ok_or_else(|| ModelError::Checkpoint(format!("missing {name}")))
        };
        let (w1, w2) = (shape("connector.fc1.w")?, shape("connector.fc2.w")?);
        let mut c = Connector::new(
            ConnectorConfig {
                input_dim: w1[0],
                hidden_dim: w1[1],
                output_dim: w2[1],
            },
            0,
        );
        c.load_tensors(&entries)?;
        Ok(c)
    }
}

impl Module for Connector {
    fn params(&self) -> Vec<&Param> {
        [Module::params(&self.fc1), Module::params(&self.fc2)].concat()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Module::params_mut(&mut self.fc1);
        out.extend(Module::params_mut(&mut self.fc2));
        out
    }
}

/// Row mean followed by L2 normalisation.
pub fn pool(features: &Tensor) -> Result<Vec<f64>> {
    let (n, d) = (features.rows(), features.cols());
    if n == 0 {
        return Err(ModelError::Empty("feature matrix"));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(features.row(i)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(ModelError::Shape("pooled vector is zero".into()));
    }
    Ok(mean.into_iter().map(|v| v / norm).collect())
}

/// Symmetric InfoNCE on a graph: `½[CE(S) + CE(Sᵀ)]` with `S = I·Tᵀ/τ`
/// and diagonal targets. Rows of both inputs are expected to be unit length.
/// Graph version of [`pool`] for `batch` images whose `P` rows each are
/// stacked in `rows`.
pub fn pool_graph(g: &mut Graph, rows: Var, batch: usize) -> Result<Var> {
    let p = g.value(rows).rows() / batch.max(1);
    let pooled: Vec<Var> = (0..batch)
        .map(|b| {
            let block = g.slice_rows(rows, b * p, p)?;
            Ok(g.mean_rows(block)?)
        })
        .collect::<Result<_>>()?;
    let img = g.concat_rows(&pooled)?;
    Ok(g.l2_normalize_rows(img)?)
}

pub fn contrastive_loss_graph(g: &mut Graph, img: Var, txt: Var, tau: f64) -> Result<Var> {
    let n = g.value(img).rows();
    let s = g.matmul_nt(img, txt)?;
    let s = g.scale(s, 1.0 / tau)?;
    let targets: Vec<usize> = (0..n).collect();
    let mask = vec![true; n];
    let a = g.cross_entropy(s, &targets, &mask)?;
    let st = g.transpose(s)?;
    let b = g.cross_entropy(st, &targets, &mask)?;
    let sum = g.add(a, b)?;
    Ok(g.scale(sum, 0.5)?)
}

/// Symmetric InfoNCE on explicit unit vectors.
pub fn contrastive_loss(img: &[Vec<f64>], txt: &[Vec<f64>], tau: f64) -> Result<f64> {
    if img.is_empty() {
        return Err(ModelError::Empty("vector list"));
    }
    if img.len() != txt.len() {
        return Err(ModelError::Shape(format!("{} image vectors vs {} text vectors", img.len(), txt.len())));
    }
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(ModelError::Shape(format!("temperature must be positive, got {tau}")));
    }
    for v in img.iter().chain(txt) {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(ModelError::Shape(format!("vector norm {norm} is not 1")));
        }
    }
    let mut g = Graph::new();
    let i = g.constant(Tensor::from_rows(img)?)?;
    let t = g.constant(Tensor::from_rows(txt)?)?;
    let l = contrastive_loss_graph(&mut g, i, t, tau)?;
    Ok(g.value(l).item())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Share of images whose nearest text (by dot product, ties to the lower
/// index) is their own caption. Identical captions are interchangeable: the
/// match counts when the retrieved vector equals the image's own caption
/// vector bit for bit.
pub fn retrieval_at_1(img: &[Vec<f64>], txt: &[Vec<f64>]) -> Result<f64> {
    if img.is_empty() {
        return Err(ModelError::Empty("vector list"));
    }
    if img.len() != txt.len() {
        return Err(ModelError::Shape(format!("{} image vectors vs {} text vectors", img.len(), txt.len())));
    }
    let same = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
    let hits = img
        .iter()
        .enumerate()
        .filter(|(i, v)| {
            let mut best = 0;
            let mut best_s = f64::NEG_INFINITY;
            for (j, t) in txt.iter().enumerate() {
                let s = dot(v, t);
                if s > best_s {
                    best_s = s;
                    best = j;
                }
            }
            same(&txt[best], &txt[*i])
        })
        .count();
    Ok(hits as f64 / img.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub tau: f64,
    pub freeze_encoder: bool,
    pub seed: u64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            epochs: 30,
            batch_size: 32,
            lr: 3e-3,
            weight_decay: 0.01,
            tau: 0.07,
            freeze_encoder: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

pub fn loss_curve_text(curve: &[LossPoint]) -> String {
    let mut s = String::from("# step lr loss\n");
    for p in curve {
        s.push_str(&format!("{} {:.6e} {:.10}\n", p.step, p.lr, p.loss));
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignReport {
    pub curve: Vec<LossPoint>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: usize,
}

/// Pooled, normalised projections of every sample's image.
pub fn image_vectors(encoder: &Encoder, connector: &Connector, samples: &[FundusSample]) -> Result<Vec<Vec<f64>>> {
    samples
        .iter()
        .map(|s| pool(&connector.project(&encoder.encode(&s.image)?)?))
        .collect()
}

fn full_loss(encoder: &Encoder, connector: &Connector, samples: &[FundusSample], txt: &[Vec<f64>], tau: f64) -> Result<f64> {
    contrastive_loss(&image_vectors(encoder, connector, samples)?, txt, tau)
}

/// Trains the connector (and the encoder unless frozen) so that each
/// image's pooled projection retrieves its caption vector under symmetric
/// InfoNCE. `text_vecs[i]` is the fixed unit caption vector of `samples[i]`.
pub fn align_train(
    encoder: &mut Encoder,
    connector: &mut Connector,
    samples: &[FundusSample],
    text_vecs: &[Vec<f64>],
    cfg: &AlignConfig,
) -> Result<AlignReport> {
    if samples.is_empty() {
        return Err(ModelError::Empty("alignment pair set"));
    }
    if samples.len() != text_vecs.len() {
        return Err(ModelError::Shape(format!("{} images vs {} captions", samples.len(), text_vecs.len())));
    }
    let initial_loss = full_loss(encoder, connector, samples, text_vecs, cfg.tau)?;
    let bs = cfg.batch_size.max(1).min(samples.len());
    let steps_per_epoch = samples.len().div_ceil(bs);
    let total = cfg.epochs * steps_per_epoch;
    let mut opt = AdamW::new(AdamWConfig {
        lr_max: cfg.lr,
        lr_min: cfg.lr * 0.01,
        weight_decay: cfg.weight_decay,
        total_steps: total.max(1),
        ..AdamWConfig::default()
    })?;
    let p = encoder.config.num_patches();
    let d_v = encoder.config.embed_dim;
    // A frozen encoder's features never change, so compute them once.
    let frozen: Option<Vec<Tensor>> = if cfg.freeze_encoder {
        Some(samples.iter().map(|s| encoder.encode(&s.image)).collect::<Result<_>>()?)
    } else {
        None
    };
    let patches: Vec<Tensor> = if cfg.freeze_encoder {
        Vec::new()
    } else {
        samples.iter().map(|s| encoder.patches(&s.image)).collect::<Result<_>>()?
    };
    let mut rng = rng_for(cfg.seed ^ 0xa11_9e);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut curve = Vec::with_capacity(total);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(bs) {
            let mut g = Graph::new();
            let f_v = match &frozen {
                Some(feats) => {
                    let mut data = Vec::with_capacity(chunk.len() * p * d_v);
                    for &i in chunk {
                        data.extend_from_slice(feats[i].data());
                    }
                    g.constant(Tensor::new([chunk.len() * p, d_v], data)?)?
                }
                None => {
                    let mut data = Vec::new();
                    for &i in chunk {
                        data.extend_from_slice(patches[i].data());
                    }
                    let x = g.constant(Tensor::new([chunk.len() * p, encoder.config.patch_len()], data)?)?;
                    encoder.forward(&mut g, x, chunk.len())?
                }
            };
            let proj = connector.forward(&mut g, f_v)?;
            let img = pool_graph(&mut g, proj, chunk.len())?;
            let txt_rows: Vec<&[f64]> = chunk.iter().map(|&i| text_vecs[i].as_slice()).collect();
            let txt = g.constant(Tensor::from_rows(&txt_rows)?)?;
            let loss = contrastive_loss_graph(&mut g, img, txt, cfg.tau)?;
            let value = g.value(loss).item();
            g.backward(loss)?;
            let mut params = connector.params_mut();
            if !cfg.freeze_encoder {
                params.extend(encoder.params_mut());
            }
            g.accumulate_param_grads(params.iter_mut().map(|p| &mut **p));
            let lr = clipped_step(&mut opt, &mut params)?;
            curve.push(LossPoint {
                step: curve.len() + 1,
                lr,
                loss: value,
            });
        }
    }
    let final_loss = full_loss(encoder, connector, samples, text_vecs, cfg.tau)?;
    Ok(AlignReport {
        steps: curve.len(),
        curve,
        initial_loss,
        final_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn pool_examples() {
        let v = [3.0, 4.0];
        let one = pool(&Tensor::from_rows(&[v]).unwrap()).unwrap();
        assert_eq!(one, vec![0.6, 0.8]);
        assert_eq!(pool(&Tensor::from_rows(&[v, v]).unwrap()).unwrap(), one);
        let z = Tensor::from_rows(&[[1.0, -2.0], [-1.0, 2.0]]).unwrap();
        assert!(pool(&z).is_err());
        let r = pool(&Tensor::from_rows(&[[0.3, -7.0, 2.0], [1.0, 1.0, 1.0]]).unwrap()).unwrap();
        assert!((r.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn contrastive_examples() {
        let e1 = vec![1.0, 0.0];
        let e2 = vec![0.0, 1.0];
        assert_eq!(contrastive_loss(&[e1.clone()], &[e1.clone()], 0.07).unwrap(), 0.0);
        let l = contrastive_loss(&[e1.clone(), e2.clone()], &[e1.clone(), e2.clone()], 1.0).unwrap();
        let expect = (1.0 + (-1.0f64).exp()).ln();
        assert!((l - expect).abs() < 1e-12);
        assert!(contrastive_loss(&[vec![2.0, 0.0]], &[e1.clone()], 1.0).is_err());
        assert!(contrastive_loss(&[e1.clone()], &[e1.clone()], 0.0).is_err());
    }

    #[test]
    fn temperature_ordering_on_correct_pairs() {
        let basis: Vec<Vec<f64>> = (0..3).map(|i| (0..3).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        let l: Vec<f64> = [1.0, 0.5, 0.1].iter().map(|&t| contrastive_loss(&basis, &basis, t).unwrap()).collect();
        assert!(l[0] > l[1] && l[1] > l[2] && l[2] > 0.0);
    }

    #[test]
    fn retrieval_examples() {
        let v: Vec<Vec<f64>> = (0..5).map(|i| unit(&[1.0, i as f64, (i * i) as f64 - 3.0])).collect();
        assert_eq!(retrieval_at_1(&v, &v).unwrap(), 1.0);
        let mut shifted = v.clone();
        shifted.rotate_left(1);
        assert_eq!(retrieval_at_1(&v, &shifted).unwrap(), 0.0);
        assert!(retrieval_at_1(&[], &[]).is_err());
        let dup = vec![unit(&[1.0, 1.0]), unit(&[1.0, 1.0])];
        assert_eq!(retrieval_at_1(&dup, &dup).unwrap(), 1.0);
    }
}
