//! Layers shared by the vision encoder, the connector and the decoder.
//!
//! Every layer has two forward paths: a graph path used for training and a
//! plain-slice inference path used for encoding and generation. The
//! inference path of [`Block`] keeps a key/value cache so decoding one more
//! token costs one row of work.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};
use thiserror::Error;
use xdr_numerics::kernels::{self, gemm, MatMut, MatRef};
use xdr_numerics::{Graph, NumericsError, Param, Tensor, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("{0}")]
    Shape(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("unknown word {0:?}")]
    OutOfVocabulary(String),
    #[error(transparent)]
    Report(#[from] crate::report::ReportError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Parameter container with stable, unique tensor names.
pub trait Module {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.params().into_iter().map(|p| (p.name().to_string(), p.value.clone())).collect()
    }

    /// Copies values by name; every parameter must be present with its shape.
    fn load_tensors(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        for p in self.params_mut() {
            let (_, t) = entries
                .iter()
                .find(|(n, _)| n == p.name())
                .ok_or_else(|| ModelError::Checkpoint(format!("missing tensor {}", p.name())))?;
            if t.shape() != p.value.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "{}: stored shape {:?}, expected {:?}",
                    p.name(),
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }

    /// SHA-256 over names and value bits.
    fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in self.params() {
            h.update(p.name().as_bytes());
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.value.numel()).sum()
    }
}

pub fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape matches data")
}

pub fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: Param,
    pub b: Param,
}

impl Linear {
    pub fn new(name: &str, input: usize, output: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            w: Param::new(format!("{name}.w"), normal_tensor(rng, &[input, output], std)),
            b: Param::new(format!("{name}.b"), Tensor::zeros([output])),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.value.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.w.value.shape()[1]
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(&self.w)?;
        let b = g.param(&self.b)?;
        let y = g.matmul(x, w)?;
        Ok(g.add_row(y, b)?)
    }

    /// `rows × in` → `rows × out`.
    pub fn infer(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let (i, o) = (self.input_dim(), self.output_dim());
        let mut out = vec![0.0; rows * o];
        for r in 0..rows {
            out[r * o..(r + 1) * o].copy_from_slice(self.b.value.data());
        }
        gemm(1.0, MatRef::new(x, rows, i), MatRef::new(self.w.value.data(), i, o), 1.0, MatMut::new(&mut out, rows, o));
        out
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.w, &self.b]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b]
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: Param,
    pub bias: Param,
}

impl LayerNorm {
    pub fn new(name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: Param::new(format!("{name}.gain"), Tensor::full([dim], 1.0)),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros([dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gain = g.param(&self.gain)?;
        let bias = g.param(&self.bias)?;
        Ok(g.layer_norm(x, gain, bias)?)
    }

    pub fn infer(&self, x: &[f64]) -> Vec<f64> {
        let d = self.gain.value.numel();
        let mut out = vec![0.0; x.len()];
        let mut xhat = vec![0.0; x.len()];
        let mut rstd = vec![0.0; x.len() / d];
        kernels::layer_norm_rows(x, d, self.gain.value.data(), self.bias.value.data(), &mut out, &mut xhat, &mut rstd);
        out
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.gain, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gain, &mut self.bias]
    }
}

/// Keys and values of every position seen so far, for one block.
#[derive(Clone, Debug, Default)]
pub struct KvCache {
    k: Vec<f64>,
    v: Vec<f64>,
    len: usize,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Pre-norm transformer block: `x + attn(ln1(x))`, then `x + mlp(ln2(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
    pub causal: bool,
}

impl Block {
    pub fn new(name: &str, dim: usize, heads: usize, mlp_ratio: usize, causal: bool, depth: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        let hidden = dim * mlp_ratio;
        // Residual-branch outputs are shrunk with depth so the stream stays O(1).
        let out_std = std / (2.0 * depth as f64).sqrt();
        Block {
            ln1: LayerNorm::new(&format!("{name}.ln1"), dim),
            wq: Linear::new(&format!("{name}.wq"), dim, dim, std, rng),
            wk: Linear::new(&format!("{name}.wk"), dim, dim, std, rng),
            wv: Linear::new(&format!("{name}.wv"), dim, dim, std, rng),
            wo: Linear::new(&format!("{name}.wo"), dim, dim, out_std, rng),
            ln2: LayerNorm::new(&format!("{name}.ln2"), dim),
            fc1: Linear::new(&format!("{name}.fc1"), dim, hidden, std, rng),
            fc2: Linear::new(&format!("{name}.fc2"), hidden, dim, out_std / (mlp_ratio as f64).sqrt(), rng),
            heads,
            causal,
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.input_dim()
    }

    /// Rows of `x` are the concatenation of independent sequences whose
    /// lengths are `segments`.
    pub fn forward(&self, g: &mut Graph, x: Var, segments: &[usize]) -> Result<Var> {
        let h = self.ln1.forward(g, x)?;
        let q = self.wq.forward(g, h)?;
        let k = self.wk.forward(g, h)?;
        let v = self.wv.forward(g, h)?;
        let a = g.attention(q, k, v, self.heads, self.causal, segments)?;
        let a = self.wo.forward(g, a)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, x)?;
        let m = self.fc1.forward(g, h)?;
        let m = g.gelu(m)?;
        let m = self.fc2.forward(g, m)?;
        Ok(g.add(x, m)?)
    }

    /// Processes `rows` new positions of one sequence, attending to the
    /// cached positions and to each other (causally when the block is
    /// causal). Appends the new keys and values to `cache`.
    pub fn infer(&self, x: &[f64], rows: usize, cache: &mut KvCache) -> Vec<f64> {
        let d = self.dim();
        let h = self.ln1.infer(x);
        let q = self.wq.infer(&h, rows);
        cache.k.extend(self.wk.infer(&h, rows));
        cache.v.extend(self.wv.infer(&h, rows));
        cache.len += rows;
        let mut a = vec![0.0; rows * d];
        kernels::attention_forward(
            &q,
            &cache.k,
            &cache.v,
            rows,
            cache.len,
            d,
            self.heads,
            self.causal,
            cache.len - rows,
            &mut a,
            None,
        );
        let a = self.wo.infer(&a, rows);
        let mut x: Vec<f64> = x.iter().zip(&a).map(|(u, v)| u + v).collect();
        let h = self.ln2.infer(&x);
        let mut m = self.fc1.infer(&h, rows);
        for v in &mut m {
            *v = kernels::gelu(*v);
        }
        let m = self.fc2.infer(&m, rows);
        for (u, v) in x.iter_mut().zip(&m) {
            *u += v;
        }
        x
    }
}

impl Module for Block {
    fn params(&self) -> Vec<&Param> {
        [&self.ln1.params()[..], &self.wq.params(), &self.wk.params(), &self.wv.params(), &self.wo.params(), &self.ln2.params(), &self.fc1.params(), &self.fc2.params()].concat()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.ln1.params_mut();
        out.extend(self.wq.params_mut());
        out.extend(self.wk.params_mut());
        out.extend(self.wv.params_mut());
        out.extend(self.wo.params_mut());
        out.extend(self.ln2.params_mut());
        out.extend(self.fc1.params_mut());
        out.extend(self.fc2.params_mut());
        out
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<&Param> {
        Linear::params(self)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        Linear::params_mut(self)
    }
}

impl Module for LayerNorm {
    fn params(&self) -> Vec<&Param> {
        LayerNorm::params(self)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        LayerNorm::params_mut(self)
    }
}

/// Global-norm clipping at 1.0 followed by one optimizer step.
pub fn clipped_step(opt: &mut xdr_numerics::AdamW, params: &mut [&mut Param]) -> Result<f64> {
    xdr_numerics::clip_grad_norm(params, 1.0);
    let lr = opt.step(params)?;
    xdr_numerics::zero_grads(params);
    Ok(lr)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_inference_matches_graph() {
        let mut rng = rng_for(3);
        for causal in [false, true] {
            let block = Block::new("b", 16, 4, 2, causal, 2, &mut rng);
            let x = normal_tensor(&mut rng, &[7, 16], 1.0);
            let mut g = Graph::new();
            let xv = g.constant(x.clone()).unwrap();
            let y = block.forward(&mut g, xv, &[7]).unwrap();
            let full = g.value(y).data().to_vec();

            let mut cache = KvCache::default();
            let once = block.infer(x.data(), 7, &mut cache);
            assert_eq!(cache.len(), 7);
            for (a, b) in once.iter().zip(&full) {
                assert!((a - b).abs() < 1e-12);
            }
            if causal {
                let mut cache = KvCache::default();
                let mut rows = block.infer(&x.data()[..3 * 16], 3, &mut cache);
                for r in 3..7 {
                    rows.extend(block.infer(x.row(r), 1, &mut cache));
                }
                for (a, b) in rows.iter().zip(&full) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn load_rejects_wrong_shapes() {
        let mut rng = rng_for(1);
        let mut a = Linear::new("l", 3, 2, 0.1, &mut rng);
        let b = Linear::new("l", 3, 2, 0.1, &mut rng);
        a.load_tensors(&b.named_tensors()).unwrap();
        assert_eq!(Module::checksum(&a), Module::checksum(&b));
        let wrong = Linear::new("l", 2, 2, 0.1, &mut rng);
        assert!(a.load_tensors(&wrong.named_tensors()).is_err());
        assert!(a.load_tensors(&[]).is_err());
    }
}
