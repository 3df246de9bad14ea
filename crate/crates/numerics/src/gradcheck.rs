//! Central finite differences as an oracle for the analytic gradients.
//!
//! Two entry points: [`check_inputs`] for a graph function of plain input
//! tensors, and [`check_model`] for a loss over a model's parameters.
//! Coordinates are sampled with a fixed internal generator so every run
//! checks the same entries.

use crate::graph::{Graph, Param, Var};
use crate::{Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdConfig {
    /// Step of the central difference.
    pub h: f64,
    /// Largest relative error accepted.
    pub tol: f64,
    /// Denominator floor: gradients below it are compared absolutely,
    /// since central differences carry round-off near 1e-10.
    pub floor: f64,
    /// Coordinates per tensor; smaller tensors are checked exhaustively.
    pub samples: usize,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig {
            h: 1e-5,
            tol: 1e-4,
            floor: 1e-5,
            samples: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub tensor: String,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub tensors: usize,
    pub coords: usize,
    pub max_rel: f64,
    pub mismatches: Vec<Mismatch>,
    /// Set when the function itself failed to evaluate.
    pub error: Option<String>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.mismatches.is_empty() && self.coords > 0
    }

    pub fn summary(&self) -> String {
        match (&self.error, self.mismatches.first()) {
            (Some(e), _) => format!("{}: evaluation failed: {e}", self.name),
            (None, Some(m)) => format!(
                "{}: {} of {} coordinates off, first {}[{}] analytic {:e} vs numeric {:e} (rel {:e})",
                self.name,
                self.mismatches.len(),
                self.coords,
                m.tensor,
                m.coord,
                m.analytic,
                m.numeric,
                m.rel
            ),
            (None, None) => format!(
                "{}: {} coordinates over {} tensors, max rel {:.2e}",
                self.name, self.coords, self.tensors, self.max_rel
            ),
        }
    }
}

/// Deterministic stream for coordinate sampling and test tensors.
#[derive(Clone, Debug)]
pub struct FdRng(u64);

impl FdRng {
    pub fn new(seed: u64) -> Self {
        FdRng(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * ((self.next_u64() >> 11) as f64 / (1u64 << 53) as f64)
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    pub fn tensor(&mut self, shape: &[usize], scale: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| self.uniform(-scale, scale)).collect()).expect("shape matches data")
    }
}

fn name_seed(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// `samples` distinct coordinates out of `n` (all of them when `n` is small).
fn coords(rng: &mut FdRng, n: usize, samples: usize) -> Vec<usize> {
    let mut all: Vec<usize> = (0..n).collect();
    let k = samples.min(n);
    for i in 0..k {
        let j = i + rng.below(n - i);
        all.swap(i, j);
    }
    all.truncate(k);
    all
}

fn compare(report: &mut CheckReport, cfg: &FdConfig, tensor: &str, coord: usize, analytic: f64, numeric: f64) {
    let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(cfg.floor);
    report.coords += 1;
    if rel > report.max_rel || rel.is_nan() {
        report.max_rel = rel;
    }
    if !(rel <= cfg.tol) {
        report.mismatches.push(Mismatch {
            tensor: tensor.to_string(),
            coord,
            analytic,
            numeric,
            rel,
        });
    }
}

fn empty_report(name: &str, tensors: usize) -> CheckReport {
    CheckReport {
        name: name.to_string(),
        tensors,
        coords: 0,
        max_rel: 0.0,
        mismatches: Vec::new(),
        error: None,
    }
}

/// Reduces `f(inputs)` to a scalar through a fixed random projection and
/// compares each input's gradient with central differences.
pub fn check_inputs(
    name: &str,
    inputs: &[Tensor],
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
    cfg: &FdConfig,
) -> CheckReport {
    let mut report = empty_report(name, inputs.len());
    let mut rng = FdRng::new(name_seed(name));
    let eval = |inputs: &[Tensor], proj: Option<&Tensor>, grads: bool| -> Result<(f64, Tensor, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), true)).collect::<Result<_>>()?;
        let out = f(&mut g, &vars)?;
        let proj = match proj {
            Some(p) => p.clone(),
            None => FdRng::new(99).tensor(g.value(out).shape(), 1.0),
        };
        let p = g.constant(proj.clone())?;
        let weighted = g.mul(out, p)?;
        let loss = g.sum(weighted)?;
        let value = g.value(loss).item();
        let mut out_grads = Vec::new();
        if grads {
            g.backward(loss)?;
            out_grads = vars
                .iter()
                .map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(v).numel()]))
                .collect();
        }
        Ok((value, proj, out_grads))
    };
    let (_, proj, grads) = match eval(inputs, None, true) {
        Ok(r) => r,
        Err(e) => {
            report.error = Some(e.to_string());
            return report;
        }
    };
    for (ti, t) in inputs.iter().enumerate() {
        for c in coords(&mut rng, t.numel(), cfg.samples) {
            let shifted = |delta: f64| {
                let mut v = inputs.to_vec();
                v[ti].data_mut()[c] += delta;
                eval(&v, Some(&proj), false).map(|r| r.0)
            };
            match (shifted(cfg.h), shifted(-cfg.h)) {
                (Ok(p), Ok(m)) => compare(&mut report, cfg, &format!("input{ti}"), c, grads[ti][c], (p - m) / (2.0 * cfg.h)),
                (Err(e), _) | (_, Err(e)) => {
                    report.error = Some(e.to_string());
                    return report;
                }
            }
        }
    }
    report
}

/// Checks `d loss / d θ` for every tensor that `params` exposes on a
/// clone of `model`. `loss` must build a scalar from the model's current
/// parameter values.
pub fn check_model<M: Clone, E: std::fmt::Display>(
    name: &str,
    model: &M,
    params: impl Fn(&mut M) -> Vec<&mut Param>,
    loss: impl Fn(&M, &mut Graph) -> std::result::Result<Var, E>,
    cfg: &FdConfig,
) -> CheckReport {
    let mut rng = FdRng::new(name_seed(name));
    let mut work = model.clone();
    let tensors = params(&mut work).len();
    let mut report = empty_report(name, tensors);
    let value = |m: &M| -> std::result::Result<f64, String> {
        let mut g = Graph::new();
        let l = loss(m, &mut g).map_err(|e| e.to_string())?;
        Ok(g.value(l).item())
    };
    let analytic: Vec<(String, Vec<f64>)> = {
        let mut g = Graph::new();
        let run = loss(&work, &mut g).map_err(|e| e.to_string()).and_then(|l| g.backward(l).map_err(|e| e.to_string()));
        if let Err(e) = run {
            report.error = Some(e);
            return report;
        }
        let mut ps = params(&mut work);
        for p in ps.iter_mut() {
            p.zero_grad();
        }
        g.accumulate_param_grads(ps.iter_mut().map(|p| &mut **p));
        ps.iter()
            .map(|p| {
                let grad = p.grad.as_ref().map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; p.value.numel()]);
                (p.name().to_string(), grad)
            })
            .collect()
    };
    for (ti, (pname, grad)) in analytic.iter().enumerate() {
        for c in coords(&mut rng, grad.len(), cfg.samples) {
            let mut shifted = |delta: f64| {
                let orig = params(&mut work)[ti].value.data()[c];
                params(&mut work)[ti].value.data_mut()[c] = orig + delta;
                let v = value(&work);
                params(&mut work)[ti].value.data_mut()[c] = orig;
                v
            };
            let (p, m) = (shifted(cfg.h), shifted(-cfg.h));
            match (p, m) {
                (Ok(p), Ok(m)) => compare(&mut report, cfg, pname, c, grad[c], (p - m) / (2.0 * cfg.h)),
                (Err(e), _) | (_, Err(e)) => {
                    report.error = Some(e);
                    return report;
                }
            }
        }
    }
    report
}

/// Every differentiable graph operation, each on small random inputs, plus
/// one composite transformer block.
pub fn op_suite(cfg: &FdConfig) -> Vec<CheckReport> {
    let mut r = FdRng::new(2024);
    let mut out = Vec::new();
    let mut run = |name: &str, inputs: Vec<Tensor>, f: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>| {
        out.push(check_inputs(name, &inputs, f, cfg));
    };
    let t = |r: &mut FdRng, shape: &[usize]| r.tensor(shape, 1.5);

    run("matmul", vec![t(&mut r, &[4, 5]), t(&mut r, &[5, 3])], &|g, v| g.matmul(v[0], v[1]));
    run("matmul_nt", vec![t(&mut r, &[4, 5]), t(&mut r, &[3, 5])], &|g, v| g.matmul_nt(v[0], v[1]));
    run("matmul_shared", vec![t(&mut r, &[4, 4])], &|g, v| g.matmul(v[0], v[0]));
    let (a, b) = (t(&mut r, &[3, 4]), t(&mut r, &[3, 4]));
    run("add", vec![a.clone(), b.clone()], &|g, v| g.add(v[0], v[1]));
    run("sub", vec![a.clone(), b.clone()], &|g, v| g.sub(v[0], v[1]));
    run("mul", vec![a.clone(), b], &|g, v| g.mul(v[0], v[1]));
    run("add_row", vec![a.clone(), t(&mut r, &[4])], &|g, v| g.add_row(v[0], v[1]));
    run("scale", vec![a.clone()], &|g, v| g.scale(v[0], -2.5));
    run("gelu", vec![a.clone()], &|g, v| g.gelu(v[0]));
    run("tanh", vec![a.clone()], &|g, v| g.tanh(v[0]));
    // Keep relu inputs away from the kink.
    let mut kinkless = a;
    for x in kinkless.data_mut() {
        if x.abs() < 0.05 {
            *x += 0.2;
        }
    }
    run("relu", vec![kinkless], &|g, v| g.relu(v[0]));
    run("softmax", vec![t(&mut r, &[3, 6])], &|g, v| g.softmax(v[0]));
    run("layer_norm", vec![t(&mut r, &[5, 6]), t(&mut r, &[6]), t(&mut r, &[6])], &|g, v| {
        g.layer_norm(v[0], v[1], v[2])
    });
    run("l2_normalize_rows", vec![t(&mut r, &[3, 5])], &|g, v| g.l2_normalize_rows(v[0]));
    run("mean_rows", vec![t(&mut r, &[4, 5])], &|g, v| g.mean_rows(v[0]));
    run("sum", vec![t(&mut r, &[4, 5])], &|g, v| g.sum(v[0]));
    let qkv = |r: &mut FdRng, rows: usize| vec![t(r, &[rows, 8]), t(r, &[rows, 8]), t(r, &[rows, 8])];
    run("attention", qkv(&mut r, 5), &|g, v| g.attention(v[0], v[1], v[2], 2, false, &[5]));
    run("attention_causal", qkv(&mut r, 6), &|g, v| g.attention(v[0], v[1], v[2], 4, true, &[6]));
    run("attention_segments", qkv(&mut r, 7), &|g, v| g.attention(v[0], v[1], v[2], 2, true, &[3, 4]));
    run("gather_rows", vec![t(&mut r, &[5, 3])], &|g, v| g.gather_rows(v[0], &[4, 0, 4, 2]));
    run("concat_rows", vec![t(&mut r, &[2, 3]), t(&mut r, &[3, 3])], &|g, v| g.concat_rows(&[v[1], v[0], v[1]]));
    run("slice_rows", vec![t(&mut r, &[5, 3])], &|g, v| g.slice_rows(v[0], 1, 3));
    run("transpose", vec![t(&mut r, &[2, 5])], &|g, v| g.transpose(v[0]));
    run("cross_entropy", vec![t(&mut r, &[4, 7])], &|g, v| {
        g.cross_entropy(v[0], &[1, 6, 0, 3], &[true, false, true, true])
    });
    run("bce_with_logits", vec![t(&mut r, &[2, 3])], &|g, v| {
        g.bce_with_logits(v[0], &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0])
    });
    run("weighted_bce_with_logits", vec![t(&mut r, &[2, 3])], &|g, v| {
        g.weighted_bce_with_logits(v[0], &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0], &[3.0, 1.0, 0.5, 2.0, 1.0, 1.0])
    });
    let d = 8;
    let block = vec![
        t(&mut r, &[6, d]),
        t(&mut r, &[d, 3 * d]),
        t(&mut r, &[d]),
        t(&mut r, &[d]),
        t(&mut r, &[d, 16]),
        t(&mut r, &[16, d]),
        t(&mut r, &[10, d]),
    ];
    run("transformer_block", block, &|g, v| {
        let h = g.layer_norm(v[0], v[2], v[3])?;
        let qkv = g.matmul(h, v[1])?;
        let qkv_t = g.transpose(qkv)?;
        let q = g.slice_rows(qkv_t, 0, d)?;
        let k = g.slice_rows(qkv_t, d, d)?;
        let vv = g.slice_rows(qkv_t, 2 * d, d)?;
        let (q, k, vv) = (g.transpose(q)?, g.transpose(k)?, g.transpose(vv)?);
        let a = g.attention(q, k, vv, 2, true, &[2, 4])?;
        let x = g.add(v[0], a)?;
        let m = g.matmul(x, v[4])?;
        let m = g.gelu(m)?;
        let m = g.matmul(m, v[5])?;
        let x = g.add(x, m)?;
        let logits = g.matmul_nt(x, v[6])?;
        let ce = g.cross_entropy(logits, &[1, 2, 3, 4, 5, 9], &[true, true, false, true, true, true])?;
        let p = g.mean_rows(x)?;
        let p = g.l2_normalize_rows(p)?;
        let s = g.sum(p)?;
        g.add(ce, s)
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // d/dx of x·x computed as a matmul against a constant copy misses
        // half the gradient, so the checker must flag it.
        let x = FdRng::new(1).tensor(&[3, 3], 1.0);
        let report = check_inputs(
            "broken",
            &[x],
            |g, v| {
                let c = g.constant(g.value(v[0]).clone())?;
                g.matmul(v[0], c)
            },
            &FdConfig::default(),
        );
        assert!(!report.passed());
    }

    #[test]
    fn accepts_a_parameter_loss() {
        let p = Param::new("w", FdRng::new(3).tensor(&[4, 2], 1.0));
        let report = check_model(
            "param_loss",
            &p,
            |p| vec![p],
            |p, g| -> Result<Var> {
                let w = g.param(p)?;
                let t = g.tanh(w)?;
                let s = g.mul(t, w)?;
                g.sum(s)
            },
            &FdConfig::default(),
        );
        assert!(report.passed(), "{}", report.summary());
        assert_eq!(report.coords, 8);
    }

    #[test]
    fn sampled_coordinates_are_distinct() {
        let mut rng = FdRng::new(9);
        let mut c = coords(&mut rng, 100, 32);
        assert_eq!(c.len(), 32);
        c.sort_unstable();
        c.dedup();
        assert_eq!(c.len(), 32);
        assert_eq!(coords(&mut rng, 5, 32).len(), 5);
    }
}
