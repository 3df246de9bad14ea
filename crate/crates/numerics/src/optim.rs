//! AdamW with decoupled weight decay and a cosine-annealed learning rate.

use crate::error::{NumericsError, Result};
use crate::graph::Param;

/// `lr_min + ½ (lr_max − lr_min)(1 + cos(π · step / total_steps))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if step > total_steps {
        return Err(NumericsError::StepOutOfRange {
            step,
            total: total_steps,
        });
    }
    if lr_min > lr_max {
        return Err(NumericsError::Hyperparameter {
            name: "lr_min",
            value: lr_min,
        });
    }
    if total_steps == 0 {
        return Ok(lr_max);
    }
    let progress = step as f64 / total_steps as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Length of the cosine schedule in optimizer steps.
    pub total_steps: usize,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr_max: 1e-3,
            lr_min: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            total_steps: 1,
        }
    }
}

impl AdamWConfig {
    fn validate(&self) -> Result<()> {
        let checks = [
            ("lr_max", self.lr_max, self.lr_max > 0.0),
            ("lr_min", self.lr_min, self.lr_min >= 0.0 && self.lr_min <= self.lr_max),
            ("beta1", self.beta1, self.beta1 > 0.0 && self.beta1 < 1.0),
            ("beta2", self.beta2, self.beta2 > 0.0 && self.beta2 < 1.0),
            ("eps", self.eps, self.eps > 0.0),
            ("weight_decay", self.weight_decay, self.weight_decay >= 0.0),
        ];
        for (name, value, ok) in checks {
            if !ok || !value.is_finite() {
                return Err(NumericsError::Hyperparameter { name, value });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Optimizer state: one moment pair per parameter, in the order the
/// parameters are passed to [`AdamW::step`].
#[derive(Clone, Debug)]
pub struct AdamW {
    config: AdamWConfig,
    step: usize,
    moments: Vec<Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        Ok(AdamW {
            config,
            step: 0,
            moments: Vec::new(),
        })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Learning rate the next call to [`AdamW::step`] will use.
    pub fn current_lr(&self) -> Result<f64> {
        cosine_lr(self.step, self.config.total_steps, self.config.lr_max, self.config.lr_min)
    }

    /// Applies one update from the gradients stored in each parameter.
    /// Parameters without a gradient are left untouched. If any gradient is
    /// non-finite nothing is modified. Returns the learning rate used.
    pub fn step(&mut self, params: &mut [&mut Param]) -> Result<f64> {
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| Moments {
                    first: vec![0.0; p.value.numel()],
                    second: vec![0.0; p.value.numel()],
                })
                .collect();
        }
        if self.moments.len() != params.len() {
            return Err(NumericsError::Dimension {
                op: "adamw_step",
                detail: format!("state tracks {} parameters, got {}", self.moments.len(), params.len()),
            });
        }
        for (p, m) in params.iter().zip(&self.moments) {
            if m.first.len() != p.value.numel() {
                return Err(NumericsError::Dimension {
                    op: "adamw_step",
                    detail: format!("moment size {} does not match parameter {}", m.first.len(), p.name()),
                });
            }
            if let Some(g) = &p.grad {
                if g.shape() != p.value.shape() {
                    return Err(NumericsError::ShapeMismatch {
                        op: "adamw_step",
                        lhs: p.value.shape().to_vec(),
                        rhs: g.shape().to_vec(),
                    });
                }
                if !g.is_finite() {
                    return Err(NumericsError::NonFiniteGradient {
                        name: p.name().to_string(),
                    });
                }
            }
        }

        let lr = self.current_lr()?;
        let c = self.config;
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (p, m) in params.iter_mut().zip(&mut self.moments) {
            let Some(g) = p.grad.take() else { continue };
            let w = p.value.data_mut();
            for i in 0..w.len() {
                let gi = g.data()[i];
                m.first[i] = c.beta1 * m.first[i] + (1.0 - c.beta1) * gi;
                m.second[i] = c.beta2 * m.second[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = m.first[i] / bc1;
                let vhat = m.second[i] / bc2;
                w[i] -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * w[i]);
            }
            p.grad = Some(g);
        }
        self.step += 1;
        Ok(lr)
    }
}

/// Global L2 norm of all stored gradients.
pub fn grad_norm(params: &[&mut Param]) -> f64 {
    params
        .iter()
        .filter_map(|p| p.grad.as_ref())
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut [&mut Param], max_norm: f64) -> f64 {
    let norm = grad_norm(params);
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for p in params.iter_mut() {
            if let Some(g) = &mut p.grad {
                for v in g.data_mut() {
                    *v *= s;
                }
            }
        }
    }
    norm
}

pub fn zero_grads(params: &mut [&mut Param]) {
    for p in params.iter_mut() {
        p.zero_grad();
    }
}
