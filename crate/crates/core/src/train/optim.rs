//! Learning-rate schedule, global-norm clipping and AdamW.

use crate::autodiff::Tensor;
use crate::encoder::Parameters;
use crate::error::{Error, Result};

/// Linear ramp `0 → lr` over `[0, warmup]`, then linear decay to 0 at
/// `total`; 0 afterwards.
pub fn lr_at(step: u64, lr: f64, warmup: u64, total: u64) -> f64 {
    if step >= total {
        return 0.0;
    }
    if step <= warmup {
        if warmup == 0 {
            return lr;
        }
        return lr * step as f64 / warmup as f64;
    }
    lr * (total - step) as f64 / (total - warmup) as f64
}

/// Global L2 norm over every present gradient.
pub fn global_norm(grads: &[Option<Tensor>]) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales every gradient so the global norm is at most `max_norm`.
/// Returns `(norm before clipping, applied scale)`.
pub fn clip_grad_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> (f64, f64) {
    let norm = global_norm(grads);
    if !(norm > max_norm) {
        return (norm, 1.0);
    }
    let scale = max_norm / norm;
    for g in grads.iter_mut().flatten() {
        g.data_mut().iter_mut().for_each(|v| *v *= scale);
    }
    (norm, scale)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment accumulators; `None` for frozen tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub t: u64,
    pub m: Vec<Option<Tensor>>,
    pub v: Vec<Option<Tensor>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &Parameters) -> Self {
        let zeros = |i: usize, t: &Tensor| (!params.is_frozen(i)).then(|| Tensor::zeros(t.shape()));
        let m: Vec<_> = params.tensors().iter().enumerate().map(|(i, t)| zeros(i, t)).collect();
        AdamW {
            config,
            t: 0,
            v: m.clone(),
            m,
        }
    }

    /// One decoupled-weight-decay update; tensors without state or gradient
    /// are left untouched.
    pub fn step(&mut self, params: &mut Parameters, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.t += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        let tensors = params.tensors_mut();
        for i in 0..tensors.len() {
            let (Some(m), Some(v)) = (self.m[i].as_mut(), self.v[i].as_mut()) else {
                continue;
            };
            let Some(g) = &grads[i] else {
                continue;
            };
            let theta = tensors[i].data_mut();
            for (((p, m), v), &g) in theta
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps) - lr * weight_decay * *p;
            }
        }
        Ok(())
    }
}
