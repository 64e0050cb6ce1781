//! AdamW with bias correction, global-norm clipping, and the
//! linear-warmup / inverse-sqrt-decay schedule.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::tape::Gradients;
use crate::tensor::Param;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct StepReport {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Norm actually applied after clipping.
    pub clipped_norm: f64,
}

/// Adam optimizer over an ordered parameter list. Parameters that receive no
/// gradient in a step (their loss branch was disabled) are left untouched:
/// no moment update and no weight decay.
pub struct Adam<E: Elem> {
    params: Vec<Arc<Param<E>>>,
    cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl<E: Elem> Adam<E> {
    pub fn new(params: Vec<Arc<Param<E>>>, cfg: AdamConfig) -> Self {
        let m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Self {
            params,
            cfg,
            step: 0,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn params(&self) -> &[Arc<Param<E>>] {
        &self.params
    }

    /// One update over all parameters with gradients present.
    pub fn step(&mut self, lr: f64, grads: &Gradients<E>) -> Result<StepReport> {
        // global norm over this optimizer's parameters only
        let mut sq = 0.0f64;
        for p in &self.params {
            if let Some(g) = grads.of(p) {
                for &x in g {
                    sq += x.to_f64() * x.to_f64();
                }
            }
        }
        let norm = sq.sqrt();
        let scale = match self.cfg.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let clipped_norm = norm * scale;
        if !clipped_norm.is_finite() {
            return Err(Error::Divergence {
                step: self.step + 1,
                loss: clipped_norm,
            });
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for (i, p) in self.params.iter().enumerate() {
            let Some(g) = grads.of(p) else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
            let (eps, wd) = (self.cfg.eps, self.cfg.weight_decay);
            p.update(|data| {
                for j in 0..data.len() {
                    let gj = g[j].to_f64() * scale;
                    m[j] = b1 * m[j] + (1.0 - b1) * gj;
                    v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                    let mhat = m[j] / bc1;
                    let vhat = v[j] / bc2;
                    let x = data[j].to_f64();
                    let updated = x - lr * (mhat / (vhat.sqrt() + eps)) - lr * wd * x;
                    data[j] = E::from_f64(updated);
                }
            });
        }
        Ok(StepReport {
            grad_norm: norm,
            clipped_norm,
        })
    }

    /// Moment tensors for checkpointing, flattened per parameter.
    pub fn export_moments(&self) -> BTreeMap<String, (Vec<usize>, Vec<E>)> {
        let mut out = BTreeMap::new();
        for (i, p) in self.params.iter().enumerate() {
            out.insert(
                format!("opt.m.{}", p.name()),
                (p.shape().to_vec(), self.m[i].iter().map(|&x| E::from_f64(x)).collect()),
            );
            out.insert(
                format!("opt.v.{}", p.name()),
                (p.shape().to_vec(), self.v[i].iter().map(|&x| E::from_f64(x)).collect()),
            );
        }
        out
    }

    /// Restore moments saved by `export_moments`.
    pub fn import_moments(&mut self, moments: &BTreeMap<String, (Vec<E>, Vec<E>)>, step: u64) -> Result<()> {
        for (i, p) in self.params.iter().enumerate() {
            let Some((m, v)) = moments.get(p.name()) else {
                return Err(Error::Checkpoint(format!(
                    "optimizer state missing for parameter {}",
                    p.name()
                )));
            };
            if m.len() != p.numel() || v.len() != p.numel() {
                return Err(Error::Checkpoint(format!(
                    "optimizer state size mismatch for {}",
                    p.name()
                )));
            }
            self.m[i] = m.iter().map(|x| x.to_f64()).collect();
            self.v[i] = v.iter().map(|x| x.to_f64()).collect();
        }
        self.step = step;
        Ok(())
    }
}

/// Linear warmup to the peak, then inverse-sqrt decay. Continuous at the
/// warmup boundary. Steps are 1-based.
pub fn lr_at(step: u64, peak: f64, warmup: u64) -> f64 {
    let warmup = warmup.max(1);
    if step <= warmup {
        peak * step as f64 / warmup as f64
    } else {
        peak * ((warmup as f64) / (step as f64)).sqrt()
    }
}
