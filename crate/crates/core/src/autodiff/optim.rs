use std::sync::atomic::{AtomicBool, Ordering};

use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamStore};
use crate::error::{Error, Result};

/// Hyper-parameters of the decoupled-weight-decay Adam update and its poly schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub power: f64,
    pub max_iter: usize,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            base_lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            power: 0.9,
            max_iter: 10_000,
        }
    }
}

static POLY_OVERRUN_WARNED: AtomicBool = AtomicBool::new(false);

/// `base_lr * (1 - step / max_iter) ^ power`, zero past the end of the schedule.
pub fn poly_lr(step: usize, cfg: &AdamWConfig) -> f64 {
    if step > cfg.max_iter || cfg.max_iter == 0 {
        if !POLY_OVERRUN_WARNED.swap(true, Ordering::Relaxed) {
            log::warn!("poly_lr: step {step} is past max_iter {}, clamping lr to 0", cfg.max_iter);
        }
        return 0.0;
    }
    cfg.base_lr * (1.0 - step as f64 / cfg.max_iter as f64).powf(cfg.power)
}

/// Per-parameter moments plus a global step counter.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: usize,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, store: &ParamStore) -> Self {
        let first = store.ids().map(|id| vec![0.0; store.get(id).numel()]).collect();
        let second = store.ids().map(|id| vec![0.0; store.get(id).numel()]).collect();
        Self {
            cfg,
            first,
            second,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Learning rate the next update will use.
    pub fn current_lr(&self) -> f64 {
        poly_lr(self.step, &self.cfg)
    }

    /// Applies one update at the scheduled learning rate.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        let lr = self.current_lr();
        self.step_with_lr(store, grads, lr)
    }

    /// Applies one update at an explicit learning rate.
    ///
    /// Every gradient is checked before anything is written, so a non-finite
    /// gradient leaves parameters and moments untouched.
    pub fn step_with_lr(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
        let all: Vec<_> = store.ids().map(|id| grads.param(store, id).into_owned()).collect();
        for (id, g) in store.ids().zip(&all) {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericFailure {
                    op: format!("optimizer_step ({})", store.name(id)),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for (slot, id) in ids.into_iter().enumerate() {
            let g = &all[slot];
            let m = &mut self.first[slot];
            let v = &mut self.second[slot];
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                p[i] *= 1.0 - lr * c.weight_decay;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
