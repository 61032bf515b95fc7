//! Adam and a one-cycle learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: ModelParams,
    v: ModelParams,
}

impl Adam {
    pub fn new(like: &ModelParams) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: like.zeros_like(),
            v: like.zeros_like(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::Numerical("non-finite gradient".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let ps = params.slices_mut();
        let gs = grads.slices();
        let ms = self.m.slices_mut();
        let vs = self.v.slices_mut();
        for (((p, g), m), v) in ps.into_iter().zip(gs).zip(ms).zip(vs) {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Linear warm-up from `initial` to `peak` over `warmup` steps, then cosine
/// annealing to `final_lr` at `total` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OneCycle {
    pub total: usize,
    pub warmup: usize,
    pub initial: f64,
    pub peak: f64,
    pub final_lr: f64,
}

impl OneCycle {
    pub fn new(total: usize, warmup: usize, initial: f64, peak: f64, final_lr: f64) -> Result<Self> {
        if total == 0 || warmup >= total {
            return Err(Error::Config(format!(
                "one-cycle warm-up {warmup} must be below the {total} total steps"
            )));
        }
        if !(initial > 0.0 && initial <= peak && final_lr > 0.0 && final_lr <= initial) {
            return Err(Error::Config(
                "one-cycle rates must satisfy 0 < final <= initial <= peak".into(),
            ));
        }
        Ok(OneCycle {
            total,
            warmup,
            initial,
            peak,
            final_lr,
        })
    }

    /// Rate for zero-based step `step`.
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            let f = step as f64 / self.warmup as f64;
            self.initial + f * (self.peak - self.initial)
        } else {
            let span = (self.total - 1 - self.warmup).max(1) as f64;
            let f = ((step - self.warmup) as f64 / span).min(1.0);
            self.final_lr + 0.5 * (self.peak - self.final_lr) * (1.0 + (std::f64::consts::PI * f).cos())
        }
    }
}
