//! Learning-rate schedule and the Adam optimizer.

use std::f64::consts::PI;

use ndarray::{Array2, Zip};

use super::TrainConfig;
use crate::model::{ModelParams, ParamGrads};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Linear warm-up from 0 to `lr_max` over the first `warmup_fraction` of
/// `total_steps`, then cosine decay to `lr_min` at `total_steps`.
pub fn lr_at(step: u64, total_steps: u64, cfg: &TrainConfig) -> f64 {
    let step = step.min(total_steps) as f64;
    let total = total_steps as f64;
    let warm = cfg.warmup_fraction * total;
    if step < warm {
        return cfg.lr_max * step / warm;
    }
    let span = total - warm;
    if span <= 0.0 {
        return cfg.lr_min;
    }
    let progress = (step - warm) / span;
    cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + (PI * progress).cos())
}

/// First and second moment estimates, one pair per parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl Adam {
    pub fn new(params: &ModelParams) -> Self {
        let zeros = || params.tensors().iter().map(|p| Array2::zeros(p.raw_dim())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn update(&mut self, params: &mut ModelParams, grads: &ParamGrads, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        let tensors = params.tensors_mut().iter_mut();
        for (((p, g), m), v) in tensors.zip(grads.tensors()).zip(&mut self.m).zip(&mut self.v) {
            Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
            });
        }
    }
}
