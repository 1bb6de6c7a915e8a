//! Adam and the warmup + cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::NnError;

pub const ADAM_BETA1: f32 = 0.9;
pub const ADAM_BETA2: f32 = 0.999;
pub const ADAM_EPS: f32 = 1e-8;

/// First/second moments per parameter and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> AdamState {
        let zeros = || params.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
        AdamState { m: zeros(), v: zeros(), t: 0 }
    }
}

/// One bias-corrected Adam update without weight decay. Frozen parameters
/// keep their values and moments.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState, lr: f32) {
    state.t += 1;
    let bc1 = 1.0 - (ADAM_BETA1 as f64).powi(state.t as i32);
    let bc2 = 1.0 - (ADAM_BETA2 as f64).powi(state.t as i32);
    let step = (lr as f64 / bc1) as f32;
    let inv_sqrt_bc2 = (1.0 / bc2.sqrt()) as f32;
    for ((p, m), v) in params.params_mut().iter_mut().zip(&mut state.m).zip(&mut state.v) {
        if !p.trainable {
            continue;
        }
        let grad = p.grad.data();
        let value = p.value.data_mut();
        for i in 0..value.len() {
            let g = grad[i];
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
            value[i] -= step * m[i] / (v[i].sqrt() * inv_sqrt_bc2 + ADAM_EPS);
        }
    }
}

/// Linear warmup from 0 to `base_lr`, then cosine decay to 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub steps_per_epoch: usize,
}

impl LrSchedule {
    pub fn new(base_lr: f64, warmup_epochs: usize, total_epochs: usize, steps_per_epoch: usize) -> Result<LrSchedule, NnError> {
        if warmup_epochs == 0 || warmup_epochs >= total_epochs || steps_per_epoch == 0 {
            return Err(NnError::InvalidSchedule(format!(
                "need 0 < warmup ({warmup_epochs}) < total ({total_epochs}) epochs and a positive step count"
            )));
        }
        Ok(LrSchedule { base_lr, warmup_epochs, total_epochs, steps_per_epoch })
    }

    pub fn total_steps(&self) -> usize {
        self.total_epochs * self.steps_per_epoch
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup_epochs * self.steps_per_epoch
    }
}

pub fn lr_at(schedule: &LrSchedule, step: usize) -> Result<f64, NnError> {
    let total = schedule.total_steps();
    if step > total {
        return Err(NnError::StepOutOfRange { step, total });
    }
    let warm = schedule.warmup_steps();
    if step < warm {
        return Ok(schedule.base_lr * step as f64 / warm as f64);
    }
    let progress = (step - warm) as f64 / (total - warm) as f64;
    Ok(schedule.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}
