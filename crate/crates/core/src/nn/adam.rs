use super::ParamSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamConfig {
    pub fn with_lr(lr: f32) -> Self {
        AdamConfig { lr, ..Default::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam moments for one parameter set.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: ParamSet,
    v: ParamSet,
}

impl AdamState {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        AdamState { config, step: 0, m: params.zeros_like(), v: params.zeros_like() }
    }

    pub fn first_moment(&self) -> &ParamSet {
        &self.m
    }

    pub fn second_moment(&self) -> &ParamSet {
        &self.v
    }
}

pub fn adam_step(params: &mut ParamSet, grads: &ParamSet, state: &mut AdamState) -> Result<()> {
    params.check_same_structure(grads)?;
    params.check_same_structure(&state.m)?;
    let cfg = state.config.clone();
    if !(cfg.lr > 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate must be > 0, got {}", cfg.lr)));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - (cfg.beta1 as f64).powi(t);
    let bc2 = 1.0 - (cfg.beta2 as f64).powi(t);
    let moments = state.m.iter_mut().zip(state.v.iter_mut());
    for (((_, p), (_, g)), ((_, m), (_, v))) in params.iter_mut().zip(grads.iter()).zip(moments) {
        let p = p.data_mut();
        let (m, v) = (m.data_mut(), v.data_mut());
        for (j, &gj) in g.data().iter().enumerate() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let mhat = m[j] as f64 / bc1;
            let vhat = v[j] as f64 / bc2;
            p[j] -= (cfg.lr as f64 * mhat / (vhat.sqrt() + cfg.eps as f64)) as f32;
        }
    }
    Ok(())
}

/// Rescales `grads` so their global norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut ParamSet, max_norm: f32) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm as f64 && norm > 0.0 {
        grads.scale((max_norm as f64 / norm) as f32);
    }
    norm
}
