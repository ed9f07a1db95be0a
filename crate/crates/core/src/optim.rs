use diffcore::{Tensor, TensorMap};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Cosine annealing from `lr_start` at step 0 to `lr_end` at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_start: f64, lr_end: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::Range(format!("step {step} outside schedule of {total_steps} steps")));
    }
    let progress = step as f64 / total_steps as f64;
    Ok(lr_end + 0.5 * (lr_start - lr_end) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam moments for one parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub config: AdamConfig,
    pub first: TensorMap,
    pub second: TensorMap,
    pub step: u64,
}

impl OptState {
    pub fn new(params: &TensorMap, config: AdamConfig) -> Self {
        let zeros: TensorMap = params.iter().map(|(n, t)| (n, Tensor::zeros(t.shape().to_vec()))).collect();
        Self { config, first: zeros.clone(), second: zeros, step: 0 }
    }
}

/// One bias-corrected Adam update. Parameters without a gradient entry are
/// treated as having zero gradient.
pub fn adam_step(params: &mut TensorMap, grads: &TensorMap, state: &mut OptState, lr: f64) -> Result<()> {
    for (name, g) in grads.iter() {
        match params.get(name) {
            Some(p) if p.shape() == g.shape() => {}
            Some(p) => {
                return Err(Error::Shape(format!("gradient {name} {:?} vs parameter {:?}", g.shape(), p.shape())));
            }
            None => return Err(Error::Shape(format!("gradient for unknown parameter {name}"))),
        }
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let c1 = 1.0 - beta1.powi(state.step as i32);
    let c2 = 1.0 - beta2.powi(state.step as i32);
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for name in names {
        let g = grads.get(&name);
        let m = state.first.get_mut(&name).ok_or_else(|| Error::Invariant(format!("no moment for {name}")))?;
        let m = m.data_mut();
        let v = state.second.get_mut(&name).expect("moments share names").data_mut();
        let p = params.get_mut(&name).expect("name from params").data_mut();
        for i in 0..p.len() {
            let gi = g.map_or(0.0, |g| g.data()[i]);
            m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
            v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
