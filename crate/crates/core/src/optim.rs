//! AdamW with decoupled weight decay and the linear-warmup cosine schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment accumulators mirroring the parameter list, plus the step count.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub config: AdamWConfig,
}

impl OptimState {
    pub fn new(params: &[&Tensor], config: AdamWConfig) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            config,
        }
    }
}

/// One AdamW update at learning rate `lr`.
///
/// Weight decay is applied directly to the weights (`θ ← θ − lr·λ·θ`) before
/// the bias-corrected Adam step.
pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut OptimState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adamw: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::Shape(format!(
                "adamw: param {i} shape {:?}, grad {:?}, state {:?}",
                p.shape(),
                g.shape(),
                state.m[i].shape()
            )));
        }
    }

    state.step += 1;
    let AdamWConfig {
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    let decay = 1.0 - lr * weight_decay;

    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let pd = p.data_mut();
        for (((w, &gi), mi), vi) in pd
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let gi = gi as f64;
            let m_new = beta1 * *mi as f64 + (1.0 - beta1) * gi;
            let v_new = beta2 * *vi as f64 + (1.0 - beta2) * gi * gi;
            *mi = m_new as f32;
            *vi = v_new as f32;
            let m_hat = m_new / bc1;
            let v_hat = v_new / bc2;
            let w_new = *w as f64 * decay - lr * m_hat / (v_hat.sqrt() + eps);
            *w = w_new as f32;
        }
    }
    Ok(())
}

/// Learning rate at `step` of a `total`-step run: linear ramp from 0 to
/// `base_lr` over the first `warmup` steps, then a half-cosine down to 0 at
/// `total`.
pub fn cosine_warmup_lr(step: u64, warmup: u64, total: u64, base_lr: f64) -> Result<f64> {
    if step > total {
        return Err(Error::Domain(format!(
            "step {step} beyond schedule horizon {total}"
        )));
    }
    if warmup > total {
        return Err(Error::Domain(format!(
            "warmup {warmup} longer than schedule horizon {total}"
        )));
    }
    if step < warmup {
        return Ok(base_lr * step as f64 / warmup as f64);
    }
    if total == warmup {
        return Ok(base_lr);
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    Ok((base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())).max(0.0))
}
