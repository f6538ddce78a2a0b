//! AdamW with decoupled weight decay, and the polynomial learning-rate decay
//! schedule.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// AdamW hyperparameters; the learning rate arrives per step from the
/// schedule.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        AdamWParams { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

impl AdamWParams {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if !ok {
            return Err(Error::config(format!("invalid AdamW parameters: {self:?}")));
        }
        Ok(())
    }
}

/// First/second moment buffers mirroring the parameter registry, plus the
/// shared step counter.
#[derive(Debug, Clone)]
pub struct OptimState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimState {
    pub fn new(params: &[Tensor]) -> OptimState {
        OptimState {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step: 0,
        }
    }
}

/// One AdamW step over the registry. Decoupled decay (p -= lr*wd*p) applies
/// before the bias-corrected moment update. A parameter whose gradient entry
/// is `None` is skipped entirely — no decay, no moment update — so parameters
/// unreachable from the loss stay bitwise identical.
pub fn adamw_step(
    params: &mut [Tensor],
    grads: &[Option<Vec<f64>>],
    state: &mut OptimState,
    lr: f64,
    hp: &AdamWParams,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::contract(format!(
            "optimizer arity mismatch: {} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    hp.validate()?;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    for (i, grad) in grads.iter().enumerate() {
        let Some(g) = grad else { continue };
        if g.len() != params[i].numel() {
            return Err(Error::contract(format!(
                "gradient length {} does not match parameter {} ({} values)",
                g.len(),
                i,
                params[i].numel()
            )));
        }
        let mut data = params[i].data().to_vec();
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for j in 0..data.len() {
            data[j] -= lr * hp.weight_decay * data[j];
            m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * g[j];
            v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            data[j] -= lr * m_hat / (v_hat.sqrt() + hp.eps);
        }
        params[i] = Tensor::param(params[i].shape(), data)?;
    }
    Ok(())
}

/// base_lr * (1 - iter/max_iter)^power, clamped to 0 past the end.
pub fn poly_lr(iter: usize, max_iter: usize, base_lr: f64, power: f64) -> f64 {
    if iter >= max_iter {
        return 0.0;
    }
    base_lr * (1.0 - iter as f64 / max_iter as f64).powf(power)
}
