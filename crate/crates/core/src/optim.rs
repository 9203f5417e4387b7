//! Adam with decoupled weight decay.
//!
//! ```text
//! θ ← θ · (1 − lr · wd)
//! m ← β₁ m + (1 − β₁) g
//! v ← β₂ v + (1 − β₂) g²
//! θ ← θ − lr · (m / (1 − β₁ᵗ)) / (√(v / (1 − β₂ᵗ)) + ε)
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{GcmaeError, Result};
use crate::nn::ParamTree;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Moments are stored per parameter tensor, in the tree's visit order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub names: Vec<String>,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
    pub step: u64,
    pub config: AdamWConfig,
    /// Learning rate for the next step (the schedule writes this).
    pub lr: f64,
}

impl OptimState {
    pub fn new<T: ParamTree>(params: &T, config: AdamWConfig) -> Self {
        let named = params.named();
        Self {
            names: named.iter().map(|(n, _)| n.clone()).collect(),
            first: named.iter().map(|(_, m)| vec![0.0; m.len()]).collect(),
            second: named.iter().map(|(_, m)| vec![0.0; m.len()]).collect(),
            step: 0,
            lr: config.lr,
            config,
        }
    }
}

/// One AdamW step. Gradients are checked for finiteness first; on error
/// nothing is modified and the offending parameter is named.
pub fn optimizer_step<T: ParamTree>(params: &mut T, grads: &T, state: &mut OptimState) -> Result<()> {
    let grad_list = grads.named();
    for (name, g) in &grad_list {
        if !g.all_finite() {
            return Err(GcmaeError::NonFinite(format!("gradient of {name}")));
        }
    }
    if grad_list.len() != state.names.len() {
        return Err(GcmaeError::shape("parameter and gradient trees differ"));
    }

    state.step += 1;
    let t = state.step as i32;
    let c = state.config;
    let lr = state.lr;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let decay = 1.0 - lr * c.weight_decay;

    let mut i = 0;
    let (firsts, seconds) = (&mut state.first, &mut state.second);
    params.visit_mut("", &mut |_, p| {
        let g = grad_list[i].1.as_slice();
        let (m, v) = (&mut firsts[i], &mut seconds[i]);
        assert!(g.len() == p.len() && m.len() == p.len(), "gradient shape mismatch");
        for (((w, gi), mi), vi) in p.as_mut_slice().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *w *= decay;
            *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
            *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + c.eps);
        }
        i += 1;
    });
    Ok(())
}
