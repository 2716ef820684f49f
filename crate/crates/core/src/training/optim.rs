use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Added as `l2 * theta` to the gradient of every decayed tensor.
    pub l2: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            l2: 0.0,
        }
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        Self {
            m: params.iter().map(|t| vec![0.0; t.len()]).collect(),
            v: params.iter().map(|t| vec![0.0; t.len()]).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update.
///
/// `decay[i]` selects which tensors receive the L2 term.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    decay: &[bool],
    state: &mut AdamState,
    cfg: &AdamConfig,
) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, (theta, g)) in params.iter_mut().zip(grads).enumerate() {
        let l2 = if decay[i] { cfg.l2 } else { 0.0 };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (k, (th, &gk)) in theta.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gk = gk + l2 * *th;
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            *th -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}
