//! Parameter update rules. Adam is the default instantiation of the
//! descent step; plain gradient descent stays available behind a config
//! flag.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// First/second moment accumulators aligned with one flat parameter vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    pub skipped: u64,
}

impl AdamState {
    pub fn new(param_count: usize) -> Self {
        Self {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            step: 0,
            skipped: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update with bias correction. Non-finite gradients skip the
/// update and are counted instead of poisoning the moments.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    if grads.iter().any(|g| !g.is_finite()) {
        state.skipped += 1;
        return;
    }
    state.step += 1;
    let t = state.step as i32;
    let corr1 = 1.0 - BETA1.powi(t);
    let corr2 = 1.0 - BETA2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = BETA1 * state.m[i] + (1.0 - BETA1) * g;
        state.v[i] = BETA2 * state.v[i] + (1.0 - BETA2) * g * g;
        let m_hat = state.m[i] / corr1;
        let v_hat = state.v[i] / corr2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + EPS);
    }
}

/// Plain descent with the same non-finite guard.
pub fn sgd_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) {
    assert_eq!(params.len(), grads.len());
    if grads.iter().any(|g| !g.is_finite()) {
        state.skipped += 1;
        return;
    }
    state.step += 1;
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
}
