//! First-order optimizers for the factorization trainers.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum OptimizerKind {
    Sgd,
    AdamW {
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
}

impl OptimizerKind {
    /// AdamW with the usual moment parameters and no weight decay.
    pub fn default_adamw() -> Self {
        OptimizerKind::AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Per-tensor optimizer state (first/second moments and step count).
#[derive(Clone, Debug)]
pub struct OptimState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl OptimState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
}

impl Optimizer {
    /// Update a dense tensor.
    pub fn step_dense(&self, state: &mut OptimState, param: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(param.len(), grad.len());
        state.t += 1;
        let len = param.len();
        self.apply_range(state, param, grad, 0, len);
    }

    /// Update selected rows of a `rows x dim` tensor (lazy per-row variant:
    /// moments of untouched rows stay frozen). `touched` lists row indices;
    /// `grad` is a dense buffer but only touched rows are read.
    pub fn step_rows(
        &self,
        state: &mut OptimState,
        param: &mut [f64],
        grad: &[f64],
        touched: &[usize],
        dim: usize,
    ) {
        state.t += 1;
        for &r in touched {
            let lo = r * dim;
            let hi = lo + dim;
            self.apply_range(state, param, grad, lo, hi);
        }
    }

    fn apply_range(
        &self,
        state: &mut OptimState,
        param: &mut [f64],
        grad: &[f64],
        lo: usize,
        hi: usize,
    ) {
        match self.kind {
            OptimizerKind::Sgd => {
                for k in lo..hi {
                    param[k] -= self.lr * grad[k];
                }
            }
            OptimizerKind::AdamW {
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                let t = state.t as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                for k in lo..hi {
                    let g = grad[k];
                    state.m[k] = beta1 * state.m[k] + (1.0 - beta1) * g;
                    state.v[k] = beta2 * state.v[k] + (1.0 - beta2) * g * g;
                    let m_hat = state.m[k] / bc1;
                    let v_hat = state.v[k] / bc2;
                    param[k] -= self.lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * param[k]);
                }
            }
        }
    }
}
