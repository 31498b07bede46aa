//! Skip-connected two-layer MLP tower.
//!
//! Maps a d-dimensional embedding to an updated d-dimensional embedding:
//!
//! ```text
//! x' = b2 + W2^T gelu(b1 + W1^T x)
//! out = sigmoid(w_skip) * x' + (1 - sigmoid(w_skip)) * x
//! ```
//!
//! with `W1: d x 2d`, `b1: 2d`, `W2: 2d x d`, `b2: d` and a scalar skip
//! gate. `w_skip` starts at -5, so a fresh tower is close to the identity
//! map and training moves it away from the frozen base embeddings only as
//! far as the observed scores demand. gelu is the exact erf-based variant.

use crate::error::{Error, Result};
use crate::rng::{self, ChaCha8Rng};
use serde::{Deserialize, Serialize};

pub const W_SKIP_INIT: f64 = -5.0;

/// Exact gelu: `z * Phi(z)`.
pub fn gelu(z: f64) -> f64 {
    0.5 * z * (1.0 + libm::erf(z / std::f64::consts::SQRT_2))
}

/// Derivative of gelu: `Phi(z) + z * phi(z)`.
pub fn gelu_grad(z: f64) -> f64 {
    let phi_cdf = 0.5 * (1.0 + libm::erf(z / std::f64::consts::SQRT_2));
    let phi_pdf = libm::exp(-0.5 * z * z) / (2.0 * std::f64::consts::PI).sqrt();
    phi_cdf + z * phi_pdf
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + libm::exp(-t))
    } else {
        let e = libm::exp(t);
        e / (1.0 + e)
    }
}

/// Tower parameters, stored row-major (`w1[i * 2d + j]`, `w2[j * d + o]`).
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct MlpTowerParams {
    pub dim: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub w_skip: f64,
}

impl MlpTowerParams {
    /// Fan-in uniform init, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` per layer,
    /// skip gate at [`W_SKIP_INIT`].
    pub fn init(dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidSpec("tower dim must be positive".into()));
        }
        let hidden = 2 * dim;
        let bound1 = 1.0 / (dim as f64).sqrt();
        let bound2 = 1.0 / (hidden as f64).sqrt();
        let mut draw =
            |n: usize, b: f64| -> Vec<f64> { (0..n).map(|_| rng::uniform(rng, -b, b)).collect() };
        Ok(Self {
            dim,
            w1: draw(dim * hidden, bound1),
            b1: draw(hidden, bound1),
            w2: draw(hidden * dim, bound2),
            b2: draw(dim, bound2),
            w_skip: W_SKIP_INIT,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim;
        let h = 2 * d;
        if d == 0 {
            return Err(Error::InvalidSpec("tower dim must be positive".into()));
        }
        if self.w1.len() != d * h
            || self.b1.len() != h
            || self.w2.len() != h * d
            || self.b2.len() != d
        {
            return Err(Error::DimensionMismatch(format!(
                "tower tensor sizes inconsistent with dim {d}"
            )));
        }
        let all_finite = self.w_skip.is_finite()
            && self
                .w1
                .iter()
                .chain(&self.b1)
                .chain(&self.w2)
                .chain(&self.b2)
                .all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::InvalidMatrix("non-finite tower parameter".into()));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x)?.0)
    }

    /// Forward pass keeping the intermediates needed by [`Self::backward`].
    pub fn forward_cached(&self, x: &[f64]) -> Result<(Vec<f64>, MlpCache)> {
        let d = self.dim;
        if x.len() != d {
            return Err(Error::DimensionMismatch(format!(
                "input length {} for tower dim {d}",
                x.len()
            )));
        }
        let h = 2 * d;
        let mut pre = self.b1.clone();
        for (i, &xi) in x.iter().enumerate() {
            let row = &self.w1[i * h..(i + 1) * h];
            for j in 0..h {
                pre[j] += xi * row[j];
            }
        }
        let act: Vec<f64> = pre.iter().map(|&z| gelu(z)).collect();
        let mut inner = self.b2.clone();
        for (j, &aj) in act.iter().enumerate() {
            let row = &self.w2[j * d..(j + 1) * d];
            for o in 0..d {
                inner[o] += aj * row[o];
            }
        }
        let gate = sigmoid(self.w_skip);
        let out: Vec<f64> = (0..d)
            .map(|o| gate * inner[o] + (1.0 - gate) * x[o])
            .collect();
        Ok((
            out,
            MlpCache {
                pre,
                act,
                inner,
                gate,
            },
        ))
    }

    /// Gradients of a scalar loss w.r.t. all parameters and the input,
    /// given `grad_out = dL/d out` and the forward cache for `x`.
    pub fn backward(&self, x: &[f64], cache: &MlpCache, grad_out: &[f64]) -> (MlpGrads, Vec<f64>) {
        let d = self.dim;
        let h = 2 * d;
        debug_assert_eq!(x.len(), d);
        debug_assert_eq!(grad_out.len(), d);

        let gate = cache.gate;
        let dgate = gate * (1.0 - gate);
        let mut grads = MlpGrads::zeros(d);

        grads.w_skip = (0..d)
            .map(|o| grad_out[o] * (cache.inner[o] - x[o]))
            .sum::<f64>()
            * dgate;

        // through the inner branch
        let g_inner: Vec<f64> = grad_out.iter().map(|&g| g * gate).collect();
        grads.b2.copy_from_slice(&g_inner);
        let mut g_act = vec![0.0; h];
        for (j, g_act_j) in g_act.iter_mut().enumerate() {
            let row = &self.w2[j * d..(j + 1) * d];
            let aj = cache.act[j];
            let mut acc = 0.0;
            for o in 0..d {
                grads.w2[j * d + o] = aj * g_inner[o];
                acc += row[o] * g_inner[o];
            }
            *g_act_j = acc;
        }
        let g_pre: Vec<f64> = (0..h).map(|j| g_act[j] * gelu_grad(cache.pre[j])).collect();
        grads.b1.copy_from_slice(&g_pre);

        let mut grad_x = vec![0.0; d];
        for i in 0..d {
            let row = &self.w1[i * h..(i + 1) * h];
            let mut acc = 0.0;
            for j in 0..h {
                grads.w1[i * h + j] = x[i] * g_pre[j];
                acc += row[j] * g_pre[j];
            }
            grad_x[i] = (1.0 - gate) * grad_out[i] + acc;
        }
        (grads, grad_x)
    }
}

/// Intermediates of one forward pass.
pub struct MlpCache {
    pub pre: Vec<f64>,
    pub act: Vec<f64>,
    pub inner: Vec<f64>,
    pub gate: f64,
}

/// Parameter gradients, same shapes as [`MlpTowerParams`].
#[derive(Clone, Debug)]
pub struct MlpGrads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub w_skip: f64,
}

impl MlpGrads {
    pub fn zeros(dim: usize) -> Self {
        let h = 2 * dim;
        Self {
            w1: vec![0.0; dim * h],
            b1: vec![0.0; h],
            w2: vec![0.0; h * dim],
            b2: vec![0.0; dim],
            w_skip: 0.0,
        }
    }

    pub fn add(&mut self, other: &MlpGrads) {
        for (a, b) in self.w1.iter_mut().zip(&other.w1) {
            *a += b;
        }
        for (a, b) in self.b1.iter_mut().zip(&other.b1) {
            *a += b;
        }
        for (a, b) in self.w2.iter_mut().zip(&other.w2) {
            *a += b;
        }
        for (a, b) in self.b2.iter_mut().zip(&other.b2) {
            *a += b;
        }
        self.w_skip += other.w_skip;
    }
}
