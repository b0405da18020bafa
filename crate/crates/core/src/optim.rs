//! AMSGrad stochastic-gradient optimizer over the flat parameter vector.
//!
//! Updates follow
//!
//! ```text
//! m <- b1 m + (1 - b1) g
//! v <- b2 v + (1 - b2) g^2
//! v_hat <- max(v_hat, v)
//! xi <- xi - eta * m / (sqrt(v_hat) + denom_eps)
//! ```
//!
//! element-wise, with m, v, v_hat zero-initialized and no bias correction.
//! The caller maximizes the IW-ELBO by passing the negated gradient. The
//! `denom_eps` guard is not part of the published update; without it a
//! coordinate whose gradient history is identically zero would divide by
//! zero, so it is kept configurable and defaults to 1e-8.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Paper defaults: eta = 0.01 (0.005 fallback on divergence), b1 = 0.9,
/// b2 = 0.999, mini-batch size 128.
pub mod defaults {
    pub const LEARNING_RATE: f64 = 0.01;
    pub const FALLBACK_LEARNING_RATE: f64 = 0.005;
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const BATCH_SIZE: usize = 128;
    pub const DENOM_EPS: f64 = 1e-8;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmsGradState {
    pub eta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub denom_eps: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub v_hat: Vec<f64>,
}

impl AmsGradState {
    pub fn new(dim: usize, eta: f64, beta1: f64, beta2: f64, denom_eps: f64) -> Self {
        AmsGradState {
            eta,
            beta1,
            beta2,
            denom_eps,
            t: 0,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            v_hat: vec![0.0; dim],
        }
    }

    pub fn with_defaults(dim: usize) -> Self {
        Self::new(
            dim,
            defaults::LEARNING_RATE,
            defaults::BETA1,
            defaults::BETA2,
            defaults::DENOM_EPS,
        )
    }

    /// One descent step in place. `grad` must be finite and the same length
    /// as `params`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer dimension {} does not match params {} / grad {}",
                self.m.len(),
                params.len(),
                grad.len()
            )));
        }
        if let Some(idx) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite gradient at index {idx}"
            )));
        }
        let (b1, b2) = (self.beta1, self.beta2);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            if self.v[i] > self.v_hat[i] {
                self.v_hat[i] = self.v[i];
            }
            params[i] -= self.eta * self.m[i] / (self.v_hat[i].sqrt() + self.denom_eps);
        }
        self.t += 1;
        Ok(())
    }
}
