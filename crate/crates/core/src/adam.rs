//! Bias-corrected Adam.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

/// Optimizer hyperparameters. Defaults follow the usual DCGAN settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first/second moment buffers plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    hp: AdamParams,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    // Running beta powers; multiplying per step avoids powf in no_std.
    beta1_t: f64,
    beta2_t: f64,
}

impl AdamState {
    pub fn new(hp: AdamParams, param_sizes: &[usize]) -> Self {
        AdamState {
            hp,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            beta1_t: 1.0,
            beta2_t: 1.0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn hyperparams(&self) -> AdamParams {
        self.hp
    }

    /// One update over all parameters. `grads[i]` pairs with `params[i]`;
    /// a missing gradient means the parameter was unreachable and is left
    /// untouched by the gradient term (moments still decay).
    ///
    /// Any non-finite gradient aborts before any parameter is modified.
    pub fn step<N: AsRef<str>>(
        &mut self,
        params: &mut [(N, &mut [f64])],
        grads: &[Option<&[f64]>],
    ) -> Result<()> {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                assert_eq!(g.len(), self.m[i].len());
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGrad {
                        param: params[i].0.as_ref().to_string(),
                    });
                }
            }
        }
        self.t += 1;
        self.beta1_t *= self.hp.beta1;
        self.beta2_t *= self.hp.beta2;
        let bc1 = 1.0 - self.beta1_t;
        let bc2 = 1.0 - self.beta2_t;
        for (i, (_, w)) in params.iter_mut().enumerate() {
            let zero = vec![];
            let g = grads[i].unwrap_or(&zero);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for k in 0..w.len() {
                let gk = if g.is_empty() { 0.0 } else { g[k] };
                m[k] = self.hp.beta1 * m[k] + (1.0 - self.hp.beta1) * gk;
                v[k] = self.hp.beta2 * v[k] + (1.0 - self.hp.beta2) * gk * gk;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                w[k] -= self.hp.lr * m_hat / (math::sqrt(v_hat) + self.hp.eps);
            }
        }
        Ok(())
    }
}
