//! Batch normalisation as a bijection.
//!
//! `y = (u - m) / sqrt(v + ε) * exp(γ) + β`, with `(m, v)` the batch statistics
//! in training mode and the running statistics in evaluation mode. Its
//! log-determinant is `Σ_i (γ_i - ½ log(v_i + ε))`.

use alloc::vec::Vec;

use crate::math::{exp, ln, sqrt};

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    /// Starts at the identity: zero mean and `var + ε = 1`.
    pub fn identity(dim: usize, eps: f64) -> Self {
        Self {
            mean: alloc::vec![0.0; dim],
            var: alloc::vec![1.0 - eps; dim],
        }
    }

    /// Exponential moving average towards a batch's statistics.
    pub fn update(&mut self, batch_mean: &[f64], batch_var: &[f64], momentum: f64) {
        for (r, b) in self.mean.iter_mut().zip(batch_mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in self.var.iter_mut().zip(batch_var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

/// Evaluation-mode layer with every quantity concrete.
#[derive(Debug, Clone, PartialEq)]
pub struct NormLayer {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub shift: Vec<f64>,
    pub log_scale: Vec<f64>,
    pub eps: f64,
}

impl NormLayer {
    pub fn forward(&self, u: &[f64]) -> (Vec<f64>, f64) {
        let mut logdet = 0.0;
        let y = u
            .iter()
            .enumerate()
            .map(|(i, &ui)| {
                let inv_sd = 1.0 / sqrt(self.var[i] + self.eps);
                logdet += self.log_scale[i] + ln(inv_sd);
                (ui - self.mean[i]) * inv_sd * exp(self.log_scale[i]) + self.shift[i]
            })
            .collect();
        (y, logdet)
    }

    pub fn inverse(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .enumerate()
            .map(|(i, &yi)| {
                (yi - self.shift[i]) * exp(-self.log_scale[i]) * sqrt(self.var[i] + self.eps) + self.mean[i]
            })
            .collect()
    }
}
