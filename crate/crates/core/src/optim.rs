//! ADAM in the ascent direction, with optional global-norm gradient clipping.

use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

use crate::autodiff::{Gradients, Params, Tensor};
use crate::math::sqrt;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimError {
    #[error("non-finite gradient in parameter block `{block}`")]
    NonFiniteGradient { block: String },
    #[error("gradient shapes do not match parameter block `{block}`")]
    ShapeMismatch { block: String },
    #[error("invalid ADAM hyper-parameter: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Rescale the full gradient to at most this global L2 norm before the update.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: Some(10.0),
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        if !(self.learning_rate > 0.0) {
            return Err(OptimError::InvalidConfig("learning rate must be positive"));
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return Err(OptimError::InvalidConfig("decay rates must lie in (0, 1)"));
        }
        if !(self.epsilon > 0.0) {
            return Err(OptimError::InvalidConfig("epsilon must be positive"));
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return Err(OptimError::InvalidConfig("clip norm must be positive"));
        }
        Ok(())
    }
}

/// Moment accumulators for one [`Params`] store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &Params, config: AdamConfig) -> Result<Self, OptimError> {
        config.validate()?;
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Ok(Self {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.second
    }

    /// One bias-corrected update `p ← p + η m̂ / (√v̂ + ε)`. Returns the gradient
    /// norm before clipping. Nothing is modified on error.
    pub fn step(&mut self, params: &mut Params, grads: &Gradients) -> Result<f64, OptimError> {
        for (i, (p, g)) in params.tensors().iter().zip(grads.tensors()).enumerate() {
            let block = || String::from(params.names()[i].as_str());
            if p.shape() != g.shape() || self.first[i].shape() != p.shape() {
                return Err(OptimError::ShapeMismatch { block: block() });
            }
            if !g.is_finite() {
                return Err(OptimError::NonFiniteGradient { block: block() });
            }
        }
        if grads.tensors().len() != params.len() {
            return Err(OptimError::ShapeMismatch {
                block: String::from("<count>"),
            });
        }
        let norm = grads.global_norm();
        let scale = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            ..
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - crate::math::powi(beta1, t);
        let bc2 = 1.0 - crate::math::powi(beta2, t);
        for ((p, g), (m, v)) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads.tensors())
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gv = gv * scale;
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv += learning_rate * m_hat / (sqrt(v_hat) + epsilon);
            }
        }
        Ok(norm)
    }
}
