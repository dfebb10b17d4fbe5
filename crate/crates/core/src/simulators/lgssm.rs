//! Scalar linear-Gaussian state-space model. It never fails and admits exact
//! evidence through the Kalman recursion, so it serves as the SMC oracle.

use alloc::vec;
use alloc::vec::Vec;

use rand_core::RngCore;

use super::{check_input, Model, SimError, SimOutcome, StateVec};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct LgssmConfig {
    /// Transition coefficient.
    pub a: f64,
    /// Transition (perturbation) standard deviation.
    pub sigma_trans: f64,
    pub sigma_obs: f64,
    pub prior_mean: f64,
    /// Standard deviation of `x_0`; zero pins the initial state.
    pub prior_sd: f64,
}

impl Default for LgssmConfig {
    fn default() -> Self {
        Self {
            a: 0.9,
            sigma_trans: 0.3,
            sigma_obs: 0.5,
            prior_mean: 0.0,
            prior_sd: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lgssm {
    pub config: LgssmConfig,
    coords: Vec<usize>,
}

impl Lgssm {
    pub fn new(config: LgssmConfig) -> Result<Self, SimError> {
        if !(config.sigma_trans > 0.0 && config.sigma_obs > 0.0 && config.prior_sd >= 0.0)
            || !config.a.is_finite()
            || !config.prior_mean.is_finite()
        {
            return Err(SimError::Config("LGSSM scales must be positive and finite"));
        }
        Ok(Self {
            config,
            coords: vec![0],
        })
    }
}

impl Model for Lgssm {
    fn state_dim(&self) -> usize {
        1
    }

    fn step(&self, x: &[f64]) -> Result<SimOutcome, SimError> {
        check_input(x, 1)?;
        Ok(SimOutcome::Next(StateVec(vec![self.config.a * x[0]])))
    }

    fn perturbed(&self) -> &[usize] {
        &self.coords
    }

    fn perturbation_scales(&self) -> Vec<f64> {
        vec![self.config.sigma_trans]
    }

    fn sample_initial(&self, rng: &mut dyn RngCore) -> StateVec {
        let c = &self.config;
        StateVec(vec![c.prior_mean + c.prior_sd * rng::standard_normal(rng)])
    }

    fn observed(&self) -> &[usize] {
        &self.coords
    }

    fn obs_sd(&self) -> f64 {
        self.config.sigma_obs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(a: f64) -> Lgssm {
        Lgssm::new(LgssmConfig {
            a,
            ..LgssmConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn identity_transition() {
        assert_eq!(model(1.0).step(&[3.0]).unwrap(), SimOutcome::Next(StateVec(vec![3.0])));
    }

    #[test]
    fn scalar_transition() {
        let x = model(0.9).step(&[2.0]).unwrap().into_state().unwrap();
        assert!((x[0] - 1.8).abs() < 1e-15);
    }

    #[test]
    fn never_fails() {
        let m = model(0.9);
        for x in [-1e300, -3.0, 0.0, 1e-300, 7.5, 1e300] {
            assert!(!m.step(&[x]).unwrap().is_bottom());
        }
    }
}
