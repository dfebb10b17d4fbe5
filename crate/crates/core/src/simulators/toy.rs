//! One-dimensional brittle toy: the identity map, failing on a set of intervals.

use alloc::vec;
use alloc::vec::Vec;

use rand_core::RngCore;

use super::{check_input, Model, SimError, SimOutcome, StateVec};

#[derive(Debug, Clone, PartialEq)]
pub struct IntervalToy {
    /// Open intervals `(lo, hi)` of inputs on which the simulator fails.
    pub forbidden: Vec<(f64, f64)>,
    /// Baseline perturbation scale.
    pub sigma: f64,
    /// Fixed initial state.
    pub start: f64,
    coords: Vec<usize>,
}

impl IntervalToy {
    pub fn new(forbidden: Vec<(f64, f64)>, sigma: f64) -> Self {
        Self {
            forbidden,
            sigma,
            start: 0.0,
            coords: vec![0],
        }
    }

    /// Never fails.
    pub fn reliable(sigma: f64) -> Self {
        Self::new(Vec::new(), sigma)
    }

    /// Always fails.
    pub fn broken(sigma: f64) -> Self {
        Self::new(vec![(f64::NEG_INFINITY, f64::INFINITY)], sigma)
    }

    /// Fails iff the input is positive.
    pub fn positive_fails(sigma: f64) -> Self {
        Self::new(vec![(0.0, f64::INFINITY)], sigma)
    }

    pub fn fails_at(&self, x: f64) -> bool {
        self.forbidden.iter().any(|&(lo, hi)| x > lo && x < hi)
    }
}

impl Model for IntervalToy {
    fn state_dim(&self) -> usize {
        1
    }

    fn step(&self, x: &[f64]) -> Result<SimOutcome, SimError> {
        check_input(x, 1)?;
        Ok(if self.fails_at(x[0]) {
            SimOutcome::Bottom
        } else {
            SimOutcome::Next(StateVec(vec![x[0]]))
        })
    }

    fn perturbed(&self) -> &[usize] {
        &self.coords
    }

    fn perturbation_scales(&self) -> Vec<f64> {
        vec![self.sigma]
    }

    fn sample_initial(&self, _rng: &mut dyn RngCore) -> StateVec {
        StateVec(vec![self.start])
    }

    fn observed(&self) -> &[usize] {
        &self.coords
    }

    fn obs_sd(&self) -> f64 {
        1.0
    }
}
