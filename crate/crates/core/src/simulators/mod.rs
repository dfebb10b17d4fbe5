//! Brittle simulators `f: X -> {X, ⊥}` and the observation model.
//!
//! A [`Model`] bundles the deterministic simulator with everything inference
//! needs: the prior over the initial state, which state coordinates the
//! perturbation acts on (and its baseline scale), and which coordinates are
//! observed under Gaussian noise. External simulators plug in by implementing
//! the trait.

pub mod annulus;
pub mod balls;
mod dataset;
pub mod lgssm;
pub mod toy;

use alloc::vec::Vec;
use core::ops::{Deref, DerefMut};

use rand_core::RngCore;
use thiserror::Error;

pub use annulus::{Annulus, AnnulusConfig};
pub use balls::{Balls, BallsConfig};
pub use dataset::{generate_dataset, rollout_dataset, Dataset};
pub use lgssm::{Lgssm, LgssmConfig};
pub use toy::IntervalToy;

use crate::math::{exp, normal_log_pdf};

/// A point in simulator state space.
#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StateVec(pub Vec<f64>);

impl StateVec {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for StateVec {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for StateVec {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for StateVec {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// Result of one simulator application.
#[derive(Debug, Clone, PartialEq)]
pub enum SimOutcome {
    Next(StateVec),
    /// The simulator failed (⊥).
    Bottom,
}

impl SimOutcome {
    pub fn is_bottom(&self) -> bool {
        matches!(self, SimOutcome::Bottom)
    }

    pub fn state(&self) -> Option<&StateVec> {
        match self {
            SimOutcome::Next(x) => Some(x),
            SimOutcome::Bottom => None,
        }
    }

    pub fn into_state(self) -> Option<StateVec> {
        match self {
            SimOutcome::Next(x) => Some(x),
            SimOutcome::Bottom => None,
        }
    }
}

/// Faults in calling a simulator. Failure (⊥) is not a fault; it is
/// [`SimOutcome::Bottom`].
#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("state has dimension {got}, simulator expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("state contains a non-finite value")]
    NonFinite,
    #[error("invalid simulator configuration: {0}")]
    Config(&'static str),
}

pub(crate) fn check_input(x: &[f64], dim: usize) -> Result<(), SimError> {
    if x.len() != dim {
        return Err(SimError::Dimension {
            expected: dim,
            got: x.len(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(SimError::NonFinite);
    }
    Ok(())
}

/// A stochastically perturbed brittle state-space model.
pub trait Model: Sync {
    /// Dimension of the state.
    fn state_dim(&self) -> usize;

    /// One deterministic step of the simulator on an (already perturbed) state.
    fn step(&self, x: &[f64]) -> Result<SimOutcome, SimError>;

    /// State coordinates the perturbation is added to, in perturbation order.
    fn perturbed(&self) -> &[usize];

    /// Baseline perturbation standard deviation for each perturbed coordinate.
    fn perturbation_scales(&self) -> Vec<f64>;

    /// Draw from the prior over the initial state.
    fn sample_initial(&self, rng: &mut dyn RngCore) -> StateVec;

    /// State coordinates seen by the observation model.
    fn observed(&self) -> &[usize];

    /// Observation noise standard deviation.
    fn obs_sd(&self) -> f64;

    /// `x + embed(z)`.
    fn perturb(&self, x: &[f64], z: &[f64]) -> StateVec {
        let mut out = x.to_vec();
        for (&i, &dz) in self.perturbed().iter().zip(z) {
            out[i] += dz;
        }
        StateVec(out)
    }

    fn observe(&self, x: &[f64]) -> Vec<f64> {
        self.observed().iter().map(|&i| x[i]).collect()
    }
}

impl<M: Model + ?Sized> Model for &M {
    fn state_dim(&self) -> usize {
        (**self).state_dim()
    }
    fn step(&self, x: &[f64]) -> Result<SimOutcome, SimError> {
        (**self).step(x)
    }
    fn perturbed(&self) -> &[usize] {
        (**self).perturbed()
    }
    fn perturbation_scales(&self) -> Vec<f64> {
        (**self).perturbation_scales()
    }
    fn sample_initial(&self, rng: &mut dyn RngCore) -> StateVec {
        (**self).sample_initial(rng)
    }
    fn observed(&self) -> &[usize] {
        (**self).observed()
    }
    fn obs_sd(&self) -> f64 {
        (**self).obs_sd()
    }
}

/// Log of the diagonal Gaussian observation density `p(y | x)`, over the
/// observed coordinates of `x`. `-inf` when `x` is ⊥.
pub fn gaussian_log_likelihood(y: &[f64], x: Option<&[f64]>, observed: &[usize], sd: f64) -> f64 {
    match x {
        None => f64::NEG_INFINITY,
        Some(x) => observed
            .iter()
            .zip(y)
            .map(|(&i, &yi)| normal_log_pdf(yi, x[i], sd))
            .sum(),
    }
}

/// Diagonal Gaussian observation density `p(y | x)`; exactly `0` when `x` is ⊥.
pub fn gaussian_likelihood(y: &[f64], x: Option<&[f64]>, observed: &[usize], sd: f64) -> f64 {
    match x {
        None => 0.0,
        Some(_) => exp(gaussian_log_likelihood(y, x, observed, sd)),
    }
}

/// The three built-in models behind one type.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyModel {
    Annulus(Annulus),
    Balls(Balls),
    Lgssm(Lgssm),
}

macro_rules! delegate {
    ($self:ident, $m:ident => $e:expr) => {
        match $self {
            AnyModel::Annulus($m) => $e,
            AnyModel::Balls($m) => $e,
            AnyModel::Lgssm($m) => $e,
        }
    };
}

impl Model for AnyModel {
    fn state_dim(&self) -> usize {
        delegate!(self, m => m.state_dim())
    }
    fn step(&self, x: &[f64]) -> Result<SimOutcome, SimError> {
        delegate!(self, m => m.step(x))
    }
    fn perturbed(&self) -> &[usize] {
        delegate!(self, m => m.perturbed())
    }
    fn perturbation_scales(&self) -> Vec<f64> {
        delegate!(self, m => m.perturbation_scales())
    }
    fn sample_initial(&self, rng: &mut dyn RngCore) -> StateVec {
        delegate!(self, m => m.sample_initial(rng))
    }
    fn observed(&self) -> &[usize] {
        delegate!(self, m => m.observed())
    }
    fn obs_sd(&self) -> f64 {
        delegate!(self, m => m.obs_sd())
    }
}
