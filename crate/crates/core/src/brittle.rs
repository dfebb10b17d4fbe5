//! Sampling a perturbed brittle simulator.
//!
//! Proposing `z ~ p(z | x)` and calling `f(x + z)` until it returns is a
//! rejection sampler: the accepted perturbations follow
//! `p̄(z | x) = p(z | x) 1[f(x + z) ≠ ⊥] / M_p`, and the number of calls is
//! geometric with mean `1 / M_p`. The proposal is pluggable; replacing the
//! baseline Gaussian by a trained flow changes nothing else.

use alloc::vec::Vec;

use rand_core::RngCore;
use thiserror::Error;

use crate::flow::FlowModel;
use crate::math::{ln, normal_log_pdf, sqrt};
use crate::rng;
use crate::simulators::{Model, SimError, SimOutcome, StateVec};

/// Default cap on calls per accept-until-success iteration.
pub const DEFAULT_MAX_ATTEMPTS: usize = 10_000;

/// A state-conditional distribution over perturbations.
pub trait Proposal: Sync {
    fn dim(&self) -> usize;
    fn sample(&self, x_prev: &[f64], rng: &mut dyn RngCore) -> Vec<f64>;
    fn log_density(&self, z: &[f64], x_prev: &[f64]) -> f64;
}

/// State-independent diagonal Gaussian, the model's own perturbation.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GaussianProposal {
    pub scales: Vec<f64>,
}

impl GaussianProposal {
    pub fn new(scales: Vec<f64>) -> Self {
        Self { scales }
    }
}

impl Proposal for GaussianProposal {
    fn dim(&self) -> usize {
        self.scales.len()
    }

    fn sample(&self, _x_prev: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        self.scales.iter().map(|s| s * rng::standard_normal(rng)).collect()
    }

    fn log_density(&self, z: &[f64], _x_prev: &[f64]) -> f64 {
        z.iter()
            .zip(&self.scales)
            .map(|(&zi, &s)| normal_log_pdf(zi, 0.0, s))
            .sum()
    }
}

/// The two proposals used in practice.
#[derive(Debug, Clone, Copy)]
pub enum PerturbationProposal<'a> {
    Baseline(&'a GaussianProposal),
    Learned(&'a FlowModel),
}

impl Proposal for PerturbationProposal<'_> {
    fn dim(&self) -> usize {
        match self {
            Self::Baseline(p) => p.dim(),
            Self::Learned(f) => f.dim_z(),
        }
    }

    fn sample(&self, x_prev: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        match self {
            Self::Baseline(p) => p.sample(x_prev, rng),
            Self::Learned(f) => f.sample(x_prev, rng),
        }
    }

    fn log_density(&self, z: &[f64], x_prev: &[f64]) -> f64 {
        match self {
            Self::Baseline(p) => p.log_density(z, x_prev),
            Self::Learned(f) => f.log_density(z, x_prev),
        }
    }
}

impl<P: Proposal + ?Sized> Proposal for &P {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn sample(&self, x_prev: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        (**self).sample(x_prev, rng)
    }
    fn log_density(&self, z: &[f64], x_prev: &[f64]) -> f64 {
        (**self).log_density(z, x_prev)
    }
}

/// Outcome bookkeeping for one accept-until-success iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct AttemptRecord {
    /// The last proposed perturbation (the accepted one when `accepted`).
    pub z: Vec<f64>,
    pub accepted: bool,
    /// Simulator calls made, at least one.
    pub calls: usize,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IterateError {
    #[error("simulator did not return within {attempts} attempts")]
    Exhausted { attempts: usize },
    #[error("max_attempts must be at least 1")]
    ZeroAttempts,
    #[error(transparent)]
    Simulator(#[from] SimError),
}

/// Draw perturbations until `f(x_prev + z)` returns. Every successful call is
/// accepted with certainty.
pub fn iterate_simulator<M, P>(
    model: &M,
    x_prev: &[f64],
    proposal: &P,
    rng: &mut dyn RngCore,
    max_attempts: usize,
) -> Result<(StateVec, AttemptRecord), IterateError>
where
    M: Model + ?Sized,
    P: Proposal + ?Sized,
{
    if max_attempts == 0 {
        return Err(IterateError::ZeroAttempts);
    }
    for calls in 1..=max_attempts {
        let z = proposal.sample(x_prev, rng);
        if let SimOutcome::Next(x) = model.step(&model.perturb(x_prev, &z))? {
            return Ok((
                x,
                AttemptRecord {
                    z,
                    accepted: true,
                    calls,
                },
            ));
        }
    }
    Err(IterateError::Exhausted { attempts: max_attempts })
}

/// Exactly one proposal and one simulator call; ⊥ is returned to the caller.
pub fn iterate_once<M, P>(
    model: &M,
    x_prev: &[f64],
    proposal: &P,
    rng: &mut dyn RngCore,
) -> Result<(SimOutcome, Vec<f64>), SimError>
where
    M: Model + ?Sized,
    P: Proposal + ?Sized,
{
    let z = proposal.sample(x_prev, rng);
    let out = model.step(&model.perturb(x_prev, &z))?;
    Ok((out, z))
}

/// Single-call acceptance frequency with a 95% Wilson score interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcceptanceEstimate {
    pub successes: usize,
    pub trials: usize,
    pub rate: f64,
    pub lower: f64,
    pub upper: f64,
}

impl AcceptanceEstimate {
    pub fn from_counts(successes: usize, trials: usize) -> Self {
        let n = trials as f64;
        let p = if trials == 0 { 0.0 } else { successes as f64 / n };
        let z = 1.959_963_984_540_054;
        let (lower, upper) = if trials == 0 {
            (0.0, 1.0)
        } else {
            let denom = 1.0 + z * z / n;
            let centre = (p + z * z / (2.0 * n)) / denom;
            let half = z * sqrt(p * (1.0 - p) / n + z * z / (4.0 * n * n)) / denom;
            ((centre - half).max(0.0), (centre + half).min(1.0))
        };
        Self {
            successes,
            trials,
            rate: p,
            lower,
            upper,
        }
    }

    pub fn rejection_rate(&self) -> f64 {
        1.0 - self.rate
    }

    /// Standard error of the rate, `sqrt(p (1 - p) / n)`.
    pub fn std_error(&self) -> f64 {
        if self.trials == 0 {
            return f64::NAN;
        }
        sqrt(self.rate * (1.0 - self.rate) / self.trials as f64)
    }

    /// Combine disjoint estimates.
    pub fn merge(parts: &[AcceptanceEstimate]) -> Self {
        let s = parts.iter().map(|p| p.successes).sum();
        let n = parts.iter().map(|p| p.trials).sum();
        Self::from_counts(s, n)
    }
}

/// Fraction of single-call successes from states drawn by `state_sampler`.
pub fn estimate_acceptance_rate<M, P, S>(
    model: &M,
    mut state_sampler: S,
    proposal: &P,
    n_trials: usize,
    rng: &mut dyn RngCore,
) -> Result<AcceptanceEstimate, SimError>
where
    M: Model + ?Sized,
    P: Proposal + ?Sized,
    S: FnMut(&mut dyn RngCore) -> StateVec,
{
    let mut successes = 0;
    for _ in 0..n_trials {
        let x = state_sampler(rng);
        let (out, _) = iterate_once(model, &x, proposal, rng)?;
        if !out.is_bottom() {
            successes += 1;
        }
    }
    Ok(AcceptanceEstimate::from_counts(successes, n_trials))
}

/// One cell of a rejection-rate map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateCell {
    pub x: f64,
    pub y: f64,
    pub rate: f64,
    pub n_trials: usize,
}

/// Single-call rejection frequency with the coordinates `position` of `frozen`
/// set to `(x, y)`; cell `cell_index` uses its own random stream under `seed`.
#[allow(clippy::too_many_arguments)]
pub fn rejection_rate_cell<M, P>(
    model: &M,
    frozen: &[f64],
    position: [usize; 2],
    (x, y): (f64, f64),
    proposal: &P,
    n_trials: usize,
    seed: u64,
    cell_index: u64,
) -> Result<RateCell, SimError>
where
    M: Model + ?Sized,
    P: Proposal + ?Sized,
{
    let mut state = frozen.to_vec();
    state[position[0]] = x;
    state[position[1]] = y;
    let mut rng = rng::stream(seed, cell_index);
    let mut failures = 0;
    for _ in 0..n_trials {
        let (out, _) = iterate_once(model, &state, proposal, &mut rng)?;
        if out.is_bottom() {
            failures += 1;
        }
    }
    Ok(RateCell {
        x,
        y,
        rate: if n_trials == 0 {
            0.0
        } else {
            failures as f64 / n_trials as f64
        },
        n_trials,
    })
}

/// Rejection rate over a grid of positions (row-major over `ys` then `xs`).
#[allow(clippy::too_many_arguments)]
pub fn rejection_rate_map<M, P>(
    model: &M,
    xs: &[f64],
    ys: &[f64],
    frozen: &[f64],
    position: [usize; 2],
    proposal: &P,
    n_per_cell: usize,
    seed: u64,
) -> Result<Vec<RateCell>, SimError>
where
    M: Model + ?Sized,
    P: Proposal + ?Sized,
{
    let mut cells = Vec::with_capacity(xs.len() * ys.len());
    for (j, &y) in ys.iter().enumerate() {
        for (i, &x) in xs.iter().enumerate() {
            let idx = (j * xs.len() + i) as u64;
            cells.push(rejection_rate_cell(
                model,
                frozen,
                position,
                (x, y),
                proposal,
                n_per_cell,
                seed,
                idx,
            )?);
        }
    }
    Ok(cells)
}

/// Log of a Gaussian rejection-sampler target at `z`, `log p(z) - log M_p`, or
/// `-inf` when the simulator fails there.
pub fn accepted_log_density<M, P>(
    model: &M,
    x_prev: &[f64],
    z: &[f64],
    proposal: &P,
    acceptance: f64,
) -> Result<f64, SimError>
where
    M: Model + ?Sized,
    P: Proposal + ?Sized,
{
    Ok(match model.step(&model.perturb(x_prev, z))? {
        SimOutcome::Bottom => f64::NEG_INFINITY,
        SimOutcome::Next(_) => proposal.log_density(z, x_prev) - ln(acceptance),
    })
}
