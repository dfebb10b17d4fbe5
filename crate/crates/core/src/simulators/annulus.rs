//! Point moving in the plane under a linear-motion model that fails when one step
//! changes its distance from the origin by more than a threshold.
//!
//! The data come from a constant-speed circular orbit, so the linear model is
//! misspecified and needs perturbations on position and velocity to track it.

use alloc::vec;
use alloc::vec::Vec;

use rand_core::RngCore;

use super::{check_input, Dataset, Model, SimError, SimOutcome, StateVec};
use crate::brittle::{iterate_simulator, GaussianProposal, Proposal};
use crate::math::{cos, hypot, sin, PI};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct AnnulusConfig {
    pub dt: f64,
    /// Largest allowed change in radius over one step.
    pub tau: f64,
    pub r_min: f64,
    pub r_max: f64,
    /// Angular speed of the data-generating orbit.
    pub omega: f64,
    pub sigma_pos: f64,
    pub sigma_vel: f64,
    pub sigma_obs: f64,
}

impl Default for AnnulusConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            tau: DEFAULT_TAU,
            r_min: 0.5,
            r_max: 2.0,
            omega: 0.5,
            sigma_pos: 0.01,
            sigma_vel: 0.05,
            sigma_obs: 0.05,
        }
    }
}

/// `calibrate_threshold(&config, 0.75, 200, 50, 100_000, 4, 0)` for the default
/// configuration, giving a baseline single-call rejection rate of about 75%.
pub const DEFAULT_TAU: f64 = 0.002_103_477_984_296_109_3;

impl AnnulusConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let positive = [
            self.dt,
            self.tau,
            self.r_min,
            self.sigma_pos,
            self.sigma_vel,
            self.sigma_obs,
        ];
        if positive.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(SimError::Config("annulus scales must be strictly positive"));
        }
        if !(self.r_max >= self.r_min) || !self.omega.is_finite() {
            return Err(SimError::Config("annulus radius range must satisfy r_min <= r_max"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Annulus {
    pub config: AnnulusConfig,
    perturbed: Vec<usize>,
    observed: Vec<usize>,
}

impl Annulus {
    pub fn new(config: AnnulusConfig) -> Result<Self, SimError> {
        config.validate()?;
        Ok(Self {
            config,
            perturbed: vec![0, 1, 2, 3],
            observed: vec![0, 1],
        })
    }

    /// Radius change `|r' - r|` of one linear step from `x`, without the threshold.
    pub fn radius_change(&self, x: &[f64]) -> f64 {
        let dt = self.config.dt;
        let r = hypot(x[0], x[1]);
        let r_next = hypot(x[0] + dt * x[2], x[1] + dt * x[3]);
        (r_next - r).abs()
    }
}

impl Model for Annulus {
    fn state_dim(&self) -> usize {
        4
    }

    fn step(&self, x: &[f64]) -> Result<SimOutcome, SimError> {
        check_input(x, 4)?;
        let dt = self.config.dt;
        let next = [x[0] + dt * x[2], x[1] + dt * x[3], x[2], x[3]];
        let dr = (hypot(next[0], next[1]) - hypot(x[0], x[1])).abs();
        Ok(if dr <= self.config.tau {
            SimOutcome::Next(StateVec(next.to_vec()))
        } else {
            SimOutcome::Bottom
        })
    }

    fn perturbed(&self) -> &[usize] {
        &self.perturbed
    }

    fn perturbation_scales(&self) -> Vec<f64> {
        let c = &self.config;
        vec![c.sigma_pos, c.sigma_pos, c.sigma_vel, c.sigma_vel]
    }

    /// A point on a random circle of the radius prior, moving counter-clockwise
    /// at the orbit speed.
    fn sample_initial(&self, rng: &mut dyn RngCore) -> StateVec {
        let c = &self.config;
        let r = rng::uniform_range(rng, c.r_min, c.r_max);
        let theta = rng::uniform_range(rng, 0.0, 2.0 * PI);
        orbit_state(r, theta, c.omega)
    }

    fn observed(&self) -> &[usize] {
        &self.observed
    }

    fn obs_sd(&self) -> f64 {
        self.config.sigma_obs
    }
}

fn orbit_state(r: f64, theta: f64, omega: f64) -> StateVec {
    StateVec(vec![
        r * cos(theta),
        r * sin(theta),
        -r * omega * sin(theta),
        r * omega * cos(theta),
    ])
}

/// Constant-speed circular orbit of radius `r` starting at angle `theta0`,
/// observed for `steps` steps with noise `sigma_obs`.
pub fn orbit(config: &AnnulusConfig, r: f64, theta0: f64, steps: usize, rng: &mut dyn RngCore) -> Dataset {
    let mut states = Vec::with_capacity(steps + 1);
    let mut observations = Vec::with_capacity(steps);
    for t in 0..=steps {
        let theta = theta0 + config.omega * config.dt * t as f64;
        let x = orbit_state(r, theta, config.omega);
        if t > 0 {
            observations.push(vec![
                x[0] + config.sigma_obs * rng::standard_normal(rng),
                x[1] + config.sigma_obs * rng::standard_normal(rng),
            ]);
        }
        states.push(x);
    }
    Dataset { observations, states }
}

/// States visited by accept-until-success rollouts of the baseline-perturbed
/// model: `n_traj` trajectories of `t_roll` steps, keeping every `x_{t-1}`.
pub fn rollout_states<M: Model>(model: &M, n_traj: usize, t_roll: usize, seed: u64) -> Vec<StateVec> {
    let proposal = GaussianProposal::new(model.perturbation_scales());
    let mut out = Vec::with_capacity(n_traj * t_roll);
    for k in 0..n_traj {
        let mut rng = rng::stream(seed, k as u64);
        let mut x = model.sample_initial(&mut rng);
        for _ in 0..t_roll {
            out.push(x.clone());
            match iterate_simulator(model, &x, &proposal, &mut rng, 10_000) {
                Ok((next, _)) => x = next,
                Err(_) => break,
            }
        }
    }
    out
}

/// Sets `tau` so that a single baseline-perturbed step from states visited by
/// baseline rollouts fails with probability `target_rejection`.
///
/// The states depend on `tau` through the rollouts, so this iterates: roll out
/// with the current threshold, set the threshold to the `(1 - target)` quantile
/// of the one-step radius change, repeat.
pub fn calibrate_threshold(
    config: &AnnulusConfig,
    target_rejection: f64,
    n_traj: usize,
    t_roll: usize,
    n_samples: usize,
    rounds: usize,
    seed: u64,
) -> Result<f64, SimError> {
    if !(target_rejection > 0.0 && target_rejection < 1.0) || n_samples == 0 {
        return Err(SimError::Config("calibration target must lie in (0, 1)"));
    }
    let mut cfg = *config;
    let mut states = Vec::new();
    let mut prior_rng = rng::stream(seed, u64::MAX);
    let prior_model = Annulus::new(cfg)?;
    for _ in 0..n_samples.min(10_000) {
        states.push(prior_model.sample_initial(&mut prior_rng));
    }
    for round in 0..=rounds {
        let model = Annulus::new(cfg)?;
        if round > 0 {
            states = rollout_states(&model, n_traj, t_roll, rng::derive_seed(seed, &[round as u64]));
        }
        let proposal = GaussianProposal::new(model.perturbation_scales());
        let mut rng = rng::stream(rng::derive_seed(seed, &[round as u64, 1]), 0);
        let mut changes: Vec<f64> = (0..n_samples)
            .map(|i| {
                let x = &states[i % states.len()];
                let z = proposal.sample(x, &mut rng);
                model.radius_change(&model.perturb(x, &z))
            })
            .collect();
        changes.sort_by(f64::total_cmp);
        let k = (((1.0 - target_rejection) * n_samples as f64) as usize).min(n_samples - 1);
        cfg.tau = changes[k];
        if !(cfg.tau > 0.0) {
            return Err(SimError::Config("calibrated threshold is not positive"));
        }
    }
    Ok(cfg.tau)
}

/// Annulus dataset: a random radius from the prior, random starting phase.
pub(super) fn generate(config: &AnnulusConfig, steps: usize, seed: u64) -> Dataset {
    let mut rng = rng::stream(seed, 0);
    let r = rng::uniform_range(&mut rng, config.r_min, config.r_max);
    let theta0 = rng::uniform_range(&mut rng, 0.0, 2.0 * PI);
    orbit(config, r, theta0, steps, &mut rng)
}
