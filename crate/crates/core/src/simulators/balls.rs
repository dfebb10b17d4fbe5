//! Frictionless elastic balls in a square enclosure.
//!
//! State layout per ball is `(pos_x, pos_y, vel_x, vel_y)`, balls concatenated.
//! The simulator fails when the (perturbed) input configuration has two balls
//! overlapping or a ball crossing a wall.

use alloc::vec;
use alloc::vec::Vec;

use rand_core::RngCore;

use super::{check_input, Model, SimError, SimOutcome, StateVec};
use crate::math::sqrt;
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct BallsConfig {
    pub radius: f64,
    /// Side length of the square enclosure `[0, side]²`.
    pub side: f64,
    /// One mass per ball; the number of balls is `masses.len()`.
    pub masses: Vec<f64>,
    pub dt: f64,
    pub sigma_pos: f64,
    pub sigma_vel: f64,
    pub sigma_obs: f64,
    /// Standard deviation of each initial velocity component.
    pub init_speed: f64,
}

impl Default for BallsConfig {
    fn default() -> Self {
        Self {
            radius: 5.0,
            side: 30.0,
            masses: vec![1.0, 1.0],
            dt: 0.1,
            sigma_pos: 0.1,
            sigma_vel: 0.1,
            sigma_obs: 0.5,
            init_speed: 1.0,
        }
    }
}

impl BallsConfig {
    pub fn n_balls(&self) -> usize {
        self.masses.len()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let positive = [
            self.radius,
            self.side,
            self.dt,
            self.sigma_pos,
            self.sigma_vel,
            self.sigma_obs,
        ];
        if positive.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(SimError::Config("ball scales must be strictly positive"));
        }
        if !(self.init_speed >= 0.0) {
            return Err(SimError::Config("initial speed scale must be non-negative"));
        }
        if self.masses.is_empty() || self.masses.iter().any(|m| !(*m > 0.0)) {
            return Err(SimError::Config("ball masses must be strictly positive"));
        }
        if self.n_balls() >= 2 && !(self.side > 4.0 * self.radius) {
            return Err(SimError::Config("enclosure too small to fit two balls"));
        }
        if !(self.side > 2.0 * self.radius) {
            return Err(SimError::Config("enclosure too small to fit a ball"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Balls {
    pub config: BallsConfig,
    perturbed: Vec<usize>,
    observed: Vec<usize>,
}

impl Balls {
    pub fn new(config: BallsConfig) -> Result<Self, SimError> {
        config.validate()?;
        let n = config.n_balls();
        let observed = (0..n).flat_map(|b| [4 * b, 4 * b + 1]).collect();
        Ok(Self {
            perturbed: (0..4 * n).collect(),
            observed,
            config,
        })
    }

    /// True if the configuration has overlapping balls or a ball crossing a wall.
    pub fn is_invalid(&self, x: &[f64]) -> bool {
        let r = self.config.radius;
        let hi = self.config.side - r;
        let n = self.config.n_balls();
        for b in 0..n {
            let (px, py) = (x[4 * b], x[4 * b + 1]);
            if px < r || px > hi || py < r || py > hi {
                return true;
            }
        }
        for i in 0..n {
            for j in i + 1..n {
                let dx = x[4 * j] - x[4 * i];
                let dy = x[4 * j + 1] - x[4 * i + 1];
                if dx * dx + dy * dy < 4.0 * r * r {
                    return true;
                }
            }
        }
        false
    }

    /// Advances a state by `dt` of free motion and resolves contacts: one wall
    /// event per ball and axis (reflect the normal velocity, clamp the centre to
    /// the contact position), then one elastic event per pair. No validity check.
    pub fn integrate(&self, x: &[f64]) -> StateVec {
        let c = &self.config;
        let (r, hi, dt) = (c.radius, c.side - c.radius, c.dt);
        let n = c.n_balls();
        let mut s = x.to_vec();
        for b in 0..n {
            s[4 * b] += dt * s[4 * b + 2];
            s[4 * b + 1] += dt * s[4 * b + 3];
        }
        for b in 0..n {
            for axis in 0..2 {
                let (p, v) = (4 * b + axis, 4 * b + 2 + axis);
                if s[p] < r {
                    s[p] = r;
                    s[v] = s[v].abs();
                } else if s[p] > hi {
                    s[p] = hi;
                    s[v] = -s[v].abs();
                }
            }
        }
        for i in 0..n {
            for j in i + 1..n {
                collide(&mut s, i, j, r, c.masses[i], c.masses[j]);
            }
        }
        // Pair separation can push a centre past a wall; pull it back without
        // touching velocities.
        for b in 0..n {
            for axis in 0..2 {
                let p = 4 * b + axis;
                s[p] = s[p].clamp(r, hi);
            }
        }
        StateVec(s)
    }

    pub fn kinetic_energy(&self, x: &[f64]) -> f64 {
        self.config
            .masses
            .iter()
            .enumerate()
            .map(|(b, m)| 0.5 * m * (x[4 * b + 2] * x[4 * b + 2] + x[4 * b + 3] * x[4 * b + 3]))
            .sum()
    }

    pub fn momentum(&self, x: &[f64]) -> [f64; 2] {
        let mut p = [0.0; 2];
        for (b, m) in self.config.masses.iter().enumerate() {
            p[0] += m * x[4 * b + 2];
            p[1] += m * x[4 * b + 3];
        }
        p
    }
}

/// Elastic contact between balls `i` and `j` if they overlap and approach.
fn collide(s: &mut [f64], i: usize, j: usize, r: f64, mi: f64, mj: f64) {
    let dx = s[4 * j] - s[4 * i];
    let dy = s[4 * j + 1] - s[4 * i + 1];
    let d2 = dx * dx + dy * dy;
    if d2 >= 4.0 * r * r || d2 == 0.0 {
        return;
    }
    let d = sqrt(d2);
    let (nx, ny) = (dx / d, dy / d);
    let closing = (s[4 * i + 2] - s[4 * j + 2]) * nx + (s[4 * i + 3] - s[4 * j + 3]) * ny;
    if closing > 0.0 {
        let total = mi + mj;
        let ki = 2.0 * mj / total * closing;
        let kj = 2.0 * mi / total * closing;
        s[4 * i + 2] -= ki * nx;
        s[4 * i + 3] -= ki * ny;
        s[4 * j + 2] += kj * nx;
        s[4 * j + 3] += kj * ny;
    }
    let push = 0.5 * (2.0 * r - d);
    s[4 * i] -= push * nx;
    s[4 * i + 1] -= push * ny;
    s[4 * j] += push * nx;
    s[4 * j + 1] += push * ny;
}

impl Model for Balls {
    fn state_dim(&self) -> usize {
        4 * self.config.n_balls()
    }

    fn step(&self, x: &[f64]) -> Result<SimOutcome, SimError> {
        check_input(x, self.state_dim())?;
        if self.is_invalid(x) {
            return Ok(SimOutcome::Bottom);
        }
        Ok(SimOutcome::Next(self.integrate(x)))
    }

    fn perturbed(&self) -> &[usize] {
        &self.perturbed
    }

    fn perturbation_scales(&self) -> Vec<f64> {
        let c = &self.config;
        (0..c.n_balls())
            .flat_map(|_| [c.sigma_pos, c.sigma_pos, c.sigma_vel, c.sigma_vel])
            .collect()
    }

    /// Uniform non-overlapping placement inside the enclosure, Gaussian velocities.
    fn sample_initial(&self, rng: &mut dyn RngCore) -> StateVec {
        let c = &self.config;
        let n = c.n_balls();
        let (lo, hi) = (c.radius, c.side - c.radius);
        let mut x = vec![0.0; 4 * n];
        loop {
            for b in 0..n {
                x[4 * b] = rng::uniform_range(rng, lo, hi);
                x[4 * b + 1] = rng::uniform_range(rng, lo, hi);
                x[4 * b + 2] = c.init_speed * rng::standard_normal(rng);
                x[4 * b + 3] = c.init_speed * rng::standard_normal(rng);
            }
            if !self.is_invalid(&x) {
                return StateVec(x);
            }
        }
    }

    fn observed(&self) -> &[usize] {
        &self.observed
    }

    fn obs_sd(&self) -> f64 {
        self.config.sigma_obs
    }
}
