//! Maximum-likelihood training of the learned proposal on accepted perturbations.
//!
//! Pairs `(x_{t-1}, z_t)` come from accept-until-success rollouts of the
//! baseline-perturbed simulator, so `z_t` is a draw from the accepted
//! distribution `p̄(z | x_{t-1})`. Training maximises the minibatch mean of
//! `log q_φ(z_t | x_{t-1})` with ADAM.

use alloc::vec;
use alloc::vec::Vec;

use rand_core::RngCore;
use thiserror::Error;

use crate::autodiff::Tape;
use crate::brittle::{
    estimate_acceptance_rate, iterate_simulator, GaussianProposal, IterateError, PerturbationProposal, Proposal,
    DEFAULT_MAX_ATTEMPTS,
};
use crate::flow::{FlowError, FlowModel, NormMode};
use crate::optim::{AdamConfig, AdamState, OptimError};
use crate::rng;
use crate::simulators::{Model, SimError, StateVec};

/// One state and the perturbation the simulator accepted from it.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainingPair {
    pub x_prev: StateVec,
    pub z: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    /// Outer iterations `K`.
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// When set, the learning rate follows a cosine from `learning_rate` down
    /// to this value over the run; otherwise it stays constant.
    pub final_learning_rate: Option<f64>,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub t_roll: usize,
    pub n_traj: usize,
    pub held_out_fraction: f64,
    /// Held-out objective and acceptance are logged every this many iterations.
    pub eval_every: usize,
    /// Single-call trials per logged acceptance estimate.
    pub eval_trials: usize,
    /// Draw a fresh minibatch from new rollouts every iteration instead of
    /// sampling from a pool collected up front.
    pub fresh: bool,
    pub max_attempts: usize,
    /// After the last iteration, batch-norm statistics are set to the exact
    /// population values over this many pairs (evenly spaced through the pool,
    /// or freshly collected). 0 keeps the moving averages.
    pub stats_pairs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            batch_size: 256,
            learning_rate: 1e-3,
            final_learning_rate: None,
            clip_norm: Some(10.0),
            t_roll: 50,
            n_traj: 500,
            held_out_fraction: 0.1,
            eval_every: 100,
            eval_trials: 2000,
            fresh: false,
            max_attempts: DEFAULT_MAX_ATTEMPTS,
            stats_pairs: 50_000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 || self.t_roll == 0 || self.n_traj == 0 {
            return Err(TrainError::Config("batch size, T_roll and n_traj must be at least 1"));
        }
        if !(0.0..=0.5).contains(&self.held_out_fraction) {
            return Err(TrainError::Config("held-out fraction must lie in [0, 0.5]"));
        }
        if self.eval_every == 0 {
            return Err(TrainError::Config("eval_every must be at least 1"));
        }
        if self.max_attempts == 0 {
            return Err(TrainError::Config("max_attempts must be at least 1"));
        }
        if let Some(f) = self.final_learning_rate {
            if !(f > 0.0 && f.is_finite()) {
                return Err(TrainError::Config("final learning rate must be positive"));
            }
        }
        self.adam().validate()?;
        Ok(())
    }

    /// Learning rate used at iteration `k` (1-based).
    pub fn learning_rate_at(&self, k: usize) -> f64 {
        match self.final_learning_rate {
            None => self.learning_rate,
            Some(end) => {
                let frac = if self.iterations <= 1 {
                    0.0
                } else {
                    (k.saturating_sub(1)) as f64 / (self.iterations - 1) as f64
                };
                end + 0.5 * (self.learning_rate - end) * (1.0 + crate::math::cos(crate::math::PI * frac))
            }
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            clip_norm: self.clip_norm,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("non-finite objective or gradient at iteration {iteration}")]
    NonFinite { iteration: usize, indices: Vec<usize> },
    #[error("no training pairs")]
    Empty,
    #[error("invalid training configuration: {0}")]
    Config(&'static str),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Iterate(#[from] IterateError),
    #[error(transparent)]
    Simulator(#[from] SimError),
}

/// Pairs from one trajectory plus the simulator calls spent on them.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PairPool {
    pub pairs: Vec<TrainingPair>,
    pub calls: usize,
}

impl PairPool {
    pub fn extend(&mut self, other: PairPool) {
        self.pairs.extend(other.pairs);
        self.calls += other.calls;
    }
}

/// Trajectory `index` of a pool under `seed`: `x_0` from `prior`, then `t_roll`
/// accept-until-success steps, recording every `(x_{t-1}, z_t)`. Trajectories
/// use independent streams, so they can be collected in any order.
#[allow(clippy::too_many_arguments)]
pub fn collect_trajectory<M, P, F>(
    model: &M,
    proposal: &P,
    prior: F,
    t_roll: usize,
    max_attempts: usize,
    seed: u64,
    index: u64,
) -> Result<PairPool, IterateError>
where
    M: Model + ?Sized,
    P: Proposal + ?Sized,
    F: Fn(&mut dyn RngCore) -> StateVec,
{
    let mut rng = rng::stream(seed, index);
    let mut x = prior(&mut rng);
    let mut pool = PairPool {
        pairs: Vec::with_capacity(t_roll),
        calls: 0,
    };
    for _ in 0..t_roll {
        let (next, record) = iterate_simulator(model, &x, proposal, &mut rng, max_attempts)?;
        pool.calls += record.calls;
        pool.pairs.push(TrainingPair { x_prev: x, z: record.z });
        x = next;
    }
    Ok(pool)
}

/// `n_traj` trajectories of [`collect_trajectory`], in index order.
pub fn collect_pairs<M, P, F>(
    model: &M,
    proposal: &P,
    prior: F,
    t_roll: usize,
    n_traj: usize,
    max_attempts: usize,
    seed: u64,
) -> Result<PairPool, IterateError>
where
    M: Model + ?Sized,
    P: Proposal + ?Sized,
    F: Fn(&mut dyn RngCore) -> StateVec,
{
    let mut pool = PairPool::default();
    for k in 0..n_traj {
        pool.extend(collect_trajectory(
            model,
            proposal,
            &prior,
            t_roll,
            max_attempts,
            seed,
            k as u64,
        )?);
    }
    Ok(pool)
}

/// Deterministic shuffle, then the last `fraction` of pairs become the
/// held-out set.
pub fn split_pairs(mut pairs: Vec<TrainingPair>, fraction: f64, seed: u64) -> (Vec<TrainingPair>, Vec<TrainingPair>) {
    let mut r = rng::stream(rng::derive_seed(seed, &[SPLIT_TAG]), 0);
    for i in (1..pairs.len()).rev() {
        let j = rng::index(&mut r, i + 1);
        pairs.swap(i, j);
    }
    let n_held = libm::round(pairs.len() as f64 * fraction) as usize;
    let n_held = n_held.min(pairs.len().saturating_sub(1));
    let held = pairs.split_off(pairs.len() - n_held);
    (pairs, held)
}

const SPLIT_TAG: u64 = 1;
const BATCH_TAG: u64 = 2;
const EVAL_TAG: u64 = 3;
const FRESH_TAG: u64 = 4;

/// One row of the training log. Held-out objective and rejection rate are
/// present every `eval_every` iterations and at the last one.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricRecord {
    pub iteration: usize,
    pub train_objective: f64,
    pub held_out_objective: Option<f64>,
    pub rejection_rate: Option<f64>,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub log: Vec<MetricRecord>,
    /// Held-out objective before the first update.
    pub initial_held_out: Option<f64>,
    pub final_held_out: Option<f64>,
}

/// Where minibatches come from.
pub enum PairSource<'a> {
    /// Sample `N` pairs with replacement from a pre-collected pool.
    Pool(&'a [TrainingPair]),
    /// Roll out the baseline-perturbed model anew for every minibatch.
    Fresh(&'a dyn Model),
}

/// Optional single-call rejection monitoring during training: the model and
/// the states to evaluate from.
pub struct Monitor<'a> {
    pub model: &'a dyn Model,
    pub states: &'a [StateVec],
}

/// Mean `log q(z | x)` over `pairs`, evaluation mode.
pub fn mean_log_density(flow: &FlowModel, pairs: &[TrainingPair]) -> f64 {
    if pairs.is_empty() {
        return f64::NAN;
    }
    pairs.iter().map(|p| flow.log_density(&p.z, &p.x_prev)).sum::<f64>() / pairs.len() as f64
}

/// Mean baseline Gaussian log-density over `pairs`.
pub fn baseline_mean_log_density(baseline: &GaussianProposal, pairs: &[TrainingPair]) -> f64 {
    if pairs.is_empty() {
        return f64::NAN;
    }
    pairs.iter().map(|p| baseline.log_density(&p.z, &p.x_prev)).sum::<f64>() / pairs.len() as f64
}

/// Single-call rejection rate of `flow` from states drawn uniformly from `states`.
pub fn evaluate_proposal<M: Model + ?Sized>(
    flow: &FlowModel,
    model: &M,
    states: &[StateVec],
    n_trials: usize,
    rng: &mut dyn RngCore,
) -> Result<f64, SimError> {
    if states.is_empty() {
        return Ok(f64::NAN);
    }
    let q = PerturbationProposal::Learned(flow);
    let est = estimate_acceptance_rate(
        model,
        |r: &mut dyn RngCore| states[rng::index(r, states.len())].clone(),
        &q,
        n_trials,
        rng,
    )?;
    Ok(est.rejection_rate())
}

/// Runs `cfg.iterations` ADAM ascent steps on the minibatch mean log-density.
pub fn train_q(
    flow: &mut FlowModel,
    source: PairSource<'_>,
    held_out: &[TrainingPair],
    monitor: Option<Monitor<'_>>,
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if let PairSource::Pool(p) = source {
        if p.is_empty() && cfg.iterations > 0 {
            return Err(TrainError::Empty);
        }
    }
    let (dz, dx) = (flow.dim_z(), flow.dim_x());
    let mut adam = AdamState::new(flow.params(), cfg.adam())?;
    let mut batch_rng = rng::stream(rng::derive_seed(cfg.seed, &[BATCH_TAG]), 0);
    let mut eval_rng = rng::stream(rng::derive_seed(cfg.seed, &[EVAL_TAG]), 0);
    let fresh_seed = rng::derive_seed(cfg.seed, &[FRESH_TAG]);
    let mut fresh_index = 0u64;

    let held = |f: &FlowModel| (!held_out.is_empty()).then(|| mean_log_density(f, held_out));
    let initial_held_out = held(flow);
    let mut log = Vec::with_capacity(cfg.iterations);
    let mut zs = vec![0.0; cfg.batch_size * dz];
    let mut xs = vec![0.0; cfg.batch_size * dx];

    for k in 1..=cfg.iterations {
        let indices = match source {
            PairSource::Pool(pool) => {
                let idx: Vec<usize> = (0..cfg.batch_size)
                    .map(|_| rng::index(&mut batch_rng, pool.len()))
                    .collect();
                fill_batch(idx.iter().map(|&i| &pool[i]), &mut zs, &mut xs, dz, dx)?;
                idx
            }
            PairSource::Fresh(model) => {
                let baseline = GaussianProposal::new(model.perturbation_scales());
                let mut batch = PairPool::default();
                while batch.pairs.len() < cfg.batch_size {
                    batch.extend(collect_trajectory(
                        model,
                        &baseline,
                        |r: &mut dyn RngCore| model.sample_initial(r),
                        cfg.t_roll,
                        cfg.max_attempts,
                        fresh_seed,
                        fresh_index,
                    )?);
                    fresh_index += 1;
                }
                batch.pairs.truncate(cfg.batch_size);
                fill_batch(batch.pairs.iter(), &mut zs, &mut xs, dz, dx)?;
                (0..cfg.batch_size).collect()
            }
        };

        let bad: Vec<usize> = (0..cfg.batch_size)
            .filter(|&k| {
                zs[k * dz..(k + 1) * dz]
                    .iter()
                    .chain(&xs[k * dx..(k + 1) * dx])
                    .any(|v| !v.is_finite())
            })
            .map(|k| indices[k])
            .collect();
        if !bad.is_empty() {
            return Err(TrainError::NonFinite {
                iteration: k,
                indices: bad,
            });
        }
        let mut tape = Tape::new();
        let out = flow.tape_forward(&mut tape, &zs, &xs, cfg.batch_size, NormMode::Train)?;
        let total = tape.sum(out.log_density, None).map_err(FlowError::from)?;
        let objective = tape.value(total).item().unwrap_or(f64::NAN) / cfg.batch_size as f64;
        if !objective.is_finite() {
            return Err(TrainError::NonFinite {
                iteration: k,
                indices: offending(&tape, out.log_density, &indices),
            });
        }
        let mut grads = tape.backward(total, flow.params()).map_err(FlowError::from)?;
        let scale = 1.0 / cfg.batch_size as f64;
        for g in grads.tensors_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
        adam.config.learning_rate = cfg.learning_rate_at(k);
        let grad_norm = match adam.step(flow.params_mut(), &grads) {
            Ok(n) => n,
            Err(OptimError::NonFiniteGradient { .. }) => return Err(TrainError::NonFinite { iteration: k, indices }),
            Err(e) => return Err(e.into()),
        };
        flow.update_running_stats(&out.batch_stats);

        let eval_now = k % cfg.eval_every == 0 || k == cfg.iterations;
        let rejection_rate = match (&monitor, eval_now) {
            (Some(m), true) if cfg.eval_trials > 0 => Some(evaluate_proposal(
                flow,
                m.model,
                m.states,
                cfg.eval_trials,
                &mut eval_rng,
            )?),
            _ => None,
        };
        log.push(MetricRecord {
            iteration: k,
            train_objective: objective,
            held_out_objective: if eval_now { held(flow) } else { None },
            rejection_rate,
            grad_norm,
        });
    }
    if cfg.stats_pairs > 0 && cfg.iterations > 0 {
        let fresh_pool;
        let stats_set: Vec<&TrainingPair> = match source {
            PairSource::Pool(pool) => {
                let stride = (pool.len() / cfg.stats_pairs).max(1);
                pool.iter().step_by(stride).take(cfg.stats_pairs).collect()
            }
            PairSource::Fresh(model) => {
                let baseline = GaussianProposal::new(model.perturbation_scales());
                let mut extra = PairPool::default();
                while extra.pairs.len() < cfg.stats_pairs {
                    extra.extend(collect_trajectory(
                        model,
                        &baseline,
                        |r: &mut dyn RngCore| model.sample_initial(r),
                        cfg.t_roll,
                        cfg.max_attempts,
                        fresh_seed,
                        fresh_index,
                    )?);
                    fresh_index += 1;
                }
                fresh_pool = extra.pairs;
                fresh_pool.iter().take(cfg.stats_pairs).collect()
            }
        };
        if stats_set.len() > 1 {
            flow.set_population_stats(stats_set.iter().map(|p| (&p.z[..], &p.x_prev[..])))?;
        }
    }
    let final_held_out = held(flow);
    Ok(TrainReport {
        log,
        initial_held_out,
        final_held_out,
    })
}

fn fill_batch<'p>(
    pairs: impl Iterator<Item = &'p TrainingPair>,
    zs: &mut [f64],
    xs: &mut [f64],
    dz: usize,
    dx: usize,
) -> Result<(), TrainError> {
    for (k, p) in pairs.enumerate() {
        if p.z.len() != dz || p.x_prev.len() != dx {
            return Err(FlowError::Dimension {
                what: "training pair",
                expected: dz + dx,
                got: p.z.len() + p.x_prev.len(),
            }
            .into());
        }
        zs[k * dz..(k + 1) * dz].copy_from_slice(&p.z);
        xs[k * dx..(k + 1) * dx].copy_from_slice(&p.x_prev);
    }
    Ok(())
}

fn offending(tape: &Tape, log_density: crate::autodiff::Var, indices: &[usize]) -> Vec<usize> {
    tape.value(log_density)
        .data()
        .iter()
        .zip(indices)
        .filter(|(v, _)| !v.is_finite())
        .map(|(_, &i)| i)
        .collect()
}
