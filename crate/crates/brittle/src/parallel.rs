//! Rayon drivers over independent work items. Each item draws from its own
//! indexed random stream, so results equal the sequential core functions
//! whatever the thread count.

use brittle_core::brittle::{rejection_rate_cell, AcceptanceEstimate, IterateError, Proposal, RateCell};
use brittle_core::simulators::{Model, SimError, StateVec};
use brittle_core::smc::{
    selection_from_log_evidences, selection_sweep_seed, smc_sweep, study_sweep_seed, EvidenceSummary, SelectionReport,
    SmcError, StudyRow, SweepConfig, SweepResult,
};
use brittle_core::training::{collect_trajectory, PairPool};
use brittle_core::{iterate_once, rng};
use rayon::prelude::*;

/// Environment variable overriding the worker-thread count.
pub const THREADS_ENV: &str = "BRITTLE_THREADS";

/// Sizes the global pool from `BRITTLE_THREADS` when set. Returns the number of
/// threads in use.
pub fn init_threads() -> Result<usize, String> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| format!("{THREADS_ENV} must be a positive integer, got `{v}`"))?;
        // A pool that is already initialised keeps its size.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(rayon::current_num_threads())
}

/// Same pool as [`brittle_core::training::collect_pairs`] with the model's
/// initial-state prior, one task per trajectory.
pub fn collect_pairs<M, P>(
    model: &M,
    proposal: &P,
    t_roll: usize,
    n_traj: usize,
    max_attempts: usize,
    seed: u64,
) -> Result<PairPool, IterateError>
where
    M: Model + ?Sized,
    P: Proposal + ?Sized,
{
    let parts = (0..n_traj as u64)
        .into_par_iter()
        .map(|k| {
            collect_trajectory(
                model,
                proposal,
                |r| model.sample_initial(r),
                t_roll,
                max_attempts,
                seed,
                k,
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut pool = PairPool::default();
    for p in parts {
        pool.extend(p);
    }
    Ok(pool)
}

/// Trials per random stream in [`acceptance_rate`].
pub const TRIALS_PER_CHUNK: usize = 10_000;

/// Single-call acceptance from states drawn uniformly from `states`, split into
/// chunks of [`TRIALS_PER_CHUNK`] trials with one stream each.
pub fn acceptance_rate<M, P>(
    model: &M,
    states: &[StateVec],
    proposal: &P,
    n_trials: usize,
    seed: u64,
) -> Result<AcceptanceEstimate, SimError>
where
    M: Model + ?Sized,
    P: Proposal + ?Sized,
{
    if states.is_empty() {
        return Err(SimError::Config("no states to evaluate from"));
    }
    let chunks = n_trials.div_ceil(TRIALS_PER_CHUNK);
    let parts = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let n = TRIALS_PER_CHUNK.min(n_trials - c * TRIALS_PER_CHUNK);
            let mut r = rng::stream(seed, c as u64);
            let mut ok = 0;
            for _ in 0..n {
                let x = &states[rng::index(&mut r, states.len())];
                if !iterate_once(model, x, proposal, &mut r)?.0.is_bottom() {
                    ok += 1;
                }
            }
            Ok(AcceptanceEstimate::from_counts(ok, n))
        })
        .collect::<Result<Vec<_>, SimError>>()?;
    Ok(AcceptanceEstimate::merge(&parts))
}

/// Seed of sweep `s` in [`sweeps`].
pub fn sweep_seed(base: u64, s: usize) -> u64 {
    rng::derive_seed(base, &[s as u64])
}

/// `n_sweeps` independent sweeps on one dataset.
pub fn sweeps<M, P>(
    model: &M,
    proposal: &P,
    ys: &[Vec<f64>],
    n_sweeps: usize,
    cfg: &SweepConfig,
) -> Result<Vec<SweepResult>, SmcError>
where
    M: Model + ?Sized,
    P: Proposal + ?Sized,
{
    (0..n_sweeps)
        .into_par_iter()
        .map(|s| {
            let c = SweepConfig {
                seed: sweep_seed(cfg.seed, s),
                ..cfg.clone()
            };
            smc_sweep(model, proposal, ys, &c)
        })
        .collect()
}

/// Parallel [`brittle_core::smc::evidence_variance_study`] with identical seeds
/// and output.
pub fn evidence_variance_study<M, P, Q>(
    model: &M,
    datasets: &[Vec<Vec<f64>>],
    p: &P,
    q: &Q,
    n_sweeps: usize,
    cfg: &SweepConfig,
) -> Result<Vec<StudyRow>, SmcError>
where
    M: Model + ?Sized,
    P: Proposal + ?Sized,
    Q: Proposal + ?Sized,
{
    let jobs: Vec<(usize, usize)> = (0..datasets.len())
        .flat_map(|d| (0..n_sweeps).map(move |s| (d, s)))
        .collect();
    let evidences = jobs
        .par_iter()
        .map(|&(d, s)| {
            let c = SweepConfig {
                seed: study_sweep_seed(cfg.seed, d, s),
                record_particles: false,
                ..cfg.clone()
            };
            let lp = smc_sweep(model, p, &datasets[d], &c)?.log_evidence;
            let lq = smc_sweep(model, q, &datasets[d], &c)?.log_evidence;
            Ok((lp, lq))
        })
        .collect::<Result<Vec<_>, SmcError>>()?;
    Ok(evidences
        .chunks(n_sweeps.max(1))
        .take(datasets.len())
        .enumerate()
        .map(|(d, chunk)| {
            let (lp, lq): (Vec<f64>, Vec<f64>) = chunk.iter().copied().unzip();
            StudyRow::from_summaries(
                d,
                &EvidenceSummary::from_log_evidences(&lp),
                &EvidenceSummary::from_log_evidences(&lq),
            )
        })
        .collect())
}

/// Parallel [`brittle_core::smc::model_select`] with identical seeds and output.
pub fn model_select(
    hypotheses: &[(&dyn Model, &dyn Proposal)],
    ys: &[Vec<f64>],
    n_sweeps: usize,
    cfg: &SweepConfig,
) -> Result<SelectionReport, SmcError> {
    if hypotheses.len() < 2 {
        return Err(SmcError::Config("model selection needs at least two hypotheses"));
    }
    if n_sweeps == 0 {
        return Err(SmcError::Config("model selection needs at least one sweep"));
    }
    let all = hypotheses
        .par_iter()
        .enumerate()
        .map(|(h, (model, proposal))| {
            (0..n_sweeps)
                .into_par_iter()
                .map(|s| {
                    let c = SweepConfig {
                        seed: selection_sweep_seed(cfg.seed, h, s),
                        record_particles: false,
                        ..cfg.clone()
                    };
                    Ok(smc_sweep(*model, *proposal, ys, &c)?.log_evidence)
                })
                .collect::<Result<Vec<f64>, SmcError>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(selection_from_log_evidences(&all))
}

/// Parallel [`brittle_core::brittle::rejection_rate_map`] with identical cell
/// streams and output.
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
    (0..xs.len() * ys.len())
        .into_par_iter()
        .map(|idx| {
            let (j, i) = (idx / xs.len(), idx % xs.len());
            rejection_rate_cell(
                model,
                frozen,
                position,
                (xs[i], ys[j]),
                proposal,
                n_per_cell,
                seed,
                idx as u64,
            )
        })
        .collect()
}
