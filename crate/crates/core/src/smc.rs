//! Bootstrap-style sequential Monte Carlo over brittle simulators, with the
//! pseudo-marginal log-evidence estimate and an exact Kalman oracle.
//!
//! Every step propagates each particle through the perturbation proposal and
//! the simulator, weights it by the observation likelihood (a failed particle
//! has weight exactly zero), accumulates `log((1/N) Σ w)`, and resamples
//! ancestors multinomially from the normalised weights.

use alloc::vec;
use alloc::vec::Vec;

use rand_core::RngCore;
use thiserror::Error;

use crate::brittle::{iterate_once, iterate_simulator, IterateError, Proposal, DEFAULT_MAX_ATTEMPTS};
use crate::math::{exp, ln, log_mean_exp, mean, normal_log_pdf, sqrt, variance, LN_2PI};
use crate::rng;
use crate::simulators::{gaussian_log_likelihood, LgssmConfig, Model, SimError, StateVec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum SweepMode {
    /// Re-propose until the simulator returns. A particle that exhausts
    /// `max_attempts` becomes ⊥.
    RejectionLoop,
    /// Exactly one simulator call per particle per step.
    FixedBudget,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Resampling {
    #[default]
    Multinomial,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SweepConfig {
    pub n_particles: usize,
    pub mode: SweepMode,
    pub resampling: Resampling,
    pub max_attempts: usize,
    /// Keep every step's particles in the result.
    pub record_particles: bool,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            n_particles: 100,
            mode: SweepMode::FixedBudget,
            resampling: Resampling::Multinomial,
            max_attempts: DEFAULT_MAX_ATTEMPTS,
            record_particles: false,
            seed: 0,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<(), SmcError> {
        if self.n_particles == 0 {
            return Err(SmcError::Config("at least one particle is required"));
        }
        if self.max_attempts == 0 {
            return Err(SmcError::Config("max_attempts must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SmcError {
    #[error("observation at step {step} is not finite")]
    NonFiniteObservation { step: usize },
    #[error("no observations")]
    NoObservations,
    #[error("invalid configuration: {0}")]
    Config(&'static str),
    #[error(transparent)]
    Simulator(#[from] SimError),
}

/// Particles of one step. `None` marks a failed (⊥) particle.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    pub particles: Vec<Option<StateVec>>,
    /// Unnormalised weights `w`.
    pub weights: Vec<f64>,
    /// Normalised weights `W`; all zero when every `w` is zero.
    pub normalized: Vec<f64>,
    /// Ancestors drawn from `W` for the next step.
    pub ancestors: Vec<usize>,
    /// Running log-evidence up to and including this step.
    pub log_evidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    /// Final `L`, `-inf` for a failed sweep.
    pub log_evidence: f64,
    /// `log((1/N) Σ w_t)` per completed step.
    pub step_log_mean_weights: Vec<f64>,
    /// Ancestor indices drawn at each completed step.
    pub ancestors: Vec<Vec<usize>>,
    /// Particles `x_{0:T}` per step when requested.
    pub particles: Vec<Vec<Option<StateVec>>>,
    /// Every weight was zero at some step.
    pub failed: bool,
    pub simulator_calls: usize,
    /// State after the last completed step.
    pub last: ParticleEnsemble,
}

const INIT_TAG: u64 = 1;
const PROPAGATE_TAG: u64 = 2;
const RESAMPLE_TAG: u64 = 3;

/// Sweep using the model's Gaussian observation density.
pub fn smc_sweep<M, P>(
    model: &M,
    proposal: &P,
    observations: &[Vec<f64>],
    cfg: &SweepConfig,
) -> Result<SweepResult, SmcError>
where
    M: Model + ?Sized,
    P: Proposal + ?Sized,
{
    let observed = model.observed();
    let sd = model.obs_sd();
    smc_sweep_with(
        model,
        proposal,
        observations,
        |y, x| gaussian_log_likelihood(y, x, observed, sd),
        cfg,
    )
}

/// Sweep with an arbitrary log-likelihood `log p(y | x)`, called with `None`
/// for ⊥ (its value is ignored there: ⊥ has weight zero).
pub fn smc_sweep_with<M, P, L>(
    model: &M,
    proposal: &P,
    observations: &[Vec<f64>],
    log_likelihood: L,
    cfg: &SweepConfig,
) -> Result<SweepResult, SmcError>
where
    M: Model + ?Sized,
    P: Proposal + ?Sized,
    L: Fn(&[f64], Option<&[f64]>) -> f64,
{
    cfg.validate()?;
    if observations.is_empty() {
        return Err(SmcError::NoObservations);
    }
    if let Some(step) = observations.iter().position(|y| y.iter().any(|v| !v.is_finite())) {
        return Err(SmcError::NonFiniteObservation { step: step + 1 });
    }
    let n = cfg.n_particles;
    let init_seed = rng::derive_seed(cfg.seed, &[INIT_TAG]);
    let mut current: Vec<Option<StateVec>> = (0..n)
        .map(|i| Some(model.sample_initial(&mut rng::stream(init_seed, i as u64))))
        .collect();
    let mut result = SweepResult {
        log_evidence: 0.0,
        step_log_mean_weights: Vec::with_capacity(observations.len()),
        ancestors: Vec::with_capacity(observations.len()),
        particles: Vec::new(),
        failed: false,
        simulator_calls: 0,
        last: ParticleEnsemble {
            particles: Vec::new(),
            weights: Vec::new(),
            normalized: Vec::new(),
            ancestors: Vec::new(),
            log_evidence: 0.0,
        },
    };
    if cfg.record_particles {
        result.particles.push(current.clone());
    }
    let mut parents: Vec<usize> = (0..n).collect();
    let mut log_w = vec![0.0; n];

    for (t, y) in observations.iter().enumerate() {
        let step_seed = rng::derive_seed(cfg.seed, &[PROPAGATE_TAG, t as u64]);
        let mut next = Vec::with_capacity(n);
        for (i, &a) in parents.iter().enumerate() {
            let mut r = rng::stream(step_seed, i as u64);
            let (x, calls) = propagate(model, proposal, current[a].as_deref(), &mut r, cfg)?;
            result.simulator_calls += calls;
            log_w[i] = match &x {
                Some(x) => log_likelihood(y, Some(x)),
                None => f64::NEG_INFINITY,
            };
            next.push(x);
        }
        let step = log_mean_exp(&log_w);
        result.step_log_mean_weights.push(step);
        result.log_evidence += step;
        if cfg.record_particles {
            result.particles.push(next.clone());
        }
        current = next;
        let w = normalize_log_weights(&log_w);
        if step == f64::NEG_INFINITY {
            result.failed = true;
            result.log_evidence = f64::NEG_INFINITY;
            parents = Vec::new();
        } else {
            let mut r = rng::stream(rng::derive_seed(cfg.seed, &[RESAMPLE_TAG, t as u64]), 0);
            parents = resample(&w, n, &mut r);
            result.ancestors.push(parents.clone());
        }
        if result.failed || t + 1 == observations.len() {
            result.last = ParticleEnsemble {
                particles: core::mem::take(&mut current),
                weights: log_w.iter().map(|&l| exp(l)).collect(),
                normalized: w,
                ancestors: parents,
                log_evidence: result.log_evidence,
            };
            break;
        }
    }
    Ok(result)
}

fn propagate<M, P>(
    model: &M,
    proposal: &P,
    x_prev: Option<&[f64]>,
    r: &mut dyn RngCore,
    cfg: &SweepConfig,
) -> Result<(Option<StateVec>, usize), SmcError>
where
    M: Model + ?Sized,
    P: Proposal + ?Sized,
{
    // Resampling never selects ⊥, so this only guards direct callers.
    let Some(x_prev) = x_prev else {
        return Ok((None, 0));
    };
    match cfg.mode {
        SweepMode::FixedBudget => {
            let (out, _) = iterate_once(model, x_prev, proposal, r)?;
            Ok((out.into_state(), 1))
        }
        SweepMode::RejectionLoop => match iterate_simulator(model, x_prev, proposal, r, cfg.max_attempts) {
            Ok((x, record)) => Ok((Some(x), record.calls)),
            Err(IterateError::Exhausted { attempts }) => Ok((None, attempts)),
            Err(IterateError::Simulator(e)) => Err(e.into()),
            Err(IterateError::ZeroAttempts) => Err(SmcError::Config("max_attempts must be at least 1")),
        },
    }
}

/// `W_i = w_i / Σ w` from log-weights, max-shifted. All zeros when every
/// weight is zero.
pub fn normalize_log_weights(log_w: &[f64]) -> Vec<f64> {
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return vec![0.0; log_w.len()];
    }
    let w: Vec<f64> = log_w.iter().map(|&l| exp(l - max)).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// `n` i.i.d. draws from `Discrete(weights)` by inverse-CDF search. Weights
/// need not be normalised; zero-weight indices are never drawn. Returns an
/// empty vector when every weight is zero.
pub fn resample(weights: &[f64], n: usize, rng: &mut dyn RngCore) -> Vec<usize> {
    let mut cdf = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for &w in weights {
        acc += w.max(0.0);
        cdf.push(acc);
    }
    if !(acc > 0.0) {
        return Vec::new();
    }
    let last_positive = weights.iter().rposition(|&w| w > 0.0).unwrap_or(0);
    (0..n)
        .map(|_| {
            let u = rng::uniform(rng) * acc;
            cdf.partition_point(|&c| c <= u).min(last_positive)
        })
        .collect()
}

/// Scalar linear-Gaussian model `x_t = a x_{t-1} + N(0, q)`,
/// `y_t = x_t + N(0, r)`, `x_0 ~ N(m0, p0)`; `q`, `r`, `p0` are variances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KalmanParams {
    pub a: f64,
    pub q: f64,
    pub r: f64,
    pub m0: f64,
    pub p0: f64,
}

impl KalmanParams {
    /// The perturbed simulator adds `z ~ N(0, σ²)` before multiplying by `a`,
    /// so its transition variance is `a² σ²`.
    pub fn from_lgssm(cfg: &LgssmConfig) -> Self {
        Self {
            a: cfg.a,
            q: cfg.a * cfg.a * cfg.sigma_trans * cfg.sigma_trans,
            r: cfg.sigma_obs * cfg.sigma_obs,
            m0: cfg.prior_mean,
            p0: cfg.prior_sd * cfg.prior_sd,
        }
    }
}

/// Exact `log p(y_{1:T})` by the Kalman predictive-density recursion.
pub fn kalman_log_evidence(params: &KalmanParams, ys: &[f64]) -> Result<f64, SmcError> {
    let KalmanParams { a, q, r, m0, p0 } = *params;
    if !(q > 0.0 && r > 0.0 && p0 >= 0.0) || !a.is_finite() || !m0.is_finite() {
        return Err(SmcError::Config("Kalman variances must be positive"));
    }
    if let Some(step) = ys.iter().position(|y| !y.is_finite()) {
        return Err(SmcError::NonFiniteObservation { step: step + 1 });
    }
    let (mut m, mut p) = (m0, p0);
    let mut total = 0.0;
    for &y in ys {
        let m_pred = a * m;
        let p_pred = a * a * p + q;
        let s = p_pred + r;
        let e = y - m_pred;
        total += -0.5 * (LN_2PI + ln(s) + e * e / s);
        let k = p_pred / s;
        m = m_pred + k * e;
        p = (1.0 - k) * p_pred;
    }
    Ok(total)
}

/// Mean, variance and failure count of the finite entries of a set of sweep
/// log-evidences.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvidenceSummary {
    pub mean: f64,
    pub variance: f64,
    pub n_failed: usize,
    pub n_sweeps: usize,
}

impl EvidenceSummary {
    pub fn from_log_evidences(ls: &[f64]) -> Self {
        let finite: Vec<f64> = ls.iter().copied().filter(|l| l.is_finite()).collect();
        Self {
            mean: mean(&finite),
            variance: variance(&finite),
            n_failed: ls.len() - finite.len(),
            n_sweeps: ls.len(),
        }
    }
}

/// One dataset's row of an evidence-variance study.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StudyRow {
    pub dataset: usize,
    pub var_p: f64,
    pub var_q: f64,
    pub mean_p: f64,
    pub mean_q: f64,
    pub failed_p: usize,
    pub failed_q: usize,
}

impl StudyRow {
    pub fn from_summaries(dataset: usize, p: &EvidenceSummary, q: &EvidenceSummary) -> Self {
        Self {
            dataset,
            var_p: p.variance,
            var_q: q.variance,
            mean_p: p.mean,
            mean_q: q.mean,
            failed_p: p.n_failed,
            failed_q: q.n_failed,
        }
    }
}

/// Seed of sweep `sweep` on dataset `dataset`. Both proposals use the same
/// seeds, so their comparison is paired.
pub fn study_sweep_seed(base: u64, dataset: usize, sweep: usize) -> u64 {
    rng::derive_seed(base, &[dataset as u64, sweep as u64])
}

/// Per-dataset variance of `L` under the baseline `p` and learned `q`, with
/// `n_sweeps` sweeps each. Failed sweeps are counted, not averaged in.
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
    let mut rows = Vec::with_capacity(datasets.len());
    for (d, ys) in datasets.iter().enumerate() {
        let mut lp = Vec::with_capacity(n_sweeps);
        let mut lq = Vec::with_capacity(n_sweeps);
        for s in 0..n_sweeps {
            let c = SweepConfig {
                seed: study_sweep_seed(cfg.seed, d, s),
                record_particles: false,
                ..cfg.clone()
            };
            lp.push(smc_sweep(model, p, ys, &c)?.log_evidence);
            lq.push(smc_sweep(model, q, ys, &c)?.log_evidence);
        }
        rows.push(StudyRow::from_summaries(
            d,
            &EvidenceSummary::from_log_evidences(&lp),
            &EvidenceSummary::from_log_evidences(&lq),
        ));
    }
    Ok(rows)
}

/// Evidence for one hypothesis in a model-selection run.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct HypothesisEvidence {
    pub mean_log_evidence: f64,
    pub std_error: f64,
    /// `log` of the mean evidence over sweeps; each sweep's evidence is unbiased.
    pub pooled_log_evidence: f64,
    pub n_failed: usize,
    pub posterior: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SelectionReport {
    pub hypotheses: Vec<HypothesisEvidence>,
    pub selected: usize,
}

/// Seed of sweep `sweep` for hypothesis `h`.
pub fn selection_sweep_seed(base: u64, h: usize, sweep: usize) -> u64 {
    rng::derive_seed(base, &[u64::MAX - 1, h as u64, sweep as u64])
}

/// Posterior over hypotheses under a uniform prior from each hypothesis's
/// sweep log-evidences.
pub fn selection_from_log_evidences(per_hypothesis: &[Vec<f64>]) -> SelectionReport {
    let pooled: Vec<f64> = per_hypothesis.iter().map(|ls| log_mean_exp(ls)).collect();
    let post = crate::math::log_sum_exp(&pooled);
    let hypotheses: Vec<HypothesisEvidence> = per_hypothesis
        .iter()
        .zip(&pooled)
        .map(|(ls, &pl)| {
            let s = EvidenceSummary::from_log_evidences(ls);
            let finite = (s.n_sweeps - s.n_failed) as f64;
            HypothesisEvidence {
                mean_log_evidence: s.mean,
                std_error: if finite >= 2.0 {
                    sqrt(s.variance / finite)
                } else {
                    f64::NAN
                },
                pooled_log_evidence: pl,
                n_failed: s.n_failed,
                posterior: if post == f64::NEG_INFINITY {
                    1.0 / per_hypothesis.len() as f64
                } else {
                    exp(pl - post)
                },
            }
        })
        .collect();
    let selected = hypotheses.iter().enumerate().fold(0, |best, (i, h)| {
        if h.posterior > hypotheses[best].posterior {
            i
        } else {
            best
        }
    });
    SelectionReport { hypotheses, selected }
}

/// Runs `n_sweeps` sweeps for every `(model, proposal)` hypothesis on `ys` and
/// selects the maximum-posterior one.
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
    let mut all = Vec::with_capacity(hypotheses.len());
    for (h, (model, proposal)) in hypotheses.iter().enumerate() {
        let mut ls = Vec::with_capacity(n_sweeps);
        for s in 0..n_sweeps {
            let c = SweepConfig {
                seed: selection_sweep_seed(cfg.seed, h, s),
                record_particles: false,
                ..cfg.clone()
            };
            ls.push(smc_sweep(*model, *proposal, ys, &c)?.log_evidence);
        }
        all.push(ls);
    }
    Ok(selection_from_log_evidences(&all))
}

/// Evidence of a scalar model by forward recursion on a uniform grid over
/// `[lo, hi]` with `n` nodes. Used to cross-check [`kalman_log_evidence`].
pub fn grid_log_evidence(params: &KalmanParams, ys: &[f64], lo: f64, hi: f64, n: usize) -> f64 {
    let h = (hi - lo) / (n - 1) as f64;
    let grid: Vec<f64> = (0..n).map(|i| lo + h * i as f64).collect();
    let sd_q = sqrt(params.q);
    let sd_r = sqrt(params.r);
    let mut alpha: Vec<f64> = grid
        .iter()
        .map(|&x| exp(normal_log_pdf(x, params.m0, sqrt(params.p0))))
        .collect();
    let mut log_scale = 0.0;
    for &y in ys {
        let mut next = vec![0.0; n];
        for (j, xj) in grid.iter().enumerate() {
            let mut acc = 0.0;
            for (i, xi) in grid.iter().enumerate() {
                let wgt = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
                acc += wgt * alpha[i] * exp(normal_log_pdf(*xj, params.a * xi, sd_q));
            }
            next[j] = acc * h * exp(normal_log_pdf(y, *xj, sd_r));
        }
        let mass: f64 = next
            .iter()
            .enumerate()
            .map(|(j, v)| if j == 0 || j == n - 1 { 0.5 * v } else { *v })
            .sum::<f64>()
            * h;
        log_scale += ln(mass);
        alpha = next.into_iter().map(|v| v / mass).collect();
    }
    log_scale
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::brittle::GaussianProposal;
    use crate::simulators::toy::IntervalToy;
    use crate::simulators::{Lgssm, LgssmConfig};
    use proptest::prelude::*;

    fn lgssm() -> Lgssm {
        Lgssm::new(LgssmConfig::default()).unwrap()
    }

    fn lgssm_data(cfg: &LgssmConfig, t: usize, seed: u64) -> Vec<f64> {
        let mut r = rng::stream(seed, 0);
        let mut x = cfg.prior_mean + cfg.prior_sd * rng::standard_normal(&mut r);
        (0..t)
            .map(|_| {
                x = cfg.a * (x + cfg.sigma_trans * rng::standard_normal(&mut r));
                x + cfg.sigma_obs * rng::standard_normal(&mut r)
            })
            .collect()
    }

    fn as_obs(ys: &[f64]) -> Vec<Vec<f64>> {
        ys.iter().map(|&y| vec![y]).collect()
    }

    #[test]
    fn constant_likelihood_gives_t_log_c() {
        let m = lgssm();
        let p = GaussianProposal::new(vec![0.3]);
        let c: f64 = 0.37;
        for n in [1, 7, 50] {
            let cfg = SweepConfig {
                n_particles: n,
                ..SweepConfig::default()
            };
            let ys = as_obs(&[0.0; 6]);
            let r = smc_sweep_with(&m, &p, &ys, |_, _| ln(c), &cfg).unwrap();
            assert_eq!(r.log_evidence, 6.0 * ln(c));
        }
    }

    #[test]
    fn single_step_is_log_mean_weight() {
        let m = lgssm();
        let p = GaussianProposal::new(vec![0.3]);
        let cfg = SweepConfig {
            n_particles: 20,
            record_particles: true,
            seed: 4,
            ..SweepConfig::default()
        };
        let ys = as_obs(&[0.7]);
        let r = smc_sweep(&m, &p, &ys, &cfg).unwrap();
        let ws: Vec<f64> = r.particles[1]
            .iter()
            .map(|x| exp(normal_log_pdf(0.7, x.as_ref().unwrap()[0], 0.5)))
            .collect();
        let expected = ln(ws.iter().sum::<f64>() / 20.0);
        assert!((r.log_evidence - expected).abs() < 1e-12);
    }

    #[test]
    fn fixed_budget_uses_exactly_n_t_calls() {
        let toy = IntervalToy::new(vec![(0.5, 10.0)], 1.0);
        let p = GaussianProposal::new(vec![1.0]);
        let ys = as_obs(&[0.0; 9]);
        let cfg = SweepConfig {
            n_particles: 33,
            mode: SweepMode::FixedBudget,
            ..SweepConfig::default()
        };
        let r = smc_sweep(&toy, &p, &ys, &cfg).unwrap();
        assert!(!r.failed);
        assert_eq!(r.simulator_calls, 33 * 9);
    }

    #[test]
    fn bottom_particles_get_zero_weight_and_are_never_ancestors() {
        let toy = IntervalToy::new(vec![(0.0, 100.0)], 1.0);
        let p = GaussianProposal::new(vec![1.0]);
        let ys = as_obs(&[-0.5; 5]);
        let cfg = SweepConfig {
            n_particles: 200,
            record_particles: true,
            seed: 2,
            ..SweepConfig::default()
        };
        let r = smc_sweep(&toy, &p, &ys, &cfg).unwrap();
        for (t, anc) in r.ancestors.iter().enumerate() {
            for &a in anc {
                assert!(r.particles[t + 1][a].is_some());
            }
        }
    }

    #[test]
    fn broken_simulator_fails_the_sweep() {
        let toy = IntervalToy::broken(1.0);
        let p = GaussianProposal::new(vec![1.0]);
        let ys = as_obs(&[0.0; 4]);
        let r = smc_sweep(&toy, &p, &ys, &SweepConfig::default()).unwrap();
        assert!(r.failed);
        assert_eq!(r.log_evidence, f64::NEG_INFINITY);
        assert_eq!(r.step_log_mean_weights.len(), 1);
        let cfg = SweepConfig {
            mode: SweepMode::RejectionLoop,
            max_attempts: 3,
            n_particles: 4,
            ..SweepConfig::default()
        };
        let r = smc_sweep(&toy, &p, &ys, &cfg).unwrap();
        assert!(r.failed);
        assert_eq!(r.simulator_calls, 12);
    }

    #[test]
    fn modes_agree_on_a_reliable_simulator() {
        let m = lgssm();
        let p = GaussianProposal::new(vec![0.3]);
        let ys = as_obs(&lgssm_data(&LgssmConfig::default(), 10, 1));
        let mut cfg = SweepConfig {
            n_particles: 50,
            seed: 8,
            record_particles: true,
            ..SweepConfig::default()
        };
        let a = smc_sweep(&m, &p, &ys, &cfg).unwrap();
        cfg.mode = SweepMode::RejectionLoop;
        let b = smc_sweep(&m, &p, &ys, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_observation_is_an_error() {
        let m = lgssm();
        let p = GaussianProposal::new(vec![0.3]);
        let ys = as_obs(&[0.0, f64::NAN]);
        assert_eq!(
            smc_sweep(&m, &p, &ys, &SweepConfig::default()),
            Err(SmcError::NonFiniteObservation { step: 2 })
        );
    }

    #[test]
    fn one_hot_resampling() {
        let mut r = rng::stream(0, 0);
        assert_eq!(resample(&[0.0, 0.0, 1.0, 0.0], 5, &mut r), vec![2; 5]);
        assert_eq!(resample(&[1.0, 0.0, 0.0], 3, &mut r), vec![0; 3]);
        assert_eq!(resample(&[0.0, 0.0], 3, &mut r), Vec::<usize>::new());
    }

    #[test]
    fn uniform_resampling_frequencies() {
        let n = 100_000;
        let k = 10;
        let mut r = rng::stream(3, 0);
        let draws = resample(&[0.1; 10], n, &mut r);
        let mut counts = [0usize; 10];
        for d in draws {
            counts[d] += 1;
        }
        let p = 1.0 / k as f64;
        let sd = sqrt(n as f64 * p * (1.0 - p));
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() < 4.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn resampling_is_deterministic() {
        let w = [0.2, 0.5, 0.3];
        let a = resample(&w, 20, &mut rng::stream(5, 1));
        let b = resample(&w, 20, &mut rng::stream(5, 1));
        assert_eq!(a, b);
    }

    #[test]
    fn stable_log_sum_over_300_orders_of_magnitude() {
        // Weights 1, 1e-150, 1e-300: mean = (1 + 1e-150 + 1e-300)/3.
        let lw = [
            0.0,
            -150.0 * core::f64::consts::LN_10,
            -300.0 * core::f64::consts::LN_10,
        ];
        let exact = -ln(3.0) + 1e-150;
        assert!((log_mean_exp(&lw) - exact).abs() < 1e-10);
        // Shifted so no weight is representable without the max shift.
        let shifted: Vec<f64> = lw.iter().map(|l| l - 800.0).collect();
        assert!((log_mean_exp(&shifted) - (exact - 800.0)).abs() < 1e-10);
        let w = normalize_log_weights(&shifted);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(w[0] > 0.999);
    }

    #[test]
    fn kalman_single_step() {
        for a in [0.0, 0.5, 3.0] {
            let p = KalmanParams {
                a,
                q: 1.0,
                r: 1.0,
                m0: 0.0,
                p0: 0.0,
            };
            let l = kalman_log_evidence(&p, &[0.0]).unwrap();
            assert!((l + 0.5 * ln(4.0 * core::f64::consts::PI)).abs() < 1e-14);
        }
    }

    #[test]
    fn kalman_decreases_with_observation_noise() {
        let ys = [0.3, -0.2, 0.5];
        let mut prev = f64::INFINITY;
        for r in [1.0, 10.0, 100.0, 1e4, 1e6] {
            let p = KalmanParams {
                a: 0.9,
                q: 0.09,
                r,
                m0: 0.0,
                p0: 1.0,
            };
            let l = kalman_log_evidence(&p, &ys).unwrap();
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn kalman_rejects_bad_variances() {
        let p = KalmanParams {
            a: 0.9,
            q: 0.0,
            r: 1.0,
            m0: 0.0,
            p0: 1.0,
        };
        assert!(kalman_log_evidence(&p, &[0.0]).is_err());
    }

    #[test]
    fn kalman_matches_grid_quadrature() {
        let p = KalmanParams {
            a: 0.8,
            q: 0.25,
            r: 0.36,
            m0: 0.2,
            p0: 0.5,
        };
        let ys = [0.4, -0.3, 1.1];
        let exact = kalman_log_evidence(&p, &ys).unwrap();
        let grid = grid_log_evidence(&p, &ys, -8.0, 8.0, 1601);
        assert!((exact - grid).abs() < 1e-4, "{exact} vs {grid}");
    }

    #[test]
    fn smc_mean_evidence_near_kalman() {
        let c = LgssmConfig::default();
        let m = Lgssm::new(c).unwrap();
        let p = GaussianProposal::new(vec![c.sigma_trans]);
        let ys = lgssm_data(&c, 15, 3);
        let exact = kalman_log_evidence(&KalmanParams::from_lgssm(&c), &ys).unwrap();
        let obs = as_obs(&ys);
        let ls: Vec<f64> = (0..40)
            .map(|s| {
                let cfg = SweepConfig {
                    n_particles: 300,
                    seed: s,
                    ..SweepConfig::default()
                };
                smc_sweep(&m, &p, &obs, &cfg).unwrap().log_evidence
            })
            .collect();
        let se = sqrt(variance(&ls) / ls.len() as f64);
        assert!((mean(&ls) - exact).abs() < 4.0 * se + 0.01, "{} vs {exact}", mean(&ls));
    }

    #[test]
    fn identical_proposals_give_identical_study_columns() {
        let m = lgssm();
        let p = GaussianProposal::new(vec![0.3]);
        let data: Vec<Vec<Vec<f64>>> = (0..3)
            .map(|d| as_obs(&lgssm_data(&LgssmConfig::default(), 8, d)))
            .collect();
        let cfg = SweepConfig {
            n_particles: 20,
            ..SweepConfig::default()
        };
        let rows = evidence_variance_study(&m, &data, &p, &p, 5, &cfg).unwrap();
        for r in &rows {
            assert_eq!(r.var_p, r.var_q);
            assert_eq!(r.failed_p, 0);
        }
        assert_eq!(rows, evidence_variance_study(&m, &data, &p, &p, 5, &cfg).unwrap());
    }

    #[test]
    fn identical_hypotheses_split_the_posterior() {
        let m = lgssm();
        let p = GaussianProposal::new(vec![0.3]);
        let ys = as_obs(&lgssm_data(&LgssmConfig::default(), 10, 2));
        let cfg = SweepConfig {
            n_particles: 200,
            ..SweepConfig::default()
        };
        let hyps: [(&dyn Model, &dyn Proposal); 2] = [(&m, &p), (&m, &p)];
        let rep = model_select(&hyps, &ys, 10, &cfg).unwrap();
        assert!((rep.hypotheses[0].posterior - 0.5).abs() < 0.1);
        let total: f64 = rep.hypotheses.iter().map(|h| h.posterior).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn selection_needs_two_hypotheses() {
        let m = lgssm();
        let p = GaussianProposal::new(vec![0.3]);
        let hyps: [(&dyn Model, &dyn Proposal); 1] = [(&m, &p)];
        assert!(model_select(&hyps, &as_obs(&[0.0]), 1, &SweepConfig::default()).is_err());
    }

    proptest! {
        #[test]
        fn resampled_indices_have_positive_weight(
            ws in proptest::collection::vec(prop_oneof![Just(0.0), 0.0..1.0f64], 1..20),
            seed in 0u64..100,
        ) {
            prop_assume!(ws.iter().any(|w| *w > 0.0));
            let a = resample(&ws, 50, &mut rng::stream(seed, 0));
            prop_assert_eq!(a.len(), 50);
            for i in a {
                prop_assert!(ws[i] > 0.0);
            }
        }

        #[test]
        fn normalized_weights_sum_to_one(lw in proptest::collection::vec(-700.0..700.0f64, 1..30)) {
            let w = normalize_log_weights(&lw);
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
