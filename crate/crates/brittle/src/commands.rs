//! The pipeline commands behind the `brittle` binary. Each is a deterministic
//! function of the configuration and its arguments, writes into an output
//! directory together with the resolved configuration, and returns a short
//! plain-text report.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use brittle_core::analysis::summarize_study;
use brittle_core::brittle::{GaussianProposal, PerturbationProposal, Proposal, RateCell};
use brittle_core::flow::FlowModel;
use brittle_core::rng;
use brittle_core::simulators::annulus::rollout_states;
use brittle_core::simulators::{generate_dataset, AnyModel, BallsConfig, Dataset, Model};
use brittle_core::training::{split_pairs, train_q, Monitor, PairSource, TrainReport};
use serde::Deserialize;

use crate::config::ExperimentConfig;
use crate::error::Error;
use crate::model_file::{load_flow, save_flow};
use crate::{io, parallel};

const DATA_TAG: u64 = 1;
const PAIRS_TAG: u64 = 2;
const EVAL_STATES_TAG: u64 = 3;
const EVAL_TAG: u64 = 4;
const MAP_TAG: u64 = 5;

/// Seed of dataset `k` under the global seed.
pub fn dataset_seed(seed: u64, k: usize) -> u64 {
    rng::derive_seed(seed, &[DATA_TAG, k as u64])
}

pub fn dataset_path(dir: &Path, k: usize) -> PathBuf {
    dir.join(format!("dataset_{k:03}.csv"))
}

fn echo(cfg: &ExperimentConfig, dir: &Path) -> Result<(), Error> {
    io::write_text(&dir.join("config.toml"), &cfg.to_toml())
}

fn baseline(model: &dyn Model) -> GaussianProposal {
    GaussianProposal::new(model.perturbation_scales())
}

fn load_optional(cfg: &ExperimentConfig, path: Option<&Path>) -> Result<Option<FlowModel>, Error> {
    path.map(|p| load_flow(p, &cfg.fingerprint())).transpose()
}

fn proposal<'a>(model: &dyn Model, flow: Option<&'a FlowModel>) -> Box<dyn Proposal + 'a> {
    match flow {
        Some(f) => Box::new(PerturbationProposal::Learned(f)),
        None => Box::new(baseline(model)),
    }
}

fn make_dataset(cfg: &ExperimentConfig, model: &AnyModel, k: usize) -> Result<Dataset, Error> {
    generate_dataset(model, cfg.data.steps, dataset_seed(cfg.seed, k)).map_err(Error::runtime)
}

/// `data.n_datasets` datasets of `data.steps` observations each.
pub fn generate(cfg: &ExperimentConfig, out: &Path) -> Result<String, Error> {
    let model = cfg.build_model()?;
    echo(cfg, out)?;
    for k in 0..cfg.data.n_datasets {
        io::write_dataset(&dataset_path(out, k), &make_dataset(cfg, &model, k)?)?;
    }
    Ok(format!(
        "wrote {} {} dataset(s) of {} steps to {}\n",
        cfg.data.n_datasets,
        cfg.model,
        cfg.data.steps,
        out.display()
    ))
}

/// Where training pairs come from.
#[derive(Debug, Clone)]
pub enum PairInput {
    /// Collect `train.n_traj` baseline rollouts and save them as `pairs.csv`.
    Collect,
    /// Read a pair file.
    File(PathBuf),
}

pub struct TrainOutcome {
    pub flow: FlowModel,
    pub report: TrainReport,
    pub text: String,
}

/// Fits the flow by maximum likelihood on accepted perturbations. With
/// `train.fresh` the collected pairs only serve as the held-out set.
pub fn train(cfg: &ExperimentConfig, pairs: &PairInput, out: &Path, model_path: &Path) -> Result<TrainOutcome, Error> {
    let model = cfg.build_model()?;
    echo(cfg, out)?;
    let pairs = match pairs {
        PairInput::File(p) => io::read_pairs(p)?,
        PairInput::Collect => {
            let seed = rng::derive_seed(cfg.seed, &[PAIRS_TAG]);
            let t = &cfg.train;
            let pool = parallel::collect_pairs(&model, &baseline(&model), t.t_roll, t.n_traj, t.max_attempts, seed)
                .map_err(Error::runtime)?;
            io::write_pairs(&out.join("pairs.csv"), &pool.pairs)?;
            pool.pairs
        }
    };
    let (dx, dz) = (model.state_dim(), model.perturbed().len());
    if let Some(bad) = pairs.iter().find(|p| p.x_prev.len() != dx || p.z.len() != dz) {
        return Err(Error::Runtime(format!(
            "pair has dimensions ({}, {}), {} expects ({dx}, {dz})",
            bad.x_prev.len(),
            bad.z.len(),
            cfg.model
        )));
    }
    let (train_set, held) = split_pairs(pairs, cfg.train.held_out_fraction, cfg.train.seed);
    let mut flow = FlowModel::new(cfg.flow_config(&model)).map_err(|e| Error::Config(format!("flow: {e}")))?;
    if !train_set.is_empty() {
        flow.fit_input_normalization(train_set.iter().map(|p| &p.x_prev[..]));
    }
    let states: Vec<_> = held.iter().map(|p| p.x_prev.clone()).collect();
    let monitor = (!states.is_empty()).then_some(Monitor {
        model: &model,
        states: &states,
    });
    let source = if cfg.train.fresh {
        PairSource::Fresh(&model)
    } else {
        PairSource::Pool(&train_set)
    };
    let report = train_q(&mut flow, source, &held, monitor, &cfg.train).map_err(Error::runtime)?;
    save_flow(model_path, &flow, &cfg.model.to_string(), &cfg.fingerprint())?;
    io::write_metrics(&out.join("metrics.csv"), &report.log)?;
    let mut text = String::new();
    let _ = writeln!(
        text,
        "pairs             {} train / {} held out",
        train_set.len(),
        held.len()
    );
    let _ = writeln!(text, "iterations        {}", cfg.train.iterations);
    if let (Some(a), Some(b)) = (report.initial_held_out, report.final_held_out) {
        let _ = writeln!(text, "held-out log q    {a:.4} -> {b:.4}");
    }
    if let Some(r) = report.log.iter().rev().find_map(|m| m.rejection_rate) {
        let _ = writeln!(text, "held-out rejection {r:.4}");
    }
    let _ = writeln!(text, "model             {}", model_path.display());
    Ok(TrainOutcome { flow, report, text })
}

/// States visited by baseline rollouts, used to evaluate rejection rates.
pub fn evaluation_states(cfg: &ExperimentConfig, model: &AnyModel) -> Vec<brittle_core::StateVec> {
    rollout_states(
        model,
        cfg.eval.n_traj,
        cfg.eval.t_roll,
        rng::derive_seed(cfg.seed, &[EVAL_STATES_TAG]),
    )
}

pub struct RejectionOutcome {
    pub rejection_rate: f64,
    pub lower: f64,
    pub upper: f64,
    pub map: Option<Vec<RateCell>>,
    pub text: String,
}

/// Single-call rejection rate of the baseline or of a trained flow, plus the
/// ball-position rate map when `eval.map_cells > 0` for the balls model.
pub fn eval_rejection(
    cfg: &ExperimentConfig,
    model_path: Option<&Path>,
    n_trials: Option<usize>,
    out: &Path,
) -> Result<RejectionOutcome, Error> {
    let model = cfg.build_model()?;
    let flow = load_optional(cfg, model_path)?;
    let q = proposal(&model, flow.as_ref());
    let q = &*q;
    echo(cfg, out)?;
    let states = evaluation_states(cfg, &model);
    let n = n_trials.unwrap_or(cfg.eval.n_trials);
    let est = parallel::acceptance_rate(&model, &states, q, n, rng::derive_seed(cfg.seed, &[EVAL_TAG]))
        .map_err(Error::runtime)?;
    // The interval on acceptance maps to one on rejection.
    let (lower, upper) = (1.0 - est.upper, 1.0 - est.lower);
    let name = if flow.is_some() { "learned" } else { "baseline" };
    let mut text = String::new();
    let _ = writeln!(text, "proposal          {name}");
    let _ = writeln!(text, "trials            {n}");
    let _ = writeln!(text, "rejection rate    {:.5}", est.rejection_rate());
    let _ = writeln!(text, "95% interval      [{lower:.5}, {upper:.5}]");
    let map = match (&model, cfg.eval.map_cells) {
        (AnyModel::Balls(b), cells) if cells > 0 => {
            let map = balls_rate_map(&b.config, b, q, cells, cfg.eval.map_trials, cfg.seed)?;
            io::write_rate_map(&out.join("rate_map.csv"), &map)?;
            let margin = 3.0 * cfg.balls.sigma_pos;
            let interior = interior_mean(&b.config, &map, margin);
            let _ = writeln!(
                text,
                "interior map rate {}",
                interior.map_or("n/a".into(), |r| format!("{r:.5}"))
            );
            Some(map)
        }
        _ => None,
    };
    io::write_text(&out.join("rejection.txt"), &text)?;
    Ok(RejectionOutcome {
        rejection_rate: est.rejection_rate(),
        lower,
        upper,
        map,
        text,
    })
}

/// State used for the rate map: every ball stationary, ball 1 (when present)
/// resting against the right wall at mid-height; the grid moves ball 0.
pub fn map_template(cfg: &BallsConfig) -> Vec<f64> {
    let mut x = vec![0.0; 4 * cfg.n_balls()];
    for b in 0..cfg.n_balls() {
        x[4 * b] = cfg.side / 2.0;
        x[4 * b + 1] = cfg.side / 2.0;
    }
    if cfg.n_balls() > 1 {
        x[4] = cfg.side - cfg.radius;
    }
    x
}

/// Cell centres of an `n x n` grid over the positions a ball centre may occupy.
pub fn map_axis(cfg: &BallsConfig, n: usize) -> Vec<f64> {
    let (lo, hi) = (cfg.radius, cfg.side - cfg.radius);
    let h = (hi - lo) / n as f64;
    (0..n).map(|i| lo + (i as f64 + 0.5) * h).collect()
}

pub fn balls_rate_map<M, P>(
    cfg: &BallsConfig,
    model: &M,
    proposal: &P,
    cells: usize,
    trials: usize,
    seed: u64,
) -> Result<Vec<RateCell>, Error>
where
    M: Model + ?Sized,
    P: Proposal + ?Sized,
{
    let axis = map_axis(cfg, cells);
    let frozen = map_template(cfg);
    parallel::rejection_rate_map(
        model,
        &axis,
        &axis,
        &frozen,
        [0, 1],
        proposal,
        trials,
        rng::derive_seed(seed, &[MAP_TAG]),
    )
    .map_err(Error::runtime)
}

/// True if ball 0 centred at `(x, y)` is at least `margin` inside the region
/// allowed by the walls and by the frozen balls of [`map_template`].
pub fn is_interior(cfg: &BallsConfig, (x, y): (f64, f64), margin: f64) -> bool {
    let (lo, hi) = (cfg.radius + margin, cfg.side - cfg.radius - margin);
    if !(lo..=hi).contains(&x) || !(lo..=hi).contains(&y) {
        return false;
    }
    let t = map_template(cfg);
    (1..cfg.n_balls()).all(|b| {
        let d = ((x - t[4 * b]).powi(2) + (y - t[4 * b + 1]).powi(2)).sqrt();
        d >= 2.0 * cfg.radius + margin
    })
}

/// Mean rate over interior cells; `None` if there are none.
pub fn interior_mean(cfg: &BallsConfig, map: &[RateCell], margin: f64) -> Option<f64> {
    let rates: Vec<f64> = map
        .iter()
        .filter(|c| is_interior(cfg, (c.x, c.y), margin))
        .map(|c| c.rate)
        .collect();
    (!rates.is_empty()).then(|| rates.iter().sum::<f64>() / rates.len() as f64)
}

/// `n_sweeps` sweeps on one dataset file.
pub fn sweep(
    cfg: &ExperimentConfig,
    model_path: Option<&Path>,
    dataset: &Path,
    n_sweeps: usize,
    out: &Path,
) -> Result<String, Error> {
    let model = cfg.build_model()?;
    let flow = load_optional(cfg, model_path)?;
    let q = proposal(&model, flow.as_ref());
    let data = io::read_dataset(dataset)?;
    echo(cfg, out)?;
    let results = parallel::sweeps(&model, &*q, &data.observations, n_sweeps, &cfg.sweep).map_err(Error::runtime)?;
    io::write_sweeps(&out.join("sweep_steps.csv"), &out.join("sweeps.csv"), &results)?;
    let ls: Vec<f64> = results.iter().map(|r| r.log_evidence).collect();
    let s = brittle_core::smc::EvidenceSummary::from_log_evidences(&ls);
    let mut text = String::new();
    let _ = writeln!(text, "sweeps            {n_sweeps}");
    let _ = writeln!(text, "mean L            {:.6}", s.mean);
    let _ = writeln!(text, "var L             {:.6}", s.variance);
    let _ = writeln!(text, "failed            {}", s.n_failed);
    io::write_text(&out.join("sweep_summary.txt"), &text)?;
    Ok(text)
}

/// Evidence-variance study of the baseline against a trained flow over
/// freshly generated datasets.
pub fn study(
    cfg: &ExperimentConfig,
    model_path: &Path,
    n_datasets: usize,
    n_sweeps: usize,
    out: &Path,
) -> Result<String, Error> {
    if n_datasets == 0 || n_sweeps < 2 {
        return Err(Error::Config("study needs at least one dataset and two sweeps".into()));
    }
    let model = cfg.build_model()?;
    let flow = load_flow(model_path, &cfg.fingerprint())?;
    echo(cfg, out)?;
    let datasets = (0..n_datasets)
        .map(|k| make_dataset(cfg, &model, k).map(|d| d.observations))
        .collect::<Result<Vec<_>, _>>()?;
    let p = baseline(&model);
    let q = PerturbationProposal::Learned(&flow);
    let rows =
        parallel::evidence_variance_study(&model, &datasets, &p, &q, n_sweeps, &cfg.sweep).map_err(Error::runtime)?;
    io::write_study(&out.join("study.csv"), &rows)?;
    let text = summarize_study(&rows).render();
    io::write_text(&out.join("study_summary.txt"), &text)?;
    Ok(text)
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hypothesis {
    pub name: String,
    /// Trained flow for this hypothesis; the baseline is used when absent.
    #[serde(default)]
    pub model: Option<PathBuf>,
    /// Configuration overrides, merged over the experiment configuration.
    #[serde(default)]
    pub config: toml::Table,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HypothesisFile {
    pub hypothesis: Vec<Hypothesis>,
}

impl HypothesisFile {
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

pub struct SelectOutcome {
    pub report: brittle_core::smc::SelectionReport,
    pub names: Vec<String>,
    pub text: String,
}

/// Posterior over hypotheses for one dataset (the file given, or dataset 0 of
/// the experiment configuration). `models` assigns trained flows to
/// hypotheses in order and overrides paths in the hypothesis file.
pub fn select(
    cfg: &ExperimentConfig,
    hypotheses: &HypothesisFile,
    models: &[PathBuf],
    dataset: Option<&Path>,
    n_sweeps: usize,
    out: &Path,
) -> Result<SelectOutcome, Error> {
    let hs = &hypotheses.hypothesis;
    if hs.len() < 2 {
        return Err(Error::Config("hypotheses: at least two are required".into()));
    }
    if !models.is_empty() && models.len() != hs.len() {
        return Err(Error::Config(format!(
            "--model given {} times for {} hypotheses",
            models.len(),
            hs.len()
        )));
    }
    let ys = match dataset {
        Some(p) => io::read_dataset(p)?.observations,
        None => make_dataset(cfg, &cfg.build_model()?, 0)?.observations,
    };
    let mut configs = Vec::with_capacity(hs.len());
    for h in hs {
        let c = cfg
            .patched(&h.config)
            .map_err(|e| Error::Config(format!("hypothesis `{}`: {e}", h.name)))?;
        if c.model != cfg.model {
            return Err(Error::Config(format!(
                "hypothesis `{}`: model id differs from the data",
                h.name
            )));
        }
        configs.push(c);
    }
    let sims = configs.iter().map(|c| c.build_model()).collect::<Result<Vec<_>, _>>()?;
    let mut flows = Vec::with_capacity(hs.len());
    for (i, (h, c)) in hs.iter().zip(&configs).enumerate() {
        let path = models.get(i).or(h.model.as_ref());
        flows.push(load_optional(c, path.map(PathBuf::as_path))?);
    }
    let proposals: Vec<Box<dyn Proposal + '_>> =
        sims.iter().zip(&flows).map(|(m, f)| proposal(m, f.as_ref())).collect();
    let pairs: Vec<(&dyn Model, &dyn Proposal)> = sims
        .iter()
        .zip(&proposals)
        .map(|(m, p)| (m as &dyn Model, &**p))
        .collect();
    echo(cfg, out)?;
    let report = parallel::model_select(&pairs, &ys, n_sweeps, &cfg.sweep).map_err(Error::runtime)?;
    let names: Vec<String> = hs.iter().map(|h| h.name.clone()).collect();
    io::write_selection(&out.join("selection.csv"), &names, &report)?;
    let mut text = String::new();
    for (name, h) in names.iter().zip(&report.hypotheses) {
        let _ = writeln!(
            text,
            "{name:<16} mean L {:>12.4}  pooled L {:>12.4}  posterior {:.4}",
            h.mean_log_evidence, h.pooled_log_evidence, h.posterior
        );
    }
    let _ = writeln!(text, "selected          {}", names[report.selected]);
    io::write_text(&out.join("selection.txt"), &text)?;
    Ok(SelectOutcome { report, names, text })
}
