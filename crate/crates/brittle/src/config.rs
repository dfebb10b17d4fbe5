//! Experiment configuration: one TOML file with nested sections.
//!
//! Every field has a default, so a file may be as small as `model = "lgssm"`.
//! [`ExperimentConfig::to_toml`] writes the fully resolved configuration, which
//! every command echoes into its output directory.

use std::fmt;
use std::path::{Path, PathBuf};

use brittle_core::flow::FlowConfig;
use brittle_core::simulators::{Annulus, Balls, Lgssm};
use brittle_core::simulators::{AnnulusConfig, AnyModel, BallsConfig, LgssmConfig, Model};
use brittle_core::smc::SweepConfig;
use brittle_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModelId {
    #[default]
    Annulus,
    Balls,
    Lgssm,
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelId::Annulus => "annulus",
            ModelId::Balls => "balls",
            ModelId::Lgssm => "lgssm",
        })
    }
}

/// Flow architecture; dimensions, base scale and input normalisation come
/// from the simulator and the training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowSettings {
    pub n_blocks: usize,
    pub hidden: usize,
    pub scale_bound: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub init_seed: u64,
    pub hidden_init_gain: f64,
}

impl Default for FlowSettings {
    fn default() -> Self {
        let c = FlowConfig::new(1, 1, vec![1.0]);
        Self {
            n_blocks: c.n_blocks,
            hidden: c.hidden,
            scale_bound: c.scale_bound,
            bn_eps: c.bn_eps,
            bn_momentum: c.bn_momentum,
            init_seed: c.init_seed,
            hidden_init_gain: c.hidden_init_gain,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSettings {
    /// Observed steps `T` per dataset.
    pub steps: usize,
    pub n_datasets: usize,
}

impl Default for DataSettings {
    fn default() -> Self {
        Self {
            steps: 50,
            n_datasets: 1,
        }
    }
}

/// Evaluation of single-call rejection rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub n_trials: usize,
    /// Baseline rollouts providing the evaluation states.
    pub n_traj: usize,
    pub t_roll: usize,
    /// Cells per axis of the rejection-rate map (balls only; 0 disables it).
    pub map_cells: usize,
    pub map_trials: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            n_trials: 100_000,
            n_traj: 500,
            t_roll: 50,
            map_cells: 0,
            map_trials: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelId,
    /// Seeds dataset generation, pair collection and evaluation rollouts.
    /// Training and sweeps use the seeds in their own sections.
    pub seed: u64,
    pub annulus: AnnulusConfig,
    pub balls: BallsConfig,
    pub lgssm: LgssmConfig,
    pub flow: FlowSettings,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
    pub data: DataSettings,
    pub eval: EvalSettings,
    pub paths: Paths,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, Error> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Field-level checks of every section.
    pub fn validate(&self) -> Result<(), Error> {
        let field = |name: &str, e: &dyn fmt::Display| Error::Config(format!("{name}: {e}"));
        match self.model {
            ModelId::Annulus => self.annulus.validate().map_err(|e| field("annulus", &e))?,
            ModelId::Balls => self.balls.validate().map_err(|e| field("balls", &e))?,
            ModelId::Lgssm => {
                Lgssm::new(self.lgssm).map_err(|e| field("lgssm", &e))?;
            }
        }
        self.train.validate().map_err(|e| field("train", &e))?;
        self.sweep.validate().map_err(|e| field("sweep", &e))?;
        let mut flow = FlowConfig::new(1, 1, vec![1.0]);
        self.apply_flow_settings(&mut flow);
        flow.validate().map_err(|e| field("flow", &e))?;
        if self.data.steps == 0 {
            return Err(Error::Config("data.steps: must be at least 1".into()));
        }
        if self.eval.n_trials == 0 || self.eval.n_traj == 0 || self.eval.t_roll == 0 {
            return Err(Error::Config(
                "eval: trial, trajectory and step counts must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn build_model(&self) -> Result<AnyModel, Error> {
        let cfg_err = |e: brittle_core::simulators::SimError| Error::Config(format!("{}: {e}", self.model));
        Ok(match self.model {
            ModelId::Annulus => AnyModel::Annulus(Annulus::new(self.annulus).map_err(cfg_err)?),
            ModelId::Balls => AnyModel::Balls(Balls::new(self.balls.clone()).map_err(cfg_err)?),
            ModelId::Lgssm => AnyModel::Lgssm(Lgssm::new(self.lgssm).map_err(cfg_err)?),
        })
    }

    /// Hex SHA-256 of the model id and the active simulator section. A flow
    /// is only valid for the simulator it was trained on.
    pub fn fingerprint(&self) -> String {
        let section = match self.model {
            ModelId::Annulus => serde_json::to_string(&self.annulus),
            ModelId::Balls => serde_json::to_string(&self.balls),
            ModelId::Lgssm => serde_json::to_string(&self.lgssm),
        }
        .expect("simulator config serialises");
        let digest = Sha256::digest(format!("{}:{section}", self.model).as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Identity-initialised flow for the configured simulator.
    pub fn flow_config(&self, model: &dyn Model) -> FlowConfig {
        let mut c = FlowConfig::new(model.perturbed().len(), model.state_dim(), model.perturbation_scales());
        self.apply_flow_settings(&mut c);
        c
    }

    fn apply_flow_settings(&self, c: &mut FlowConfig) {
        c.n_blocks = self.flow.n_blocks;
        c.hidden = self.flow.hidden;
        c.scale_bound = self.flow.scale_bound;
        c.bn_eps = self.flow.bn_eps;
        c.bn_momentum = self.flow.bn_momentum;
        c.init_seed = self.flow.init_seed;
        c.hidden_init_gain = self.flow.hidden_init_gain;
    }

    /// This configuration with a TOML table merged over it (keys in `patch`
    /// win, nested tables merge recursively).
    pub fn patched(&self, patch: &toml::Table) -> Result<Self, Error> {
        let mut base = toml::Table::try_from(self).expect("config serialises");
        merge(&mut base, patch);
        let cfg: Self = base
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn merge(base: &mut toml::Table, patch: &toml::Table) {
    for (k, v) in patch {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(p)) => merge(b, p),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}
