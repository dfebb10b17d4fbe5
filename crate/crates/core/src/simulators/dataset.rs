use alloc::vec::Vec;

use super::{annulus, AnyModel, Model, StateVec};
use crate::brittle::{iterate_simulator, GaussianProposal, IterateError};
use crate::rng;

/// Observations `y_{1:T}` with the ground-truth states `x_{0:T}`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub observations: Vec<Vec<f64>>,
    pub states: Vec<StateVec>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }
}

/// Rolls the baseline-perturbed model forward (accept until success) from a prior
/// draw and observes every state with Gaussian noise.
pub fn rollout_dataset<M: Model>(model: &M, steps: usize, seed: u64) -> Result<Dataset, IterateError> {
    let mut rng = rng::stream(seed, 0);
    let proposal = GaussianProposal::new(model.perturbation_scales());
    let mut x = model.sample_initial(&mut rng);
    let mut states = Vec::with_capacity(steps + 1);
    let mut observations = Vec::with_capacity(steps);
    states.push(x.clone());
    for _ in 0..steps {
        let (next, _) = iterate_simulator(model, &x, &proposal, &mut rng, 10_000)?;
        let y = model
            .observe(&next)
            .into_iter()
            .map(|v| v + model.obs_sd() * rng::standard_normal(&mut rng))
            .collect();
        observations.push(y);
        states.push(next.clone());
        x = next;
    }
    Ok(Dataset { observations, states })
}

/// Synthetic data for one of the built-in models; a pure function of
/// `(model, steps, seed)`. The annulus uses the true circular orbit, the others
/// their own perturbed dynamics.
pub fn generate_dataset(model: &AnyModel, steps: usize, seed: u64) -> Result<Dataset, IterateError> {
    match model {
        AnyModel::Annulus(m) => Ok(annulus::generate(&m.config, steps, seed)),
        AnyModel::Balls(_) | AnyModel::Lgssm(_) => rollout_dataset(model, steps, seed),
    }
}
