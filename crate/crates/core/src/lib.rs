//! Learned perturbation proposals for brittle simulators.
//!
//! A brittle simulator is a deterministic transition `f: X -> {X, ⊥}` that is made
//! stochastic by adding a perturbation to the state before every step, and that
//! fails (returns ⊥) for some perturbed inputs. Sampling the perturbed simulator
//! by proposing until the simulator returns is a rejection sampler whose target is
//! the distribution of *accepted* perturbations. This crate trains a
//! state-conditional masked autoregressive flow on accepted perturbations so that
//! it can replace the original perturbation distribution, drastically cutting the
//! number of failed simulator calls without changing the distribution of
//! successful transitions.
//!
//! The crate is `no_std` (it needs `alloc`) and contains only the algorithmic
//! parts:
//!
//! - [`autodiff`]: a reverse-mode tape over dense `f64` tensors.
//! - [`optim`]: ADAM (gradient ascent) with global-norm clipping.
//! - [`simulators`]: the brittle simulator trait, the annulus, bouncing-balls and
//!   linear-Gaussian models, dataset generation and the observation density.
//! - [`brittle`]: the accept-until-success iteration, single-call iteration and
//!   acceptance-rate estimation.
//! - [`flow`]: the hypernetwork-conditioned MAF proposal.
//! - [`training`]: pair collection and the maximum-likelihood training loop.
//! - [`smc`]: sequential Monte Carlo with pseudo-marginal evidence, the Kalman
//!   oracle, evidence-variance studies and model selection.
//! - [`analysis`]: paired t-test, training curves and study summaries.
//!
//! File formats, configuration, parallel drivers and the command line live in the
//! companion `brittle` crate.

#![no_std]
// `!(x > 0.0)` deliberately rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod analysis;
pub mod autodiff;
pub mod brittle;
pub mod flow;
pub mod math;
pub mod optim;
pub mod rng;
pub mod simulators;
pub mod smc;
pub mod training;

pub use brittle::{
    estimate_acceptance_rate, iterate_once, iterate_simulator, AttemptRecord, GaussianProposal, PerturbationProposal,
    Proposal,
};
pub use flow::{FlowConfig, FlowModel};
pub use simulators::{Model, SimOutcome, StateVec};
