//! Configuration, file formats, parallel drivers and commands around
//! [`brittle_core`].
//!
//! - [`config`]: the TOML experiment configuration and simulator fingerprints.
//! - [`io`]: CSV readers and writers.
//! - [`model_file`]: trained flows on disk.
//! - [`parallel`]: rayon drivers with the same output as the core functions.
//! - [`commands`]: the pipeline steps run by the `brittle` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod model_file;
pub mod parallel;

pub use config::{ExperimentConfig, ModelId};
pub use error::Error;
