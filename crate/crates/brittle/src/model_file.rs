//! Trained flows on disk: one JSON document with the flow configuration, the
//! coupling orders, every parameter tensor, the batch-norm running statistics
//! and the fingerprint of the simulator the flow was trained for.

use std::path::Path;

use brittle_core::autodiff::Params;
use brittle_core::flow::{FlowConfig, FlowModel, RunningStats};
use serde::{Deserialize, Serialize};

use crate::error::Error;

pub const FORMAT: &str = "brittle-flow";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub model: String,
    pub fingerprint: String,
    pub config: FlowConfig,
    pub orders: Vec<Vec<usize>>,
    pub params: Params,
    pub running_stats: Vec<RunningStats>,
}

impl ModelFile {
    pub fn new(flow: &FlowModel, model: &str, fingerprint: &str) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            model: model.into(),
            fingerprint: fingerprint.into(),
            config: flow.config().clone(),
            orders: flow.orders().to_vec(),
            params: flow.params().clone(),
            running_stats: flow.running_stats(),
        }
    }

    pub fn into_flow(self) -> Result<FlowModel, String> {
        let flow = FlowModel::from_parts(self.config, self.params, self.running_stats).map_err(|e| e.to_string())?;
        if flow.orders() != self.orders.as_slice() {
            return Err("stored coupling orders do not match the flow layout".into());
        }
        Ok(flow)
    }
}

pub fn save_flow(path: &Path, flow: &FlowModel, model: &str, fingerprint: &str) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(&ModelFile::new(flow, model, fingerprint)).map_err(Error::runtime)?;
    crate::io::write_text(path, &text)
}

/// Loads a flow, failing unless it was trained for the simulator with
/// `fingerprint`.
pub fn load_flow(path: &Path, fingerprint: &str) -> Result<FlowModel, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ModelFile = serde_json::from_str(&text).map_err(|e| Error::format(path, e))?;
    if file.format != FORMAT || file.version != VERSION {
        return Err(Error::format(path, format!("not a {FORMAT} v{VERSION} file")));
    }
    if file.fingerprint != fingerprint {
        return Err(Error::format(
            path,
            format!(
                "model was trained for simulator {} ({}), configuration has {fingerprint}",
                file.fingerprint, file.model
            ),
        ));
    }
    file.into_flow().map_err(|e| Error::format(path, e))
}
