//! Checkpoint files are JSON documents:
//!
//! ```text
//! { "schema": "smorm-lab/checkpoint", "version": 1,
//!   "config": ModelConfig, "params": { "names": [...], "tensors": [{rows, cols, data}] },
//!   "seed": u64, "step": u64, "loss": LossConfig | null }
//! ```
//!
//! Floats are written in shortest round-trip form, so a reloaded model
//! reproduces every score bit for bit. Training batches are drawn from
//! counter-based streams keyed by the training seed, so `seed` and `step`
//! are the whole RNG state.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffnet::{Mlp, ParamStore};
use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::model::loss::LossConfig;
use crate::model::net::{ModelConfig, SmormModel, BACKBONE, GATE};

pub const CHECKPOINT_SCHEMA: &str = "smorm-lab/checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    schema: String,
    version: u32,
    config: ModelConfig,
    params: ParamStore,
    seed: u64,
    step: u64,
    loss: Option<LossConfig>,
}

impl SmormModel {
    pub fn to_json(&self) -> String {
        let file = CheckpointFile {
            schema: CHECKPOINT_SCHEMA.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            params: self.params.clone(),
            seed: self.seed,
            step: self.step,
            loss: self.loss.clone(),
        };
        serde_json::to_string_pretty(&file).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let head: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| Error::SchemaMismatch(format!("unreadable checkpoint: {e}")))?;
        let schema = head.get("schema").and_then(|v| v.as_str()).unwrap_or("");
        let version = head.get("version").and_then(|v| v.as_u64());
        if schema != CHECKPOINT_SCHEMA || version != Some(CHECKPOINT_VERSION as u64) {
            return Err(Error::SchemaMismatch(format!(
                "expected {CHECKPOINT_SCHEMA} v{CHECKPOINT_VERSION}, found `{schema}` v{version:?}"
            )));
        }
        let file: CheckpointFile = serde_json::from_value(head)
            .map_err(|e| Error::SchemaMismatch(format!("malformed checkpoint: {e}")))?;
        file.config.validate()?;
        let backbone = Mlp::new(file.config.backbone.clone(), BACKBONE)?;
        let mut model = SmormModel {
            config: file.config,
            params: file.params,
            backbone,
            gate: None,
            seed: file.seed,
            step: file.step,
            loss: file.loss,
        };
        if model.config.gating {
            let gate = Mlp::new(model.config_gate(), GATE)?;
            model.gate = Some(gate);
        }
        model.check_params()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Every parameter the architecture needs is present with its shape.
    fn check_params(&self) -> Result<()> {
        let reference = SmormModel::new(self.config.clone(), 0)?;
        for (name, t) in reference.params.iter() {
            let have = self
                .params
                .get(name)
                .ok_or_else(|| Error::SchemaMismatch(format!("missing tensor `{name}`")))?;
            if have.shape() != t.shape() {
                return Err(Error::SchemaMismatch(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    have.shape(),
                    t.shape()
                )));
            }
        }
        if reference.params.len() != self.params.len() {
            return Err(Error::SchemaMismatch("unexpected extra tensors".into()));
        }
        Ok(())
    }
}
