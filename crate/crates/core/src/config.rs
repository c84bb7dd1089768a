//! Complete description of a run.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::TaskSpec;
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::model::{BackboneConfig, InputShape};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub task: TaskSpec,
    pub model: BackboneConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    /// Where `train` writes its log and checkpoints.
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            task: TaskSpec::default(),
            model: BackboneConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if self.model.classes != self.task.classes {
            return Err(Error::config(
                "model.classes",
                format!("network predicts {} classes but the task has {}", self.model.classes, self.task.classes),
            ));
        }
        Ok(())
    }

    pub fn input_shape(&self) -> InputShape {
        InputShape::for_task(self.model.input, self.task.frames, self.task.features)
    }

    /// Digest of everything that determines parameter names and shapes.
    pub fn architecture_hash(&self) -> [u8; 32] {
        let text = serde_json::to_string(&(&self.model, self.input_shape())).expect("config serialises");
        let digest = Sha256::digest(text.as_bytes());
        let mut out = [0u8; 32];
        out.copy_from_slice(&digest);
        out
    }

    /// Digest of the full configuration.
    pub fn run_hash(&self) -> [u8; 32] {
        let text = serde_json::to_string(self).expect("config serialises");
        let digest = Sha256::digest(text.as_bytes());
        let mut out = [0u8; 32];
        out.copy_from_slice(&digest);
        out
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
