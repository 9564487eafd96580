use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncoderConfig, EncoderParams, Prototypes, Temperature, VoltaModel};
use crate::error::{Result, VoltaError};
use crate::linalg::Mat64;

pub const CHECKPOINT_FORMAT: &str = "volta-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format: String,
    version: u32,
    seed: u64,
    config: EncoderConfig,
    params: EncoderParams,
    prototypes: Mat64,
    tau: f64,
    tau_star: f64,
    tau_unc: f64,
}

impl VoltaModel {
    pub fn to_json(&self) -> Result<String> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            seed: self.seed,
            config: self.config.clone(),
            params: self.params.clone(),
            prototypes: self.prototypes.raw().clone(),
            tau: self.temperature.tau,
            tau_star: self.temperature.tau_star,
            tau_unc: self.temperature.tau_unc,
        };
        serde_json::to_string_pretty(&ckpt)
            .map_err(|e| VoltaError::numeric("checkpoint serialization", e.to_string()))
    }

    /// Parses and validates a checkpoint; the normalized prototypes are
    /// recomputed from the stored raw rows.
    pub fn from_json_slice(bytes: &[u8]) -> Result<Self> {
        let ckpt: Checkpoint =
            serde_json::from_slice(bytes).map_err(|e| VoltaError::Parse(format!("checkpoint: {e}")))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(VoltaError::Parse(format!("unknown checkpoint format {:?}", ckpt.format)));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(VoltaError::Parse(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        let invalid = |e: VoltaError| VoltaError::Parse(format!("checkpoint: {e}"));
        ckpt.config.validate().map_err(invalid)?;
        let prototypes = Prototypes::from_raw(ckpt.prototypes).map_err(invalid)?;
        let model = VoltaModel {
            config: ckpt.config,
            params: ckpt.params,
            prototypes,
            temperature: Temperature {
                tau: ckpt.tau,
                tau_star: ckpt.tau_star,
                tau_unc: ckpt.tau_unc,
            },
            seed: ckpt.seed,
        };
        model.validate().map_err(invalid)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| VoltaError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| VoltaError::io(path, e))?;
        VoltaModel::from_json_slice(&bytes)
    }
}
