//! Model checkpoints: a manifest describing the model plus its parameters.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchConfig, ConceptModel, ModelDims, ModelKind};
use crate::error::{Error, Result};

pub const MODEL_FORMAT: &str = "cirm-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub kind: ModelKind,
    pub dims: ModelDims,
    pub arch: ArchConfig,
    pub seed: u64,
    /// Free-form training configuration, kept for provenance.
    #[serde(default)]
    pub config: serde_json::Value,
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedModel {
    pub format: String,
    pub version: u32,
    pub manifest: ModelManifest,
    pub model: ConceptModel,
}

impl SavedModel {
    pub fn new(model: ConceptModel, arch: ArchConfig, seed: u64, config: serde_json::Value) -> Self {
        let manifest = ModelManifest {
            kind: model.kind(),
            dims: model.dims(),
            arch,
            seed,
            config,
            checksum: model.checksum(),
        };
        Self {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            manifest,
            model,
        }
    }

    pub fn validate(self) -> Result<Self> {
        if self.format != MODEL_FORMAT {
            return Err(Error::field(
                "format",
                format!("expected `{MODEL_FORMAT}`, got `{}`", self.format),
            ));
        }
        if self.version != MODEL_VERSION {
            return Err(Error::field("version", format!("unsupported version {}", self.version)));
        }
        for s in self.model.stores() {
            s.validate()?;
        }
        if self.manifest.dims != self.model.dims() || self.manifest.kind != self.model.kind() {
            return Err(Error::Invalid("manifest does not describe the stored model".into()));
        }
        let sum = self.model.checksum();
        if sum != self.manifest.checksum {
            return Err(Error::Invalid(format!(
                "model checksum mismatch: manifest {}, parameters {sum}",
                self.manifest.checksum
            )));
        }
        Ok(self)
    }
}

pub fn save_model(path: &Path, saved: &SavedModel) -> Result<()> {
    fs::write(path, serde_json::to_vec(saved)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<SavedModel> {
    let saved: SavedModel = serde_json::from_slice(&fs::read(path)?)?;
    saved.validate()
}
