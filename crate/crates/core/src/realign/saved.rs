//! Realigner checkpoints.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::net::Realigner;
use crate::error::{Error, Result};

pub const REALIGNER_FORMAT: &str = "cirm-realigner";
pub const REALIGNER_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedRealigner {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub checksum: String,
    pub realigner: Realigner,
}

impl SavedRealigner {
    pub fn new(realigner: Realigner, seed: u64) -> Self {
        Self {
            format: REALIGNER_FORMAT.into(),
            version: REALIGNER_VERSION,
            seed,
            checksum: realigner.params.checksum(),
            realigner,
        }
    }

    pub fn validate(self) -> Result<Self> {
        if self.format != REALIGNER_FORMAT {
            return Err(Error::field(
                "format",
                format!("expected `{REALIGNER_FORMAT}`, got `{}`", self.format),
            ));
        }
        if self.version != REALIGNER_VERSION {
            return Err(Error::field("version", format!("unsupported version {}", self.version)));
        }
        self.realigner.params.validate()?;
        self.realigner.config.validate()?;
        let sum = self.realigner.params.checksum();
        if sum != self.checksum {
            return Err(Error::Invalid(format!(
                "realigner checksum mismatch: manifest {}, parameters {sum}",
                self.checksum
            )));
        }
        Ok(self)
    }
}

pub fn save_realigner(path: &Path, saved: &SavedRealigner) -> Result<()> {
    fs::write(path, serde_json::to_vec(saved)?)?;
    Ok(())
}

pub fn load_realigner(path: &Path) -> Result<SavedRealigner> {
    let saved: SavedRealigner = serde_json::from_slice(&fs::read(path)?)?;
    saved.validate()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::realign::RealignerConfig;

    #[test]
    fn round_trip_and_tamper() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        let r = Realigner::new(5, RealignerConfig::default(), 3).unwrap();
        save_realigner(&path, &SavedRealigner::new(r.clone(), 3)).unwrap();
        assert_eq!(load_realigner(&path).unwrap().realigner, r);

        let mut saved = SavedRealigner::new(r, 3);
        saved.checksum = "0".repeat(64);
        save_realigner(&path, &saved).unwrap();
        assert!(load_realigner(&path).is_err());
    }
}
