//! Versioned JSON checkpoints of parameter stores.
//!
//! Values are written with shortest round-trip formatting and parsed with
//! exact float parsing, so a reload reproduces every bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::ParamStore;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "cirm-params";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub checksum: String,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn new(params: &ParamStore, seed: u64) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            seed,
            checksum: params.checksum(),
            params: params.clone(),
        }
    }

    /// Validates format, version, shapes and checksum.
    pub fn validate(self) -> Result<Self> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::field(
                "format",
                format!("unknown checkpoint format {}", self.format),
            ));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::field("version", format!("unsupported version {}", self.version)));
        }
        self.params.validate()?;
        if self.params.checksum() != self.checksum {
            return Err(Error::field("checksum", "parameter checksum mismatch"));
        }
        Ok(self)
    }
}

pub fn save_params(path: &Path, params: &ParamStore, seed: u64) -> Result<()> {
    let ck = Checkpoint::new(params, seed);
    std::fs::write(path, serde_json::to_string(&ck)?)?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<Checkpoint> {
    let ck: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    ck.validate()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndcompute::{Activation, Mlp};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(
            &mut store,
            "m",
            &[5, 7, 3],
            Activation::Relu,
            Activation::Sigmoid,
            &mut rng,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        save_params(&path, &store, 17).unwrap();
        let ck = load_params(&path).unwrap();
        assert_eq!(ck.seed, 17);
        assert_eq!(ck.params.checksum(), store.checksum());
        let x = [0.1, -0.3, 2.0, 1e-9, 7.5];
        let a = mlp.eval(&store, &x).unwrap();
        let b = mlp.eval(&ck.params, &x).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn tampered_checkpoint_is_rejected() {
        let mut store = ParamStore::new();
        store.push(
            "w",
            crate::ndcompute::ParamTensor::from_values(&[1], vec![1.0]).unwrap(),
        );
        let mut ck = Checkpoint::new(&store, 0);
        ck.params.get_mut(0).values[0] = 2.0;
        assert!(ck.validate().is_err());
    }
}
