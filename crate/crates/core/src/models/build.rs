//! Construction and training of any [`ModelKind`] behind one call.

use serde::{Deserialize, Serialize};

use super::{
    train_cbm, train_cbm_head, train_cem, train_intcem, ArchConfig, CbmModel, CbmScheme, CemModel, ConceptModel,
    History, IntCemConfig, ModelDims, ModelKind, TrainConfig,
};
use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::intervene::SelectionUnits;
use crate::ndcompute::mix_seed;

/// Objective weights and optimizer settings shared by all model kinds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelTraining {
    pub train: TrainConfig,
    /// Concept-loss weight of the joint CBM objective.
    pub joint_weight: f64,
    /// Concept-loss weight of plain CEM training.
    pub cem_lambda_conc: f64,
    /// Per-concept probability of a random training-time intervention in
    /// plain CEM training.
    pub cem_rand_int: f64,
    pub intcem: IntCemConfig,
}

impl Default for ModelTraining {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            joint_weight: 1.0,
            cem_lambda_conc: 1.0,
            cem_rand_int: 0.25,
            intcem: IntCemConfig::default(),
        }
    }
}

impl ModelTraining {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.intcem.validate()?;
        if self.joint_weight.is_nan() || self.joint_weight < 0.0 {
            return Err(Error::field("joint_weight", "must be >= 0"));
        }
        if self.cem_lambda_conc.is_nan() || self.cem_lambda_conc < 0.0 {
            return Err(Error::field("cem_lambda_conc", "must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.cem_rand_int) {
            return Err(Error::field("cem_rand_int", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Freshly initialized model of `kind`. Sequential and independent CBMs built
/// from the same seed start from identical parameters.
pub fn init_model(
    kind: ModelKind,
    dims: ModelDims,
    arch: &ArchConfig,
    training: &ModelTraining,
    seed: u64,
) -> Result<ConceptModel> {
    let seed = mix_seed(seed, 0x1417);
    let cbm = |scheme| CbmModel::new(dims, arch, scheme, training.joint_weight, seed).map(ConceptModel::Cbm);
    match kind {
        ModelKind::SequentialCbm => cbm(CbmScheme::Sequential),
        ModelKind::IndependentCbm => cbm(CbmScheme::Independent),
        ModelKind::JointCbm => cbm(CbmScheme::Joint),
        ModelKind::Cem => Ok(ConceptModel::Cem(CemModel::new(dims, arch, false, seed)?)),
        ModelKind::IntCem => {
            let mut m = CemModel::new(dims, arch, training.intcem.lambda_roll > 0.0, seed)?;
            m.intervention_aware = true;
            Ok(ConceptModel::Cem(m))
        }
    }
}

/// Trains `model` according to its kind.
pub fn train_model(
    model: &mut ConceptModel,
    training: &ModelTraining,
    train: &Dataset,
    val: &Dataset,
    units: Option<&SelectionUnits>,
    seed: u64,
) -> Result<Vec<History>> {
    training.validate()?;
    match model {
        ConceptModel::Cbm(m) => train_cbm(m, train, val, &training.train, seed),
        ConceptModel::Cem(m) if m.intervention_aware => Ok(vec![train_intcem(
            m,
            train,
            val,
            &training.intcem,
            &training.train,
            units,
            seed,
        )?]),
        ConceptModel::Cem(m) => Ok(vec![train_cem(
            m,
            train,
            val,
            &training.train,
            training.cem_lambda_conc,
            training.cem_rand_int,
            seed,
        )?]),
    }
}

/// Builds a sequential or independent CBM on top of an already trained
/// encoder, training only the head.
pub fn cbm_from_encoder(
    encoder: &CbmModel,
    scheme: CbmScheme,
    training: &ModelTraining,
    train: &Dataset,
    val: &Dataset,
    seed: u64,
) -> Result<(ConceptModel, History)> {
    if scheme == CbmScheme::Joint {
        return Err(Error::field(
            "scheme",
            "joint CBMs do not reuse a separately trained encoder",
        ));
    }
    training.validate()?;
    let mut m = encoder.clone();
    m.scheme = scheme;
    m.frozen = false;
    let h = train_cbm_head(&mut m, train, val, &training.train, seed)?;
    Ok((ConceptModel::Cbm(m), h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{sample_splits, GenerativeWorld, Preset};
    use crate::models::train_cbm_encoder;

    #[test]
    fn shared_encoder_matches_full_training() {
        let w = GenerativeWorld::preset(Preset::SmallNoiseless, 2);
        let s = sample_splits(&w, (80, 20, 10), 4).unwrap();
        let dims = ModelDims::of_world(&w);
        let arch = ArchConfig::default();
        let mut training = ModelTraining::default();
        training.train.epochs = 3;

        let mut full = init_model(ModelKind::IndependentCbm, dims, &arch, &training, 9).unwrap();
        train_model(&mut full, &training, &s.train, &s.val, None, 9).unwrap();

        let ConceptModel::Cbm(mut enc) = init_model(ModelKind::SequentialCbm, dims, &arch, &training, 9).unwrap()
        else {
            unreachable!()
        };
        train_cbm_encoder(&mut enc, &s.train, &s.val, &training.train, 9).unwrap();
        let (shared, _) = cbm_from_encoder(&enc, CbmScheme::Independent, &training, &s.train, &s.val, 9).unwrap();
        assert_eq!(shared.checksum(), full.checksum());
        assert_eq!(shared.kind(), ModelKind::IndependentCbm);
    }

    #[test]
    fn kinds_round_trip() {
        let dims = ModelDims {
            input_dim: 3,
            num_concepts: 2,
            num_classes: 2,
        };
        for kind in ModelKind::ALL {
            let m = init_model(kind, dims, &ArchConfig::default(), &ModelTraining::default(), 1).unwrap();
            assert_eq!(m.kind(), kind);
        }
    }
}
