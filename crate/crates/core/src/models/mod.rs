//! Concept models behind one interface: predict concepts, then predict labels
//! from a (possibly intervened or realigned) concept vector.

mod build;
mod cbm;
mod cem;
mod intcem;
mod saved;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use build::{cbm_from_encoder, init_model, train_model, ModelTraining};
pub use cbm::{
    cbm_forward, cbm_metrics, head_training_inputs, joint_loss, train_cbm, train_cbm_encoder, train_cbm_head,
    train_cbm_joint, CbmModel, CbmNet, CbmScheme,
};
pub use cem::{
    cem_concept_embed, cem_forward, cem_joint_loss, cem_joint_loss_on, cem_loss_with_interventions, cem_metrics,
    cem_mix, train_cem, CemEncoding, CemModel, CemNet, CemOutput, ConceptEmbedding,
};
pub use intcem::{
    greedy_oracle_target, intcem_loss, intcem_loss_on, prediction_loss, rollout_loss, sample_horizon, train_intcem,
    ucp_trajectory, HorizonDistribution, IntCemConfig, IntCemLossVars,
};
pub use saved::{load_model, save_model, ModelManifest, SavedModel, MODEL_FORMAT, MODEL_VERSION};
pub use train::{fit, EpochRecord, History, TrainConfig};

use crate::error::{Error, Result};
use crate::ndcompute::{ParamStore, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelDims {
    pub input_dim: usize,
    pub num_concepts: usize,
    pub num_classes: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::field("input_dim", "must be >= 1"));
        }
        if self.num_concepts == 0 {
            return Err(Error::field("num_concepts", "must be >= 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::field("num_classes", "must be >= 2"));
        }
        Ok(())
    }

    pub fn of_world(world: &crate::datagen::GenerativeWorld) -> Self {
        Self {
            input_dim: world.input_dim(),
            num_concepts: world.num_concepts(),
            num_classes: world.num_classes(),
        }
    }
}

/// Layer widths shared by all model kinds.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchConfig {
    pub hidden_layers: usize,
    /// `None` means `max(2k, 32)`.
    pub hidden_width: Option<usize>,
    /// CEM embedding width `m`.
    pub embedding_width: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            hidden_layers: 2,
            hidden_width: None,
            embedding_width: 8,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_width == Some(0) {
            return Err(Error::field("hidden_width", "must be >= 1"));
        }
        if self.embedding_width == 0 {
            return Err(Error::field("embedding_width", "must be >= 1"));
        }
        Ok(())
    }

    pub fn width_for(&self, num_concepts: usize) -> usize {
        self.hidden_width.unwrap_or((2 * num_concepts).max(32))
    }
}

/// Scalar loss and its parts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    pub pred: f64,
    pub conc: f64,
    pub roll: f64,
}

impl LossComponents {
    pub fn scaled(self, factor: f64) -> Self {
        Self {
            total: self.total * factor,
            pred: self.pred * factor,
            conc: self.conc * factor,
            roll: self.roll * factor,
        }
    }
}

/// The model kinds compared by the benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    SequentialCbm,
    IndependentCbm,
    JointCbm,
    Cem,
    IntCem,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::SequentialCbm,
        ModelKind::IndependentCbm,
        ModelKind::JointCbm,
        ModelKind::Cem,
        ModelKind::IntCem,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::SequentialCbm => "sequential_cbm",
            ModelKind::IndependentCbm => "independent_cbm",
            ModelKind::JointCbm => "joint_cbm",
            ModelKind::Cem => "cem",
            ModelKind::IntCem => "intcem",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ModelKind::SequentialCbm => "Sequential CBM",
            ModelKind::IndependentCbm => "Independent CBM",
            ModelKind::JointCbm => "Joint CBM",
            ModelKind::Cem => "CEM",
            ModelKind::IntCem => "IntCEM",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|k| k.name() == norm || k.name().trim_end_matches("_cbm") == norm)
            .ok_or_else(|| Error::field("model kind", format!("unknown model kind `{s}`")))
    }
}

/// Tape handles of one encoder pass.
#[derive(Debug, Clone)]
pub enum Encoding {
    Cbm { probs: Var },
    Cem(CemEncoding),
}

impl Encoding {
    pub fn probs(&self) -> Var {
        match self {
            Encoding::Cbm { probs } => *probs,
            Encoding::Cem(e) => e.probs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ConceptModel {
    Cbm(CbmModel),
    Cem(CemModel),
}

impl ConceptModel {
    pub fn dims(&self) -> ModelDims {
        match self {
            ConceptModel::Cbm(m) => m.dims,
            ConceptModel::Cem(m) => m.dims,
        }
    }

    pub fn num_concepts(&self) -> usize {
        self.dims().num_concepts
    }

    pub fn num_classes(&self) -> usize {
        self.dims().num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.dims().input_dim
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            ConceptModel::Cbm(m) => match m.scheme {
                CbmScheme::Sequential => ModelKind::SequentialCbm,
                CbmScheme::Independent => ModelKind::IndependentCbm,
                CbmScheme::Joint => ModelKind::JointCbm,
            },
            ConceptModel::Cem(m) if m.intervention_aware => ModelKind::IntCem,
            ConceptModel::Cem(_) => ModelKind::Cem,
        }
    }

    pub fn stores(&self) -> [&ParamStore; 2] {
        match self {
            ConceptModel::Cbm(m) => [&m.encoder_params, &m.head_params],
            ConceptModel::Cem(m) => [&m.concept_params, &m.head_params],
        }
    }

    /// SHA-256 over the checksums of every parameter store.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for s in self.stores() {
            h.update(s.checksum().as_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn is_frozen(&self) -> bool {
        match self {
            ConceptModel::Cbm(m) => m.frozen,
            ConceptModel::Cem(m) => m.frozen,
        }
    }

    /// Marks the model read-only for downstream training.
    pub fn freeze(&mut self) {
        match self {
            ConceptModel::Cbm(m) => m.frozen = true,
            ConceptModel::Cem(m) => m.frozen = true,
        }
    }

    pub fn encode<'a>(&'a self, tape: &mut Tape<'a>, x: &[f64]) -> Result<Encoding> {
        let d = self.input_dim();
        if x.len() != d {
            return Err(Error::shape("model input", &[d], &[x.len()]));
        }
        let xv = tape.constant(x.to_vec());
        match self {
            ConceptModel::Cbm(m) => Ok(Encoding::Cbm {
                probs: m.net.encode(tape, &m.encoder_params, xv)?,
            }),
            ConceptModel::Cem(m) => Ok(Encoding::Cem(m.net.encode(tape, &m.concept_params, xv)?)),
        }
    }

    /// Class logits computed from `probs` (CEMs mix the embeddings in `enc`).
    pub fn classify<'a>(&'a self, tape: &mut Tape<'a>, enc: &Encoding, probs: Var) -> Result<Var> {
        match (self, enc) {
            (ConceptModel::Cbm(m), _) => m.net.classify(tape, &m.head_params, probs),
            (ConceptModel::Cem(m), Encoding::Cem(e)) => m.net.classify(tape, &m.head_params, e, probs),
            (ConceptModel::Cem(_), Encoding::Cbm { .. }) => {
                Err(Error::Invalid("CEM classification needs a CEM encoding".into()))
            }
        }
    }

    pub fn predict_concepts(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let enc = self.encode(&mut tape, x)?;
        Ok(tape.value(enc.probs()).to_vec())
    }

    /// `(ĉ, logits)` of the unintervened forward pass.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let enc = self.encode(&mut tape, x)?;
        let logits = self.classify(&mut tape, &enc, enc.probs())?;
        Ok((tape.value(enc.probs()).to_vec(), tape.value(logits).to_vec()))
    }

    /// Logits for input `x` when the classifier is fed `probs` instead of `ĉ`.
    pub fn logits_with(&self, x: &[f64], probs: &[f64]) -> Result<Vec<f64>> {
        let k = self.num_concepts();
        if probs.len() != k {
            return Err(Error::shape("concept vector", &[k], &[probs.len()]));
        }
        let mut tape = Tape::new();
        let enc = self.encode(&mut tape, x)?;
        let p = tape.constant(probs.to_vec());
        let logits = self.classify(&mut tape, &enc, p)?;
        Ok(tape.value(logits).to_vec())
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
