//! Concept bottleneck models `h = f(g(x))` and their three training schemes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::train::{fit, History, TrainConfig};
use super::{ArchConfig, ModelDims};
use crate::datagen::{Dataset, SampleRecord};
use crate::error::{Error, Result};
use crate::ndcompute::{mix_seed, rng_for, Activation, Mlp, ParamStore, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CbmScheme {
    Independent,
    Sequential,
    Joint,
}

impl CbmScheme {
    pub fn name(self) -> &'static str {
        match self {
            CbmScheme::Independent => "independent",
            CbmScheme::Sequential => "sequential",
            CbmScheme::Joint => "joint",
        }
    }
}

impl fmt::Display for CbmScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CbmScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "independent" => Ok(CbmScheme::Independent),
            "sequential" => Ok(CbmScheme::Sequential),
            "joint" => Ok(CbmScheme::Joint),
            other => Err(Error::field("scheme", format!("unknown scheme `{other}`"))),
        }
    }
}

/// Layer stacks of a CBM. Parameters live in the owning [`CbmModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CbmNet {
    /// `x[d] -> concept logits[k]`.
    pub encoder: Mlp,
    /// `concept probabilities[k] -> class logits[M]`.
    pub head: Mlp,
}

impl CbmNet {
    /// Concept probabilities `sigmoid(g(x))`.
    pub fn encode<'a>(&self, tape: &mut Tape<'a>, g: &'a ParamStore, x: Var) -> Result<Var> {
        let logits = self.encoder.forward(tape, g, x)?;
        Ok(tape.sigmoid(logits))
    }

    pub fn classify<'a>(&self, tape: &mut Tape<'a>, f: &'a ParamStore, probs: Var) -> Result<Var> {
        self.head.forward(tape, f, probs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CbmModel {
    pub dims: ModelDims,
    pub scheme: CbmScheme,
    /// Weight of the concept term in the joint objective.
    pub joint_weight: f64,
    pub net: CbmNet,
    pub encoder_params: ParamStore,
    pub head_params: ParamStore,
    #[serde(default)]
    pub frozen: bool,
}

impl CbmModel {
    pub fn new(dims: ModelDims, arch: &ArchConfig, scheme: CbmScheme, joint_weight: f64, seed: u64) -> Result<Self> {
        dims.validate()?;
        arch.validate()?;
        if joint_weight.is_nan() || joint_weight < 0.0 {
            return Err(Error::field("joint_weight", "must be >= 0"));
        }
        let width = arch.width_for(dims.num_concepts);
        let mut rng = rng_for(seed, 0xCB0);
        let mut encoder_params = ParamStore::new();
        let mut head_params = ParamStore::new();
        let mut enc_dims = vec![dims.input_dim];
        enc_dims.extend(std::iter::repeat_n(width, arch.hidden_layers));
        enc_dims.push(dims.num_concepts);
        let mut head_dims = vec![dims.num_concepts];
        head_dims.extend(std::iter::repeat_n(width, arch.hidden_layers));
        head_dims.push(dims.num_classes);
        let encoder = Mlp::new(
            &mut encoder_params,
            "g",
            &enc_dims,
            Activation::Relu,
            Activation::Identity,
            &mut rng,
        )?;
        let head = Mlp::new(
            &mut head_params,
            "f",
            &head_dims,
            Activation::Relu,
            Activation::Identity,
            &mut rng,
        )?;
        Ok(Self {
            dims,
            scheme,
            joint_weight,
            net: CbmNet { encoder, head },
            encoder_params,
            head_params,
            frozen: false,
        })
    }
}

/// `(ĉ, ŷ logits)` for one input.
pub fn cbm_forward(model: &CbmModel, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.to_vec());
    let probs = model.net.encode(&mut tape, &model.encoder_params, xv)?;
    let logits = model.net.classify(&mut tape, &model.head_params, probs)?;
    Ok((tape.value(probs).to_vec(), tape.value(logits).to_vec()))
}

fn concept_loss<'a>(net: &CbmNet, tape: &mut Tape<'a>, g: &'a ParamStore, r: &SampleRecord) -> Result<Var> {
    let x = tape.constant(r.x.clone());
    let probs = net.encode(tape, g, x)?;
    tape.bce(probs, &r.c, None)
}

fn head_loss<'a>(net: &CbmNet, tape: &mut Tape<'a>, f: &'a ParamStore, input: &[f64], y: usize) -> Result<Var> {
    let c = tape.constant(input.to_vec());
    let logits = net.classify(tape, f, c)?;
    tape.ce(logits, y)
}

/// `ce(f(ĉ), y) + λ · bce(ĉ, c)` on the tape.
pub fn joint_loss<'a>(
    net: &CbmNet,
    tape: &mut Tape<'a>,
    g: &'a ParamStore,
    f: &'a ParamStore,
    r: &SampleRecord,
    joint_weight: f64,
) -> Result<Var> {
    let x = tape.constant(r.x.clone());
    let probs = net.encode(tape, g, x)?;
    let logits = net.classify(tape, f, probs)?;
    let task = tape.ce(logits, r.y)?;
    let conc = tape.bce(probs, &r.c, None)?;
    Ok(tape.combine(&[(task, 1.0), (conc, joint_weight)]))
}

fn mean_over<F>(data: &Dataset, mut per_sample: F) -> Result<f64>
where
    F: FnMut(&SampleRecord, usize) -> Result<f64>,
{
    data.ensure_nonempty()?;
    let mut total = 0.0;
    for (i, r) in data.records.iter().enumerate() {
        total += per_sample(r, i)?;
    }
    Ok(total / data.len() as f64)
}

/// Concept vectors the head is trained on: ground truth for the independent
/// scheme, the encoder's predictions otherwise.
pub fn head_training_inputs(model: &CbmModel, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    match model.scheme {
        CbmScheme::Independent => Ok(data.records.iter().map(|r| r.c.clone()).collect()),
        CbmScheme::Sequential | CbmScheme::Joint => {
            data.records.iter().map(|r| Ok(cbm_forward(model, &r.x)?.0)).collect()
        }
    }
}

/// Trains `g` alone on `(x, c)` with the concept bce.
pub fn train_cbm_encoder(
    model: &mut CbmModel,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<History> {
    train.ensure_nonempty()?;
    val.ensure_nonempty()?;
    let CbmModel {
        net, encoder_params, ..
    } = model;
    let net = &*net;
    fit(
        "encoder",
        &mut [encoder_params],
        train.len(),
        cfg,
        mix_seed(seed, 1),
        |tape, s, i, _| concept_loss(net, tape, s[0], &train.records[i]),
        |s| {
            mean_over(val, |r, _| {
                let mut tape = Tape::new();
                let l = concept_loss(net, &mut tape, s[0], r)?;
                Ok(tape.scalar(l))
            })
        },
    )
}

/// Trains `f` alone on the inputs given by [`head_training_inputs`].
pub fn train_cbm_head(
    model: &mut CbmModel,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<History> {
    train.ensure_nonempty()?;
    val.ensure_nonempty()?;
    let train_inputs = head_training_inputs(model, train)?;
    let val_inputs = head_training_inputs(model, val)?;
    let CbmModel { net, head_params, .. } = model;
    let net = &*net;
    fit(
        "head",
        &mut [head_params],
        train.len(),
        cfg,
        mix_seed(seed, 2),
        |tape, s, i, _| head_loss(net, tape, s[0], &train_inputs[i], train.records[i].y),
        |s| {
            mean_over(val, |r, i| {
                let mut tape = Tape::new();
                let l = head_loss(net, &mut tape, s[0], &val_inputs[i], r.y)?;
                Ok(tape.scalar(l))
            })
        },
    )
}

/// Trains `g` and `f` together on the joint objective.
pub fn train_cbm_joint(
    model: &mut CbmModel,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<History> {
    train.ensure_nonempty()?;
    val.ensure_nonempty()?;
    let lambda = model.joint_weight;
    let CbmModel {
        net,
        encoder_params,
        head_params,
        ..
    } = model;
    let net = &*net;
    fit(
        "joint",
        &mut [encoder_params, head_params],
        train.len(),
        cfg,
        mix_seed(seed, 3),
        |tape, s, i, _| joint_loss(net, tape, s[0], s[1], &train.records[i], lambda),
        |s| {
            mean_over(val, |r, _| {
                let mut tape = Tape::new();
                let l = joint_loss(net, &mut tape, s[0], s[1], r, lambda)?;
                Ok(tape.scalar(l))
            })
        },
    )
}

/// Trains according to `model.scheme`; returns one history per stage.
pub fn train_cbm(
    model: &mut CbmModel,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<History>> {
    if model.frozen {
        return Err(Error::Invalid("cannot train a frozen model".into()));
    }
    match model.scheme {
        CbmScheme::Joint => Ok(vec![train_cbm_joint(model, train, val, cfg, seed)?]),
        CbmScheme::Independent | CbmScheme::Sequential => {
            let g = train_cbm_encoder(model, train, val, cfg, seed)?;
            let f = train_cbm_head(model, train, val, cfg, seed)?;
            Ok(vec![g, f])
        }
    }
}

/// Mean concept bce and label accuracy of the plain forward pass.
pub fn cbm_metrics(model: &CbmModel, data: &Dataset) -> Result<(f64, f64)> {
    data.ensure_nonempty()?;
    let mut bce = 0.0;
    let mut correct = 0usize;
    for r in &data.records {
        let (c, logits) = cbm_forward(model, &r.x)?;
        bce += crate::ndcompute::bce_loss(&c, &r.c, None)?;
        correct += usize::from(super::argmax(&logits) == r.y);
    }
    let n = data.len() as f64;
    Ok((bce / n, correct as f64 / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{sample_splits, GenerativeWorld, Preset};

    fn dims() -> ModelDims {
        ModelDims {
            input_dim: 12,
            num_concepts: 6,
            num_classes: 4,
        }
    }

    #[test]
    fn zero_encoder_gives_half() {
        let m = CbmModel::new(dims(), &ArchConfig::default(), CbmScheme::Joint, 1.0, 0).unwrap();
        let mut m2 = m.clone();
        m2.net.encoder.zero_params(&mut m2.encoder_params);
        let (c, _) = cbm_forward(&m2, &[0.3; 12]).unwrap();
        assert!(c.iter().all(|v| *v == 0.5));
    }

    #[test]
    fn forward_is_deterministic_and_checks_dims() {
        let m = CbmModel::new(dims(), &ArchConfig::default(), CbmScheme::Joint, 1.0, 5).unwrap();
        assert_eq!(
            cbm_forward(&m, &[0.1; 12]).unwrap(),
            cbm_forward(&m, &[0.1; 12]).unwrap()
        );
        assert!(cbm_forward(&m, &[0.1; 11]).is_err());
    }

    #[test]
    fn independent_head_sees_ground_truth() {
        let w = GenerativeWorld::preset(Preset::Small, 1);
        let s = sample_splits(&w, (30, 10, 10), 2).unwrap();
        let mut m = CbmModel::new(dims(), &ArchConfig::default(), CbmScheme::Independent, 1.0, 0).unwrap();
        let inputs = head_training_inputs(&m, &s.train).unwrap();
        for (inp, r) in inputs.iter().zip(&s.train.records) {
            assert_eq!(inp, &r.c);
        }
        m.scheme = CbmScheme::Sequential;
        let inputs = head_training_inputs(&m, &s.train).unwrap();
        assert!(inputs.iter().all(|v| v.iter().all(|p| *p > 0.0 && *p < 1.0)));
    }

    #[test]
    fn sequential_training_on_noiseless_world() {
        let w = GenerativeWorld::preset(Preset::SmallNoiseless, 1);
        let s = sample_splits(&w, (400, 200, 10), 3).unwrap();
        let mut m = CbmModel::new(dims(), &ArchConfig::default(), CbmScheme::Sequential, 1.0, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 80,
            ..TrainConfig::default()
        };
        let hist = train_cbm(&mut m, &s.train, &s.val, &cfg, 7).unwrap();
        assert_eq!(hist.len(), 2);
        let (bce, acc) = cbm_metrics(&m, &s.val).unwrap();
        assert!(bce <= 0.05, "bce {bce}");
        assert!(acc >= 0.99, "acc {acc}");
        // argmax of f on each noiseless template recovers its class
        for y in 0..w.num_classes() {
            let t: Vec<f64> = w.template(y).iter().map(|b| *b as f64).collect();
            let mut tape = Tape::new();
            let c = tape.constant(t);
            let logits = m.net.classify(&mut tape, &m.head_params, c).unwrap();
            assert_eq!(super::super::argmax(tape.value(logits)), y);
        }
    }

    #[test]
    fn joint_without_concept_weight_lowers_task_loss() {
        let w = GenerativeWorld::preset(Preset::Small, 2);
        let s = sample_splits(&w, (200, 100, 10), 4).unwrap();
        let mut m = CbmModel::new(dims(), &ArchConfig::default(), CbmScheme::Joint, 0.0, 2).unwrap();
        let cfg = TrainConfig {
            epochs: 10,
            ..TrainConfig::default()
        };
        let h = train_cbm(&mut m, &s.train, &s.val, &cfg, 1).unwrap();
        let first = h[0].epochs.first().unwrap().train_loss;
        let last = h[0].epochs.last().unwrap().train_loss;
        assert!(last < first);
    }

    #[test]
    fn training_is_deterministic() {
        let w = GenerativeWorld::preset(Preset::Small, 2);
        let s = sample_splits(&w, (60, 30, 10), 4).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = CbmModel::new(dims(), &ArchConfig::default(), CbmScheme::Joint, 1.0, 9).unwrap();
            train_cbm(&mut m, &s.train, &s.val, &cfg, 11).unwrap();
            (m.encoder_params.checksum(), m.head_params.checksum())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn empty_dataset_rejected() {
        let w = GenerativeWorld::preset(Preset::Small, 2);
        let s = sample_splits(&w, (10, 10, 10), 4).unwrap();
        let mut empty = s.train.clone();
        empty.records.clear();
        let mut m = CbmModel::new(dims(), &ArchConfig::default(), CbmScheme::Joint, 1.0, 9).unwrap();
        assert!(matches!(
            train_cbm(&mut m, &empty, &s.val, &TrainConfig::default(), 0),
            Err(Error::EmptyDataset)
        ));
    }
}
