//! Concept embedding models: per-concept positive/negative embeddings mixed by
//! a shared scoring function.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::train::{fit, History, TrainConfig};
use super::{ArchConfig, LossComponents, ModelDims};
use crate::datagen::{Dataset, SampleRecord};
use crate::error::{Error, Result};
use crate::ndcompute::{mix_seed, rng_for, Activation, Mlp, ParamStore, Tape, Var};

/// Tape handles produced by [`CemNet::encode`].
#[derive(Debug, Clone)]
pub struct CemEncoding {
    pub probs: Var,
    pub plus: Vec<Var>,
    pub minus: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CemNet {
    pub emb_width: usize,
    pub phi_plus: Vec<Mlp>,
    pub phi_minus: Vec<Mlp>,
    /// `[ĉ⁺, ĉ⁻] (2m) -> probability`, shared by all concepts.
    pub scorer: Mlp,
    /// `k·m -> class logits`.
    pub head: Mlp,
    /// Optional `k -> k` concept-selection scores used by the rollout loss.
    pub policy_head: Option<Mlp>,
}

impl CemNet {
    pub fn num_concepts(&self) -> usize {
        self.phi_plus.len()
    }

    /// Embeddings and probabilities; lives in the concept store.
    pub fn encode<'a>(&self, tape: &mut Tape<'a>, cs: &'a ParamStore, x: Var) -> Result<CemEncoding> {
        let k = self.num_concepts();
        let mut plus = Vec::with_capacity(k);
        let mut minus = Vec::with_capacity(k);
        let mut ps = Vec::with_capacity(k);
        for i in 0..k {
            let p = self.phi_plus[i].forward(tape, cs, x)?;
            let m = self.phi_minus[i].forward(tape, cs, x)?;
            let both = tape.concat(&[p, m]);
            ps.push(self.scorer.forward(tape, cs, both)?);
            plus.push(p);
            minus.push(m);
        }
        let probs = tape.concat(&ps);
        Ok(CemEncoding { probs, plus, minus })
    }

    /// Concatenated mixed embeddings for an arbitrary probability vector.
    pub fn mix_all(&self, tape: &mut Tape<'_>, enc: &CemEncoding, probs: Var) -> Result<Var> {
        let k = self.num_concepts();
        if tape.dim(probs) != k {
            return Err(Error::shape("cem mix", &[k], &[tape.dim(probs)]));
        }
        let parts = (0..k)
            .map(|i| tape.mix(probs, i, enc.plus[i], enc.minus[i]))
            .collect::<Result<Vec<_>>>()?;
        Ok(tape.concat(&parts))
    }

    /// Class logits for `probs`, mixing the embeddings in `enc`.
    pub fn classify<'a>(&self, tape: &mut Tape<'a>, hs: &'a ParamStore, enc: &CemEncoding, probs: Var) -> Result<Var> {
        let mixed = self.mix_all(tape, enc, probs)?;
        self.head.forward(tape, hs, mixed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CemModel {
    pub dims: ModelDims,
    pub net: CemNet,
    pub concept_params: ParamStore,
    pub head_params: ParamStore,
    /// Set when trained with simulated interventions.
    #[serde(default)]
    pub intervention_aware: bool,
    #[serde(default)]
    pub frozen: bool,
}

impl CemModel {
    pub fn new(dims: ModelDims, arch: &ArchConfig, with_policy_head: bool, seed: u64) -> Result<Self> {
        dims.validate()?;
        arch.validate()?;
        let k = dims.num_concepts;
        let m = arch.embedding_width;
        let width = arch.width_for(k);
        let mut rng = rng_for(seed, 0xCE0);
        let mut concept_params = ParamStore::new();
        let mut head_params = ParamStore::new();
        let mut phi_plus = Vec::with_capacity(k);
        let mut phi_minus = Vec::with_capacity(k);
        for i in 0..k {
            for (prefix, list) in [("phi_plus", &mut phi_plus), ("phi_minus", &mut phi_minus)] {
                list.push(Mlp::new(
                    &mut concept_params,
                    &format!("{prefix}.{i}"),
                    &[dims.input_dim, m],
                    Activation::LeakyRelu,
                    Activation::LeakyRelu,
                    &mut rng,
                )?);
            }
        }
        let scorer = Mlp::new(
            &mut concept_params,
            "score",
            &[2 * m, 1],
            Activation::Identity,
            Activation::Sigmoid,
            &mut rng,
        )?;
        let mut head_dims = vec![k * m];
        head_dims.extend(std::iter::repeat_n(width, arch.hidden_layers));
        head_dims.push(dims.num_classes);
        let head = Mlp::new(
            &mut head_params,
            "f",
            &head_dims,
            Activation::Relu,
            Activation::Identity,
            &mut rng,
        )?;
        let policy_head = if with_policy_head {
            Some(Mlp::new(
                &mut head_params,
                "policy",
                &[k, width, k],
                Activation::Relu,
                Activation::Identity,
                &mut rng,
            )?)
        } else {
            None
        };
        Ok(Self {
            dims,
            net: CemNet {
                emb_width: m,
                phi_plus,
                phi_minus,
                scorer,
                head,
                policy_head,
            },
            concept_params,
            head_params,
            intervention_aware: false,
            frozen: false,
        })
    }
}

/// `p · c⁺ + (1 − p) · c⁻`.
pub fn cem_mix(p: f64, c_plus: &[f64], c_minus: &[f64]) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::field("p", format!("{p} is outside [0, 1]")));
    }
    if c_plus.len() != c_minus.len() {
        return Err(Error::shape("cem_mix", &[c_plus.len()], &[c_minus.len()]));
    }
    Ok(c_plus.iter().zip(c_minus).map(|(a, b)| p * a + (1.0 - p) * b).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptEmbedding {
    pub plus: Vec<f64>,
    pub minus: Vec<f64>,
    pub prob: f64,
}

pub fn cem_concept_embed(model: &CemModel, x: &[f64]) -> Result<Vec<ConceptEmbedding>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.to_vec());
    let enc = model.net.encode(&mut tape, &model.concept_params, xv)?;
    let probs = tape.value(enc.probs).to_vec();
    Ok((0..model.dims.num_concepts)
        .map(|i| ConceptEmbedding {
            plus: tape.value(enc.plus[i]).to_vec(),
            minus: tape.value(enc.minus[i]).to_vec(),
            prob: probs[i],
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CemOutput {
    pub probs: Vec<f64>,
    pub mixed: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Forward pass where `overrides` replace the mixing probability of chosen concepts.
pub fn cem_forward(model: &CemModel, x: &[f64], overrides: Option<&BTreeMap<usize, f64>>) -> Result<CemOutput> {
    let k = model.dims.num_concepts;
    let mut fixed = vec![None; k];
    for (&i, &v) in overrides.into_iter().flatten() {
        if i >= k {
            return Err(Error::IndexOutOfRange { index: i, len: k });
        }
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::field("override", format!("{v} is outside [0, 1]")));
        }
        fixed[i] = Some(v);
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.to_vec());
    let enc = model.net.encode(&mut tape, &model.concept_params, xv)?;
    let used = tape.splice(enc.probs, &fixed)?;
    let mixed = model.net.mix_all(&mut tape, &enc, used)?;
    let logits = model.net.head.forward(&mut tape, &model.head_params, mixed)?;
    Ok(CemOutput {
        probs: tape.value(enc.probs).to_vec(),
        mixed: tape.value(mixed).to_vec(),
        logits: tape.value(logits).to_vec(),
    })
}

/// `ce(f(ĉ), y) + λ_conc · bce(p̂, c)` on the tape.
pub fn cem_joint_loss_on<'a>(
    net: &CemNet,
    tape: &mut Tape<'a>,
    cs: &'a ParamStore,
    hs: &'a ParamStore,
    r: &SampleRecord,
    lambda_conc: f64,
) -> Result<(Var, Var, Var)> {
    cem_loss_with_interventions(net, tape, cs, hs, r, lambda_conc, None)
}

/// As [`cem_joint_loss_on`], with the label head seeing `p̂` overridden by
/// ground truth wherever `intervened` is set.
pub fn cem_loss_with_interventions<'a>(
    net: &CemNet,
    tape: &mut Tape<'a>,
    cs: &'a ParamStore,
    hs: &'a ParamStore,
    r: &SampleRecord,
    lambda_conc: f64,
    intervened: Option<&[bool]>,
) -> Result<(Var, Var, Var)> {
    let x = tape.constant(r.x.clone());
    let enc = net.encode(tape, cs, x)?;
    let fed = match intervened {
        Some(m) => {
            let fixed: Vec<Option<f64>> = m.iter().zip(&r.c).map(|(&on, &c)| on.then_some(c)).collect();
            tape.splice(enc.probs, &fixed)?
        }
        None => enc.probs,
    };
    let logits = net.classify(tape, hs, &enc, fed)?;
    let task = tape.ce(logits, r.y)?;
    let conc = tape.bce(enc.probs, &r.c, None)?;
    let total = tape.combine(&[(task, 1.0), (conc, lambda_conc)]);
    Ok((total, task, conc))
}

/// Batch mean of the joint CEM objective and its parts.
pub fn cem_joint_loss(model: &CemModel, batch: &[SampleRecord], lambda_conc: f64) -> Result<LossComponents> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut out = LossComponents::default();
    for r in batch {
        let mut tape = Tape::new();
        let (total, task, conc) = cem_joint_loss_on(
            &model.net,
            &mut tape,
            &model.concept_params,
            &model.head_params,
            r,
            lambda_conc,
        )?;
        out.total += tape.scalar(total);
        out.pred += tape.scalar(task);
        out.conc += tape.scalar(conc);
    }
    Ok(out.scaled(1.0 / batch.len() as f64))
}

/// Plain joint CEM training. Each concept of a training sample is replaced
/// by its ground truth with probability `rand_int` before the label head
/// (random training-time interventions); validation uses no interventions.
pub fn train_cem(
    model: &mut CemModel,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    lambda_conc: f64,
    rand_int: f64,
    seed: u64,
) -> Result<History> {
    if !(0.0..=1.0).contains(&rand_int) {
        return Err(Error::field("rand_int", "must lie in [0, 1]"));
    }
    if model.frozen {
        return Err(Error::Invalid("cannot train a frozen model".into()));
    }
    train.ensure_nonempty()?;
    val.ensure_nonempty()?;
    let CemModel {
        net,
        concept_params,
        head_params,
        ..
    } = model;
    let net = &*net;
    fit(
        "cem",
        &mut [concept_params, head_params],
        train.len(),
        cfg,
        mix_seed(seed, 4),
        |tape, s, i, rng| {
            let r = &train.records[i];
            let mask: Option<Vec<bool>> =
                (rand_int > 0.0).then(|| r.c.iter().map(|_| rng.random::<f64>() < rand_int).collect());
            Ok(cem_loss_with_interventions(net, tape, s[0], s[1], r, lambda_conc, mask.as_deref())?.0)
        },
        |s| {
            let mut total = 0.0;
            for r in &val.records {
                let mut tape = Tape::new();
                let (l, _, _) = cem_joint_loss_on(net, &mut tape, s[0], s[1], r, lambda_conc)?;
                total += tape.scalar(l);
            }
            Ok(total / val.len() as f64)
        },
    )
}

/// Mean `|p̂_i − c_i|` and label accuracy of the plain forward pass.
pub fn cem_metrics(model: &CemModel, data: &Dataset) -> Result<(f64, f64)> {
    data.ensure_nonempty()?;
    let mut err = 0.0;
    let mut correct = 0usize;
    for r in &data.records {
        let out = cem_forward(model, &r.x, None)?;
        err += out.probs.iter().zip(&r.c).map(|(p, c)| (p - c).abs()).sum::<f64>() / r.c.len() as f64;
        correct += usize::from(super::argmax(&out.logits) == r.y);
    }
    let n = data.len() as f64;
    Ok((err / n, correct as f64 / n))
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
    fn mix_examples() {
        assert_eq!(cem_mix(1.0, &[1.0, 2.0], &[3.0, 4.0]).unwrap(), vec![1.0, 2.0]);
        assert_eq!(cem_mix(0.0, &[1.0, 2.0], &[3.0, 4.0]).unwrap(), vec![3.0, 4.0]);
        assert_eq!(cem_mix(0.5, &[2.0, 0.0], &[0.0, 2.0]).unwrap(), vec![1.0, 1.0]);
        assert!(cem_mix(1.5, &[0.0], &[0.0]).is_err());
        assert!(cem_mix(-0.1, &[0.0], &[0.0]).is_err());
    }

    #[test]
    fn zero_scorer_gives_half() {
        let mut m = CemModel::new(dims(), &ArchConfig::default(), false, 0).unwrap();
        m.net.scorer.clone().zero_params(&mut m.concept_params);
        let e = cem_concept_embed(&m, &[0.7; 12]).unwrap();
        assert!(e.iter().all(|c| c.prob == 0.5));
    }

    #[test]
    fn forward_without_overrides_composes_embed_and_mix() {
        let m = CemModel::new(dims(), &ArchConfig::default(), false, 3).unwrap();
        let x = [0.2, -0.4, 1.0, 0.0, 0.3, 0.9, -1.2, 0.5, 0.1, 0.0, 2.0, -0.7];
        let out = cem_forward(&m, &x, None).unwrap();
        let emb = cem_concept_embed(&m, &x).unwrap();
        let mixed: Vec<f64> = emb
            .iter()
            .flat_map(|e| cem_mix(e.prob, &e.plus, &e.minus).unwrap())
            .collect();
        assert_eq!(out.mixed, mixed);
        let own: BTreeMap<usize, f64> = [(2, out.probs[2])].into_iter().collect();
        assert_eq!(cem_forward(&m, &x, Some(&own)).unwrap().logits, out.logits);
        let bad: BTreeMap<usize, f64> = [(6, 1.0)].into_iter().collect();
        assert!(cem_forward(&m, &x, Some(&bad)).is_err());
    }

    #[test]
    fn permuting_concept_networks_permutes_outputs() {
        let m = CemModel::new(dims(), &ArchConfig::default(), false, 3).unwrap();
        let mut p = m.clone();
        p.net.phi_plus.swap(0, 4);
        p.net.phi_minus.swap(0, 4);
        let x = [0.5; 12];
        let a = cem_concept_embed(&m, &x).unwrap();
        let b = cem_concept_embed(&p, &x).unwrap();
        assert_eq!(a[0], b[4]);
        assert_eq!(a[4], b[0]);
        assert_eq!(a[1], b[1]);
    }

    #[test]
    fn trained_on_noiseless_world_fits_concepts() {
        let w = GenerativeWorld::preset(Preset::SmallNoiseless, 1);
        let s = sample_splits(&w, (400, 200, 200), 3).unwrap();
        let mut m = CemModel::new(dims(), &ArchConfig::default(), false, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 60,
            ..TrainConfig::default()
        };
        train_cem(&mut m, &s.train, &s.val, &cfg, 1.0, 0.25, 5).unwrap();
        let (err, acc) = cem_metrics(&m, &s.val).unwrap();
        assert!(err <= 0.1, "mean |p - c| = {err}");
        // full ground-truth override does not hurt
        let mut over_correct = 0usize;
        for r in &s.test.records {
            let ov: BTreeMap<usize, f64> = r.c.iter().copied().enumerate().collect();
            let out = cem_forward(&m, &r.x, Some(&ov)).unwrap();
            over_correct += usize::from(super::super::argmax(&out.logits) == r.y);
        }
        let (_, test_acc) = cem_metrics(&m, &s.test).unwrap();
        assert!(over_correct as f64 / s.test.len() as f64 >= test_acc);
        assert!(acc > 0.9);
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1usize..8).prop_flat_map(|m| {
            (
                prop::collection::vec(-5.0f64..5.0, m),
                prop::collection::vec(-5.0f64..5.0, m),
            )
        })
    }

    proptest! {
        #[test]
        fn mix_is_affine_in_p((plus, minus) in pair(), p in 0.0f64..=1.0, q in 0.0f64..=1.0, a in 0.0f64..=1.0) {
            let mp = cem_mix(p, &plus, &minus).unwrap();
            let mq = cem_mix(q, &plus, &minus).unwrap();
            let mixed = cem_mix(a * p + (1.0 - a) * q, &plus, &minus).unwrap();
            for i in 0..plus.len() {
                prop_assert!((mixed[i] - (a * mp[i] + (1.0 - a) * mq[i])).abs() < 1e-9);
            }
        }

        #[test]
        fn mix_endpoints_are_exact((plus, minus) in pair()) {
            prop_assert_eq!(cem_mix(1.0, &plus, &minus).unwrap(), plus.clone());
            prop_assert_eq!(cem_mix(0.0, &plus, &minus).unwrap(), minus.clone());
        }
    }
}
