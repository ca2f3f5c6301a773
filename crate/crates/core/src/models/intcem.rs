//! Intervention-aware training of concept embedding models.

use std::collections::BTreeSet;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::cem::{CemEncoding, CemModel, CemNet};
use super::train::{fit, History, TrainConfig};
use super::LossComponents;
use crate::datagen::{Dataset, SampleRecord};
use crate::error::{Error, Result};
use crate::intervene::{ucp_select, SelectionUnits};
use crate::ndcompute::{ce_loss, mix_seed, rng_for, ParamStore, Rng, Tape, Var};

/// Distribution of the number of selection units intervened on per training sample.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HorizonDistribution {
    /// Uniform over `0..=units`.
    #[default]
    Uniform,
    Fixed {
        t: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntCemConfig {
    /// Weight base for the post-intervention term; must be `>= 1`.
    pub gamma: f64,
    pub lambda_conc: f64,
    pub lambda_roll: f64,
    pub horizon: HorizonDistribution,
}

impl Default for IntCemConfig {
    fn default() -> Self {
        Self {
            gamma: 1.1,
            lambda_conc: 1.0,
            lambda_roll: 0.0,
            horizon: HorizonDistribution::Uniform,
        }
    }
}

impl IntCemConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 1.0 && self.gamma.is_finite()) {
            return Err(Error::field("gamma", "must be finite and >= 1"));
        }
        if self.lambda_conc.is_nan() || self.lambda_conc < 0.0 {
            return Err(Error::field("lambda_conc", "must be >= 0"));
        }
        if self.lambda_roll.is_nan() || self.lambda_roll < 0.0 {
            return Err(Error::field("lambda_roll", "must be >= 0"));
        }
        Ok(())
    }
}

pub fn sample_horizon(dist: HorizonDistribution, num_units: usize, rng: &mut Rng) -> Result<usize> {
    match dist {
        HorizonDistribution::Uniform => Ok(rng.random_range(0..=num_units)),
        HorizonDistribution::Fixed { t } if t <= num_units => Ok(t),
        HorizonDistribution::Fixed { t } => Err(Error::TrajectoryTooLong { t, units: num_units }),
    }
}

/// First `t` units chosen by UCP on fixed probabilities.
pub fn ucp_trajectory(probs: &[f64], units: &SelectionUnits, t: usize) -> Result<Vec<usize>> {
    if t > units.len() {
        return Err(Error::TrajectoryTooLong { t, units: units.len() });
    }
    let mut done = BTreeSet::new();
    let mut out = Vec::with_capacity(t);
    for _ in 0..t {
        let u = ucp_select(probs, &done, Some(units))?;
        done.insert(u);
        out.push(u);
    }
    Ok(out)
}

/// `(ce_pre + γ^T · ce_post) / (1 + γ^T)`.
pub fn prediction_loss(tape: &mut Tape<'_>, ce_pre: Var, ce_post: Var, gamma: f64, horizon: usize) -> Var {
    let w = gamma.powi(horizon as i32);
    tape.combine(&[(ce_pre, 1.0 / (1.0 + w)), (ce_post, w / (1.0 + w))])
}

/// Candidate whose ground-truth substitution into `base` gives the lowest
/// label cross-entropy; lowest index on ties.
pub fn greedy_oracle_target<'a>(
    net: &CemNet,
    tape: &mut Tape<'a>,
    hs: &'a ParamStore,
    enc: &CemEncoding,
    base: &[f64],
    record: &SampleRecord,
    candidates: &[usize],
) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for &j in candidates {
        let mut probs = base.to_vec();
        probs[j] = record.c[j];
        let p = tape.constant(probs);
        let logits = net.classify(tape, hs, enc, p)?;
        let l = ce_loss(tape.value(logits), record.y)?;
        if best.is_none_or(|(_, b)| l < b) {
            best = Some((j, l));
        }
    }
    best.map(|(j, _)| j).ok_or(Error::Exhausted)
}

/// Imitation loss of the policy head against the greedy oracle; zero when
/// every concept is already intervened.
pub fn rollout_loss<'a>(
    net: &CemNet,
    tape: &mut Tape<'a>,
    hs: &'a ParamStore,
    enc: &CemEncoding,
    probs: Var,
    record: &SampleRecord,
    mask: &[Option<f64>],
) -> Result<Var> {
    let head = net
        .policy_head
        .as_ref()
        .ok_or_else(|| Error::Invalid("rollout loss needs a model built with a policy head".into()))?;
    let candidates: Vec<usize> = (0..mask.len()).filter(|i| mask[*i].is_none()).collect();
    if candidates.is_empty() {
        return Ok(tape.constant(vec![0.0]));
    }
    let base = tape.value(probs).to_vec();
    let target = greedy_oracle_target(net, tape, hs, enc, &base, record, &candidates)?;
    let scores = head.forward(tape, hs, probs)?;
    let allowed: Vec<bool> = mask.iter().map(Option::is_none).collect();
    tape.masked_ce(scores, target, &allowed)
}

#[derive(Debug, Clone, Copy)]
pub struct IntCemLossVars {
    pub total: Var,
    pub pred: Var,
    pub conc: Var,
    pub roll: Var,
}

/// Intervention-aware loss for one sample whose encoding is already on the tape.
#[allow(clippy::too_many_arguments)]
pub fn intcem_loss_on<'a>(
    net: &CemNet,
    tape: &mut Tape<'a>,
    hs: &'a ParamStore,
    enc: &CemEncoding,
    record: &SampleRecord,
    units: &SelectionUnits,
    trajectory: &[usize],
    cfg: &IntCemConfig,
) -> Result<IntCemLossVars> {
    cfg.validate()?;
    let horizon = trajectory.len();
    if horizon > units.len() {
        return Err(Error::TrajectoryTooLong {
            t: horizon,
            units: units.len(),
        });
    }
    let mut mask = vec![None; net.num_concepts()];
    for &u in trajectory {
        for &i in units.members(u)? {
            mask[i] = Some(record.c[i]);
        }
    }
    let pre_logits = net.classify(tape, hs, enc, enc.probs)?;
    let ce_pre = tape.ce(pre_logits, record.y)?;
    let tilde = tape.splice(enc.probs, &mask)?;
    let post_logits = net.classify(tape, hs, enc, tilde)?;
    let ce_post = tape.ce(post_logits, record.y)?;
    let pred = prediction_loss(tape, ce_pre, ce_post, cfg.gamma, horizon);
    let conc = tape.bce(enc.probs, &record.c, None)?;
    let roll = if cfg.lambda_roll > 0.0 {
        rollout_loss(net, tape, hs, enc, tilde, record, &mask)?
    } else {
        tape.constant(vec![0.0])
    };
    let total = tape.combine(&[(pred, 1.0), (conc, cfg.lambda_conc), (roll, cfg.lambda_roll)]);
    Ok(IntCemLossVars {
        total,
        pred,
        conc,
        roll,
    })
}

/// Batch mean of the intervention-aware loss for given per-sample trajectories.
pub fn intcem_loss(
    model: &CemModel,
    batch: &[SampleRecord],
    trajectories: &[Vec<usize>],
    units: Option<&SelectionUnits>,
    cfg: &IntCemConfig,
) -> Result<LossComponents> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if trajectories.len() != batch.len() {
        return Err(Error::shape(
            "intcem_loss trajectories",
            &[batch.len()],
            &[trajectories.len()],
        ));
    }
    let owned;
    let units = match units {
        Some(u) => u,
        None => {
            owned = SelectionUnits::singletons(model.dims.num_concepts);
            &owned
        }
    };
    let mut out = LossComponents::default();
    for (r, traj) in batch.iter().zip(trajectories) {
        let mut tape = Tape::new();
        let x = tape.constant(r.x.clone());
        let enc = model.net.encode(&mut tape, &model.concept_params, x)?;
        let v = intcem_loss_on(&model.net, &mut tape, &model.head_params, &enc, r, units, traj, cfg)?;
        out.total += tape.scalar(v.total);
        out.pred += tape.scalar(v.pred);
        out.conc += tape.scalar(v.conc);
        out.roll += tape.scalar(v.roll);
    }
    Ok(out.scaled(1.0 / batch.len() as f64))
}

#[allow(clippy::too_many_arguments)]
fn sampled_loss<'a>(
    net: &CemNet,
    tape: &mut Tape<'a>,
    cs: &'a ParamStore,
    hs: &'a ParamStore,
    record: &SampleRecord,
    units: &SelectionUnits,
    cfg: &IntCemConfig,
    rng: &mut Rng,
) -> Result<Var> {
    let x = tape.constant(record.x.clone());
    let enc = net.encode(tape, cs, x)?;
    let t = sample_horizon(cfg.horizon, units.len(), rng)?;
    let traj = ucp_trajectory(tape.value(enc.probs), units, t)?;
    Ok(intcem_loss_on(net, tape, hs, &enc, record, units, &traj, cfg)?.total)
}

/// Trains with a freshly sampled UCP trajectory per sample and step.
pub fn train_intcem(
    model: &mut CemModel,
    train: &Dataset,
    val: &Dataset,
    cfg: &IntCemConfig,
    train_cfg: &TrainConfig,
    units: Option<&SelectionUnits>,
    seed: u64,
) -> Result<History> {
    cfg.validate()?;
    if model.frozen {
        return Err(Error::Invalid("cannot train a frozen model".into()));
    }
    if cfg.lambda_roll > 0.0 && model.net.policy_head.is_none() {
        return Err(Error::field("lambda_roll", "model has no policy head"));
    }
    train.ensure_nonempty()?;
    val.ensure_nonempty()?;
    let units = units
        .cloned()
        .unwrap_or_else(|| SelectionUnits::singletons(model.dims.num_concepts));
    model.intervention_aware = true;
    let CemModel {
        net,
        concept_params,
        head_params,
        ..
    } = model;
    let net = &*net;
    let units = &units;
    let val_seed = mix_seed(seed, 0x7A1);
    fit(
        "intcem",
        &mut [concept_params, head_params],
        train.len(),
        train_cfg,
        mix_seed(seed, 5),
        |tape, s, i, rng| sampled_loss(net, tape, s[0], s[1], &train.records[i], units, cfg, rng),
        |s| {
            let mut total = 0.0;
            for (i, r) in val.records.iter().enumerate() {
                let mut rng = rng_for(mix_seed(val_seed, i as u64), 0);
                let mut tape = Tape::new();
                let l = sampled_loss(net, &mut tape, s[0], s[1], r, units, cfg, &mut rng)?;
                total += tape.scalar(l);
            }
            Ok(total / val.len() as f64)
        },
    )
}
