//! End-to-end training of an intervention-aware CEM together with its realigner.

use std::collections::BTreeSet;

use super::net::{InputMode, Realigner, RealignerConfig, RealignerNet, TapeState};
use crate::datagen::{Dataset, SampleRecord};
use crate::error::{Error, Result};
use crate::intervene::{choose_unit, PolicyKind, PolicySource, SelectionUnits};
use crate::models::{
    fit, prediction_loss, rollout_loss, sample_horizon, ArchConfig, CemEncoding, CemModel, CemNet, History,
    IntCemConfig, LossComponents, ModelDims, TrainConfig,
};
use crate::ndcompute::{bce_loss, mix_seed, rng_for, ParamStore, Rng, Tape, Var};

fn rea_weights(gamma: f64, horizon: usize) -> (f64, f64) {
    let w = gamma.powi(horizon as i32);
    (1.0 / (1.0 + w), w / (1.0 + w))
}

/// `½ (bce(ĉ, c) + (bce(κ_0, c) + γ^T bce(κ_T, c)) / (1 + γ^T))`.
pub fn conc_rea_loss(
    c_hat: &[f64],
    c: &[f64],
    kappa_0: &[f64],
    kappa_t: &[f64],
    gamma: f64,
    horizon: usize,
) -> Result<f64> {
    if gamma.is_nan() || gamma < 1.0 {
        return Err(Error::field("gamma", "must be >= 1"));
    }
    let (a, b) = rea_weights(gamma, horizon);
    let base = bce_loss(c_hat, c, None)?;
    let k0 = bce_loss(kappa_0, c, None)?;
    let kt = bce_loss(kappa_t, c, None)?;
    Ok(0.5 * (base + a * k0 + b * kt))
}

/// Tape form of [`conc_rea_loss`].
pub fn conc_rea_loss_on(
    tape: &mut Tape<'_>,
    c_hat: Var,
    c: &[f64],
    kappa_0: Var,
    kappa_t: Var,
    gamma: f64,
    horizon: usize,
) -> Result<Var> {
    let (a, b) = rea_weights(gamma, horizon);
    let base = tape.bce(c_hat, c, None)?;
    let k0 = tape.bce(kappa_0, c, None)?;
    let kt = tape.bce(kappa_t, c, None)?;
    Ok(tape.combine(&[(base, 0.5), (k0, 0.5 * a), (kt, 0.5 * b)]))
}

/// A realigner as seen by the tape: either a network or the identity map.
#[derive(Debug, Clone, Copy)]
pub enum TapeRealigner<'n, 'a> {
    Identity,
    Net {
        net: &'n RealignerNet,
        store: &'a ParamStore,
        mode: InputMode,
    },
}

impl<'a> TapeRealigner<'_, 'a> {
    fn step(
        &self,
        tape: &mut Tape<'a>,
        c_tilde: Var,
        previous: Var,
        mask: &[Option<f64>],
        state: TapeState,
    ) -> Result<(Var, TapeState)> {
        match *self {
            TapeRealigner::Identity => Ok((tape.splice(c_tilde, mask)?, state)),
            TapeRealigner::Net { net, store, mode } => {
                let input = match mode {
                    InputMode::Original => c_tilde,
                    InputMode::PreviousOutput => tape.splice(previous, mask)?,
                };
                net.realign(tape, store, input, mask, state)
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ReaLossVars {
    pub total: Var,
    pub pred: Var,
    pub conc: Var,
    pub roll: Var,
}

/// Realignment-aware loss for one sample. `choose` picks the next unit given
/// the current realigned probabilities, the original prediction and the set
/// of units already intervened.
/// Picks the next unit from (realigned concepts, initial prediction, units
/// done, step).
pub type UnitChooser<'c> = dyn FnMut(&[f64], &[f64], &BTreeSet<usize>, usize) -> Result<usize> + 'c;

#[allow(clippy::too_many_arguments)]
pub fn intcem_rea_loss_on<'a>(
    net: &CemNet,
    tape: &mut Tape<'a>,
    hs: &'a ParamStore,
    enc: &CemEncoding,
    realigner: TapeRealigner<'_, 'a>,
    record: &SampleRecord,
    units: &SelectionUnits,
    horizon: usize,
    cfg: &IntCemConfig,
    choose: &mut UnitChooser<'_>,
) -> Result<(ReaLossVars, Vec<usize>)> {
    cfg.validate()?;
    if horizon > units.len() {
        return Err(Error::TrajectoryTooLong {
            t: horizon,
            units: units.len(),
        });
    }
    let k = net.num_concepts();
    let c_hat = enc.probs;
    let predicted = tape.value(c_hat).to_vec();
    let mut mask = vec![None; k];
    // κ_0 = u(ĉ) only enters the concept term; trajectories start from ĉ
    // with a fresh realigner state, exactly as at evaluation time.
    let (kappa_0, _) = realigner.step(tape, c_hat, c_hat, &mask, None)?;
    let mut kappa = c_hat;
    let mut state = None;
    let mut done = BTreeSet::new();
    let mut trajectory = Vec::with_capacity(horizon);
    for step in 1..=horizon {
        let u = choose(tape.value(kappa), &predicted, &done, step)?;
        if !done.insert(u) {
            return Err(Error::AlreadyIntervened(units.members(u)?[0]));
        }
        for &i in units.members(u)? {
            mask[i] = Some(record.c[i]);
        }
        trajectory.push(u);
        let c_tilde = tape.splice(c_hat, &mask)?;
        let (next, st) = realigner.step(tape, c_tilde, kappa, &mask, state)?;
        kappa = next;
        state = st;
    }
    let pre_logits = net.classify(tape, hs, enc, c_hat)?;
    let ce_pre = tape.ce(pre_logits, record.y)?;
    let post_logits = net.classify(tape, hs, enc, kappa)?;
    let ce_post = tape.ce(post_logits, record.y)?;
    let pred = prediction_loss(tape, ce_pre, ce_post, cfg.gamma, horizon);
    let conc = conc_rea_loss_on(tape, c_hat, &record.c, kappa_0, kappa, cfg.gamma, horizon)?;
    let roll = if cfg.lambda_roll > 0.0 {
        rollout_loss(net, tape, hs, enc, kappa, record, &mask)?
    } else {
        tape.constant(vec![0.0])
    };
    let total = tape.combine(&[(pred, 1.0), (conc, cfg.lambda_conc), (roll, cfg.lambda_roll)]);
    Ok((
        ReaLossVars {
            total,
            pred,
            conc,
            roll,
        },
        trajectory,
    ))
}

/// Batch mean of the realignment-aware loss along fixed trajectories.
/// `realigner = None` uses the identity map.
pub fn intcem_rea_loss(
    model: &CemModel,
    realigner: Option<&Realigner>,
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
            "intcem_rea_loss trajectories",
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
        let tr = match realigner {
            Some(re) => TapeRealigner::Net {
                net: &re.net,
                store: &re.params,
                mode: re.config.input_mode,
            },
            None => TapeRealigner::Identity,
        };
        let mut choose = |_: &[f64], _: &[f64], _: &BTreeSet<usize>, step: usize| Ok(traj[step - 1]);
        let (v, _) = intcem_rea_loss_on(
            &model.net,
            &mut tape,
            &model.head_params,
            &enc,
            tr,
            r,
            units,
            traj.len(),
            cfg,
            &mut choose,
        )?;
        out.total += tape.scalar(v.total);
        out.pred += tape.scalar(v.pred);
        out.conc += tape.scalar(v.conc);
        out.roll += tape.scalar(v.roll);
    }
    Ok(out.scaled(1.0 / batch.len() as f64))
}

#[allow(clippy::too_many_arguments)]
fn sampled_rea_loss<'a>(
    cem: &CemNet,
    rnet: &RealignerNet,
    tape: &mut Tape<'a>,
    stores: &[&'a ParamStore],
    record: &SampleRecord,
    units: &SelectionUnits,
    int_cfg: &IntCemConfig,
    rea_cfg: &RealignerConfig,
    rng: &mut Rng,
) -> Result<Var> {
    let x = tape.constant(record.x.clone());
    let enc = cem.encode(tape, stores[0], x)?;
    let horizon = sample_horizon(int_cfg.horizon, units.len(), rng)?;
    let policy: &PolicyKind = &rea_cfg.training_policy;
    let tr = TapeRealigner::Net {
        net: rnet,
        store: stores[2],
        mode: rea_cfg.input_mode,
    };
    let mut choose = |kappa: &[f64], predicted: &[f64], done: &BTreeSet<usize>, step: usize| {
        let view = match policy.source {
            PolicySource::Updated => kappa,
            PolicySource::Original => predicted,
        };
        choose_unit(&policy.rule, view, done, units, step, rng)
    };
    let (v, _) = intcem_rea_loss_on(
        cem,
        tape,
        stores[1],
        &enc,
        tr,
        record,
        units,
        horizon,
        int_cfg,
        &mut choose,
    )?;
    Ok(v.total)
}

/// Jointly trains a fresh intervention-aware CEM and realigner.
#[allow(clippy::too_many_arguments)]
pub fn train_intcem_rea(
    train: &Dataset,
    val: &Dataset,
    dims: ModelDims,
    arch: &ArchConfig,
    int_cfg: &IntCemConfig,
    rea_cfg: &RealignerConfig,
    train_cfg: &TrainConfig,
    units: Option<&SelectionUnits>,
    seed: u64,
) -> Result<(CemModel, Realigner, History)> {
    int_cfg.validate()?;
    rea_cfg.validate()?;
    train.ensure_nonempty()?;
    val.ensure_nonempty()?;
    let k = dims.num_concepts;
    let units = units.cloned().unwrap_or_else(|| SelectionUnits::singletons(k));
    let mut model = CemModel::new(dims, arch, int_cfg.lambda_roll > 0.0, mix_seed(seed, 0xCE0))?;
    model.intervention_aware = true;
    let mut realigner = Realigner::new(k, rea_cfg.clone(), mix_seed(seed, 0x2EA1))?;
    let history = {
        let CemModel {
            net: cem,
            concept_params,
            head_params,
            ..
        } = &mut model;
        let Realigner { net: rnet, params, .. } = &mut realigner;
        let (cem, rnet, units) = (&*cem, &*rnet, &units);
        let val_seed = mix_seed(seed, 0x7A1);
        fit(
            "intcem_rea",
            &mut [concept_params, head_params, params],
            train.len(),
            train_cfg,
            mix_seed(seed, 7),
            |tape, s, i, rng| sampled_rea_loss(cem, rnet, tape, s, &train.records[i], units, int_cfg, rea_cfg, rng),
            |s| {
                let mut total = 0.0;
                for (i, r) in val.records.iter().enumerate() {
                    let mut rng = rng_for(mix_seed(val_seed, i as u64), 0);
                    let mut tape = Tape::new();
                    let l = sampled_rea_loss(cem, rnet, &mut tape, s, r, units, int_cfg, rea_cfg, &mut rng)?;
                    total += tape.scalar(l);
                }
                Ok(total / val.len() as f64)
            },
        )?
    };
    model.frozen = true;
    realigner.base_checksum = Some(crate::models::ConceptModel::Cem(model.clone()).checksum());
    Ok((model, realigner, history))
}
