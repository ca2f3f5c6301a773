//! Post-hoc realigner training against a frozen base model.

use serde::{Deserialize, Serialize};

use super::net::{InputMode, Realigner, RealignerConfig, RealignerNet};
use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::intervene::{choose_unit, InterventionState, PolicyKind, PolicySource, SelectionUnits};
use crate::models::{fit, ConceptModel, History};
use crate::ndcompute::{mix_seed, rng_for, ParamStore, Rng, Tape, Var};

/// Simulates one training trajectory on the tape and returns the mean
/// concept bce over its realigned steps. Realignment starts at the first
/// intervention; `include_initial_step` adds a `u(ĉ)` term, which is also the
/// single term used when `horizon` is 0.
#[allow(clippy::too_many_arguments)]
pub fn posthoc_trajectory_loss<'a>(
    net: &RealignerNet,
    tape: &mut Tape<'a>,
    store: &'a ParamStore,
    predicted: &[f64],
    truth: &[f64],
    units: &SelectionUnits,
    horizon: usize,
    policy: &PolicyKind,
    input_mode: InputMode,
    include_initial_step: bool,
    rng: &mut Rng,
) -> Result<Var> {
    if horizon > units.len() {
        return Err(Error::TrajectoryTooLong {
            t: horizon,
            units: units.len(),
        });
    }
    let k = predicted.len();
    let mut state = InterventionState::new(predicted.to_vec());
    let c_hat = tape.constant(predicted.to_vec());
    let mut terms = Vec::with_capacity(horizon + 1);
    if include_initial_step || horizon == 0 {
        let (kappa_0, _) = net.realign(tape, store, c_hat, &vec![None; k], None)?;
        terms.push(tape.bce(kappa_0, truth, None)?);
    }
    let mut prev = c_hat;
    let mut rstate = None;
    for step in 1..=horizon {
        let view = match policy.source {
            PolicySource::Updated => tape.value(prev).to_vec(),
            PolicySource::Original => predicted.to_vec(),
        };
        let u = choose_unit(&policy.rule, &view, &state.units_done, units, step, rng)?;
        state.intervene_unit(units, u, truth)?;
        let mask = state.mask();
        let input = match input_mode {
            InputMode::Original => tape.constant(state.values.clone()),
            InputMode::PreviousOutput => tape.splice(prev, &mask)?,
        };
        let (kappa, next) = net.realign(tape, store, input, &mask, rstate)?;
        terms.push(tape.bce(kappa, truth, None)?);
        prev = kappa;
        rstate = next;
    }
    let w = 1.0 / terms.len() as f64;
    let weighted: Vec<(Var, f64)> = terms.into_iter().map(|t| (t, w)).collect();
    Ok(tape.combine(&weighted))
}

fn horizon_for(config: &RealignerConfig, units: &SelectionUnits) -> Result<usize> {
    let t = config.train_horizon.unwrap_or(units.len());
    if t > units.len() {
        return Err(Error::TrajectoryTooLong { t, units: units.len() });
    }
    Ok(t)
}

/// Trains only the realigner; the base model must be frozen and is verified
/// unchanged afterwards.
pub fn train_realigner_posthoc(
    base: &ConceptModel,
    train: &Dataset,
    val: &Dataset,
    config: &RealignerConfig,
    units: Option<&SelectionUnits>,
    seed: u64,
) -> Result<(Realigner, History)> {
    if !base.is_frozen() {
        return Err(Error::NotFrozen);
    }
    config.validate()?;
    train.ensure_nonempty()?;
    val.ensure_nonempty()?;
    let k = base.num_concepts();
    let units = units.cloned().unwrap_or_else(|| SelectionUnits::singletons(k));
    if units.num_concepts() != k {
        return Err(Error::shape("selection units", &[k], &[units.num_concepts()]));
    }
    let horizon = horizon_for(config, &units)?;
    let before = base.checksum();
    let predict =
        |d: &Dataset| -> Result<Vec<Vec<f64>>> { d.records.iter().map(|r| base.predict_concepts(&r.x)).collect() };
    let train_pred = predict(train)?;
    let val_pred = predict(val)?;

    let mut realigner = Realigner::new(k, config.clone(), mix_seed(seed, 0x2EA1))?;
    let Realigner { net, params, .. } = &mut realigner;
    let net = &*net;
    let val_seed = mix_seed(seed, 0x7A1);
    let history = fit(
        "realigner",
        &mut [params],
        train.len(),
        &config.train,
        mix_seed(seed, 6),
        |tape, s, i, rng| {
            posthoc_trajectory_loss(
                net,
                tape,
                s[0],
                &train_pred[i],
                &train.records[i].c,
                &units,
                horizon,
                &config.training_policy,
                config.input_mode,
                config.include_initial_step,
                rng,
            )
        },
        |s| {
            let mut total = 0.0;
            for (i, r) in val.records.iter().enumerate() {
                let mut rng = rng_for(mix_seed(val_seed, i as u64), 0);
                let mut tape = Tape::new();
                let l = posthoc_trajectory_loss(
                    net,
                    &mut tape,
                    s[0],
                    &val_pred[i],
                    &r.c,
                    &units,
                    horizon,
                    &config.training_policy,
                    config.input_mode,
                    config.include_initial_step,
                    &mut rng,
                )?;
                total += tape.scalar(l);
            }
            Ok(total / val.len() as f64)
        },
    )?;
    if base.checksum() != before {
        return Err(Error::Invalid(
            "base model parameters changed during realigner training".into(),
        ));
    }
    realigner.base_checksum = Some(before);
    Ok((realigner, history))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub lr: f64,
    pub val_loss: f64,
}

/// Hidden layers {1,2,3} × widths {k/2, k, 2k} × `learning_rates`, picked by
/// best validation loss (first on ties).
pub fn train_realigner_grid(
    base: &ConceptModel,
    train: &Dataset,
    val: &Dataset,
    config: &RealignerConfig,
    learning_rates: &[f64],
    units: Option<&SelectionUnits>,
    seed: u64,
) -> Result<(Realigner, Vec<GridPoint>)> {
    if learning_rates.is_empty() {
        return Err(Error::field("learning_rates", "must not be empty"));
    }
    let k = base.num_concepts();
    let widths = [(k / 2).max(1), k, 2 * k];
    let mut points = Vec::new();
    let mut best: Option<(f64, Realigner)> = None;
    for layers in 1..=3 {
        for &width in &widths {
            for &lr in learning_rates {
                let mut cfg = config.clone();
                cfg.hidden_layers = layers;
                cfg.hidden_width = Some(width);
                cfg.train.lr = lr;
                let (r, h) = train_realigner_posthoc(base, train, val, &cfg, units, seed)?;
                points.push(GridPoint {
                    hidden_layers: layers,
                    hidden_width: width,
                    lr,
                    val_loss: h.best_val_loss,
                });
                if best.as_ref().is_none_or(|(b, _)| h.best_val_loss < *b) {
                    best = Some((h.best_val_loss, r));
                }
            }
        }
    }
    let (_, r) = best.ok_or_else(|| Error::Invalid("empty grid".into()))?;
    Ok((r, points))
}
