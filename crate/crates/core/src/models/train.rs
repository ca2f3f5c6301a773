//! Mini-batch training loop shared by every learned component.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcompute::{rng_for, AdamHyper, Optimizer, OptimizerKind, ParamStore, Rng, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Stop after this many epochs without validation improvement.
    pub early_stop_patience: usize,
    /// Multiply the learning rate by `lr_decay` after this many stale epochs.
    pub lr_decay_patience: usize,
    pub lr_decay: f64,
    pub min_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 32,
            lr: 3e-3,
            optimizer: OptimizerKind::Adam(AdamHyper::default()),
            early_stop_patience: 10,
            lr_decay_patience: 4,
            lr_decay: 0.5,
            min_lr: 1e-5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::field("epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::field("batch_size", "must be >= 1"));
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::field("lr", "must be > 0"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::field("lr_decay", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub stage: String,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

/// Runs mini-batch training over `num_samples` items.
///
/// `sample_loss` builds the per-sample scalar loss on a fresh tape; gradients
/// are averaged over each batch. `val_loss` is evaluated after every epoch and
/// drives learning-rate decay, early stopping and best-epoch restoration.
pub fn fit<F, V>(
    stage: &str,
    stores: &mut [&mut ParamStore],
    num_samples: usize,
    cfg: &TrainConfig,
    seed: u64,
    mut sample_loss: F,
    mut val_loss: V,
) -> Result<History>
where
    F: for<'a> FnMut(&mut Tape<'a>, &[&'a ParamStore], usize, &mut Rng) -> Result<Var>,
    V: FnMut(&[&ParamStore]) -> Result<f64>,
{
    cfg.validate()?;
    if num_samples == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut rng = rng_for(seed, 0x7124_1000);
    let mut opts: Vec<Optimizer> = stores.iter().map(|_| Optimizer::new(cfg.optimizer)).collect();
    let mut order: Vec<usize> = (0..num_samples).collect();
    let mut lr = cfg.lr;
    let mut history = History {
        stage: stage.to_string(),
        best_val_loss: f64::INFINITY,
        ..History::default()
    };
    let mut best: Vec<ParamStore> = stores.iter().map(|s| (**s).clone()).collect();
    let mut stale = 0usize;
    let mut since_decay = 0usize;

    for s in stores.iter_mut() {
        s.zero_grad();
    }
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            for &i in batch {
                let grads = {
                    let views: Vec<&ParamStore> = stores.iter().map(|s| &**s).collect();
                    let mut tape = Tape::new();
                    let loss = sample_loss(&mut tape, &views, i, &mut rng)?;
                    let l = tape.scalar(loss);
                    if !l.is_finite() {
                        return Err(Error::NonFinite("training loss"));
                    }
                    total += l;
                    tape.backward(loss)
                };
                for s in stores.iter_mut() {
                    s.accumulate(&grads);
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for (s, opt) in stores.iter_mut().zip(opts.iter_mut()) {
                s.scale_grads(scale);
                opt.step(s, lr);
            }
        }
        let v = {
            let views: Vec<&ParamStore> = stores.iter().map(|s| &**s).collect();
            val_loss(&views)?
        };
        if !v.is_finite() {
            return Err(Error::NonFinite("validation loss"));
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: total / num_samples as f64,
            val_loss: v,
            lr,
        });
        if v < history.best_val_loss {
            history.best_val_loss = v;
            history.best_epoch = epoch;
            for (b, s) in best.iter_mut().zip(stores.iter()) {
                b.copy_values_from(s)?;
            }
            stale = 0;
            since_decay = 0;
        } else {
            stale += 1;
            since_decay += 1;
            if stale >= cfg.early_stop_patience {
                history.stopped_early = true;
                break;
            }
            if since_decay >= cfg.lr_decay_patience {
                lr = (lr * cfg.lr_decay).max(cfg.min_lr);
                since_decay = 0;
            }
        }
    }
    for (s, b) in stores.iter_mut().zip(&best) {
        s.copy_values_from(b)?;
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndcompute::ParamTensor;

    fn quadratic_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.push("w", ParamTensor::from_values(&[1, 1], vec![0.0]).unwrap());
        s.push("b", ParamTensor::zeros(&[1]));
        s
    }

    fn run(seed: u64) -> (ParamStore, History) {
        let mut store = quadratic_store();
        let xs = [0.0, 1.0, 2.0, 3.0];
        let cfg = TrainConfig {
            epochs: 200,
            batch_size: 2,
            lr: 0.05,
            ..TrainConfig::default()
        };
        // logistic regression on a separable 1-d toy
        let h = fit(
            "toy",
            &mut [&mut store],
            xs.len(),
            &cfg,
            seed,
            |tape, s, i, _| {
                let x = tape.constant(vec![xs[i]]);
                let z = tape.linear(s[0], 0, 1, x)?;
                let p = tape.sigmoid(z);
                tape.bce(p, &[if xs[i] >= 1.5 { 1.0 } else { 0.0 }], None)
            },
            |s| {
                let mut tot = 0.0;
                for x in xs {
                    let mut tape = Tape::new();
                    let xv = tape.constant(vec![x]);
                    let z = tape.linear(s[0], 0, 1, xv)?;
                    let p = tape.sigmoid(z);
                    let l = tape.bce(p, &[if x >= 1.5 { 1.0 } else { 0.0 }], None)?;
                    tot += tape.scalar(l);
                }
                Ok(tot)
            },
        )
        .unwrap();
        (store, h)
    }

    #[test]
    fn fit_reduces_loss_and_is_deterministic() {
        let (a, ha) = run(4);
        let (b, hb) = run(4);
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(ha, hb);
        assert!(ha.best_val_loss < ha.epochs[0].val_loss);
    }

    #[test]
    fn empty_training_set_is_error() {
        let mut store = quadratic_store();
        let r = fit(
            "empty",
            &mut [&mut store],
            0,
            &TrainConfig::default(),
            0,
            |tape, _, _, _| Ok(tape.constant(vec![0.0])),
            |_| Ok(0.0),
        );
        assert!(matches!(r, Err(Error::EmptyDataset)));
    }
}
