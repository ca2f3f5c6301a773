use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::{ParamRef, ParamStore};

/// `θ ← θ − lr·g`.
pub fn sgd_step(values: &mut [f64], grads: &[f64], lr: f64) {
    for (v, g) in values.iter_mut().zip(grads) {
        *v -= lr * g;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam(AdamHyper),
}

#[derive(Debug, Clone, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Optimizer bound to one trainer. Adam moments are keyed by parameter identity.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    state: BTreeMap<ParamRef, Moments>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            state: BTreeMap::new(),
        }
    }

    /// Applies the accumulated gradients of `store` and clears them.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        assert!(lr > 0.0, "learning rate must be positive");
        for i in 0..store.len() {
            let r = store.param_ref(i);
            let t = store.get_mut(i);
            match self.kind {
                OptimizerKind::Sgd => sgd_step(&mut t.values, &t.grad, lr),
                OptimizerKind::Adam(h) => {
                    let mom = self.state.entry(r).or_insert_with(|| Moments {
                        m: vec![0.0; t.values.len()],
                        v: vec![0.0; t.values.len()],
                        t: 0,
                    });
                    adam_update(&mut t.values, &t.grad, mom, lr, h);
                }
            }
            t.zero_grad();
        }
    }
}

fn adam_update(values: &mut [f64], grads: &[f64], mom: &mut Moments, lr: f64, h: AdamHyper) {
    mom.t += 1;
    let bc1 = 1.0 - h.beta1.powi(mom.t as i32);
    let bc2 = 1.0 - h.beta2.powi(mom.t as i32);
    for i in 0..values.len() {
        let g = grads[i];
        mom.m[i] = h.beta1 * mom.m[i] + (1.0 - h.beta1) * g;
        mom.v[i] = h.beta2 * mom.v[i] + (1.0 - h.beta2) * g * g;
        let mhat = mom.m[i] / bc1;
        let vhat = mom.v[i] / bc2;
        values[i] -= lr * mhat / (vhat.sqrt() + h.eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndcompute::ParamTensor;

    #[test]
    fn sgd_examples() {
        let mut v = [1.0];
        sgd_step(&mut v, &[2.0], 0.1);
        assert!((v[0] - 0.8).abs() < 1e-15);
        sgd_step(&mut v, &[2.0], 0.1);
        assert!((v[0] - 0.6).abs() < 1e-15);
        let mut z = [1.0];
        sgd_step(&mut z, &[0.0], 0.1);
        assert_eq!(z, [1.0]);
    }

    #[test]
    fn adam_zero_grad_is_noop() {
        let mut store = ParamStore::new();
        store.push("w", ParamTensor::from_values(&[2], vec![0.3, -1.2]).unwrap());
        let mut opt = Optimizer::new(OptimizerKind::Adam(AdamHyper::default()));
        opt.step(&mut store, 0.01);
        assert_eq!(store.get(0).values, vec![0.3, -1.2]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.push("w", ParamTensor::from_values(&[1], vec![1.0]).unwrap());
        store.get_mut(0).grad[0] = 5.0;
        let mut opt = Optimizer::new(OptimizerKind::Adam(AdamHyper::default()));
        opt.step(&mut store, 0.1);
        assert!((store.get(0).values[0] - 0.9).abs() < 1e-6);
        assert_eq!(store.get(0).grad[0], 0.0);
    }
}
