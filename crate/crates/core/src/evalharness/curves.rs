//! Metric-versus-intervention-count curves and their areas.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::intervene::{run_trajectory, PolicyKind, SelectionUnits, TrajectoryResult};
use crate::models::ConceptModel;
use crate::ndcompute::mix_seed;
use crate::realign::ConceptRealigner;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    ConceptBce,
    Accuracy,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::ConceptBce => "concept_bce",
            Metric::Accuracy => "accuracy",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub t: usize,
    pub value: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub metric: Metric,
    pub points: Vec<CurvePoint>,
    pub n_samples: usize,
    pub fingerprint: String,
}

impl Curve {
    pub fn values(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.value).collect()
    }

    /// Multiplies every value (and standard error) by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut c = self.clone();
        for p in &mut c.points {
            p.value *= factor;
            p.stderr *= factor.abs();
        }
        c
    }

    /// Point-wise mean of curves over seeds; standard error across the inputs
    /// when there are at least two, otherwise the input's own.
    pub fn mean_of(curves: &[Curve]) -> Result<Curve> {
        let first = curves.first().ok_or(Error::EmptyDataset)?;
        let n = curves.len();
        for c in curves {
            if c.metric != first.metric || c.points.len() != first.points.len() {
                return Err(Error::Invalid("curves to average must share metric and length".into()));
            }
        }
        let points = (0..first.points.len())
            .map(|j| {
                let vals: Vec<f64> = curves.iter().map(|c| c.points[j].value).collect();
                let (mean, se) = mean_stderr(&vals);
                CurvePoint {
                    t: first.points[j].t,
                    value: mean,
                    stderr: if n >= 2 { se } else { first.points[j].stderr },
                }
            })
            .collect();
        Ok(Curve {
            metric: first.metric,
            points,
            n_samples: curves.iter().map(|c| c.n_samples).sum(),
            fingerprint: first.fingerprint.clone(),
        })
    }
}

/// Mean and standard error of the mean (0 for fewer than two values).
pub fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, 0.0);
    }
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Trapezoid area over unit-spaced values, starting at `t = 0`.
pub fn auc_values(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::field("curve", "AUC needs at least two points"));
    }
    Ok(values.windows(2).map(|w| 0.5 * (w[0] + w[1])).sum())
}

/// Trapezoid area under `curve` over its `t` range.
pub fn auc(curve: &Curve) -> Result<f64> {
    if curve.points.len() < 2 {
        return Err(Error::field("curve", "AUC needs at least two points"));
    }
    Ok(curve
        .points
        .windows(2)
        .map(|w| 0.5 * (w[0].value + w[1].value) * (w[1].t - w[0].t) as f64)
        .sum())
}

fn fingerprint(
    model: &ConceptModel,
    realigner: Option<&dyn ConceptRealigner>,
    policy: &PolicyKind,
    horizon: usize,
    test: &Dataset,
) -> String {
    let mut h = Sha256::new();
    h.update(model.checksum().as_bytes());
    h.update(realigner.map(|r| r.fingerprint()).unwrap_or_default().as_bytes());
    h.update(serde_json::to_string(policy).unwrap_or_default().as_bytes());
    h.update((horizon as u64).to_le_bytes());
    for r in &test.records {
        for v in r.x.iter().chain(&r.c) {
            h.update(v.to_bits().to_le_bytes());
        }
        h.update((r.y as u64).to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Runs one trajectory per test sample. Random policies are reseeded per
/// sample with `mix_seed(seed, index)`.
pub fn run_trajectories(
    model: &ConceptModel,
    realigner: Option<&dyn ConceptRealigner>,
    policy: &PolicyKind,
    horizon: usize,
    test: &Dataset,
    units: Option<&SelectionUnits>,
) -> Result<Vec<TrajectoryResult>> {
    test.ensure_nonempty()?;
    let base_seed = match policy.rule {
        crate::intervene::SelectionRule::Random { seed } => seed,
        _ => 0,
    };
    test.records
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let p = policy.reseeded(mix_seed(base_seed, i as u64));
            run_trajectory(model, realigner, &p, horizon, r, units)
        })
        .collect()
}

/// Concept-bce and accuracy curves averaged over the test set. Both are
/// measured on the vector actually fed to the classifier.
pub fn evaluate_curves(
    model: &ConceptModel,
    realigner: Option<&dyn ConceptRealigner>,
    policy: &PolicyKind,
    horizon: usize,
    test: &Dataset,
    units: Option<&SelectionUnits>,
) -> Result<(Curve, Curve)> {
    let trajs = run_trajectories(model, realigner, policy, horizon, test, units)?;
    curves_from(&trajs, fingerprint(model, realigner, policy, horizon, test))
}

/// Averages per-step metrics of finished trajectories.
pub fn curves_from(trajs: &[TrajectoryResult], fingerprint: String) -> Result<(Curve, Curve)> {
    let first = trajs.first().ok_or(Error::EmptyDataset)?;
    let steps = first.steps.len();
    let mut concept = Vec::with_capacity(steps);
    let mut accuracy = Vec::with_capacity(steps);
    for t in 0..steps {
        let mut losses = Vec::with_capacity(trajs.len());
        let mut hits = Vec::with_capacity(trajs.len());
        for tr in trajs {
            let s = tr
                .steps
                .get(t)
                .ok_or_else(|| Error::Invalid("trajectories differ in length".into()))?;
            losses.push(
                s.concept_loss
                    .ok_or_else(|| Error::Invalid("trajectory lacks ground truth".into()))?,
            );
            hits.push(if s.correct == Some(true) { 1.0 } else { 0.0 });
        }
        let (lm, ls) = mean_stderr(&losses);
        let (am, as_) = mean_stderr(&hits);
        concept.push(CurvePoint {
            t: first.steps[t].t,
            value: lm,
            stderr: ls,
        });
        accuracy.push(CurvePoint {
            t: first.steps[t].t,
            value: am,
            stderr: as_,
        });
    }
    let make = |metric, points| Curve {
        metric,
        points,
        n_samples: trajs.len(),
        fingerprint: fingerprint.clone(),
    };
    Ok((make(Metric::ConceptBce, concept), make(Metric::Accuracy, accuracy)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn curve(values: &[f64]) -> Curve {
        Curve {
            metric: Metric::ConceptBce,
            points: values
                .iter()
                .enumerate()
                .map(|(t, v)| CurvePoint {
                    t,
                    value: *v,
                    stderr: 0.0,
                })
                .collect(),
            n_samples: 1,
            fingerprint: String::new(),
        }
    }

    #[test]
    fn auc_closed_forms() {
        assert_abs_diff_eq!(auc(&curve(&[0.3; 5])).unwrap(), 0.3 * 4.0, epsilon = 1e-12);
        let lin: Vec<f64> = (0..=10).map(|t| 1.0 - t as f64 / 10.0).collect();
        assert_abs_diff_eq!(auc(&curve(&lin)).unwrap(), 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(auc(&curve(&[1.0, 0.5, 0.25])).unwrap(), 1.125, epsilon = 1e-12);
        assert!(auc(&curve(&[1.0])).is_err());
        assert_eq!(auc_values(&[1.0, 0.5, 0.25]).unwrap(), 1.125);
    }

    #[test]
    fn mean_of_two_curves() {
        let m = Curve::mean_of(&[curve(&[1.0, 0.0]), curve(&[3.0, 2.0])]).unwrap();
        assert_eq!(m.values(), vec![2.0, 1.0]);
        assert_abs_diff_eq!(m.points[0].stderr, 1.0, epsilon = 1e-12);
    }
}
