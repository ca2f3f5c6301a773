//! Session state machine, independent of HTTP.

use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use cirm_core::intervene::{
    policy_rng, HistoryEntry, InterventionRun, PolicyKind, StepRecord, TrajectoryResult, Truth,
};
use cirm_core::models::argmax;
use cirm_core::ndcompute::{softmax, Rng};
use cirm_core::realign::ConceptRealigner;
use serde::{Deserialize, Serialize};

use crate::error::ApiError;
use crate::registry::ModelEntry;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateSessionRequest {
    pub model: String,
    /// Index into the model's sample set.
    #[serde(default)]
    pub sample_index: Option<usize>,
    /// Raw input; mutually exclusive with `sample_index`.
    #[serde(default)]
    pub x: Option<Vec<f64>>,
    /// `"ucp"` (default), `"random"`, optionally suffixed `:static`.
    #[serde(default)]
    pub policy: Option<String>,
    /// Seed for the random policy.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_true")]
    pub realign: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionRequest {
    /// Single concept (must form its own selection unit).
    #[serde(default)]
    pub concept: Option<usize>,
    #[serde(default)]
    pub value: Option<f64>,
    /// Concept group, with one value per member.
    #[serde(default)]
    pub group: Option<usize>,
    #[serde(default)]
    pub values: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suggestion {
    pub unit: usize,
    pub concepts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionView {
    pub concept: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthView {
    pub concepts: Vec<f64>,
    pub label: usize,
}

/// Body of every session response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionPayload {
    pub id: String,
    pub model: String,
    pub sample_index: Option<usize>,
    pub policy: PolicyKind,
    pub realign: bool,
    pub t: usize,
    pub complete: bool,
    pub concept_names: Vec<String>,
    pub class_names: Vec<String>,
    pub units: Vec<Vec<usize>>,
    /// `ĉ_0`, the unintervened prediction.
    pub initial: Vec<f64>,
    /// `c̃_t`: predictions with interventions written in.
    pub values: Vec<f64>,
    /// `κ_t` when realignment is on.
    pub realigned: Option<Vec<f64>>,
    /// The vector the classifier received.
    pub concepts: Vec<f64>,
    pub intervened: Vec<InterventionView>,
    pub logits: Vec<f64>,
    pub class_probs: Vec<f64>,
    pub predicted_class: usize,
    pub suggestion: Option<Suggestion>,
    pub history: Vec<HistoryEntry>,
    /// Only present when the server runs with ground truth exposed.
    pub truth: Option<TruthView>,
    pub created_at: u64,
    pub updated_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    #[serde(flatten)]
    pub session: SessionPayload,
    pub trajectory: TrajectoryResult,
}

pub fn parse_policy(name: Option<&str>, seed: Option<u64>) -> Result<PolicyKind, ApiError> {
    let name = name.unwrap_or("ucp");
    let mut p: PolicyKind = name
        .parse()
        .map_err(|e: cirm_core::Error| ApiError::BadRequest(e.to_string()))?;
    if let Some(s) = seed {
        p = p.reseeded(s);
    }
    if matches!(p.rule, cirm_core::intervene::SelectionRule::Manual { .. }) {
        return Err(ApiError::BadRequest(
            "manual policies are not available in sessions".into(),
        ));
    }
    Ok(p)
}

fn unix_millis(t: SystemTime) -> u64 {
    t.duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

#[derive(Debug)]
pub struct Session {
    pub id: String,
    pub model_id: String,
    pub sample_index: Option<usize>,
    pub policy: PolicyKind,
    pub realign: bool,
    run: InterventionRun,
    truth: Option<TruthView>,
    rng: Rng,
    suggestion: Option<usize>,
    created: SystemTime,
    updated: SystemTime,
    last_touch: Instant,
}

impl Session {
    pub fn create(id: String, entry: &ModelEntry, req: &CreateSessionRequest) -> Result<Self, ApiError> {
        let policy = parse_policy(req.policy.as_deref(), req.seed)?;
        let (x, truth, sample_index) = match (&req.x, req.sample_index) {
            (Some(_), Some(_)) => {
                return Err(ApiError::BadRequest(
                    "give either `x` or `sample_index`, not both".into(),
                ))
            }
            (Some(x), None) => {
                let d = entry.model.input_dim();
                if x.len() != d {
                    return Err(ApiError::BadRequest(format!(
                        "`x` has length {}, expected input dimension {d}",
                        x.len()
                    )));
                }
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(ApiError::BadRequest("`x` must be finite".into()));
                }
                (x.clone(), None, None)
            }
            (None, Some(i)) => {
                let samples = entry
                    .samples
                    .as_ref()
                    .ok_or_else(|| ApiError::BadRequest(format!("model `{}` has no sample set", entry.id)))?;
                let r = samples
                    .records
                    .get(i)
                    .ok_or_else(|| ApiError::NotFound(format!("sample {i} out of range (have {})", samples.len())))?;
                (
                    r.x.clone(),
                    Some(TruthView {
                        concepts: r.c.clone(),
                        label: r.y,
                    }),
                    Some(i),
                )
            }
            (None, None) => return Err(ApiError::BadRequest("one of `x` or `sample_index` is required".into())),
        };
        let realigner = realigner_of(entry, req.realign);
        let run = InterventionRun::start(
            &entry.model,
            realigner,
            &x,
            truth.as_ref().map(|t| Truth {
                concepts: &t.concepts,
                label: t.label,
            }),
            entry.units.clone(),
        )?;
        let now = SystemTime::now();
        let mut s = Self {
            id,
            model_id: entry.id.clone(),
            sample_index,
            rng: policy_rng(&policy),
            policy,
            realign: realigner.is_some(),
            run,
            truth,
            suggestion: None,
            created: now,
            updated: now,
            last_touch: Instant::now(),
        };
        s.refresh_suggestion()?;
        Ok(s)
    }

    fn refresh_suggestion(&mut self) -> Result<(), ApiError> {
        self.suggestion = if self.run.is_complete() {
            None
        } else {
            Some(self.run.suggest(&self.policy, &mut self.rng)?)
        };
        Ok(())
    }

    /// Applies one intervention; the state is unchanged on error.
    pub fn intervene(&mut self, entry: &ModelEntry, req: &InterventionRequest) -> Result<(), ApiError> {
        let (unit, values) = match (req.concept, req.group) {
            (Some(_), Some(_)) => {
                return Err(ApiError::BadRequest(
                    "give either `concept` or `group`, not both".into(),
                ))
            }
            (Some(i), None) => {
                let k = entry.model.num_concepts();
                if i >= k {
                    return Err(ApiError::BadRequest(format!("concept {i} out of range (k = {k})")));
                }
                let v = req
                    .value
                    .ok_or_else(|| ApiError::BadRequest("`value` is required with `concept`".into()))?;
                let unit = self
                    .run
                    .units
                    .unit_of(i)
                    .ok_or_else(|| ApiError::BadRequest(format!("concept {i} is in no selection unit")))?;
                if self.run.units.members(unit)?.len() != 1 {
                    return Err(ApiError::BadRequest(format!(
                        "concept {i} belongs to group {unit}; intervene on the group"
                    )));
                }
                (unit, vec![v])
            }
            (None, Some(u)) => {
                if u >= self.run.units.len() {
                    return Err(ApiError::BadRequest(format!(
                        "group {u} out of range ({} groups)",
                        self.run.units.len()
                    )));
                }
                let vals = req
                    .values
                    .clone()
                    .ok_or_else(|| ApiError::BadRequest("`values` is required with `group`".into()))?;
                (u, vals)
            }
            (None, None) => return Err(ApiError::BadRequest("one of `concept` or `group` is required".into())),
        };
        if let Some(v) = values.iter().find(|v| **v != 0.0 && **v != 1.0) {
            return Err(ApiError::BadRequest(format!("value {v} is not 0 or 1")));
        }
        if self.run.state.units_done.contains(&unit) {
            return Err(ApiError::Conflict(format!(
                "unit {unit} has already been intervened on"
            )));
        }
        let realigner = realigner_of(entry, self.realign);
        let mut next = self.run.clone();
        next.intervene(&entry.model, realigner, unit, &values)?;
        let mut rng = self.rng.clone();
        let suggestion = if next.is_complete() {
            None
        } else {
            Some(next.suggest(&self.policy, &mut rng)?)
        };
        self.run = next;
        self.rng = rng;
        self.suggestion = suggestion;
        self.updated = SystemTime::now();
        self.last_touch = Instant::now();
        Ok(())
    }

    pub fn touch(&mut self) {
        self.last_touch = Instant::now();
    }

    pub fn idle_for(&self) -> Duration {
        self.last_touch.elapsed()
    }

    pub fn run(&self) -> &InterventionRun {
        &self.run
    }

    pub fn payload(&self, entry: &ModelEntry, expose_truth: bool) -> SessionPayload {
        let last = self.run.last();
        let class_probs = softmax(&last.logits);
        let units = &self.run.units;
        SessionPayload {
            id: self.id.clone(),
            model: self.model_id.clone(),
            sample_index: self.sample_index,
            policy: self.policy.clone(),
            realign: self.realign,
            t: self.run.t(),
            complete: self.run.is_complete(),
            concept_names: entry.concept_names.clone(),
            class_names: entry.class_names.clone(),
            units: (0..units.len())
                .map(|u| units.members(u).map(<[usize]>::to_vec).unwrap_or_default())
                .collect(),
            initial: self.run.initial.clone(),
            values: last.values.clone(),
            realigned: last.realigned.clone(),
            concepts: last.fed().to_vec(),
            intervened: last
                .intervened
                .iter()
                .map(|&i| InterventionView {
                    concept: i,
                    value: last.values[i],
                })
                .collect(),
            predicted_class: argmax(&last.logits),
            logits: last.logits.clone(),
            class_probs,
            suggestion: self.suggestion.map(|u| Suggestion {
                unit: u,
                concepts: units.members(u).map(<[usize]>::to_vec).unwrap_or_default(),
            }),
            history: self.run.state.history.clone(),
            truth: if expose_truth { self.truth.clone() } else { None },
            created_at: unix_millis(self.created),
            updated_at: unix_millis(self.updated),
        }
    }

    /// Full trajectory so far; per-step scores are removed unless truth is exposed.
    pub fn trajectory(&self, expose_truth: bool) -> TrajectoryResult {
        let mut tr = self.run.result();
        if !expose_truth {
            for s in &mut tr.steps {
                strip_truth(s);
            }
        }
        tr
    }
}

fn strip_truth(s: &mut StepRecord) {
    s.concept_loss = None;
    s.correct = None;
}

fn realigner_of(entry: &ModelEntry, on: bool) -> Option<&dyn ConceptRealigner> {
    if on {
        entry.realigner.as_ref().map(|r| r as &dyn ConceptRealigner)
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use cirm_core::intervene::{PolicySource, SelectionRule};

    #[test]
    fn policies_parse_with_optional_seed() {
        assert_eq!(parse_policy(None, None).unwrap(), PolicyKind::ucp());
        let p = parse_policy(Some("random:static"), Some(9)).unwrap();
        assert_eq!(p.rule, SelectionRule::Random { seed: 9 });
        assert_eq!(p.source, PolicySource::Original);
    }

    #[test]
    fn unknown_policies_are_bad_requests() {
        assert!(matches!(
            parse_policy(Some("greedy"), None),
            Err(ApiError::BadRequest(_))
        ));
        assert!(matches!(
            parse_policy(Some("ucp:later"), None),
            Err(ApiError::BadRequest(_))
        ));
    }
}
