//! Sequential intervention trajectories.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::policy::{choose_unit, PolicyKind, PolicySource, SelectionRule, SelectionUnits};
use super::state::InterventionState;
use crate::datagen::SampleRecord;
use crate::error::{Error, Result};
use crate::models::{argmax, ConceptModel};
use crate::ndcompute::{bce_loss, rng_for, Rng};
use crate::realign::{realigner_input, ConceptRealigner, RealignState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    /// Unit chosen at this step; `None` at `t = 0`.
    pub selected: Option<usize>,
    /// `S_t`, ascending.
    pub intervened: Vec<usize>,
    /// `c̃_t`.
    pub values: Vec<f64>,
    /// `κ_t` when a realigner is attached and `t ≥ 1`.
    pub realigned: Option<Vec<f64>>,
    pub logits: Vec<f64>,
    /// Concept bce of the vector fed to the classifier, when ground truth is known.
    pub concept_loss: Option<f64>,
    pub correct: Option<bool>,
}

impl StepRecord {
    /// The concept vector the classifier saw.
    pub fn fed(&self) -> &[f64] {
        self.realigned.as_deref().unwrap_or(&self.values)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryResult {
    pub steps: Vec<StepRecord>,
}

impl TrajectoryResult {
    pub fn horizon(&self) -> usize {
        self.steps.len().saturating_sub(1)
    }

    /// One JSON object per step.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for s in &self.steps {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut steps = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            steps.push(serde_json::from_str(&line)?);
        }
        Ok(Self { steps })
    }
}

/// Ground truth used to score a trajectory.
#[derive(Debug, Clone, Copy)]
pub struct Truth<'s> {
    pub concepts: &'s [f64],
    pub label: usize,
}

/// An in-progress trajectory that can be advanced one intervention at a time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionRun {
    pub x: Vec<f64>,
    pub units: SelectionUnits,
    /// `ĉ_0`.
    pub initial: Vec<f64>,
    pub state: InterventionState,
    pub realign_state: RealignState,
    pub steps: Vec<StepRecord>,
    truth: Option<(Vec<f64>, usize)>,
}

impl InterventionRun {
    /// Runs the unintervened forward pass and records step 0.
    pub fn start(
        model: &ConceptModel,
        realigner: Option<&dyn ConceptRealigner>,
        x: &[f64],
        truth: Option<Truth<'_>>,
        units: SelectionUnits,
    ) -> Result<Self> {
        let k = model.num_concepts();
        if units.num_concepts() != k {
            return Err(Error::shape("selection units", &[k], &[units.num_concepts()]));
        }
        if let Some(r) = realigner {
            if r.num_concepts() != k {
                return Err(Error::shape("realigner", &[k], &[r.num_concepts()]));
            }
        }
        if let Some(t) = truth {
            if t.concepts.len() != k {
                return Err(Error::shape("ground-truth concepts", &[k], &[t.concepts.len()]));
            }
            if t.label >= model.num_classes() {
                return Err(Error::IndexOutOfRange {
                    index: t.label,
                    len: model.num_classes(),
                });
            }
        }
        let initial = model.predict_concepts(x)?;
        let mut run = Self {
            x: x.to_vec(),
            units,
            state: InterventionState::new(initial.clone()),
            initial,
            realign_state: RealignState::default(),
            steps: Vec::new(),
            truth: truth.map(|t| (t.concepts.to_vec(), t.label)),
        };
        run.record(model, realigner, None)?;
        Ok(run)
    }

    pub fn t(&self) -> usize {
        self.state.t
    }

    pub fn is_complete(&self) -> bool {
        self.state.units_done.len() == self.units.len()
    }

    pub fn last(&self) -> &StepRecord {
        self.steps.last().expect("a run always has its step-0 record")
    }

    /// The vector a policy with `source` reads.
    pub fn policy_view(&self, source: PolicySource) -> &[f64] {
        match source {
            PolicySource::Updated => self.last().fed(),
            PolicySource::Original => &self.initial,
        }
    }

    /// The next unit `policy` would choose; `rng` serves the random rule.
    pub fn suggest(&self, policy: &PolicyKind, rng: &mut Rng) -> Result<usize> {
        choose_unit(
            &policy.rule,
            self.policy_view(policy.source),
            &self.state.units_done,
            &self.units,
            self.t() + 1,
            rng,
        )
    }

    /// Writes `values` (one per member of `unit`) and records the new step.
    pub fn intervene(
        &mut self,
        model: &ConceptModel,
        realigner: Option<&dyn ConceptRealigner>,
        unit: usize,
        values: &[f64],
    ) -> Result<&StepRecord> {
        let members = self.units.members(unit)?.to_vec();
        if values.len() != members.len() {
            return Err(Error::shape("intervention values", &[members.len()], &[values.len()]));
        }
        let mut full = self.state.values.clone();
        for (&i, &v) in members.iter().zip(values) {
            full[i] = v;
        }
        let mut next = self.state.clone();
        next.intervene_unit(&self.units, unit, &full)?;
        self.state = next;
        self.record(model, realigner, Some(unit))?;
        Ok(self.last())
    }

    /// Intervenes with the stored ground truth.
    pub fn intervene_truth(
        &mut self,
        model: &ConceptModel,
        realigner: Option<&dyn ConceptRealigner>,
        unit: usize,
    ) -> Result<&StepRecord> {
        let truth = self
            .truth
            .as_ref()
            .ok_or_else(|| Error::Invalid("run has no ground truth".into()))?;
        let vals: Vec<f64> = self.units.members(unit)?.iter().map(|&i| truth.0[i]).collect();
        self.intervene(model, realigner, unit, &vals)
    }

    fn record(
        &mut self,
        model: &ConceptModel,
        realigner: Option<&dyn ConceptRealigner>,
        selected: Option<usize>,
    ) -> Result<()> {
        let mask = self.state.mask();
        // Nothing is realigned before the first intervention: κ_0 = ĉ.
        let realigned = match realigner {
            Some(r) if selected.is_some() => {
                let prev = self.steps.last().and_then(|s| s.realigned.as_deref());
                let input = realigner_input(r.input_mode(), &self.state.values, prev, &mask);
                Some(r.realign(&input, &mask, &mut self.realign_state)?)
            }
            _ => None,
        };
        self.state.realigned = realigned.clone();
        let fed = realigned.as_deref().unwrap_or(&self.state.values);
        let logits = model.logits_with(&self.x, fed)?;
        let (concept_loss, correct) = match &self.truth {
            Some((c, y)) => (Some(bce_loss(fed, c, None)?), Some(argmax(&logits) == *y)),
            None => (None, None),
        };
        self.steps.push(StepRecord {
            t: self.state.t,
            selected,
            intervened: self.state.intervened.iter().copied().collect(),
            values: self.state.values.clone(),
            realigned,
            logits,
            concept_loss,
            correct,
        });
        Ok(())
    }

    pub fn result(&self) -> TrajectoryResult {
        TrajectoryResult {
            steps: self.steps.clone(),
        }
    }
}

/// Stream id of the random-policy generator.
const POLICY_STREAM: u64 = 0x9A7D;

/// Generator used by the random rule of `policy` (unused by other rules).
pub fn policy_rng(policy: &PolicyKind) -> Rng {
    match policy.rule {
        SelectionRule::Random { seed } => rng_for(seed, POLICY_STREAM),
        _ => rng_for(0, POLICY_STREAM),
    }
}

/// Intervenes `horizon` times on `sample` following `policy`, with ground truth
/// from `sample.c`. Step 0 is the unintervened prediction.
pub fn run_trajectory(
    model: &ConceptModel,
    realigner: Option<&dyn ConceptRealigner>,
    policy: &PolicyKind,
    horizon: usize,
    sample: &SampleRecord,
    units: Option<&SelectionUnits>,
) -> Result<TrajectoryResult> {
    let units = units
        .cloned()
        .unwrap_or_else(|| SelectionUnits::singletons(model.num_concepts()));
    if horizon > units.len() {
        return Err(Error::TrajectoryTooLong {
            t: horizon,
            units: units.len(),
        });
    }
    let truth = Truth {
        concepts: &sample.c,
        label: sample.y,
    };
    let mut run = InterventionRun::start(model, realigner, &sample.x, Some(truth), units)?;
    let mut rng = policy_rng(policy);
    for _ in 0..horizon {
        let u = run.suggest(policy, &mut rng)?;
        run.intervene_truth(model, realigner, u)?;
    }
    Ok(run.result())
}
