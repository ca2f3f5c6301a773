use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::policy::SelectionUnits;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    /// Step at which the value was written (1-based).
    pub step: usize,
    pub concept: usize,
    pub old: f64,
    pub new: f64,
}

/// The concept vector `c̃_t` after `t` interventions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionState {
    pub t: usize,
    /// Intervened concept indices `S_t`.
    pub intervened: BTreeSet<usize>,
    /// Intervened selection units (equal to `intervened` when ungrouped).
    pub units_done: BTreeSet<usize>,
    pub values: Vec<f64>,
    pub realigned: Option<Vec<f64>>,
    pub history: Vec<HistoryEntry>,
}

fn check_binary(v: f64) -> Result<()> {
    if v == 0.0 || v == 1.0 {
        Ok(())
    } else {
        Err(Error::field("value", format!("intervention value {v} is not 0 or 1")))
    }
}

impl InterventionState {
    pub fn new(predicted: Vec<f64>) -> Self {
        Self {
            t: 0,
            intervened: BTreeSet::new(),
            units_done: BTreeSet::new(),
            values: predicted,
            realigned: None,
            history: Vec::new(),
        }
    }

    pub fn num_concepts(&self) -> usize {
        self.values.len()
    }

    /// Ground-truth values on `S_t`, `None` elsewhere.
    pub fn mask(&self) -> Vec<Option<f64>> {
        (0..self.values.len())
            .map(|i| self.intervened.contains(&i).then(|| self.values[i]))
            .collect()
    }

    /// Sets concept `i` to `value` and advances `t`.
    pub fn intervene(&mut self, i: usize, value: f64) -> Result<()> {
        self.intervene_members(i, &[i], &[value])
    }

    /// Sets every member of `unit` from the full ground-truth vector `truth`
    /// as one step.
    pub fn intervene_unit(&mut self, units: &SelectionUnits, unit: usize, truth: &[f64]) -> Result<()> {
        if truth.len() != self.values.len() {
            return Err(Error::shape("intervene_unit", &[self.values.len()], &[truth.len()]));
        }
        let members = units.members(unit)?;
        let vals: Vec<f64> = members.iter().map(|&i| truth[i]).collect();
        self.intervene_members(unit, members, &vals)
    }

    fn intervene_members(&mut self, unit: usize, members: &[usize], vals: &[f64]) -> Result<()> {
        let k = self.values.len();
        for (&i, &v) in members.iter().zip(vals) {
            if i >= k {
                return Err(Error::IndexOutOfRange { index: i, len: k });
            }
            if self.intervened.contains(&i) {
                return Err(Error::AlreadyIntervened(i));
            }
            check_binary(v)?;
        }
        if self.units_done.contains(&unit) {
            return Err(Error::AlreadyIntervened(members[0]));
        }
        self.t += 1;
        for (&i, &v) in members.iter().zip(vals) {
            self.history.push(HistoryEntry {
                step: self.t,
                concept: i,
                old: self.values[i],
                new: v,
            });
            self.values[i] = v;
            self.intervened.insert(i);
        }
        self.units_done.insert(unit);
        Ok(())
    }
}

/// Functional form of [`InterventionState::intervene`].
pub fn apply_intervention(state: &InterventionState, i: usize, gt: f64) -> Result<InterventionState> {
    let mut next = state.clone();
    next.intervene(i, gt)?;
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::ConceptGroup;

    #[test]
    fn single_intervention() {
        let s = InterventionState::new(vec![0.3, 0.8]);
        let n = apply_intervention(&s, 0, 1.0).unwrap();
        assert_eq!(n.values, vec![1.0, 0.8]);
        assert_eq!(n.intervened, [0].into_iter().collect());
        assert_eq!(n.t, 1);
        assert_eq!(n.history.len(), 1);
        assert_eq!(n.mask(), vec![Some(1.0), None]);
    }

    #[test]
    fn matching_value_changes_only_bookkeeping() {
        let s = InterventionState::new(vec![1.0, 0.8]);
        let n = apply_intervention(&s, 0, 1.0).unwrap();
        assert_eq!(n.values, s.values);
        assert_eq!(n.t, 1);
    }

    #[test]
    fn interventions_commute_in_values() {
        let s = InterventionState::new(vec![0.3, 0.8, 0.5]);
        let a = apply_intervention(&apply_intervention(&s, 0, 1.0).unwrap(), 2, 0.0).unwrap();
        let b = apply_intervention(&apply_intervention(&s, 2, 0.0).unwrap(), 0, 1.0).unwrap();
        assert_eq!(a.values, b.values);
        assert_ne!(a.history, b.history);
    }

    #[test]
    fn reintervention_and_bad_values_rejected() {
        let s = apply_intervention(&InterventionState::new(vec![0.3, 0.8]), 0, 1.0).unwrap();
        assert!(matches!(
            apply_intervention(&s, 0, 0.0),
            Err(Error::AlreadyIntervened(0))
        ));
        assert!(apply_intervention(&s, 1, 0.5).is_err());
        assert!(apply_intervention(&s, 2, 1.0).is_err());
    }

    #[test]
    fn group_applies_atomically() {
        let groups = vec![ConceptGroup {
            name: "g".into(),
            members: vec![0, 2],
        }];
        let u = SelectionUnits::from_groups(3, &groups).unwrap();
        let mut s = InterventionState::new(vec![0.4, 0.4, 0.4]);
        s.intervene_unit(&u, 0, &[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(s.t, 1);
        assert_eq!(s.values, vec![1.0, 0.4, 0.0]);
        assert_eq!(s.history.len(), 2);
        let before = s.clone();
        assert!(s.intervene_unit(&u, 0, &[1.0, 0.0, 0.0]).is_err());
        assert_eq!(s, before);
    }
}
