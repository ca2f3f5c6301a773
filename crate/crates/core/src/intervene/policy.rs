//! Concept-selection policies.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::datagen::ConceptGroup;
use crate::error::{Error, Result};
use crate::ndcompute::Rng;

/// The atoms a policy chooses between: single concepts, or groups of concepts
/// that are always intervened on together.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionUnits {
    num_concepts: usize,
    units: Vec<Vec<usize>>,
}

impl SelectionUnits {
    pub fn singletons(num_concepts: usize) -> Self {
        Self {
            num_concepts,
            units: (0..num_concepts).map(|i| vec![i]).collect(),
        }
    }

    /// Groups in the given order, then every ungrouped concept as its own unit.
    pub fn from_groups(num_concepts: usize, groups: &[ConceptGroup]) -> Result<Self> {
        if groups.is_empty() {
            return Ok(Self::singletons(num_concepts));
        }
        let mut seen = vec![false; num_concepts];
        let mut units = Vec::new();
        for g in groups {
            if g.members.is_empty() {
                return Err(Error::field("groups", format!("group `{}` is empty", g.name)));
            }
            for &i in &g.members {
                if i >= num_concepts {
                    return Err(Error::IndexOutOfRange {
                        index: i,
                        len: num_concepts,
                    });
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::field("groups", format!("concept {i} is in two groups")));
                }
            }
            units.push(g.members.clone());
        }
        units.extend((0..num_concepts).filter(|i| !seen[*i]).map(|i| vec![i]));
        Ok(Self { num_concepts, units })
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn num_concepts(&self) -> usize {
        self.num_concepts
    }

    pub fn members(&self, unit: usize) -> Result<&[usize]> {
        self.units.get(unit).map(Vec::as_slice).ok_or(Error::IndexOutOfRange {
            index: unit,
            len: self.units.len(),
        })
    }

    pub fn is_grouped(&self) -> bool {
        self.units.iter().any(|u| u.len() > 1)
    }

    /// Unit containing concept `i`.
    pub fn unit_of(&self, i: usize) -> Option<usize> {
        self.units.iter().position(|u| u.contains(&i))
    }
}

/// How a group's uncertainty is summarized for UCP.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupScore {
    /// Distance of the most uncertain member.
    #[default]
    Min,
    Mean,
}

fn check_remaining(done: &BTreeSet<usize>, n: usize) -> Result<()> {
    if let Some(&bad) = done.iter().find(|&&u| u >= n) {
        return Err(Error::IndexOutOfRange { index: bad, len: n });
    }
    if done.len() >= n {
        return Err(Error::Exhausted);
    }
    Ok(())
}

/// Uncertainty-based selection: the unit closest to 0.5, lowest index on ties.
///
/// `done` holds unit ids (concept ids when `units` is `None`).
pub fn ucp_select(probs: &[f64], done: &BTreeSet<usize>, units: Option<&SelectionUnits>) -> Result<usize> {
    ucp_select_scored(probs, done, units, GroupScore::Min)
}

pub fn ucp_select_scored(
    probs: &[f64],
    done: &BTreeSet<usize>,
    units: Option<&SelectionUnits>,
    score: GroupScore,
) -> Result<usize> {
    let owned;
    let units = match units {
        Some(u) => {
            if u.num_concepts() != probs.len() {
                return Err(Error::shape("ucp_select", &[u.num_concepts()], &[probs.len()]));
            }
            u
        }
        None => {
            owned = SelectionUnits::singletons(probs.len());
            &owned
        }
    };
    check_remaining(done, units.len())?;
    let mut best: Option<(usize, f64)> = None;
    for (u, members) in units.units.iter().enumerate() {
        if done.contains(&u) {
            continue;
        }
        let dists = members.iter().map(|&i| (probs[i] - 0.5).abs());
        let s = match score {
            GroupScore::Min => dists.fold(f64::INFINITY, f64::min),
            GroupScore::Mean => dists.sum::<f64>() / members.len() as f64,
        };
        if best.is_none_or(|(_, b)| s < b) {
            best = Some((u, s));
        }
    }
    best.map(|(u, _)| u).ok_or(Error::Exhausted)
}

/// Uniform choice among units not in `done`.
pub fn random_select(rng: &mut Rng, done: &BTreeSet<usize>, num_units: usize) -> Result<usize> {
    check_remaining(done, num_units)?;
    let open: Vec<usize> = (0..num_units).filter(|u| !done.contains(u)).collect();
    Ok(open[rng.random_range(0..open.len())])
}

/// Applies `rule` at 1-based `step`. `view` is the concept vector the policy
/// reads; `rng` is used only by the random rule.
pub fn choose_unit(
    rule: &SelectionRule,
    view: &[f64],
    done: &BTreeSet<usize>,
    units: &SelectionUnits,
    step: usize,
    rng: &mut Rng,
) -> Result<usize> {
    match rule {
        SelectionRule::Ucp => ucp_select(view, done, Some(units)),
        SelectionRule::Random { .. } => random_select(rng, done, units.len()),
        SelectionRule::Manual { units: seq } => {
            let u = *seq.get(step - 1).ok_or(Error::TrajectoryTooLong {
                t: step,
                units: seq.len(),
            })?;
            if done.contains(&u) {
                return Err(Error::AlreadyIntervened(units.members(u)?[0]));
            }
            units.members(u)?;
            Ok(u)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SelectionRule {
    Ucp,
    Random {
        seed: u64,
    },
    /// A fixed sequence of units, e.g. a recorded human session.
    Manual {
        units: Vec<usize>,
    },
}

/// Which concept vector the policy reads.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicySource {
    /// Always the pre-intervention prediction `ĉ_0`.
    Original,
    /// The most recent (realigned, when available) concept vector.
    #[default]
    Updated,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PolicyKind {
    pub rule: SelectionRule,
    pub source: PolicySource,
}

impl PolicyKind {
    pub fn ucp() -> Self {
        Self {
            rule: SelectionRule::Ucp,
            source: PolicySource::Updated,
        }
    }

    pub fn random(seed: u64) -> Self {
        Self {
            rule: SelectionRule::Random { seed },
            source: PolicySource::Updated,
        }
    }

    pub fn manual(units: Vec<usize>) -> Self {
        Self {
            rule: SelectionRule::Manual { units },
            source: PolicySource::Updated,
        }
    }

    pub fn with_source(mut self, source: PolicySource) -> Self {
        self.source = source;
        self
    }

    /// Same rule with the random seed replaced by `seed`; other rules unchanged.
    pub fn reseeded(&self, seed: u64) -> Self {
        match self.rule {
            SelectionRule::Random { .. } => Self {
                rule: SelectionRule::Random { seed },
                source: self.source,
            },
            _ => self.clone(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self.rule {
            SelectionRule::Ucp => "ucp",
            SelectionRule::Random { .. } => "random",
            SelectionRule::Manual { .. } => "manual",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Parses `ucp` or `random` (seed 0).
impl FromStr for PolicyKind {
    type Err = Error;

    /// `ucp` or `random`, optionally suffixed `:static` or `:updated`.
    fn from_str(s: &str) -> Result<Self> {
        let (rule, source) = s.split_once(':').unwrap_or((s, "updated"));
        let source = match source {
            "updated" => PolicySource::Updated,
            "static" | "original" => PolicySource::Original,
            other => return Err(Error::field("policy", format!("unknown policy source `{other}`"))),
        };
        let kind = match rule {
            "ucp" => Self::ucp(),
            "random" => Self::random(0),
            other => return Err(Error::field("policy", format!("unknown policy `{other}`"))),
        };
        Ok(kind.with_source(source))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndcompute::rng_for;

    fn set(v: &[usize]) -> BTreeSet<usize> {
        v.iter().copied().collect()
    }

    #[test]
    fn ucp_examples() {
        assert_eq!(ucp_select(&[0.9, 0.5, 0.1], &set(&[]), None).unwrap(), 1);
        assert_eq!(ucp_select(&[0.5, 0.5], &set(&[0]), None).unwrap(), 1);
        assert_eq!(ucp_select(&[0.2, 0.7, 0.65], &set(&[]), None).unwrap(), 2);
        assert!(matches!(ucp_select(&[0.5], &set(&[0]), None), Err(Error::Exhausted)));
    }

    #[test]
    fn ucp_ties_go_to_lowest_index() {
        assert_eq!(ucp_select(&[0.75, 0.25, 0.75], &set(&[]), None).unwrap(), 0);
        assert_eq!(ucp_select(&[0.75, 0.25, 0.75], &set(&[0]), None).unwrap(), 1);
    }

    #[test]
    fn grouped_ucp_scores_by_member() {
        let groups = vec![
            ConceptGroup {
                name: "a".into(),
                members: vec![0, 1],
            },
            ConceptGroup {
                name: "b".into(),
                members: vec![2, 3],
            },
        ];
        let u = SelectionUnits::from_groups(4, &groups).unwrap();
        let p = [0.9, 0.55, 0.6, 0.6];
        assert_eq!(ucp_select(&p, &set(&[]), Some(&u)).unwrap(), 0);
        assert_eq!(ucp_select_scored(&p, &set(&[]), Some(&u), GroupScore::Mean).unwrap(), 1);
        assert_eq!(ucp_select(&p, &set(&[0]), Some(&u)).unwrap(), 1);
    }

    #[test]
    fn ungrouped_concepts_become_singletons() {
        let groups = vec![ConceptGroup {
            name: "g".into(),
            members: vec![1, 3],
        }];
        let u = SelectionUnits::from_groups(4, &groups).unwrap();
        assert_eq!(u.len(), 3);
        assert_eq!(u.members(0).unwrap(), &[1, 3]);
        assert_eq!(u.members(1).unwrap(), &[0]);
        assert_eq!(u.unit_of(3), Some(0));
    }

    #[test]
    fn random_forced_and_reproducible() {
        let mut rng = rng_for(1, 0);
        for _ in 0..20 {
            assert_eq!(random_select(&mut rng, &set(&[0, 2]), 3).unwrap(), 1);
        }
        let seq = |s| {
            let mut r = rng_for(s, 0);
            (0..10)
                .map(|_| random_select(&mut r, &set(&[]), 5).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(seq(3), seq(3));
        assert!(random_select(&mut rng, &set(&[0, 1]), 2).is_err());
    }

    #[test]
    fn random_is_uniform() {
        let mut rng = rng_for(42, 0);
        let mut counts = [0usize; 4];
        let n = 100_000;
        for _ in 0..n {
            counts[random_select(&mut rng, &set(&[]), 4).unwrap()] += 1;
        }
        for c in counts {
            let f = c as f64 / n as f64;
            assert!((0.24..=0.26).contains(&f), "{f}");
        }
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn ucp_picks_an_open_unit_no_farther_from_half(
            probs in prop::collection::vec(0.0f64..=1.0, 1..12),
            mask in prop::collection::vec(any::<bool>(), 12),
        ) {
            let k = probs.len();
            let done: BTreeSet<usize> = (0..k).filter(|&i| mask[i]).collect();
            prop_assume!(done.len() < k);
            let u = ucp_select(&probs, &done, None).unwrap();
            prop_assert!(!done.contains(&u));
            let d = (probs[u] - 0.5).abs();
            for i in (0..k).filter(|i| !done.contains(i)) {
                let di = (probs[i] - 0.5).abs();
                prop_assert!(d < di || (d == di && u <= i));
            }
        }

        #[test]
        fn ucp_ignores_intervened_values(
            probs in prop::collection::vec(0.0f64..=1.0, 2..10),
            flip in 0.0f64..=1.0,
        ) {
            let first = ucp_select(&probs, &BTreeSet::new(), None).unwrap();
            let done: BTreeSet<usize> = [first].into();
            let mut changed = probs.clone();
            changed[first] = flip;
            prop_assert_eq!(
                ucp_select(&probs, &done, None).unwrap(),
                ucp_select(&changed, &done, None).unwrap()
            );
        }
    }
}
