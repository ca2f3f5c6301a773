//! Exact inference in a noisy-template world by enumerating classes.
//!
//! Concepts are independent given the class, so every query reduces to a sum
//! over `M` classes of products of per-concept likelihoods.

use std::collections::BTreeMap;

use super::world::GenerativeWorld;
use crate::error::{Error, Result};

/// Partial assignment of concept index to bit.
pub type Evidence = BTreeMap<usize, bool>;

fn class_weights(world: &GenerativeWorld, evidence: &Evidence) -> Result<Vec<f64>> {
    let k = world.num_concepts();
    for &i in evidence.keys() {
        if i >= k {
            return Err(Error::IndexOutOfRange { index: i, len: k });
        }
    }
    Ok((0..world.num_classes())
        .map(|y| {
            world.class_prior()[y]
                * evidence
                    .iter()
                    .map(|(&i, &b)| world.concept_likelihood(y, i, b))
                    .product::<f64>()
        })
        .collect())
}

/// `p(c_S = evidence)`.
pub fn evidence_probability(world: &GenerativeWorld, evidence: &Evidence) -> Result<f64> {
    Ok(class_weights(world, evidence)?.iter().sum())
}

/// `p(c_target = 1 | c_S = evidence)`.
pub fn exact_conditional(world: &GenerativeWorld, evidence: &Evidence, target: usize) -> Result<f64> {
    let k = world.num_concepts();
    if target >= k {
        return Err(Error::IndexOutOfRange { index: target, len: k });
    }
    if evidence.contains_key(&target) {
        return Err(Error::field(
            "target",
            format!("concept {target} is part of the evidence"),
        ));
    }
    let w = class_weights(world, evidence)?;
    let z: f64 = w.iter().sum();
    if z <= 0.0 {
        return Err(Error::ZeroProbabilityEvidence);
    }
    let num: f64 = w
        .iter()
        .enumerate()
        .map(|(y, wy)| wy * world.concept_likelihood(y, target, true))
        .sum();
    Ok(num / z)
}

/// Conditionals for every concept outside the evidence (evidence entries hold their bit).
pub fn exact_conditionals(world: &GenerativeWorld, evidence: &Evidence) -> Result<Vec<f64>> {
    (0..world.num_concepts())
        .map(|i| match evidence.get(&i) {
            Some(b) => Ok(if *b { 1.0 } else { 0.0 }),
            None => exact_conditional(world, evidence, i),
        })
        .collect()
}

/// Unconditional `p(c_i = 1)` for every concept.
pub fn exact_marginals(world: &GenerativeWorld) -> Vec<f64> {
    exact_conditionals(world, &Evidence::new()).expect("empty evidence has probability one")
}

/// `p(y | c)` for a full binary concept vector.
pub fn exact_class_posterior(world: &GenerativeWorld, c: &[f64]) -> Result<Vec<f64>> {
    let k = world.num_concepts();
    if c.len() != k {
        return Err(Error::shape("exact_class_posterior", &[k], &[c.len()]));
    }
    if c.iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(Error::field("c", "concept vector must be binary"));
    }
    let evidence: Evidence = c.iter().enumerate().map(|(i, v)| (i, *v == 1.0)).collect();
    let w = class_weights(world, &evidence)?;
    let z: f64 = w.iter().sum();
    if z <= 0.0 {
        return Err(Error::ZeroProbabilityEvidence);
    }
    Ok(w.into_iter().map(|v| v / z).collect())
}

/// Accuracy of the Bayes-optimal classifier that sees the true concepts.
pub fn bayes_concept_accuracy(world: &GenerativeWorld, data: &super::Dataset) -> Result<f64> {
    data.ensure_nonempty()?;
    let mut correct = 0usize;
    for r in &data.records {
        let post = exact_class_posterior(world, &r.c)?;
        let best = post
            .iter()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |acc, (i, p)| if *p > acc.1 { (i, *p) } else { acc },
            )
            .0;
        correct += usize::from(best == r.y);
    }
    Ok(correct as f64 / data.len() as f64)
}
