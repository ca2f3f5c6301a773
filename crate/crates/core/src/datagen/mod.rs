//! Synthetic concept worlds with enumerable joint distributions.

mod oracle;
mod sample;
mod world;

pub use oracle::{
    bayes_concept_accuracy, evidence_probability, exact_class_posterior, exact_conditional, exact_conditionals,
    exact_marginals, Evidence,
};
pub use sample::{sample, sample_splits, Dataset, SampleRecord, Splits};
pub use world::{build_world, ConceptGroup, GenerativeWorld, Preset, WorldSpec};
