//! Models available to sessions.

use std::collections::BTreeMap;

use cirm_core::datagen::{Dataset, GenerativeWorld};
use cirm_core::intervene::SelectionUnits;
use cirm_core::models::ConceptModel;
use cirm_core::realign::Realigner;
use serde::{Deserialize, Serialize};

/// A loaded model with everything a session needs around it.
#[derive(Debug, Clone)]
pub struct ModelEntry {
    pub id: String,
    pub model: ConceptModel,
    pub realigner: Option<Realigner>,
    pub concept_names: Vec<String>,
    pub class_names: Vec<String>,
    pub units: SelectionUnits,
    /// Samples selectable by index when creating a session.
    pub samples: Option<Dataset>,
}

impl ModelEntry {
    /// Names default to `concept_i` / `class_j`; units to singletons.
    pub fn new(id: impl Into<String>, model: ConceptModel) -> Self {
        let k = model.num_concepts();
        let m = model.num_classes();
        Self {
            id: id.into(),
            concept_names: (0..k).map(|i| format!("concept_{i}")).collect(),
            class_names: (0..m).map(|j| format!("class_{j}")).collect(),
            units: SelectionUnits::singletons(k),
            model,
            realigner: None,
            samples: None,
        }
    }

    pub fn with_realigner(mut self, realigner: Realigner) -> cirm_core::Result<Self> {
        if realigner.num_concepts() != self.model.num_concepts() {
            return Err(cirm_core::Error::shape(
                "realigner",
                &[self.model.num_concepts()],
                &[realigner.num_concepts()],
            ));
        }
        self.realigner = Some(realigner);
        Ok(self)
    }

    /// Takes names and concept groups from the world the model was trained on.
    pub fn with_world(mut self, world: &GenerativeWorld) -> cirm_core::Result<Self> {
        if world.num_concepts() != self.model.num_concepts() || world.num_classes() != self.model.num_classes() {
            return Err(cirm_core::Error::Invalid(
                "world does not match the model dimensions".into(),
            ));
        }
        if !world.concept_names().is_empty() {
            self.concept_names = world.concept_names().to_vec();
        }
        if !world.class_names().is_empty() {
            self.class_names = world.class_names().to_vec();
        }
        self.units = SelectionUnits::from_groups(world.num_concepts(), world.groups())?;
        Ok(self)
    }

    pub fn with_samples(mut self, samples: Dataset) -> Self {
        self.samples = Some(samples);
        self
    }

    pub fn summary(&self) -> ModelSummary {
        ModelSummary {
            id: self.id.clone(),
            kind: self.model.kind().name().to_string(),
            input_dim: self.model.input_dim(),
            num_concepts: self.model.num_concepts(),
            num_classes: self.model.num_classes(),
            has_realigner: self.realigner.is_some(),
            num_samples: self.samples.as_ref().map_or(0, Dataset::len),
            concept_names: self.concept_names.clone(),
            class_names: self.class_names.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub id: String,
    pub kind: String,
    pub input_dim: usize,
    pub num_concepts: usize,
    pub num_classes: usize,
    pub has_realigner: bool,
    pub num_samples: usize,
    pub concept_names: Vec<String>,
    pub class_names: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct ModelRegistry {
    entries: BTreeMap<String, ModelEntry>,
}

impl ModelRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, entry: ModelEntry) {
        self.entries.insert(entry.id.clone(), entry);
    }

    pub fn get(&self, id: &str) -> Option<&ModelEntry> {
        self.entries.get(id)
    }

    pub fn summaries(&self) -> Vec<ModelSummary> {
        self.entries.values().map(ModelEntry::summary).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use cirm_core::datagen::Preset;
    use cirm_core::models::{init_model, ArchConfig, ModelDims, ModelKind, ModelTraining};
    use cirm_core::realign::RealignerConfig;

    fn model(world: &GenerativeWorld) -> ConceptModel {
        let dims = ModelDims::of_world(world);
        init_model(
            ModelKind::SequentialCbm,
            dims,
            &ArchConfig::default(),
            &ModelTraining::default(),
            1,
        )
        .unwrap()
    }

    #[test]
    fn grouped_world_supplies_units_and_names() {
        let w = GenerativeWorld::preset(Preset::Grouped, 1);
        let e = ModelEntry::new("g", model(&w)).with_world(&w).unwrap();
        assert!(e.units.is_grouped());
        assert_eq!(e.units.len(), w.groups().len());
        assert_eq!(e.concept_names.len(), w.num_concepts());
    }

    #[test]
    fn mismatched_world_and_realigner_are_rejected() {
        let small = GenerativeWorld::preset(Preset::Small, 1);
        let medium = GenerativeWorld::preset(Preset::Medium, 1);
        let e = ModelEntry::new("s", model(&small));
        assert!(e.clone().with_world(&medium).is_err());
        let r = Realigner::new(medium.num_concepts(), RealignerConfig::default(), 1).unwrap();
        assert!(e.with_realigner(r).is_err());
    }

    #[test]
    fn registry_lists_entries_by_id() {
        let w = GenerativeWorld::preset(Preset::Small, 1);
        let mut reg = ModelRegistry::new();
        reg.insert(ModelEntry::new("b", model(&w)));
        reg.insert(ModelEntry::new("a", model(&w)));
        let ids: Vec<String> = reg.summaries().into_iter().map(|s| s.id).collect();
        assert_eq!(ids, ["a", "b"]);
        assert!(reg.get("c").is_none());
        assert!(!reg.get("a").unwrap().summary().has_realigner);
    }
}
