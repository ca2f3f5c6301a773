use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcompute::rng_for;

/// Concepts intervened on together.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptGroup {
    pub name: String,
    pub members: Vec<usize>,
}

/// On-disk description of a world. Field names are the file schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub num_concepts: usize,
    pub num_classes: usize,
    pub input_dim: usize,
    pub class_prior: Vec<f64>,
    /// One binary row of length `num_concepts` per class.
    pub templates: Vec<Vec<u8>>,
    /// Per-concept probability of flipping the template bit.
    pub flip_rate: Vec<f64>,
    /// `input_dim` rows of `num_concepts` entries.
    pub emission: Vec<Vec<f64>>,
    pub noise_sigma: f64,
    #[serde(default)]
    pub groups: Vec<ConceptGroup>,
    #[serde(default)]
    pub concept_names: Vec<String>,
    #[serde(default)]
    pub class_names: Vec<String>,
    pub seed: u64,
}

/// Built-in desk-scale worlds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// k=6, M=4, d=12. Small enough for full enumeration.
    Small,
    /// SMALL with no flips and no emission noise.
    SmallNoiseless,
    /// k=16, M=20, d=32.
    Medium,
    /// k=16 in 4 groups of 4, M=8, d=32.
    Grouped,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(Preset::Small),
            "small_noiseless" | "small-noiseless" => Ok(Preset::SmallNoiseless),
            "medium" => Ok(Preset::Medium),
            "grouped" => Ok(Preset::Grouped),
            other => Err(Error::field("preset", format!("unknown preset `{other}`"))),
        }
    }
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Small => "small",
            Preset::SmallNoiseless => "small_noiseless",
            Preset::Medium => "medium",
            Preset::Grouped => "grouped",
        }
    }
}

struct PresetShape {
    k: usize,
    m: usize,
    d: usize,
    flip: f64,
    sigma: f64,
    group_size: Option<usize>,
}

impl WorldSpec {
    pub fn preset(preset: Preset, seed: u64) -> Self {
        let shape = match preset {
            Preset::Small => PresetShape {
                k: 6,
                m: 4,
                d: 12,
                flip: 0.05,
                sigma: 40.0,
                group_size: None,
            },
            Preset::SmallNoiseless => PresetShape {
                k: 6,
                m: 4,
                d: 12,
                flip: 0.0,
                sigma: 0.0,
                group_size: None,
            },
            Preset::Medium => PresetShape {
                k: 16,
                m: 20,
                d: 32,
                flip: 0.05,
                sigma: 6.0,
                group_size: None,
            },
            Preset::Grouped => PresetShape {
                k: 16,
                m: 8,
                d: 32,
                flip: 0.05,
                sigma: 1.5,
                group_size: Some(4),
            },
        };
        Self::random(&shape, seed)
    }

    fn random(shape: &PresetShape, seed: u64) -> Self {
        let mut rng = rng_for(seed, 0x5EED_0001);
        let mut seen = BTreeSet::new();
        let mut templates = Vec::with_capacity(shape.m);
        while templates.len() < shape.m {
            let t: Vec<u8> = (0..shape.k).map(|_| rng.random_range(0..2u8)).collect();
            if seen.insert(t.clone()) {
                templates.push(t);
            }
        }
        let emission = (0..shape.d)
            .map(|_| (0..shape.k).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let groups = shape
            .group_size
            .map(|g| {
                (0..shape.k / g)
                    .map(|i| ConceptGroup {
                        name: format!("group_{i}"),
                        members: (i * g..(i + 1) * g).collect(),
                    })
                    .collect()
            })
            .unwrap_or_default();
        Self {
            num_concepts: shape.k,
            num_classes: shape.m,
            input_dim: shape.d,
            class_prior: vec![1.0 / shape.m as f64; shape.m],
            templates,
            flip_rate: vec![shape.flip; shape.k],
            emission,
            noise_sigma: shape.sigma,
            groups,
            concept_names: (0..shape.k).map(|i| format!("concept_{i:02}")).collect(),
            class_names: (0..shape.m).map(|i| format!("class_{i:02}")).collect(),
            seed,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// A validated synthetic world: `y ~ prior`, `c = template[y]` with
/// independent per-concept flips, `x = A·c + N(0, σ²I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WorldSpec", into = "WorldSpec")]
pub struct GenerativeWorld {
    spec: WorldSpec,
}

impl TryFrom<WorldSpec> for GenerativeWorld {
    type Error = Error;

    fn try_from(spec: WorldSpec) -> Result<Self> {
        build_world(spec)
    }
}

impl From<GenerativeWorld> for WorldSpec {
    fn from(w: GenerativeWorld) -> Self {
        w.spec
    }
}

/// Validates a spec into a world.
pub fn build_world(mut spec: WorldSpec) -> Result<GenerativeWorld> {
    let k = spec.num_concepts;
    let m = spec.num_classes;
    let d = spec.input_dim;
    if k == 0 {
        return Err(Error::field("num_concepts", "must be >= 1"));
    }
    if m == 0 {
        return Err(Error::field("num_classes", "must be >= 1"));
    }
    if d == 0 {
        return Err(Error::field("input_dim", "must be >= 1"));
    }
    if spec.class_prior.len() != m {
        return Err(Error::field("class_prior", format!("expected {m} entries")));
    }
    if spec.class_prior.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::field("class_prior", "entries must lie in [0, 1]"));
    }
    let total: f64 = spec.class_prior.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::field("class_prior", format!("sums to {total}, not 1")));
    }
    if spec.templates.len() != m {
        return Err(Error::field("templates", format!("expected {m} rows")));
    }
    let mut seen = BTreeSet::new();
    for (y, t) in spec.templates.iter().enumerate() {
        if t.len() != k {
            return Err(Error::field(
                "templates",
                format!("row {y} has {} entries, expected {k}", t.len()),
            ));
        }
        if t.iter().any(|b| *b > 1) {
            return Err(Error::field("templates", format!("row {y} is not binary")));
        }
        if !seen.insert(t.clone()) {
            return Err(Error::field(
                "templates",
                format!("row {y} duplicates an earlier template"),
            ));
        }
    }
    if spec.flip_rate.len() != k {
        return Err(Error::field("flip_rate", format!("expected {k} entries")));
    }
    if spec.flip_rate.iter().any(|e| !(0.0..0.5).contains(e)) {
        return Err(Error::field("flip_rate", "every entry must lie in [0, 0.5)"));
    }
    if spec.emission.len() != d || spec.emission.iter().any(|r| r.len() != k) {
        return Err(Error::field("emission", format!("expected a {d}x{k} matrix")));
    }
    if spec.emission.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::field("emission", "entries must be finite"));
    }
    if !(spec.noise_sigma >= 0.0 && spec.noise_sigma.is_finite()) {
        return Err(Error::field("noise_sigma", "must be finite and >= 0"));
    }
    let mut used = BTreeSet::new();
    for g in &spec.groups {
        if g.members.is_empty() {
            return Err(Error::field("groups", format!("group `{}` is empty", g.name)));
        }
        for &i in &g.members {
            if i >= k {
                return Err(Error::field("groups", format!("index {i} out of range")));
            }
            if !used.insert(i) {
                return Err(Error::field("groups", format!("concept {i} appears in two groups")));
            }
        }
    }
    if spec.concept_names.is_empty() {
        spec.concept_names = (0..k).map(|i| format!("concept_{i:02}")).collect();
    } else if spec.concept_names.len() != k {
        return Err(Error::field("concept_names", format!("expected {k} names")));
    }
    if spec.class_names.is_empty() {
        spec.class_names = (0..m).map(|i| format!("class_{i:02}")).collect();
    } else if spec.class_names.len() != m {
        return Err(Error::field("class_names", format!("expected {m} names")));
    }
    Ok(GenerativeWorld { spec })
}

impl GenerativeWorld {
    pub fn preset(preset: Preset, seed: u64) -> Self {
        build_world(WorldSpec::preset(preset, seed)).expect("presets are valid")
    }

    pub fn spec(&self) -> &WorldSpec {
        &self.spec
    }

    pub fn num_concepts(&self) -> usize {
        self.spec.num_concepts
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn class_prior(&self) -> &[f64] {
        &self.spec.class_prior
    }

    pub fn template(&self, y: usize) -> &[u8] {
        &self.spec.templates[y]
    }

    pub fn flip_rate(&self) -> &[f64] {
        &self.spec.flip_rate
    }

    pub fn emission(&self) -> &[Vec<f64>] {
        &self.spec.emission
    }

    pub fn noise_sigma(&self) -> f64 {
        self.spec.noise_sigma
    }

    pub fn groups(&self) -> &[ConceptGroup] {
        &self.spec.groups
    }

    pub fn concept_names(&self) -> &[String] {
        &self.spec.concept_names
    }

    pub fn class_names(&self) -> &[String] {
        &self.spec.class_names
    }

    pub fn seed(&self) -> u64 {
        self.spec.seed
    }

    /// True when some concept never flips; such worlds admit zero-probability evidence.
    pub fn has_deterministic_concepts(&self) -> bool {
        self.spec.flip_rate.contains(&0.0)
    }

    /// `p(c_i = bit | y)`.
    pub fn concept_likelihood(&self, y: usize, i: usize, bit: bool) -> f64 {
        let eps = self.spec.flip_rate[i];
        let t = self.spec.templates[y][i] == 1;
        if t == bit {
            1.0 - eps
        } else {
            eps
        }
    }

    /// Noise-free emission `A·c`.
    pub fn emit_mean(&self, c: &[f64]) -> Vec<f64> {
        self.spec
            .emission
            .iter()
            .map(|row| row.iter().zip(c).map(|(a, b)| a * b).sum())
            .collect()
    }
}
