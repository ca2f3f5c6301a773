//! Shared plumbing for benchmark and ablation suites: data preparation and
//! fingerprint-keyed checkpoint caching.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{build_world, sample_splits, GenerativeWorld, Preset, Splits, WorldSpec};
use crate::error::{Error, Result};
use crate::intervene::SelectionUnits;
use crate::models::{
    cbm_from_encoder, init_model, load_model, save_model, train_cbm_encoder, train_model, ArchConfig, CbmModel,
    CbmScheme, ConceptModel, ModelDims, ModelKind, ModelTraining, SavedModel,
};
use crate::ndcompute::mix_seed;
use crate::realign::{
    load_realigner, save_realigner, train_intcem_rea, train_realigner_posthoc, Realigner, RealignerConfig,
    SavedRealigner,
};

const CACHE_VERSION: u32 = 1;

/// Where a suite's world comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum WorldChoice {
    Preset { preset: Preset, seed: u64 },
    Custom { name: String, spec: Box<WorldSpec> },
}

impl WorldChoice {
    pub fn preset(preset: Preset, seed: u64) -> Self {
        WorldChoice::Preset { preset, seed }
    }

    pub fn build(&self) -> Result<GenerativeWorld> {
        match self {
            WorldChoice::Preset { preset, seed } => Ok(GenerativeWorld::preset(*preset, *seed)),
            WorldChoice::Custom { spec, .. } => build_world(spec.as_ref().clone()),
        }
    }

    pub fn label(&self) -> String {
        match self {
            WorldChoice::Preset { preset, seed } => format!("{}-{seed}", preset.name()),
            WorldChoice::Custom { name, .. } => name.clone(),
        }
    }
}

/// Everything that determines a trained cell apart from world, kind and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteConfig {
    /// Train, validation and test sizes.
    pub sizes: (usize, usize, usize),
    pub arch: ArchConfig,
    pub training: ModelTraining,
    pub realigner: RealignerConfig,
    /// Evaluation horizon; `None` means every selection unit.
    pub horizon: Option<usize>,
    pub cache_dir: Option<PathBuf>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            sizes: (1000, 200, 300),
            arch: ArchConfig::default(),
            training: ModelTraining::default(),
            realigner: RealignerConfig::default(),
            horizon: None,
            cache_dir: None,
        }
    }
}

impl SuiteConfig {
    /// Desk-scale budgets sized for each preset world.
    pub fn for_preset(preset: Preset) -> Self {
        let mut c = Self::default();
        match preset {
            Preset::Small | Preset::SmallNoiseless => {
                c.sizes = (4000, 800, 500);
                c.training.train.epochs = 60;
                c.realigner.hidden_width = Some(24);
                c.realigner.train.epochs = 100;
                c.realigner.train.early_stop_patience = 15;
            }
            Preset::Medium | Preset::Grouped => {
                c.sizes = (6000, 500, 300);
                c.training.train.epochs = 40;
                c.realigner.hidden_width = Some(32);
                c.realigner.train.epochs = 60;
                c.realigner.train.early_stop_patience = 10;
            }
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let (tr, va, te) = self.sizes;
        if tr == 0 || va == 0 || te == 0 {
            return Err(Error::field("sizes", "train, validation and test sizes must be >= 1"));
        }
        self.arch.validate()?;
        self.training.validate()?;
        self.realigner.validate()
    }
}

/// One world's data for one seed.
#[derive(Debug, Clone)]
pub struct CellData {
    pub world: GenerativeWorld,
    pub choice: WorldChoice,
    pub seed: u64,
    pub splits: Splits,
    pub units: SelectionUnits,
    pub horizon: usize,
}

impl CellData {
    pub fn prepare(choice: WorldChoice, seed: u64, config: &SuiteConfig) -> Result<Self> {
        let world = choice.build()?;
        let splits = sample_splits(&world, config.sizes, mix_seed(seed, 0xDA7A))?;
        let units = SelectionUnits::from_groups(world.num_concepts(), world.groups())?;
        let horizon = config.horizon.unwrap_or(units.len());
        if horizon > units.len() {
            return Err(Error::TrajectoryTooLong {
                t: horizon,
                units: units.len(),
            });
        }
        Ok(Self {
            world,
            choice,
            seed,
            splits,
            units,
            horizon,
        })
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims::of_world(&self.world)
    }

    /// `Some` only for grouped worlds, so singleton worlds use the default.
    pub fn units_arg(&self) -> Option<&SelectionUnits> {
        self.units.is_grouped().then_some(&self.units)
    }

    fn key<T: Serialize>(&self, stage: &str, config: &SuiteConfig, extra: &T) -> Result<String> {
        let mut h = Sha256::new();
        h.update(CACHE_VERSION.to_le_bytes());
        h.update(stage.as_bytes());
        h.update(serde_json::to_vec(self.world.spec())?);
        h.update(self.seed.to_le_bytes());
        h.update(serde_json::to_vec(&(config.sizes, &config.arch, &config.training))?);
        h.update(serde_json::to_vec(extra)?);
        Ok(hex::encode(h.finalize()))
    }
}

fn cached<T>(
    dir: Option<&Path>,
    name: &str,
    load: impl Fn(&Path) -> Result<T>,
    save: impl Fn(&Path, &T) -> Result<()>,
    build: impl FnOnce() -> Result<T>,
) -> Result<T> {
    let Some(dir) = dir else { return build() };
    let path = dir.join(name);
    if path.exists() {
        if let Ok(v) = load(&path) {
            return Ok(v);
        }
    }
    let v = build()?;
    std::fs::create_dir_all(dir)?;
    save(&path, &v)?;
    Ok(v)
}

fn cached_model(
    dir: Option<&Path>,
    key: &str,
    arch: &ArchConfig,
    seed: u64,
    build: impl FnOnce() -> Result<ConceptModel>,
) -> Result<ConceptModel> {
    cached(
        dir,
        &format!("model-{key}.json"),
        |p| Ok(load_model(p)?.model),
        |p, m: &ConceptModel| {
            save_model(
                p,
                &SavedModel::new(m.clone(), arch.clone(), seed, serde_json::Value::Null),
            )
        },
        build,
    )
}

fn cached_realigner(
    dir: Option<&Path>,
    key: &str,
    seed: u64,
    build: impl FnOnce() -> Result<Realigner>,
) -> Result<Realigner> {
    cached(
        dir,
        &format!("realigner-{key}.json"),
        |p| Ok(load_realigner(p)?.realigner),
        |p, r: &Realigner| save_realigner(p, &SavedRealigner::new(r.clone(), seed)),
        build,
    )
}

/// The encoder shared by the sequential and independent CBMs of one cell.
pub fn shared_encoder(data: &CellData, config: &SuiteConfig) -> Result<CbmModel> {
    let key = data.key("encoder", config, &())?;
    let model = cached_model(config.cache_dir.as_deref(), &key, &config.arch, data.seed, || {
        let ConceptModel::Cbm(mut m) = init_model(
            ModelKind::SequentialCbm,
            data.dims(),
            &config.arch,
            &config.training,
            data.seed,
        )?
        else {
            return Err(Error::Invalid("expected a CBM".into()));
        };
        train_cbm_encoder(
            &mut m,
            &data.splits.train,
            &data.splits.val,
            &config.training.train,
            data.seed,
        )?;
        Ok(ConceptModel::Cbm(m))
    })?;
    match model {
        ConceptModel::Cbm(m) => Ok(m),
        ConceptModel::Cem(_) => Err(Error::Invalid("cached encoder is not a CBM".into())),
    }
}

/// A trained and frozen base model. Sequential and independent CBMs are
/// built on `encoder` when given.
pub fn base_model(
    data: &CellData,
    kind: ModelKind,
    config: &SuiteConfig,
    encoder: Option<&CbmModel>,
) -> Result<ConceptModel> {
    let key = data.key("base", config, &kind)?;
    let mut model = cached_model(config.cache_dir.as_deref(), &key, &config.arch, data.seed, || {
        let (train, val) = (&data.splits.train, &data.splits.val);
        let scheme = match kind {
            ModelKind::SequentialCbm => Some(CbmScheme::Sequential),
            ModelKind::IndependentCbm => Some(CbmScheme::Independent),
            _ => None,
        };
        if let (Some(scheme), Some(enc)) = (scheme, encoder) {
            return Ok(cbm_from_encoder(enc, scheme, &config.training, train, val, data.seed)?.0);
        }
        let mut m = init_model(kind, data.dims(), &config.arch, &config.training, data.seed)?;
        train_model(&mut m, &config.training, train, val, data.units_arg(), data.seed)?;
        Ok(m)
    })?;
    model.freeze();
    Ok(model)
}

/// Post-hoc realigner for a frozen `base` trained under `realigner`.
pub fn posthoc_realigner(
    data: &CellData,
    base: &ConceptModel,
    realigner: &RealignerConfig,
    config: &SuiteConfig,
) -> Result<Realigner> {
    let key = data.key("posthoc", config, &(base.checksum(), realigner))?;
    cached_realigner(config.cache_dir.as_deref(), &key, data.seed, || {
        let (r, _) = train_realigner_posthoc(
            base,
            &data.splits.train,
            &data.splits.val,
            realigner,
            data.units_arg(),
            data.seed,
        )?;
        Ok(r)
    })
}

/// Intervention-aware CEM trained jointly with its realigner.
pub fn joint_intcem_realigner(data: &CellData, config: &SuiteConfig) -> Result<(ConceptModel, Realigner)> {
    let key = data.key("intcem_rea", config, &config.realigner)?;
    let dir = config.cache_dir.as_deref();
    let model_path = dir.map(|d| d.join(format!("model-{key}.json")));
    let rea_path = dir.map(|d| d.join(format!("realigner-{key}.json")));
    if let (Some(mp), Some(rp)) = (&model_path, &rea_path) {
        if let (Ok(m), Ok(r)) = (load_model(mp), load_realigner(rp)) {
            return Ok((m.model, r.realigner));
        }
    }
    let (m, r, _) = train_intcem_rea(
        &data.splits.train,
        &data.splits.val,
        data.dims(),
        &config.arch,
        &config.training.intcem,
        &config.realigner,
        &config.training.train,
        data.units_arg(),
        data.seed,
    )?;
    let model = ConceptModel::Cem(m);
    if let (Some(d), Some(mp), Some(rp)) = (dir, &model_path, &rea_path) {
        std::fs::create_dir_all(d)?;
        save_model(
            mp,
            &SavedModel::new(model.clone(), config.arch.clone(), data.seed, serde_json::Value::Null),
        )?;
        save_realigner(rp, &SavedRealigner::new(r.clone(), data.seed))?;
    }
    Ok((model, r))
}

/// Runs `f` on a pool of `jobs` threads, or on the global pool when 0.
pub(crate) fn in_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if jobs == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}
