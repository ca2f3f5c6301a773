//! Benchmark suites: every (world, model kind, seed) cell evaluated with and
//! without a realigner.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::curves::{auc, evaluate_curves, mean_stderr, Curve};
use super::suite::{
    base_model, in_pool, joint_intcem_realigner, posthoc_realigner, shared_encoder, CellData, SuiteConfig, WorldChoice,
};
use crate::datagen::Preset;
use crate::error::{Error, Result};
use crate::intervene::PolicyKind;
use crate::models::{CbmModel, ModelKind};
use crate::realign::ConceptRealigner;

/// The four model kinds of the main comparison table.
pub const TABLE1_KINDS: [ModelKind; 4] = [
    ModelKind::SequentialCbm,
    ModelKind::IndependentCbm,
    ModelKind::JointCbm,
    ModelKind::Cem,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub worlds: Vec<WorldChoice>,
    pub kinds: Vec<ModelKind>,
    pub seeds: Vec<u64>,
    pub config: SuiteConfig,
    pub policy: PolicyKind,
    /// Worker threads; 0 uses the global pool.
    #[serde(default)]
    pub jobs: usize,
}

impl BenchmarkSpec {
    pub fn table1(preset: Preset, world_seed: u64, seeds: Vec<u64>) -> Self {
        Self {
            worlds: vec![WorldChoice::preset(preset, world_seed)],
            kinds: TABLE1_KINDS.to_vec(),
            seeds,
            config: SuiteConfig::for_preset(preset),
            policy: PolicyKind::ucp(),
            jobs: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.worlds.is_empty() || self.kinds.is_empty() || self.seeds.is_empty() {
            return Err(Error::field("benchmark", "worlds, kinds and seeds must be non-empty"));
        }
        self.config.validate()
    }
}

/// AUCs of one arm of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucSummary {
    pub world: String,
    pub kind: ModelKind,
    pub realigned: bool,
    pub seed: u64,
    pub concept_loss_auc: f64,
    pub accuracy_auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmCurves {
    pub realigned: bool,
    pub concept: Curve,
    pub accuracy: Curve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub world: String,
    pub kind: ModelKind,
    pub seed: u64,
    pub arms: Vec<ArmCurves>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub world: String,
    pub kind: ModelKind,
    pub seed: u64,
    pub error: String,
}

/// Seed-aggregated AUCs in the layout of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucTableRow {
    pub world: String,
    pub kind: ModelKind,
    pub realigned: bool,
    pub concept_loss_auc: f64,
    pub concept_loss_auc_stderr: f64,
    pub accuracy_auc: f64,
    pub accuracy_auc_stderr: f64,
    pub n_seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub rows: Vec<AucSummary>,
    pub cells: Vec<CellReport>,
    pub failures: Vec<CellFailure>,
}

impl BenchmarkReport {
    /// One row per (world, kind, realigned), in suite order.
    pub fn table(&self) -> Vec<AucTableRow> {
        let mut keys: Vec<(String, ModelKind, bool)> = Vec::new();
        for r in &self.rows {
            let key = (r.world.clone(), r.kind, r.realigned);
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
        keys.into_iter()
            .map(|(world, kind, realigned)| {
                let sel: Vec<&AucSummary> = self
                    .rows
                    .iter()
                    .filter(|r| r.world == world && r.kind == kind && r.realigned == realigned)
                    .collect();
                let conc: Vec<f64> = sel.iter().map(|r| r.concept_loss_auc).collect();
                let acc: Vec<f64> = sel.iter().map(|r| r.accuracy_auc).collect();
                let (cm, cs) = mean_stderr(&conc);
                let (am, as_) = mean_stderr(&acc);
                AucTableRow {
                    world,
                    kind,
                    realigned,
                    concept_loss_auc: cm,
                    concept_loss_auc_stderr: cs,
                    accuracy_auc: am,
                    accuracy_auc_stderr: as_,
                    n_seeds: sel.len(),
                }
            })
            .collect()
    }

    pub fn cell(&self, world: &str, kind: ModelKind, seed: u64) -> Option<&CellReport> {
        self.cells
            .iter()
            .find(|c| c.world == world && c.kind == kind && c.seed == seed)
    }
}

impl CellReport {
    pub fn arm(&self, realigned: bool) -> Option<&ArmCurves> {
        self.arms.iter().find(|a| a.realigned == realigned)
    }
}

fn arm(
    model: &crate::models::ConceptModel,
    realigner: Option<&dyn ConceptRealigner>,
    policy: &PolicyKind,
    data: &CellData,
) -> Result<ArmCurves> {
    let (concept, accuracy) = evaluate_curves(
        model,
        realigner,
        policy,
        data.horizon,
        &data.splits.test,
        data.units_arg(),
    )?;
    Ok(ArmCurves {
        realigned: realigner.is_some(),
        concept,
        accuracy,
    })
}

fn run_cell(
    data: &CellData,
    kind: ModelKind,
    spec: &BenchmarkSpec,
    encoder: Option<&CbmModel>,
) -> Result<Vec<ArmCurves>> {
    let base = base_model(data, kind, &spec.config, encoder)?;
    let baseline = arm(&base, None, &spec.policy, data)?;
    let realigned = if kind == ModelKind::IntCem {
        let (m, r) = joint_intcem_realigner(data, &spec.config)?;
        arm(&m, Some(&r), &spec.policy, data)?
    } else {
        let r = posthoc_realigner(data, &base, &spec.config.realigner, &spec.config)?;
        arm(&base, Some(&r), &spec.policy, data)?
    };
    Ok(vec![baseline, realigned])
}

/// (world label, kind, seed, arms or the error text).
type Outcome = (String, ModelKind, u64, std::result::Result<Vec<ArmCurves>, String>);

/// Trains (or loads) and evaluates every cell. A failing cell is recorded in
/// `failures` and does not stop the others.
pub fn run_benchmark(spec: &BenchmarkSpec) -> Result<BenchmarkReport> {
    spec.validate()?;
    in_pool(spec.jobs, || run_benchmark_inner(spec))?
}

type Prepared = (
    WorldChoice,
    u64,
    std::result::Result<CellData, String>,
    Option<std::result::Result<CbmModel, String>>,
);

fn run_benchmark_inner(spec: &BenchmarkSpec) -> Result<BenchmarkReport> {
    let needs_encoder = spec
        .kinds
        .iter()
        .any(|k| matches!(k, ModelKind::SequentialCbm | ModelKind::IndependentCbm));
    let pairs: Vec<(WorldChoice, u64)> = spec
        .worlds
        .iter()
        .flat_map(|w| spec.seeds.iter().map(move |s| (w.clone(), *s)))
        .collect();
    let prepared: Vec<Prepared> = pairs
        .par_iter()
        .map(|(w, s)| {
            let data = CellData::prepare(w.clone(), *s, &spec.config).map_err(|e| e.to_string());
            let encoder = match (&data, needs_encoder) {
                (Ok(d), true) => Some(shared_encoder(d, &spec.config).map_err(|e| e.to_string())),
                _ => None,
            };
            (w.clone(), *s, data, encoder)
        })
        .collect();

    let jobs: Vec<(&Prepared, ModelKind)> = prepared
        .iter()
        .flat_map(|p| spec.kinds.iter().map(move |k| (p, *k)))
        .collect();
    let outcomes: Vec<Outcome> = jobs
        .par_iter()
        .map(|((w, seed, data, encoder), kind)| {
            let result = match data {
                Err(e) => Err(e.clone()),
                Ok(d) => match (kind, encoder) {
                    (ModelKind::SequentialCbm | ModelKind::IndependentCbm, Some(Err(e))) => Err(e.clone()),
                    (_, enc) => {
                        let enc = enc.as_ref().and_then(|e| e.as_ref().ok());
                        run_cell(d, *kind, spec, enc).map_err(|e| e.to_string())
                    }
                },
            };
            (w.label(), *kind, *seed, result)
        })
        .collect();

    let mut report = BenchmarkReport {
        rows: Vec::new(),
        cells: Vec::new(),
        failures: Vec::new(),
    };
    for (world, kind, seed, result) in outcomes {
        match result.and_then(|arms| {
            let rows = arms
                .iter()
                .map(|a| {
                    Ok(AucSummary {
                        world: world.clone(),
                        kind,
                        realigned: a.realigned,
                        seed,
                        concept_loss_auc: auc(&a.concept)?,
                        accuracy_auc: auc(&a.accuracy)?,
                    })
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e| e.to_string())?;
            Ok((arms, rows))
        }) {
            Ok((arms, rows)) => {
                report.rows.extend(rows);
                report.cells.push(CellReport {
                    world,
                    kind,
                    seed,
                    arms,
                });
            }
            Err(error) => report.failures.push(CellFailure {
                world,
                kind,
                seed,
                error,
            }),
        }
    }
    Ok(report)
}
