//! Ablations over realigner architecture, training policy, policy input and
//! selection rule.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::curves::{auc, evaluate_curves, Curve};
use super::suite::{base_model, in_pool, posthoc_realigner, shared_encoder, CellData, SuiteConfig, WorldChoice};
use crate::error::{Error, Result};
use crate::intervene::{PolicyKind, PolicySource};
use crate::models::{ConceptModel, ModelKind};
use crate::ndcompute::mix_seed;
use crate::realign::{ConceptRealigner, InputMode, Realigner, RealignerArch, RealignerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    /// {feed-forward, recurrent} × {original, previous-output} realigners.
    Architectures,
    /// Realigners trained under UCP and random, both evaluated under random.
    PolicyTransfer,
    /// Policy reading the initial prediction versus the realigned concepts.
    StaticVsUpdated,
    /// UCP versus random selection without a realigner.
    UcpVsRandom,
}

impl AblationKind {
    pub const ALL: [AblationKind; 4] = [
        AblationKind::Architectures,
        AblationKind::PolicyTransfer,
        AblationKind::StaticVsUpdated,
        AblationKind::UcpVsRandom,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationKind::Architectures => "architectures",
            AblationKind::PolicyTransfer => "policy_transfer",
            AblationKind::StaticVsUpdated => "static_vs_updated",
            AblationKind::UcpVsRandom => "ucp_vs_random",
        }
    }
}

impl fmt::Display for AblationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| Error::field("ablation", format!("unknown ablation `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub kind: AblationKind,
    pub world: WorldChoice,
    pub model: ModelKind,
    pub seeds: Vec<u64>,
    pub config: SuiteConfig,
    /// Seed of the random selection policy (reseeded per test sample).
    pub random_seed: u64,
    #[serde(default)]
    pub jobs: usize,
}

impl AblationSpec {
    pub fn new(kind: AblationKind, world: WorldChoice, seeds: Vec<u64>) -> Self {
        Self {
            kind,
            world,
            model: ModelKind::SequentialCbm,
            seeds,
            config: SuiteConfig::default(),
            random_seed: 0xA11CE,
            jobs: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: String,
    pub seed: u64,
    pub concept_loss_auc: f64,
    pub accuracy_auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCurves {
    pub arm: String,
    pub seed: u64,
    pub concept: Curve,
    pub accuracy: Curve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub kind: AblationKind,
    pub rows: Vec<AblationRow>,
    pub curves: Vec<AblationCurves>,
}

impl AblationReport {
    pub fn row(&self, arm: &str, seed: u64) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.arm == arm && r.seed == seed)
    }
}

struct Arm {
    name: String,
    realigner: Option<Realigner>,
    policy: PolicyKind,
}

fn arms(spec: &AblationSpec, data: &CellData, base: &ConceptModel) -> Result<Vec<Arm>> {
    let cfg = &spec.config;
    let random = PolicyKind::random(mix_seed(spec.random_seed, data.seed));
    let trained = |rc: &RealignerConfig| posthoc_realigner(data, base, rc, cfg);
    Ok(match spec.kind {
        AblationKind::Architectures => {
            let mut out = Vec::new();
            for arch in [RealignerArch::Feedforward, RealignerArch::Recurrent] {
                for mode in [InputMode::Original, InputMode::PreviousOutput] {
                    let mut rc = cfg.realigner.clone();
                    rc.arch = arch;
                    rc.input_mode = mode;
                    out.push(Arm {
                        name: format!("{arch}+{mode}"),
                        realigner: Some(trained(&rc)?),
                        policy: PolicyKind::ucp(),
                    });
                }
            }
            out
        }
        AblationKind::PolicyTransfer => {
            let mut ucp_cfg = cfg.realigner.clone();
            ucp_cfg.training_policy = PolicyKind::ucp();
            let mut rand_cfg = cfg.realigner.clone();
            rand_cfg.training_policy = PolicyKind::random(mix_seed(spec.random_seed, 0x7EA1));
            vec![
                Arm {
                    name: "trained_ucp".into(),
                    realigner: Some(trained(&ucp_cfg)?),
                    policy: random.clone(),
                },
                Arm {
                    name: "trained_random".into(),
                    realigner: Some(trained(&rand_cfg)?),
                    policy: random,
                },
            ]
        }
        AblationKind::StaticVsUpdated => {
            let r = trained(&cfg.realigner)?;
            vec![
                Arm {
                    name: "static".into(),
                    realigner: Some(r.clone()),
                    policy: PolicyKind::ucp().with_source(PolicySource::Original),
                },
                Arm {
                    name: "updated".into(),
                    realigner: Some(r),
                    policy: PolicyKind::ucp().with_source(PolicySource::Updated),
                },
            ]
        }
        AblationKind::UcpVsRandom => vec![
            Arm {
                name: "ucp".into(),
                realigner: None,
                policy: PolicyKind::ucp(),
            },
            Arm {
                name: "random".into(),
                realigner: None,
                policy: random,
            },
        ],
    })
}

fn run_seed(spec: &AblationSpec, seed: u64) -> Result<Vec<AblationCurves>> {
    let data = CellData::prepare(spec.world.clone(), seed, &spec.config)?;
    let encoder = match spec.model {
        ModelKind::SequentialCbm | ModelKind::IndependentCbm => Some(shared_encoder(&data, &spec.config)?),
        _ => None,
    };
    let base = base_model(&data, spec.model, &spec.config, encoder.as_ref())?;
    arms(spec, &data, &base)?
        .into_iter()
        .map(|a| {
            let (concept, accuracy) = evaluate_curves(
                &base,
                a.realigner.as_ref().map(|r| r as &dyn ConceptRealigner),
                &a.policy,
                data.horizon,
                &data.splits.test,
                data.units_arg(),
            )?;
            Ok(AblationCurves {
                arm: a.name,
                seed,
                concept,
                accuracy,
            })
        })
        .collect()
}

pub fn run_ablation(spec: &AblationSpec) -> Result<AblationReport> {
    if spec.seeds.is_empty() {
        return Err(Error::field("seeds", "must be non-empty"));
    }
    spec.config.validate()?;
    let per_seed = in_pool(spec.jobs, || {
        spec.seeds
            .par_iter()
            .map(|s| run_seed(spec, *s))
            .collect::<Result<Vec<_>>>()
    })??;
    let curves: Vec<AblationCurves> = per_seed.into_iter().flatten().collect();
    let rows = curves
        .iter()
        .map(|c| {
            Ok(AblationRow {
                arm: c.arm.clone(),
                seed: c.seed,
                concept_loss_auc: auc(&c.concept)?,
                accuracy_auc: auc(&c.accuracy)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(AblationReport {
        kind: spec.kind,
        rows,
        curves,
    })
}
