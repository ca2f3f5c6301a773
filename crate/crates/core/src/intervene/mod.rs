//! Sequential test-time interventions.

mod policy;
mod state;
mod trajectory;

pub use policy::{
    choose_unit, random_select, ucp_select, ucp_select_scored, GroupScore, PolicyKind, PolicySource, SelectionRule,
    SelectionUnits,
};
pub use state::{apply_intervention, HistoryEntry, InterventionState};
pub use trajectory::{policy_rng, run_trajectory, InterventionRun, StepRecord, TrajectoryResult, Truth};
