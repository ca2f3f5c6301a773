//! Evaluation protocol: metric curves versus intervention count, their areas,
//! benchmark suites, ablations and CSV export.

mod ablation;
mod bench;
mod curves;
mod export;
mod suite;

pub use ablation::{run_ablation, AblationCurves, AblationKind, AblationReport, AblationRow, AblationSpec};
pub use bench::{
    run_benchmark, ArmCurves, AucSummary, AucTableRow, BenchmarkReport, BenchmarkSpec, CellFailure, CellReport,
    TABLE1_KINDS,
};
pub use curves::{
    auc, auc_values, curves_from, evaluate_curves, mean_stderr, run_trajectories, Curve, CurvePoint, Metric,
};
pub use export::{write_ablation_csv, write_auc_table_csv, write_curves_csv, AUC_QUADRATURE};
pub use suite::{
    base_model, joint_intcem_realigner, posthoc_realigner, shared_encoder, CellData, SuiteConfig, WorldChoice,
};
