//! CSV writers for curves and AUC tables.

use std::io::Write;

use serde::Serialize;

use super::ablation::AblationReport;
use super::bench::AucTableRow;
use super::curves::Curve;
use crate::error::Result;

/// Written in every AUC table so the integration rule travels with the numbers.
pub const AUC_QUADRATURE: &str = "trapezoid_from_t0";

#[derive(Serialize)]
struct CurveRow<'a> {
    t: usize,
    metric: &'a str,
    value: f64,
    stderr: f64,
}

/// Columns `t, metric, value, stderr`, one row per point of every curve.
pub fn write_curves_csv<W: Write>(w: W, curves: &[&Curve]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for c in curves {
        for p in &c.points {
            out.serialize(CurveRow {
                t: p.t,
                metric: c.metric.name(),
                value: p.value,
                stderr: p.stderr,
            })?;
        }
    }
    out.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct TableRow<'a> {
    world: &'a str,
    model: &'a str,
    realigned: bool,
    concept_loss_auc: f64,
    concept_loss_auc_stderr: f64,
    accuracy_auc: f64,
    accuracy_auc_stderr: f64,
    n_seeds: usize,
    auc_quadrature: &'a str,
}

/// One row per (world, model, realigned).
pub fn write_auc_table_csv<W: Write>(w: W, rows: &[AucTableRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(TableRow {
            world: &r.world,
            model: r.kind.label(),
            realigned: r.realigned,
            concept_loss_auc: r.concept_loss_auc,
            concept_loss_auc_stderr: r.concept_loss_auc_stderr,
            accuracy_auc: r.accuracy_auc,
            accuracy_auc_stderr: r.accuracy_auc_stderr,
            n_seeds: r.n_seeds,
            auc_quadrature: AUC_QUADRATURE,
        })?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct AblationCsvRow<'a> {
    ablation: &'a str,
    arm: &'a str,
    seed: u64,
    concept_loss_auc: f64,
    accuracy_auc: f64,
    auc_quadrature: &'a str,
}

pub fn write_ablation_csv<W: Write>(w: W, report: &AblationReport) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in &report.rows {
        out.serialize(AblationCsvRow {
            ablation: report.kind.name(),
            arm: &r.arm,
            seed: r.seed,
            concept_loss_auc: r.concept_loss_auc,
            accuracy_auc: r.accuracy_auc,
            auc_quadrature: AUC_QUADRATURE,
        })?;
    }
    out.flush()?;
    Ok(())
}
