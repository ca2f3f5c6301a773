//! Central finite-difference verification of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(store position, tensor name, element)` of the worst entry.
    pub worst: Option<(usize, String, usize)>,
    /// `(analytic, numeric)` at the worst entry.
    pub worst_values: Option<(f64, f64)>,
    pub checked: usize,
}

/// Compares the analytic gradient of every parameter scalar in `stores` with
/// `(f(θ+eps) − f(θ−eps)) / (2·eps)`. Relative error per entry is
/// `|a − n| / max(1e−8, |a| + |n|)`.
pub fn grad_check<F>(stores: &mut [&mut ParamStore], eps: f64, loss: F) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Tape<'a>, &[&'a ParamStore]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::field("eps", format!("{eps} outside [1e-7, 1e-3]")));
    }
    let eval = |stores: &[&mut ParamStore]| -> Result<f64> {
        let views: Vec<&ParamStore> = stores.iter().map(|s| &**s).collect();
        let mut tape = Tape::new();
        let v = loss(&mut tape, &views)?;
        let l = tape.scalar(v);
        if !l.is_finite() {
            return Err(Error::NonFinite("grad_check loss"));
        }
        Ok(l)
    };

    let analytic = {
        let views: Vec<&ParamStore> = stores.iter().map(|s| &**s).collect();
        let mut tape = Tape::new();
        let v = loss(&mut tape, &views)?;
        if !tape.scalar(v).is_finite() {
            return Err(Error::NonFinite("grad_check loss"));
        }
        tape.backward(v)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_values: None,
        checked: 0,
    };
    for si in 0..stores.len() {
        for ti in 0..stores[si].len() {
            let r = stores[si].param_ref(ti);
            let n = stores[si].get(ti).len();
            for e in 0..n {
                let orig = stores[si].get(ti).values[e];
                stores[si].get_mut(ti).values[e] = orig + eps;
                let fp = eval(stores);
                stores[si].get_mut(ti).values[e] = orig - eps;
                let fm = eval(stores);
                stores[si].get_mut(ti).values[e] = orig;
                let numeric = (fp? - fm?) / (2.0 * eps);
                let a = analytic.get(r).map_or(0.0, |g| g[e]);
                let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
                report.checked += 1;
                if rel > report.max_rel_error {
                    report.max_rel_error = rel;
                    report.worst = Some((si, stores[si].name(ti).to_string(), e));
                    report.worst_values = Some((a, numeric));
                }
            }
        }
    }
    Ok(report)
}
