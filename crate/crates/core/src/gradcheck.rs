//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward passes on frozen
//! parameters, so it shares no code with the backward sweep it checks.

use crate::error::Result;
use crate::params::{Bound, ParamStore};
use crate::tape::{Tape, Var};

pub const DEFAULT_STEP: f64 = 1e-6;

/// Denominator floor for the relative error. Gradients smaller than this
/// are compared in absolute terms (`|a − n| / FLOOR`), which keeps the
/// O(ε·|f|/step) cancellation noise of the difference quotient from
/// dominating near-zero entries.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct Mismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<Mismatch>,
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares backward-pass gradients of `loss_fn` against central
/// differences for every scalar in `store`.
pub fn check<F>(store: &ParamStore, step: f64, loss_fn: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let loss = loss_fn(&mut tape, &bound)?;
    tape.backward(loss)?;
    let analytic = bound.grads(&tape, store);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let b = s.bind_frozen(&mut t);
        let l = loss_fn(&mut t, &b)?;
        Ok(t.value(l).item())
    };

    let mut probe = store.clone();
    let mut report = GradReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for id in store.ids() {
        for i in 0..store.get(id).numel() {
            let orig = store.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + step;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - step;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * step);
            let a = analytic[id.index()].data()[i];
            let err = rel_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some(Mismatch {
                    param: store.name(id).to_string(),
                    index: i,
                    analytic: a,
                    numeric,
                    rel_error: err,
                });
            }
        }
    }
    Ok(report)
}
