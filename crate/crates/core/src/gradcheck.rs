//! Central finite-difference verification of analytic gradients.
//!
//! Every tensor under test lives in a [`ParamStore`]; the closure rebuilds
//! the scalar loss from the store on a fresh tape, so the numeric side never
//! touches the backward pass it is checking.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};

/// Magnitudes below this are treated as this value when forming relative
/// errors, so exact zeros on both sides do not divide by zero.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compare backprop against `(f(x + eps) - f(x - eps)) / 2 eps` for at most
/// `max_per_param` evenly spread entries of every parameter in `store`.
pub fn check_store<F>(
    store: &mut ParamStore<f64>,
    eps: f64,
    max_per_param: usize,
    mut loss: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let l = loss(&mut tape, store)?;
    tape.backward(l)?;
    let mut report = GradCheckReport::default();
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let analytic = tape
            .param_var(store, id)
            .and_then(|v| tape.grad(v))
            .map(|g| g.into_data())
            .unwrap_or_else(|| vec![0.0; store.value(id).numel()]);
        let n = analytic.len();
        let step = (n / max_per_param.max(1)).max(1);
        for idx in (0..n).step_by(step).take(max_per_param) {
            let orig = store.value(id).data()[idx];
            store.value_mut(id).data_mut()[idx] = orig + eps;
            let plus = eval(store, &mut loss)?;
            store.value_mut(id).data_mut()[idx] = orig - eps;
            let minus = eval(store, &mut loss)?;
            store.value_mut(id).data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic[idx], numeric);
            report.checked += 1;
            if report.checked == 1 || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_param = store.name(id).to_string();
                report.worst_index = idx;
                report.analytic = analytic[idx];
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

fn eval<F>(store: &ParamStore<f64>, loss: &mut F) -> Result<f64>
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let l = loss(&mut tape, store)?;
    Ok(tape.value(l).item())
}
