//! Central finite-difference verification of tape gradients.

use super::error::{NumError, NumResult};
use super::params::ParamSet;
use super::tape::{Tape, Var};

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for the relative error, so vanishing gradients are
/// compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn evaluate<F>(loss_fn: &F, params: &ParamSet) -> NumResult<f64>
where
    F: Fn(&mut Tape, &ParamSet) -> NumResult<Var>,
{
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, params)?;
    Ok(tape.value(loss).data()[0])
}

/// Compares the analytic gradient of every parameter entry against central
/// differences with step [`FD_STEP`] and returns the worst relative error.
pub fn grad_check<F>(loss_fn: F, params: &ParamSet, tolerance: f64) -> NumResult<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamSet) -> NumResult<Var>,
{
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, params)?;
    let base = tape.value(loss).data()[0];
    let again = evaluate(&loss_fn, params)?;
    if base.to_bits() != again.to_bits() {
        return Err(NumError::NonDeterministic {
            first: base,
            second: again,
        });
    }
    let grads = tape.backward(loss)?;
    let mut analytic = params.clone();
    analytic.zero_grads();
    tape.accumulate_param_grads(&grads, &mut analytic)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
        passed: true,
    };
    let mut probe = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let n = params.get(&name)?.len();
        for i in 0..n {
            let orig = params.get(&name)?.data()[i];
            probe.get_mut(&name)?.data_mut()[i] = orig + FD_STEP;
            let up = evaluate(&loss_fn, &probe)?;
            probe.get_mut(&name)?.data_mut()[i] = orig - FD_STEP;
            let down = evaluate(&loss_fn, &probe)?;
            probe.get_mut(&name)?.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic.grad(&name).map_or(0.0, |g| g.data()[i]);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || !err.is_finite() {
                report.max_rel_error = err;
                report.worst_param = name.clone();
                report.worst_index = i;
            }
        }
    }
    report.passed = report.max_rel_error < tolerance;
    Ok(report)
}
