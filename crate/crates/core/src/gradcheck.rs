//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over all entries of `|analytic − numeric| / max(1, |numeric|)`
    pub max_rel_error: f64,
    /// worst error per parameter, in store order
    pub per_param: Vec<(String, f64)>,
    /// name and flat index of the worst entry
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
}

/// Compares the gradient of the scalar built by `f` against central differences
/// with the given `step`, over every entry of every parameter in `params`.
///
/// `f` is evaluated twice up front; if the two losses differ bit-for-bit the
/// check is rejected, since differences would then be meaningless.
pub fn finite_diff_check<F>(params: &mut ParamStore, step: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<Var>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::Config(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }

    let mut analytic = params.zeros_like();
    let first = {
        let mut tape = Tape::with_params(params);
        let loss = f(params, &mut tape)?;
        let value = tape.value(loss).item();
        tape.backward(loss)?.accumulate_into(&mut analytic, 1.0)?;
        value
    };
    let second = eval(params, &mut f)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic(format!(
            "two forward passes gave {first} and {second}"
        )));
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        per_param: Vec::with_capacity(params.len()),
        worst: None,
        entries_checked: 0,
    };
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let mut worst_here = 0.0f64;
        for k in 0..params.get(id).len() {
            let orig = params.get(id).data()[k];
            params.get_mut(id).data_mut()[k] = orig + step;
            let plus = eval(params, &mut f);
            params.get_mut(id).data_mut()[k] = orig - step;
            let minus = eval(params, &mut f);
            params.get_mut(id).data_mut()[k] = orig;
            let numeric = (plus? - minus?) / (2.0 * step);

            let err = (analytic[id.index()].data()[k] - numeric).abs() / numeric.abs().max(1.0);
            worst_here = worst_here.max(err);
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((params.name(id).to_string(), k));
            }
            report.entries_checked += 1;
        }
        report
            .per_param
            .push((params.name(id).to_string(), worst_here));
    }
    Ok(report)
}

fn eval<F>(params: &ParamStore, f: &mut F) -> Result<f64>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::with_params(params);
    let loss = f(params, &mut tape)?;
    Ok(tape.value(loss).item())
}
