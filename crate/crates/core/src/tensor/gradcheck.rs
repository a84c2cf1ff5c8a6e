//! Central finite-difference gradient checks.
//!
//! The relative error of one entry is `|analytic - numeric| / max(|analytic|,
//! |numeric|, REL_FLOOR)`. The floor keeps round-off in the difference
//! quotient from dominating entries whose true gradient is essentially zero.

use crate::error::{Error, Result};

use super::{ParamStore, Tape, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Location of the worst entry, e.g. `input 1 [7]` or `app.stage1.conv.w [3]`.
    pub worst: String,
    pub checked: usize,
    /// Distance of the analytic forward pass from the nearest kink; results
    /// with a margin below a few step sizes are not meaningful.
    pub kink_margin: f64,
}

impl GradCheckReport {
    /// True when no non-differentiable point lies within `factor` steps.
    pub fn is_smooth(&self, step: f64, factor: f64) -> bool {
        self.kink_margin > step * factor
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn scalar_of(tape: &Tape<'_>, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.len() != 1 {
        return Err(Error::shape(format!(
            "gradient check needs a scalar output, got {:?}",
            t.shape()
        )));
    }
    Ok(t.data()[0])
}

/// Checks `d f / d inputs` for a function of free tensors.
pub fn check_inputs<F>(inputs: &[Tensor], step: f64, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.input(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        scalar_of(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;
    let kink_margin = tape.kink_margin();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
        kink_margin,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(analytic.data()[i], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_empty() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = format!("input {k} [{i}]");
            }
        }
    }
    Ok(report)
}

/// Checks `d f / d params` for every parameter of `store` (or every
/// `stride`-th entry of each when `stride > 1`).
pub fn check_params<F>(store: &ParamStore, step: f64, stride: usize, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&mut Tape<'t>, &'t ParamStore) -> Result<Var>,
{
    let stride = stride.max(1);
    let (analytic, kink_margin) = {
        let mut tape = Tape::new();
        let out = f(&mut tape, store)?;
        scalar_of(&tape, out)?;
        let grads = tape.backward(out)?;
        (grads.param_grads(&tape), tape.kink_margin())
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(&mut tape, s)?;
        scalar_of(&tape, out)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
        kink_margin,
    };
    let mut work = store.clone();
    for (id, param) in store.iter() {
        let grad = analytic
            .iter()
            .find(|(pid, _)| *pid == id)
            .map(|(_, g)| g.clone())
            .unwrap_or_else(|| Tensor::zeros(param.value.shape()));
        for i in (0..param.value.len()).step_by(stride) {
            let orig = param.value.data()[i];
            work.get_mut(id).value.data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work.get_mut(id).value.data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(grad.data()[i], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_empty() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = format!("{} [{i}]", param.name);
            }
        }
    }
    Ok(report)
}
