//! Central finite-difference verification of tape gradients.

use serde::Serialize;

use super::tape::{GradFault, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Smallest gradient scale used as the relative-error denominator, so an
/// all-zero gradient compares on an absolute footing.
pub const SCALE_FLOOR: f64 = 1e-8;

/// A parameter whose whole gradient is far below the largest gradient of
/// the objective (e.g. a key bias, to which softmax is invariant) is
/// scaled against this fraction of that largest gradient instead of its
/// own magnitude. Otherwise finite-difference round-off, roughly
/// `eps * |f| / step`, would dominate the comparison.
pub const SCALE_FLOOR_FRACTION: f64 = 1e-3;

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    /// `max_i |analytic_i - numeric_i| / max(|analytic|_inf, |numeric|_inf, floor)`.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tol: f64,
    pub params: Vec<ParamCheck>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.params.iter().fold(0.0, |m, p| m.max(p.max_rel_error))
    }

    pub fn failures(&self) -> Vec<&str> {
        self.params
            .iter()
            .filter(|p| !p.passed)
            .map(|p| p.name.as_str())
            .collect()
    }
}

/// Relative error between two gradient vectors, scaled by the larger of
/// their infinity norms and `floor`.
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> (f64, usize) {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(floor.max(SCALE_FLOOR), |m, v| m.max(v.abs()));
    analytic
        .iter()
        .zip(numeric)
        .enumerate()
        .map(|(i, (a, n))| ((a - n).abs() / scale, i))
        .fold((0.0, 0), |best, cur| if cur.0 > best.0 { cur } else { best })
}

/// Compares the tape gradient of `f` with central differences for every
/// element of every parameter.
///
/// `f` receives a fresh tape and one leaf per entry of `params` (in order)
/// and must return a scalar node. It is evaluated `1 + 2 * numel` times.
pub fn grad_check<F>(f: F, params: &[(String, Tensor)], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_with_fault(f, params, step, tol, None)
}

/// As [`grad_check`], with one gradient rule of the analytic pass
/// deliberately corrupted.
pub fn grad_check_with_fault<F>(
    f: F,
    params: &[(String, Tensor)],
    step: f64,
    tol: f64,
    fault: Option<GradFault>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    tape.set_fault(fault);
    let vars: Vec<Var> = params.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    check_finite(tape.item(out), "objective at base point")?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(v))))
        .collect();
    drop(tape);

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::no_grad();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.item(out))
    };

    let global = analytic.iter().fold(0.0f64, |m, t| m.max(t.max_abs()));
    let floor = SCALE_FLOOR_FRACTION * global;
    let mut current: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut checks = Vec::with_capacity(params.len());
    for (p, (name, base)) in params.iter().enumerate() {
        let mut numeric = vec![0.0; base.numel()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let x0 = base.data()[i];
            current[p].data_mut()[i] = x0 + step;
            let plus = eval(&current)?;
            current[p].data_mut()[i] = x0 - step;
            let minus = eval(&current)?;
            current[p].data_mut()[i] = x0;
            check_finite(plus, name)?;
            check_finite(minus, name)?;
            *slot = (plus - minus) / (2.0 * step);
        }
        let (err, worst_index) = relative_error(analytic[p].data(), &numeric, floor);
        checks.push(ParamCheck {
            name: name.clone(),
            numel: base.numel(),
            max_rel_error: err,
            worst_index,
            passed: err < tol,
        });
    }
    let passed = checks.iter().all(|c| c.passed);
    Ok(GradCheckReport {
        step,
        tol,
        params: checks,
        passed,
    })
}

fn check_finite(v: f64, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("grad_check objective ({what})")))
    }
}
