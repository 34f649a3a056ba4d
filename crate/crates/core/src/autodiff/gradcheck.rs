//! Central finite-difference gradient checking.

use super::graph::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor on the denominator of the relative error.
pub const REL_ERR_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Flat coordinate with the largest relative error.
    pub worst_index: usize,
    pub coords_checked: usize,
    pub pass: bool,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Evaluates `f` at `x` without recording gradients for `x`.
pub fn eval_scalar<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.constant(x.clone())?;
    let y = f(&mut g, xv)?;
    let t = g.value(y);
    if t.len() != 1 {
        return Err(Error::shape("grad_check", "function must be scalar-valued", &[t.shape()]));
    }
    let v = t.item();
    if !v.is_finite() {
        return Err(Error::Numeric { op: "grad_check" });
    }
    Ok(v)
}

/// Analytic gradient of scalar `f` at `x`.
pub fn analytic_grad<F>(f: &F, x: &Tensor) -> Result<Tensor>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.param(x.clone())?;
    let y = f(&mut g, xv)?;
    g.backward(y)?;
    Ok(g.grad(xv).unwrap_or_else(|| Tensor::zeros(x.shape())))
}

/// Compares backward gradients with central differences on every coordinate.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    grad_check_coords(f, x, eps, tol, &coords)
}

/// Like [`grad_check`], restricted to the listed flat coordinates.
pub fn grad_check_coords<F>(f: F, x: &Tensor, eps: f64, tol: f64, coords: &[usize]) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_steps(f, x, &[eps], tol, coords)
}

/// Per coordinate, keeps the smallest relative error over several step
/// sizes. Deep compositions mix gradients of very different magnitudes: a
/// small step loses tiny derivatives to rounding, a large one crosses
/// activation kinks.
pub fn grad_check_steps<F>(f: F, x: &Tensor, steps: &[f64], tol: f64, coords: &[usize]) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if steps.is_empty() || steps.iter().any(|&e| !(e > 0.0)) {
        return Err(Error::config(format!("grad_check steps must be > 0, got {steps:?}")));
    }
    eval_scalar(&f, x)?;
    let analytic = analytic_grad(&f, x)?;
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst_index: 0,
        coords_checked: coords.len(),
        pass: true,
    };
    let mut probe = x.clone();
    for &i in coords {
        let a = analytic.data()[i];
        let orig = probe.data()[i];
        let (mut best_rel, mut best_abs) = (f64::INFINITY, f64::INFINITY);
        for &eps in steps {
            probe.data_mut()[i] = orig + eps;
            let up = eval_scalar(&f, &probe)?;
            probe.data_mut()[i] = orig - eps;
            let down = eval_scalar(&f, &probe)?;
            probe.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let r = rel_err(a, numeric);
            if r < best_rel {
                best_rel = r;
                best_abs = (a - numeric).abs();
            }
        }
        report.max_abs_err = report.max_abs_err.max(best_abs);
        if best_rel > report.max_rel_err {
            report.max_rel_err = best_rel;
            report.worst_index = i;
        }
    }
    report.pass = report.max_rel_err < tol;
    Ok(report)
}
