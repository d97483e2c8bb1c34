//! Central-difference gradient checker.
//!
//! The relative error of one scalar is `|a - n| / max(|a|, |n|, 1e-6)`, where
//! `a` is the analytic and `n` the numeric derivative. The floor keeps
//! near-zero gradients from dividing by roundoff.

use serde::Serialize;

use super::params::Bound;
use super::{ParameterStore, Tape, Var};
use crate::error::{GemtError, Result};

const DENOM_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct ParamCheck {
    pub path: String,
    pub numel: usize,
    pub max_rel_error: f64,
    /// Flat index of the worst scalar.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct GradCheckReport {
    pub h: f64,
    pub tol: f64,
    pub loss: f64,
    pub max_rel_error: f64,
    pub worst_path: Option<String>,
    pub passed: bool,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    /// Paths whose error exceeds the tolerance.
    pub fn failing(&self) -> Vec<&str> {
        self.params
            .iter()
            .filter(|p| !(p.max_rel_error < self.tol))
            .map(|p| p.path.as_str())
            .collect()
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

fn evaluate<L>(f: &L, params: &ParameterStore<f64>) -> Result<f64>
where
    L: Fn(&mut Tape<f64>, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let loss = f(&mut tape, &bound)?;
    tape.check_finite()?;
    let v = tape.value(loss);
    if v.numel() != 1 {
        return Err(GemtError::shape("grad_check", v.shape(), &[1]));
    }
    Ok(v.item())
}

/// Analytic gradients of `f` at `params`, plus the loss value.
pub fn analytic_gradients<L>(f: &L, params: &ParameterStore<f64>) -> Result<(f64, ParameterStore<f64>)>
where
    L: Fn(&mut Tape<f64>, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let loss = f(&mut tape, &bound)?;
    let grads = tape.backward(loss)?;
    Ok((tape.value(loss).item(), bound.gradients(&grads)))
}

/// Checks the analytic gradient of the scalar function `f` against central
/// differences with step `h` for every parameter scalar.
pub fn grad_check<L>(f: L, params: &ParameterStore<f64>, h: f64, tol: f64) -> Result<GradCheckReport>
where
    L: Fn(&mut Tape<f64>, &Bound) -> Result<Var>,
{
    let (_, analytic) = analytic_gradients(&f, params)?;
    grad_check_against(&f, params, &analytic, h, tol)
}

/// Like [`grad_check`] with caller-supplied analytic gradients.
pub fn grad_check_against<L>(
    f: &L,
    params: &ParameterStore<f64>,
    analytic: &ParameterStore<f64>,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    L: Fn(&mut Tape<f64>, &Bound) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(GemtError::arg("grad_check", "step must be positive"));
    }
    let base = evaluate(f, params)?;
    let again = evaluate(f, params)?;
    if base.to_bits() != again.to_bits() {
        return Err(GemtError::OracleInvalid(format!(
            "two evaluations at the same point differ: {base} vs {again}"
        )));
    }

    let mut work = params.clone();
    let mut checks = Vec::with_capacity(params.len());
    for (path, value) in params.iter() {
        let grad = analytic.get(path)?;
        let mut worst = ParamCheck {
            path: path.clone(),
            numel: value.numel(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..value.numel() {
            let orig = value.data()[i];
            work.get_mut(path)?.data_mut()[i] = orig + h;
            let plus = evaluate(f, &work)?;
            work.get_mut(path)?.data_mut()[i] = orig - h;
            let minus = evaluate(f, &work)?;
            work.get_mut(path)?.data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[i];
            let err = rel_error(a, numeric);
            if err > worst.max_rel_error || err.is_nan() || i == 0 {
                worst.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
                worst.worst_index = i;
                worst.analytic = a;
                worst.numeric = numeric;
            }
        }
        checks.push(worst);
    }

    let worst = checks.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error));
    let max_rel_error = worst.map_or(0.0, |w| w.max_rel_error);
    Ok(GradCheckReport {
        h,
        tol,
        loss: base,
        max_rel_error,
        worst_path: worst.map(|w| w.path.clone()),
        passed: max_rel_error < tol,
        params: checks,
    })
}
