//! Central finite-difference checks of tape gradients.
//!
//! The numerical side only ever evaluates forward values, so it stays
//! independent of every backward rule it is used to check.

use std::collections::BTreeMap;

use super::params::{Bindings, ParamStore};
use super::tape::{NodeId, Tape};
use super::tensor::Tensor;
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so gradients that are zero up
/// to rounding are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Step used with [`Stencil::FivePoint`] on whole-model losses, where
/// round-off at smaller steps swamps gradients near 1e-7.
pub const FIVE_POINT_STEP: f64 = 1e-3;

/// Finite-difference formula. Both are central; the five-point stencil has
/// O(h^4) truncation error, so it tolerates a larger step and therefore
/// less round-off.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`
    Central(f64),
    /// `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`
    FivePoint(f64),
}

impl From<f64> for Stencil {
    fn from(step: f64) -> Self {
        Stencil::Central(step)
    }
}

impl Stencil {
    fn derivative(self, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
        match self {
            Stencil::Central(h) => Ok((f(h)? - f(-h)?) / (2.0 * h)),
            Stencil::FivePoint(h) => {
                let (p2, p1, m1, m2) = (f(2.0 * h)?, f(h)?, f(-h)?, f(-2.0 * h)?);
                Ok((-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h))
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Input name and flat index of the worst element.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric gradient of the worst element.
    pub worst_values: (f64, f64),
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Checks the gradient of a scalar function of named input tensors.
pub fn check_inputs<F>(
    inputs: &[(&str, Tensor)],
    stencil: impl Into<Stencil>,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids = values
            .iter()
            .map(|v| tape.leaf(v.clone()))
            .collect::<Result<Vec<_>>>()?;
        let loss = f(&mut tape, &ids)?;
        Ok(tape.value(loss).item())
    };
    let mut tape = Tape::new();
    let ids = inputs
        .iter()
        .map(|(_, v)| tape.leaf(v.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut tape, &ids)?;
    let grads = tape.backward(loss)?;

    let stencil = stencil.into();
    let mut values: Vec<Tensor> = inputs.iter().map(|(_, v)| v.clone()).collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        checked: 0,
    };
    for (k, (name, _)) in inputs.iter().enumerate() {
        let analytic = grads.get(ids[k]);
        for i in 0..values[k].len() {
            let orig = values[k].data()[i];
            let numeric = stencil.derivative(|d| {
                values[k].data_mut()[i] = orig + d;
                eval(&values)
            })?;
            values[k].data_mut()[i] = orig;
            record(&mut report, name, i, analytic.data()[i], numeric);
        }
    }
    Ok(report)
}

/// Checks the gradient of a scalar loss with respect to every parameter in
/// a store.
pub fn check_params<F>(
    store: &ParamStore,
    stencil: impl Into<Stencil>,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Bindings) -> Result<NodeId>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let b = s.bind(&mut tape, true)?;
        let loss = f(&mut tape, &b)?;
        Ok(tape.value(loss).item())
    };
    let mut tape = Tape::new();
    let b = store.bind(&mut tape, true)?;
    let loss = f(&mut tape, &b)?;
    let grads: BTreeMap<String, Tensor> = store.collect_grads(&b, &tape.backward(loss)?);

    let stencil = stencil.into();
    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        checked: 0,
    };
    let names: Vec<String> = store.params().keys().cloned().collect();
    for name in &names {
        let n = store.get(name)?.len();
        for i in 0..n {
            let orig = store.get(name)?.data()[i];
            let numeric = stencil.derivative(|d| {
                probe.get_mut(name)?.data_mut()[i] = orig + d;
                eval(&probe)
            })?;
            probe.get_mut(name)?.data_mut()[i] = orig;
            record(&mut report, name, i, grads[name].data()[i], numeric);
        }
    }
    Ok(report)
}

fn record(report: &mut GradCheckReport, name: &str, i: usize, analytic: f64, numeric: f64) {
    let err = rel_error(analytic, numeric);
    report.checked += 1;
    if err > report.max_rel_error || report.worst.is_none() {
        report.max_rel_error = report.max_rel_error.max(err);
        report.worst = Some((name.to_string(), i));
        report.worst_values = (analytic, numeric);
    }
}
