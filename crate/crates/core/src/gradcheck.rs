//! Central finite-difference verification of tape gradients.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub mod suite;

/// Gradcheck passes when the worst relative error is below this.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Denominator floor of the relative error, so that entries whose gradient
/// is (near) zero are compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct InputReport {
    pub index: usize,
    pub numel: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    /// Flat position of the worst element.
    pub worst: usize,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub inputs: Vec<InputReport>,
    pub evaluations: usize,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRADCHECK_TOLERANCE
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = tape.value(f(&tape, &vars)?);
    let v = out.item()?;
    if !v.is_finite() {
        return Err(Error::NonFinite { op: "gradcheck" });
    }
    Ok(v)
}

/// Compares analytic gradients of the scalar `f(inputs)` with central
/// differences `(f(x+eps) - f(x-eps)) / 2eps`, element by element.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::invalid(format!("gradcheck eps must be positive, got {eps}")));
    }
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    drop(tape);

    let mut evaluations = 1;
    let mut reports = Vec::with_capacity(inputs.len());
    let mut worst_overall: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (index, input) in inputs.iter().enumerate() {
        let mut report = InputReport {
            index,
            numel: input.numel(),
            max_abs_err: 0.0,
            max_rel_err: 0.0,
            worst: 0,
        };
        let mut data = input.to_vec();
        for i in 0..data.len() {
            let x0 = data[i];
            data[i] = x0 + eps;
            probe[index] = Tensor::from_parts(input.shape().to_vec(), data.clone());
            let plus = evaluate(&f, &probe)?;
            data[i] = x0 - eps;
            probe[index] = Tensor::from_parts(input.shape().to_vec(), data.clone());
            let minus = evaluate(&f, &probe)?;
            data[i] = x0;
            evaluations += 2;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[index].data()[i];
            let rel = relative_error(a, numeric);
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = i;
            }
        }
        probe[index] = input.clone();
        worst_overall = worst_overall.max(report.max_rel_err);
        reports.push(report);
    }
    Ok(GradReport {
        max_rel_err: worst_overall,
        inputs: reports,
        evaluations,
    })
}
