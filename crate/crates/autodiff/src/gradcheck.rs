//! Central finite-difference checks of tape gradients.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerance {
    /// Allowed relative error `|a - n| / max(|a|, |n|)`.
    pub rel: f64,
    /// Below this magnitude the true gradient is judged by absolute error.
    pub small: f64,
    pub abs: f64,
}

impl Tolerance {
    pub const PER_OP: Tolerance = Tolerance {
        rel: 1e-4,
        small: 1e-6,
        abs: 1e-7,
    };
    pub const END_TO_END: Tolerance = Tolerance {
        rel: 1e-3,
        small: 1e-6,
        abs: 1e-7,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err_small: f64,
    pub mismatches: Vec<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.max_abs_err_small = self.max_abs_err_small.max(other.max_abs_err_small);
        self.mismatches.extend(other.mismatches);
    }
}

/// Compares the tape gradient of `f` against central differences with step `h`
/// for every element of every input. `f` builds a scalar from the inputs,
/// which are recorded as trainable leaves.
pub fn check<F>(inputs: &[Tensor], h: f64, tol: Tolerance, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_subset(inputs, h, tol, usize::MAX, f)
}

/// As [`check`], probing at most `max_per_input` evenly spaced elements of each input.
pub fn check_subset<F>(inputs: &[Tensor], h: f64, tol: Tolerance, max_per_input: usize, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|v| tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(*v))))
        .collect();

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let stride = if n > max_per_input { n.div_ceil(max_per_input) } else { 1 };
        for j in (0..n).step_by(stride.max(1)) {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[i].data()[j];
            report.checked += 1;
            let scale = a.abs().max(numeric.abs());
            let ok = if numeric.abs() < tol.small {
                let abs = (a - numeric).abs();
                report.max_abs_err_small = report.max_abs_err_small.max(abs);
                abs < tol.abs || (a - numeric).abs() / scale < tol.rel
            } else {
                let rel = (a - numeric).abs() / scale;
                report.max_rel_err = report.max_rel_err.max(rel);
                rel < tol.rel
            };
            if !ok {
                report.mismatches.push(Mismatch {
                    input: i,
                    index: j,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
