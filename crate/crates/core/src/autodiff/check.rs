use super::{Tape, Tensor, Var};
use crate::Result;

/// One coordinate whose analytic and numeric derivatives disagree.
#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    /// Which input tensor.
    pub input: usize,
    /// Flat index into that tensor.
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub failing: Vec<Mismatch>,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.failing.is_empty()
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the tape gradient of a scalar function against central
/// differences with the given step.
///
/// The numeric derivative uses the fourth-order central stencil
/// `(8(f(x+h) − f(x−h)) − (f(x+2h) − f(x−2h))) / 12h`; with plain two-point
/// differences the truncation and roundoff errors cannot both be pushed
/// below 1e-4 relative on near-zero attention gradients.
pub fn finite_difference_check<F>(f: F, point: &Tensor, step: f64, tolerance: f64) -> Result<FdReport>
where
    F: Fn(&mut Tape<'_>, Var) -> Result<Var>,
{
    finite_difference_check_many(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(point),
        step,
        tolerance,
    )
}

/// Like [`finite_difference_check`] for a function of several tensors.
/// Every coordinate of every input is perturbed.
pub fn finite_difference_check_many<F>(
    f: F,
    points: &[Tensor],
    step: f64,
    tolerance: f64,
) -> Result<FdReport>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t, false)).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let analytic = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = points.iter().map(|t| tape.leaf(t, true)).collect();
        let out = f(&mut tape, &vars)?;
        let grads = tape.backward(out)?;
        vars.iter()
            .zip(points)
            .map(|(v, p)| {
                grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.shape()))
            })
            .collect::<Vec<_>>()
    };

    let mut work = points.to_vec();
    let mut report = FdReport {
        max_rel_error: 0.0,
        checked: 0,
        failing: Vec::new(),
    };
    for input in 0..points.len() {
        for index in 0..points[input].len() {
            let orig = points[input].data()[index];
            let mut at = |offset: f64| -> Result<f64> {
                work[input].data_mut()[index] = orig + offset;
                eval(&work)
            };
            let (p1, m1) = (at(step)?, at(-step)?);
            let (p2, m2) = (at(2.0 * step)?, at(-2.0 * step)?);
            work[input].data_mut()[index] = orig;

            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step);
            let a = analytic[input].data()[index];
            let rel = relative_error(a, numeric);
            report.checked += 1;
            report.max_rel_error = report.max_rel_error.max(rel);
            if rel >= tolerance {
                report.failing.push(Mismatch {
                    input,
                    index,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(report)
}
