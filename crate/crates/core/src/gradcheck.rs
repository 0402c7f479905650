//! Central finite-difference gradient checking in double precision.

use crate::autograd::{ParamId, Tape, Var};
use crate::error::{arg_err, Result};
use crate::tensor::Tensor;

/// Worst coordinate found by [`gradcheck`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Compares tape gradients of the scalar function `f` against the
/// fourth-order central difference with step `eps`.
///
/// `inputs[i]` is registered on the tape as `ParamId(i)` before `f` runs, so
/// `f` may fetch it either from the `Var` slice or through `Tape::param`.
/// The error of one coordinate is `|a − n| / max(|a|, |n|, τ)` where
/// `τ = 1e-3·max|a|` over all coordinates (at least 1e-8), so gradients that
/// are zero by symmetry are judged on the scale of the others.
pub fn gradcheck<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(arg_err!("gradcheck step must be positive, got {eps}"));
    }
    let eval = |values: &[Tensor<f64>]| -> Result<(Tape<f64>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values
            .iter()
            .enumerate()
            .map(|(i, t)| tape.param(ParamId(i), t))
            .collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape, out))
    };

    let (tape, out) = eval(inputs)?;
    let grads = tape.backward(out)?;

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        input: 0,
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let largest = (0..inputs.len())
        .flat_map(|i| grads.get(ParamId(i)).expect("every input is registered").data().iter())
        .fold(0.0f64, |m, g| m.max(g.abs()));
    let floor = (1e-3 * largest).max(1e-8);
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(ParamId(i)).expect("every input is registered");
        for j in 0..input.numel() {
            let orig = input.data()[j];
            let mut at = |offset: f64| -> Result<f64> {
                work[i].data_mut()[j] = orig + offset;
                let (t, v) = eval(&work)?;
                t.value(v).item()
            };
            let (p1, m1, p2, m2) = (at(eps)?, at(-eps)?, at(2.0 * eps)?, at(-2.0 * eps)?);
            work[i].data_mut()[j] = orig;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.coordinates += 1;
            if rel > report.max_rel_error || !rel.is_finite() {
                report.max_rel_error = rel;
                report.input = i;
                report.index = j;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
