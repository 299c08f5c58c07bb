//! Central finite-difference gradient checking at 64-bit precision.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input index, flat element)` of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
    /// Positions where a step of `h` crossed a leaky-ReLU or pooling kink and
    /// the difference was retaken with a smaller step.
    pub kink_retries: usize,
}

/// Relative error with a small absolute floor so that vanishing gradients
/// are compared absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compares the tape gradient of the scalar built by `f` against central
/// differences with step `h`, for every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let all: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |e| (i, e)))
        .collect();
    check_gradients_at(inputs, h, &all, f)
}

/// Like [`check_gradients`] but only at the listed `(input, element)` positions.
///
/// A central difference is only meaningful when `x - h` and `x + h` lie on
/// the same linear piece of every piecewise operation. When either side
/// changes the graph's branch signature, the step is divided by ten (at
/// most four times) until both sides agree with the unperturbed point.
pub fn check_gradients_at<F>(inputs: &[Tensor<f64>], h: f64, at: &[(usize, usize)], f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok((g.value(out).data()[0], g.branch_signature()))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(Error::dim("gradient check needs a scalar output"));
    }
    let base_sig = g.branch_signature();
    let grads = g.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
        kink_retries: 0,
    };
    let analytic: Vec<Tensor<f64>> = inputs
        .iter()
        .zip(&vars)
        .map(|(t, &v)| grads.get_or_zeros(v, t))
        .collect();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for &(ii, e) in at {
        if ii >= inputs.len() || e >= inputs[ii].len() {
            return Err(Error::dim(format!("gradient check position ({ii}, {e}) out of range")));
        }
        let orig = inputs[ii].data()[e];
        let mut step = h;
        let mut numeric = 0.0;
        for attempt in 0..5 {
            work[ii].data_mut()[e] = orig + step;
            let (plus, sp) = eval(&work)?;
            work[ii].data_mut()[e] = orig - step;
            let (minus, sm) = eval(&work)?;
            numeric = (plus - minus) / (2.0 * step);
            if (sp == base_sig && sm == base_sig) || attempt == 4 {
                break;
            }
            report.kink_retries += 1;
            step /= 10.0;
        }
        work[ii].data_mut()[e] = orig;
        let err = rel_err(analytic[ii].data()[e], numeric);
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = (ii, e);
        }
        report.checked += 1;
    }
    Ok(report)
}
