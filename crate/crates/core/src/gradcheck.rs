//! Central finite-difference gradient checking.
//!
//! The numerical side only ever evaluates the forward pass, so it stays
//! independent of every backward rule it is used to check.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;
use crate::ParamStore;

/// Default step for central differences.
pub const STEP: f64 = 1e-5;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

impl GradCheck {
    /// Largest per-input relative error `‖a − n‖ / max(‖a‖, ‖n‖)`.
    pub fn max_rel_err(&self) -> f64 {
        self.analytic
            .iter()
            .zip(&self.numeric)
            .map(|(a, n)| rel_err(a.data(), n.data()))
            .fold(0.0, f64::max)
    }
}

pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(n));
    if scale < 1e-300 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Central differences of a scalar function of several tensors.
pub fn numeric_grad(
    inputs: &[Tensor],
    h: f64,
    mut f: impl FnMut(&[Tensor]) -> Result<f64>,
) -> Result<Vec<Tensor>> {
    let mut work = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let mut g = vec![0.0; inputs[t].len()];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + h;
            let plus = f(&work)?;
            work[t].data_mut()[i] = orig - h;
            let minus = f(&work)?;
            work[t].data_mut()[i] = orig;
            *gi = (plus - minus) / (2.0 * h);
        }
        grads.push(Tensor::new(inputs[t].shape().to_vec(), g)?);
    }
    Ok(grads)
}

/// Compare tape gradients of `f` against central differences, treating every
/// input as a requires-grad leaf.
pub fn check(
    inputs: &[Tensor],
    h: f64,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<GradCheck> {
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let mut scratch = ParamStore::new();
    tape.backward(out, &mut scratch)?;
    let analytic = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();
    let numeric = numeric_grad(inputs, h, |xs| {
        let mut tape = Tape::no_grad();
        let vars = xs
            .iter()
            .map(|t| tape.leaf(t.clone(), false))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    })?;
    Ok(GradCheck { analytic, numeric })
}
