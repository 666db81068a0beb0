//! Central finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Default step at 64-bit precision.
pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Relative error used throughout: `|a - n| / max(1e-12, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-12)
}

/// Checks `f` at `x` and returns the largest relative error over all coordinates.
pub fn finite_diff_check<F>(f: F, x: &Tensor, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    finite_diff_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(x), epsilon)
}

/// Multi-input variant: every tensor in `xs` becomes a trainable leaf and every coordinate
/// of every input is perturbed.
pub fn finite_diff_check_many<F>(f: F, xs: &[Tensor], epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.value(out).item()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(xs)
        .map(|(&v, x)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec())))
        .collect();

    let mut worst = 0.0f64;
    let mut probe = xs.to_vec();
    for t in 0..xs.len() {
        for i in 0..xs[t].numel() {
            let orig = xs[t].data()[i];
            probe[t].data_mut()[i] = orig + epsilon;
            let plus = eval(&probe)?;
            probe[t].data_mut()[i] = orig - epsilon;
            let minus = eval(&probe)?;
            probe[t].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            worst = worst.max(relative_error(analytic[t].data()[i], numeric));
        }
    }
    Ok(worst)
}
