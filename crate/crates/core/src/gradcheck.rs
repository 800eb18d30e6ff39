//! Central finite differences, the independent oracle for tape gradients.

use crate::error::{contract, Result};
use crate::matrix::Matrix;
use crate::tape::{Tape, Var};

/// Denominator floor for relative errors; below it the error is absolute.
pub const RELATIVE_FLOOR: f64 = 1e-3;

/// Outcome of comparing tape gradients against finite differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest relative error for each checked input, in input order.
    pub max_rel_error: Vec<f64>,
    pub pass: bool,
    pub epsilon: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    /// Largest relative error across all inputs.
    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }
}

/// `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` for every coordinate `i`.
pub fn finite_diff_grad(mut f: impl FnMut(&Matrix) -> f64, x: &Matrix, eps: f64) -> Result<Matrix> {
    if !(eps > 0.0) {
        return Err(contract(format!("finite difference step must be positive, got {eps}")));
    }
    let mut probe = x.clone();
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * eps);
    }
    Ok(grad)
}

/// `|a - b| / max(|a|, |b|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Largest [`relative_error`] between two equally shaped matrices.
pub fn max_relative_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Builds the scalar function `build` on a fresh tape with `inputs` as
/// leaves, backpropagates once and compares every input gradient with
/// central differences of the same function.
pub fn check_gradients<F>(inputs: &[Matrix], eps: f64, tolerance: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Matrix]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };
    let (tape, vars, out) = eval(inputs)?;
    let grads = tape.backward(out)?;

    let mut max_rel_error = Vec::with_capacity(inputs.len());
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]);
        let mut values = inputs.to_vec();
        let mut failure = None;
        let numeric = finite_diff_grad(
            |x| {
                values[k] = x.clone();
                match eval(&values) {
                    Ok((t, _, o)) => t.value(o).item(),
                    Err(e) => {
                        failure.get_or_insert(e);
                        f64::NAN
                    }
                }
            },
            input,
            eps,
        )?;
        if let Some(e) = failure {
            return Err(e);
        }
        max_rel_error.push(max_relative_error(&analytic, &numeric));
    }
    let worst = max_rel_error.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        pass: worst < tolerance,
        max_rel_error,
        epsilon: eps,
        tolerance,
    })
}
