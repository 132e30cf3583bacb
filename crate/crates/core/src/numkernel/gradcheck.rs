//! Central finite-difference oracle for checking analytic gradients.

use crate::error::{Error, Result};
use crate::numkernel::matrix::Matrix;

/// Central-difference gradient of a scalar function, one coordinate at a time.
pub fn numeric_gradient<F>(mut value_fn: F, params: &Matrix, epsilon: f64) -> Result<Matrix>
where
    F: FnMut(&Matrix) -> Result<f64>,
{
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::Config(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let mut probe = params.clone();
    let mut out = Matrix::zeros(params.rows(), params.cols());
    for i in 0..params.data().len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + epsilon;
        let plus = value_fn(&probe)?;
        probe.data_mut()[i] = orig - epsilon;
        let minus = value_fn(&probe)?;
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (plus - minus) / (2.0 * epsilon);
    }
    Ok(out)
}

/// Largest relative disagreement between two gradients, using
/// `|a − n| / max(1, |a|, |n|)` per coordinate.
pub fn max_relative_error(analytic: &Matrix, numeric: &Matrix) -> Result<f64> {
    analytic.expect_same_shape(numeric, "max_relative_error")?;
    Ok(analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / 1f64.max(a.abs()).max(n.abs()))
        .fold(0.0, f64::max))
}

/// Compares the analytic gradient returned by `loss_fn` at `params` with
/// central differences and returns the maximum relative error.
///
/// `loss_fn` returns `(value, gradient)`. It is evaluated twice at `params`
/// first; differing values are reported as [`Error::NonDeterministic`].
pub fn grad_check<F>(mut loss_fn: F, params: &Matrix, epsilon: f64) -> Result<f64>
where
    F: FnMut(&Matrix) -> Result<(f64, Matrix)>,
{
    let (first, analytic) = loss_fn(params)?;
    let (second, _) = loss_fn(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }
    let numeric = numeric_gradient(|p| loss_fn(p).map(|(v, _)| v), params, epsilon)?;
    max_relative_error(&analytic, &numeric)
}
