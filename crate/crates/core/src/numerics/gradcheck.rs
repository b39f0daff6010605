//! Central finite differences, used to validate analytic gradients.

use super::{Matrix, ParamStore};
use crate::error::Result;

/// Numerical gradient of `loss` with respect to parameter `name`.
///
/// `loss` is re-evaluated twice per element with the entry shifted by `±step`.
pub fn numerical_gradient<F>(store: &ParamStore, name: &str, step: f64, mut loss: F) -> Result<Matrix>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let base = store.get(name)?.clone();
    let mut work = store.clone();
    let mut grad = Matrix::zeros(base.rows(), base.cols());
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus.data_mut()[i] += step;
        work.set(name, plus)?;
        let up = loss(&work)?;

        let mut minus = base.clone();
        minus.data_mut()[i] -= step;
        work.set(name, minus)?;
        let down = loss(&work)?;

        grad.data_mut()[i] = (up - down) / (2.0 * step);
    }
    Ok(grad)
}

/// Numerical gradient with respect to a free-standing input matrix.
pub fn numerical_gradient_of<F>(input: &Matrix, step: f64, mut loss: F) -> Result<Matrix>
where
    F: FnMut(&Matrix) -> Result<f64>,
{
    let mut grad = Matrix::zeros(input.rows(), input.cols());
    let mut work = input.clone();
    for i in 0..input.len() {
        let orig = work.data()[i];
        work.data_mut()[i] = orig + step;
        let up = loss(&work)?;
        work.data_mut()[i] = orig - step;
        let down = loss(&work)?;
        work.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * step);
    }
    Ok(grad)
}

/// `||a - b|| / max(||a||, ||b||)` in the Frobenius norm.
///
/// Two gradients that are both (numerically) zero compare as equal: the result
/// is the absolute difference when both norms fall below `1e-10`.
pub fn relative_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    if analytic.shape() != numeric.shape() {
        return f64::INFINITY;
    }
    let diff = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let scale = analytic.frobenius_norm().max(numeric.frobenius_norm());
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}
