use super::Matrix;
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function of a matrix.
pub fn finite_diff_grad<F>(mut f: F, at: &Matrix, h: f64) -> Result<Matrix>
where
    F: FnMut(&Matrix) -> Result<f64>,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::Argument(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = at.clone();
    let mut grad = Matrix::zeros(at.rows(), at.cols());
    for i in 0..at.len() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + h;
        let plus = f(&probe)?;
        probe.as_mut_slice()[i] = orig - h;
        let minus = f(&probe)?;
        probe.as_mut_slice()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!("non-finite function value at entry {i}")));
        }
        grad.as_mut_slice()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Group-normalized relative error `max|a − b| / max(max|a|, max|b|)`.
/// Zero when both are exactly zero.
pub fn relative_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    let scale = analytic.max_abs().max(numeric.max_abs());
    if scale == 0.0 {
        return 0.0;
    }
    let diff = analytic
        .as_slice()
        .iter()
        .zip(numeric.as_slice())
        .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
    diff / scale
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_at_ones() {
        let at = Matrix::filled(2, 3, 1.0);
        let g = finite_diff_grad(|m| Ok(m.as_slice().iter().map(|v| v * v).sum()), &at, 1e-5).unwrap();
        for v in g.as_slice() {
            assert!((v - 2.0).abs() < 1e-8);
        }
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let at = Matrix::filled(3, 1, 0.4);
        let g = finite_diff_grad(|_| Ok(7.0), &at, 1e-5).unwrap();
        assert!(g.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linear_function_recovers_coefficients() {
        let c = Matrix::from_rows(&[vec![1.5, -2.0], vec![0.25, 3.0]]).unwrap();
        let at = Matrix::filled(2, 2, -0.7);
        let g = finite_diff_grad(
            |m| Ok(m.as_slice().iter().zip(c.as_slice()).map(|(a, b)| a * b).sum()),
            &at,
            1e-5,
        )
        .unwrap();
        assert!(relative_error(&c, &g) < 1e-9);
    }

    #[test]
    fn non_finite_values_are_errors() {
        let at = Matrix::filled(1, 1, 0.0);
        let r = finite_diff_grad(|m| Ok(1.0 / m.get(0, 0).abs().min(0.0)), &at, 1e-5);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn non_positive_step_rejected() {
        let at = Matrix::zeros(1, 1);
        assert!(finite_diff_grad(|_| Ok(0.0), &at, 0.0).is_err());
    }
}
