//! Finite-difference gradient verification.
//!
//! These helpers evaluate a loss function directly at perturbed inputs, so
//! they are independent of the tape's backward pass and serve as its oracle.
//! All checks run at `f64` with a central-difference step of `1e-6`.

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-6;

/// Central-difference gradient of `eval` at `point`.
///
/// `eval` must be a pure function of its argument; it is called twice per
/// coordinate.
pub fn central_diff<F>(point: &[f64], step: f64, mut eval: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = vec![0.0; point.len()];
    let mut work = point.to_vec();
    for i in 0..point.len() {
        let orig = work[i];
        work[i] = orig + step;
        let plus = eval(&work);
        work[i] = orig - step;
        let minus = eval(&work);
        work[i] = orig;
        grad[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// Largest elementwise relative error between an analytic and a numeric
/// gradient, with the denominator floored at 1 so that finite-difference
/// noise on near-zero entries does not dominate.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_diff_of_quadratic() {
        // f(x) = sum(x_i^2), df/dx_i = 2 x_i
        let point = [1.0, -2.0, 0.5];
        let g = central_diff(&point, DEFAULT_STEP, |x| x.iter().map(|v| v * v).sum());
        let expected = [2.0, -4.0, 1.0];
        assert!(max_rel_error(&expected, &g) < 1e-9);
    }

    #[test]
    fn rel_error_flags_disagreement() {
        assert!(max_rel_error(&[1.0], &[1.0 + 1e-3]) > 1e-4);
        assert!(max_rel_error(&[0.0], &[1e-10]) < 1e-9);
    }
}
