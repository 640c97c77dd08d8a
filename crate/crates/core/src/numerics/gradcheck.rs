/// Default central-difference step.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Central-difference gradient of `f` at `point`.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, point: &[f64], eps: f64) -> Vec<f64> {
    let mut x = point.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + eps;
            let up = f(&x);
            x[i] = orig - eps;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Compare an analytic gradient against central differences.
///
/// Returns `max_i |g_analytic[i] − g_fd[i]| / max(1, |g_fd[i]|)`.
pub fn finite_diff_check(
    f: impl FnMut(&[f64]) -> f64,
    analytic_grad: &[f64],
    point: &[f64],
    eps: f64,
) -> f64 {
    assert_eq!(analytic_grad.len(), point.len(), "gradient length");
    let fd = numeric_gradient(f, point, eps);
    analytic_grad
        .iter()
        .zip(&fd)
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let err = finite_diff_check(|x| x[0] * x[0], &[6.0], &[3.0], DEFAULT_EPS);
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn detects_wrong_gradient() {
        let err = finite_diff_check(|x| x[0] * x[0], &[5.0], &[3.0], DEFAULT_EPS);
        assert!(err > 0.1);
    }
}
