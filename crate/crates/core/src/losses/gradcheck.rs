use super::LossError;

/// Central-difference gradient of `f` at `x`.
pub fn central_difference<F>(f: F, x: &[f64], eps: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let hi = f(&probe);
            probe[i] = orig - eps;
            let lo = f(&probe);
            probe[i] = orig;
            (hi - lo) / (2.0 * eps)
        })
        .collect()
}

/// Largest relative deviation `|g - g_fd| / max(1, |g_fd|)` between an
/// analytic gradient and central differences.
pub fn grad_check<F>(f: F, analytic: &[f64], x: &[f64], eps: f64) -> Result<f64, LossError>
where
    F: Fn(&[f64]) -> f64,
{
    if analytic.len() != x.len() {
        return Err(LossError::Shape(format!("gradient {} vs input {}", analytic.len(), x.len())));
    }
    let numeric = central_difference(f, x, eps);
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(&numeric) {
        if !a.is_finite() || !n.is_finite() {
            return Err(LossError::NonFinite("gradient"));
        }
        worst = worst.max((a - n).abs() / n.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let f = |x: &[f64]| x[0] * x[0] + 3.0 * x[1];
        let x = [1.5, -2.0];
        assert!(grad_check(f, &[3.0, 3.0], &x, 1e-4).unwrap() < 1e-8);
        assert!((grad_check(f, &[3.0, 4.0], &x, 1e-4).unwrap() - 1.0 / 3.0).abs() < 1e-8);
        assert!(grad_check(f, &[3.0], &x, 1e-4).is_err());
    }
}
