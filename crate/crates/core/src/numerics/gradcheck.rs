//! Central finite differences, used as the independent oracle for backward rules.

/// `(f(θ+ε·eᵢ) − f(θ−ε·eᵢ)) / 2ε` for every coordinate.
pub fn finite_diff_grad(mut f: impl FnMut(&[f64]) -> f64, params: &[f64], eps: f64) -> Vec<f64> {
    let mut theta = params.to_vec();
    (0..theta.len())
        .map(|i| {
            let orig = theta[i];
            theta[i] = orig + eps;
            let plus = f(&theta);
            theta[i] = orig - eps;
            let minus = f(&theta);
            theta[i] = orig;
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

/// Relative disagreement of two gradient vectors: `‖a − b‖∞ / max(‖a‖∞, ‖b‖∞)`.
///
/// Returns 0 when both vectors vanish to within `1e-12`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let inf = |v: &[f64]| v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
    let scale = inf(analytic).max(inf(numeric));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}
