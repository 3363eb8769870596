//! Central finite-difference gradient checking.
//!
//! Perturbs one coordinate at a time, so it stays independent of any
//! analytic backward path it is used to verify.

/// Step size used by the gradient tests throughout the crate.
pub const DEFAULT_STEP: f64 = 1e-6;

/// Central-difference gradient of `f` at `x`.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut point = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = point[i];
        point[i] = orig + h;
        let plus = f(&point);
        point[i] = orig - h;
        let minus = f(&point);
        point[i] = orig;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Largest relative deviation between analytic and numeric gradients.
///
/// Entries are compared as |a - n| / max(|a|, |n|, floor); the floor keeps
/// finite-difference noise on near-zero entries from inflating the ratio.
pub fn max_rel_deviation(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        // f(x) = sum x_i^2 has gradient 2x.
        let x = [1.0, -2.0, 0.5];
        let num = numeric_gradient(|p| p.iter().map(|v| v * v).sum(), &x, DEFAULT_STEP);
        let analytic: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        assert!(max_rel_deviation(&analytic, &num, 1e-4) < 1e-8);
    }
}
