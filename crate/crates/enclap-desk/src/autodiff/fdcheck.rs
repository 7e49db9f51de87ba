//! Finite-difference gradient checking utilities.
//!
//! These evaluate a function forward-only and never touch the backward
//! pass, so they stay independent of the implementation they check.

/// Central finite-difference gradient of `f` at `point` with step `h`.
pub fn central_difference<F>(f: &F, point: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut grad = vec![0.0; point.len()];
    let mut work = point.to_vec();
    for i in 0..point.len() {
        let orig = work[i];
        work[i] = orig + h;
        let fp = f(&work);
        work[i] = orig - h;
        let fm = f(&work);
        work[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Relative error with a unit floor, so tiny gradients compare absolutely.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Worst per-element relative error between two gradient vectors.
pub fn max_rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| rel_error(x, y)).fold(0.0, f64::max)
}
