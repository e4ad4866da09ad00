//! Central finite-difference gradient verification used throughout the
//! workspace's test suites.

use ndarray::ArrayD;

/// Numerical gradient of `f` at `x` by central differences.
pub fn finite_difference<F>(x: &ArrayD<f64>, eps: f64, mut f: F) -> ArrayD<f64>
where
    F: FnMut(&ArrayD<f64>) -> f64,
{
    let mut grad = ArrayD::<f64>::zeros(x.raw_dim());
    let mut probe = x.clone();
    let idxs: Vec<_> = x.indexed_iter().map(|(i, _)| i).collect();
    for idx in idxs {
        let orig = probe[&idx];
        probe[&idx] = orig + eps;
        let fp = f(&probe);
        probe[&idx] = orig - eps;
        let fm = f(&probe);
        probe[&idx] = orig;
        grad[&idx] = (fp - fm) / (2.0 * eps);
    }
    grad
}

/// Largest relative error between two gradients, `|a-b| / max(|a|, |b|, floor)`.
pub fn max_rel_error(a: &ArrayD<f64>, b: &ArrayD<f64>, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
