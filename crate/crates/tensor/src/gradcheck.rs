//! Central finite differences for checking backward passes in `f64`.

use crate::tensor::Tensor;

/// Numerical gradient of `f` at `x` for the flat indices in `indices`.
pub fn numeric_grad<F>(mut f: F, x: &Tensor<f64>, indices: &[usize], h: f64) -> Vec<f64>
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    indices
        .iter()
        .map(|&i| {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

/// Largest relative error between two gradient vectors, with `floor`
/// guarding near-zero entries.
pub fn max_rel_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Evenly spread sample of at most `k` indices out of `n`.
pub fn sample_indices(n: usize, k: usize) -> Vec<usize> {
    if n <= k {
        return (0..n).collect();
    }
    (0..k).map(|i| i * n / k + (i * 7919) % (n / k).max(1)).collect()
}
