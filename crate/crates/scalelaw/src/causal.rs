//! Causal sequences: lower-triangular Toeplitz operators stored by their first column.

use nalgebra::DMatrix;

/// Truncated causal convolution `(a * b)[n] = Σ_{j≤n} a[j] b[n-j]` for `n < len`.
pub fn convolve(a: &[f64], b: &[f64], len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| {
            let hi = n.min(a.len().saturating_sub(1));
            (0..=hi)
                .filter(|&j| n - j < b.len())
                .map(|j| a[j] * b[n - j])
                .sum()
        })
        .collect()
}

/// Inverse of a causal sequence under truncated convolution. Needs `a[0] != 0`.
pub fn inverse(a: &[f64]) -> Vec<f64> {
    let len = a.len();
    let mut out = vec![0.0; len];
    if len == 0 {
        return out;
    }
    let inv0 = 1.0 / a[0];
    out[0] = inv0;
    for n in 1..len {
        let acc: f64 = (1..=n).map(|j| a[j] * out[n - j]).sum();
        out[n] = -acc * inv0;
    }
    out
}

pub fn cumsum(a: &[f64]) -> Vec<f64> {
    a.iter()
        .scan(0.0, |acc, &x| {
            *acc += x;
            Some(*acc)
        })
        .collect()
}

/// Discrete step kernel: `θ[0] = 0`, `θ[n] = η` for `n ≥ 1`.
pub fn step_kernel(eta: f64, len: usize) -> Vec<f64> {
    (0..len).map(|n| if n == 0 { 0.0 } else { eta }).collect()
}

pub fn delta(len: usize) -> Vec<f64> {
    let mut d = vec![0.0; len];
    if len > 0 {
        d[0] = 1.0;
    }
    d
}

pub fn toeplitz_matrix(seq: &[f64]) -> DMatrix<f64> {
    let t = seq.len();
    DMatrix::from_fn(t, t, |i, j| if i >= j { seq[i - j] } else { 0.0 })
}

/// Largest deviation of `m` from the lower-triangular Toeplitz matrix built on its first column.
pub fn toeplitz_deviation(m: &DMatrix<f64>) -> f64 {
    let t = m.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..t {
        for j in 0..t {
            let want = if i >= j { m[(i - j, 0)] } else { 0.0 };
            worst = worst.max((m[(i, j)] - want).abs());
        }
    }
    worst
}
