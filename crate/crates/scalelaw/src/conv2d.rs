//! Two-dimensional causal convolution of `T×T` arrays via zero-padded FFTs.
//!
//! `Y(t,t') = Σ_{a≤t, b≤t'} K(t-a, t'-b) X(a,b)` restricted to `[0,T)²`.
//! Spectra are kept in a transposed layout; only pointwise products touch them.

use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

pub struct CausalConv2d {
    t: usize,
    l: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

/// A padded 2D spectrum produced by [`CausalConv2d::forward`].
#[derive(Clone)]
pub struct Spectrum2 {
    data: Vec<Complex64>,
}

impl Spectrum2 {
    pub fn scale(&mut self, c: f64) {
        self.data.iter_mut().for_each(|z| *z *= c);
    }

    /// `self += c · a ⊙ b`.
    pub fn add_product(&mut self, c: f64, a: &Spectrum2, b: &Spectrum2) {
        for ((z, x), y) in self.data.iter_mut().zip(&a.data).zip(&b.data) {
            *z += x * y * c;
        }
    }

    pub fn product(a: &Spectrum2, b: &Spectrum2) -> Spectrum2 {
        Spectrum2 {
            data: a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
        }
    }
}

impl CausalConv2d {
    pub fn new(t: usize) -> Self {
        let l = (2 * t).max(2);
        let mut planner = FftPlanner::new();
        Self {
            t,
            l,
            fwd: planner.plan_fft_forward(l),
            inv: planner.plan_fft_inverse(l),
        }
    }

    pub fn len(&self) -> usize {
        self.t
    }

    pub fn is_empty(&self) -> bool {
        self.t == 0
    }

    pub fn zeros(&self) -> Spectrum2 {
        Spectrum2 {
            data: vec![Complex64::new(0.0, 0.0); self.l * self.l],
        }
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> Spectrum2 {
        let (t, l) = (self.t, self.l);
        debug_assert_eq!(x.nrows(), t);
        let mut rows = vec![Complex64::new(0.0, 0.0); t * l];
        for i in 0..t {
            let row = &mut rows[i * l..(i + 1) * l];
            for j in 0..t {
                row[j] = Complex64::new(x[(i, j)], 0.0);
            }
            self.fwd.process(row);
        }
        // Transpose: column q of the row-transformed array becomes row q.
        let mut data = vec![Complex64::new(0.0, 0.0); l * l];
        for i in 0..t {
            for q in 0..l {
                data[q * l + i] = rows[i * l + q];
            }
        }
        for q in 0..l {
            self.fwd.process(&mut data[q * l..(q + 1) * l]);
        }
        Spectrum2 { data }
    }

    /// Spectrum of the separable kernel `a(p) b(q)`.
    pub fn separable(&self, a: &[f64], b: &[f64]) -> Spectrum2 {
        let fa = self.spectrum1(a);
        let fb = self.spectrum1(b);
        let l = self.l;
        let mut data = vec![Complex64::new(0.0, 0.0); l * l];
        for q in 0..l {
            for p in 0..l {
                data[q * l + p] = fa[p] * fb[q];
            }
        }
        Spectrum2 { data }
    }

    fn spectrum1(&self, a: &[f64]) -> Vec<Complex64> {
        let mut buf = vec![Complex64::new(0.0, 0.0); self.l];
        for (z, &v) in buf.iter_mut().zip(a.iter().take(self.t)) {
            *z = Complex64::new(v, 0.0);
        }
        self.fwd.process(&mut buf);
        buf
    }

    /// Inverse transform, truncated to `[0,T)²`.
    pub fn inverse(&self, s: &Spectrum2) -> DMatrix<f64> {
        let (t, l) = (self.t, self.l);
        let mut data = s.data.clone();
        for q in 0..l {
            self.inv.process(&mut data[q * l..(q + 1) * l]);
        }
        let mut rows = vec![Complex64::new(0.0, 0.0); t * l];
        for q in 0..l {
            for i in 0..t {
                rows[i * l + q] = data[q * l + i];
            }
        }
        let norm = 1.0 / (l * l) as f64;
        let mut out = DMatrix::zeros(t, t);
        for i in 0..t {
            let row = &mut rows[i * l..(i + 1) * l];
            self.inv.process(row);
            for j in 0..t {
                out[(i, j)] = row[j].re * norm;
            }
        }
        out
    }

    pub fn convolve(&self, kernel: &Spectrum2, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.inverse(&Spectrum2::product(kernel, &self.forward(x)))
    }
}
