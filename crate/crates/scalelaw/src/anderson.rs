//! Anderson mixing for fixed-point iterations `x = g(x)` on flat real vectors.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

pub struct Anderson {
    depth: usize,
    prev: Option<(Vec<f64>, Vec<f64>)>,
    dg: VecDeque<Vec<f64>>,
    df: VecDeque<Vec<f64>>,
}

impl Anderson {
    pub fn new(depth: usize) -> Self {
        Self {
            depth,
            prev: None,
            dg: VecDeque::new(),
            df: VecDeque::new(),
        }
    }

    /// Next iterate given the current point `x` and its image `gx`.
    pub fn step(&mut self, x: &[f64], gx: &[f64]) -> Vec<f64> {
        let f: Vec<f64> = gx.iter().zip(x).map(|(g, x)| g - x).collect();
        if let Some((pg, pf)) = self.prev.take() {
            self.dg.push_back(gx.iter().zip(&pg).map(|(a, b)| a - b).collect());
            self.df.push_back(f.iter().zip(&pf).map(|(a, b)| a - b).collect());
            if self.dg.len() > self.depth {
                self.dg.pop_front();
                self.df.pop_front();
            }
        }
        self.prev = Some((gx.to_vec(), f.clone()));
        let m = self.df.len();
        if m == 0 || self.depth == 0 {
            return gx.to_vec();
        }
        let mut gram = DMatrix::zeros(m, m);
        let mut rhs = DVector::zeros(m);
        for i in 0..m {
            rhs[i] = dot(&self.df[i], &f);
            for j in 0..=i {
                let v = dot(&self.df[i], &self.df[j]);
                gram[(i, j)] = v;
                gram[(j, i)] = v;
            }
        }
        let scale = (0..m).map(|i| gram[(i, i)]).fold(0.0, f64::max);
        for i in 0..m {
            gram[(i, i)] += 1e-12 * scale + f64::MIN_POSITIVE;
        }
        let Some(gamma) = gram.cholesky().map(|c| c.solve(&rhs)) else {
            self.dg.clear();
            self.df.clear();
            return gx.to_vec();
        };
        let mut out = gx.to_vec();
        for (i, g) in gamma.iter().enumerate() {
            for (o, d) in out.iter_mut().zip(&self.dg[i]) {
                *o -= g * d;
            }
        }
        out
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
