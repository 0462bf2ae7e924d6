//! Discrete-time order parameters on a `T`-step grid.
//!
//! Responses are lower-triangular Toeplitz and strictly causal through the
//! step kernel `Θ(t,s) = η·1[t>s]`, so [`solve_responses`] marches them lag by
//! lag. Correlations are full `T×T` matrices; [`solve_correlations`] iterates
//! the linear correlation block with mode sums folded into 2D kernels.

use std::path::Path;

use nalgebra::DMatrix;

use crate::anderson::Anderson;
use crate::causal::{self, toeplitz_matrix};
use crate::conv2d::{CausalConv2d, Spectrum2};
use crate::error::{Result, SolveError};
use crate::io::{save_matrix, CsvTable};
use crate::spectrum::{Coupling, Spectrum};

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub damping: f64,
    pub anderson_depth: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 500,
            damping: 0.5,
            anderson_depth: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Diagnostics {
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

impl Diagnostics {
    pub fn ensure_converged(&self) -> Result<()> {
        if self.converged {
            Ok(())
        } else {
            Err(SolveError::NonConvergence {
                iterations: self.iterations,
                residual: self.residual,
            })
        }
    }
}

/// Response functions stored as first columns of their Toeplitz matrices.
#[derive(Debug, Clone)]
pub struct Responses {
    pub eta: f64,
    pub weight: f64,
    pub inv_alpha: f64,
    pub inv_nu: f64,
    /// `R_{0,2}` mode-averaged with the eigenvalue weight.
    pub r02: Vec<f64>,
    pub r1: Vec<f64>,
    pub r24: Vec<f64>,
    pub r3: Vec<f64>,
    /// Per-mode `(I + λ_k Θ R_3 R_1)^{-1}` sequences, one row per mode.
    pub mode_kernels: Vec<Vec<f64>>,
    /// Per-mode transfer `H_k(t)`, the running sums of the kernels.
    pub transfer: Vec<Vec<f64>>,
}

impl Responses {
    pub fn steps(&self) -> usize {
        self.r1.len()
    }

    pub fn matrix(seq: &[f64]) -> DMatrix<f64> {
        toeplitz_matrix(seq)
    }
}

/// Marches the response block one lag at a time. Exact up to rounding.
pub fn solve_responses(spec: &Spectrum, coupling: &Coupling, steps: usize, eta: f64) -> Result<Responses> {
    if steps == 0 {
        return Err(SolveError::Invalid("need at least one time step".into()));
    }
    if !(eta > 0.0) {
        return Err(SolveError::Invalid(format!("learning rate must be positive, got {eta}")));
    }
    let t = steps;
    let w = coupling.weight;
    let lam = spec.eigenvalues();
    let m = lam.len();

    let mut r1 = vec![0.0; t];
    let mut r3 = vec![0.0; t];
    let mut r02 = vec![0.0; t];
    let mut r24 = vec![0.0; t];
    // q = Θ R3 R1, p = Θ R3, u = Θ R1, c = R3 R1.
    let mut q = vec![0.0; t];
    let mut p = vec![0.0; t];
    let mut u = vec![0.0; t];
    let mut c = vec![0.0; t];
    // Σ_k λ_k g_k[n], unweighted.
    let mut lam_g = vec![0.0; t];
    let mut g: Vec<Vec<f64>> = vec![vec![0.0; t]; m];

    for n in 0..t {
        if n > 0 {
            q[n] = q[n - 1] + eta * c[n - 1];
            p[n] = p[n - 1] + eta * r3[n - 1];
            u[n] = u[n - 1] + eta * r1[n - 1];
        }
        for (gk, &l) in g.iter_mut().zip(lam) {
            gk[n] = if n == 0 {
                1.0
            } else {
                -l * (1..=n).map(|j| q[j] * gk[n - j]).sum::<f64>()
            };
        }
        lam_g[n] = g.iter().zip(lam).map(|(gk, l)| l * gk[n]).sum();
        if n > 0 {
            r02[n] = -w * (1..=n).map(|j| p[j] * lam_g[n - j]).sum::<f64>();
            r24[n] = -w * (1..=n).map(|j| u[j] * lam_g[n - j]).sum::<f64>();
        }
        let d = if n == 0 { 1.0 } else { 0.0 };
        r1[n] = d + coupling.inv_p / w * (1..=n).map(|j| r02[j] * r1[n - j]).sum::<f64>();
        r3[n] = d + coupling.inv_n / w * (1..=n).map(|j| r24[j] * r3[n - j]).sum::<f64>();
        c[n] = (0..=n).map(|j| r3[j] * r1[n - j]).sum();
    }
    let transfer = g.iter().map(|gk| causal::cumsum(gk)).collect();
    Ok(Responses {
        eta,
        weight: w,
        inv_alpha: coupling.inv_alpha(),
        inv_nu: coupling.inv_nu(),
        r02,
        r1,
        r24,
        r3,
        mode_kernels: g,
        transfer,
    })
}

/// Dense response matrices from the damped fixed-point iteration.
#[derive(Debug, Clone)]
pub struct DenseResponses {
    pub r02: DMatrix<f64>,
    pub r1: DMatrix<f64>,
    pub r24: DMatrix<f64>,
    pub r3: DMatrix<f64>,
    pub diagnostics: Diagnostics,
}

impl DenseResponses {
    /// Largest departure from time-translation invariance over all four matrices.
    pub fn tti_deviation(&self) -> f64 {
        [&self.r02, &self.r1, &self.r24, &self.r3]
            .into_iter()
            .map(causal::toeplitz_deviation)
            .fold(0.0, f64::max)
    }
}

/// Damped fixed point on full `T×T` matrices, started from `R_1 = R_3 = I`.
/// Cost grows as `M·T³`; intended for small grids and cross-checks.
pub fn solve_responses_dense(
    spec: &Spectrum,
    coupling: &Coupling,
    steps: usize,
    eta: f64,
    opts: &SolverOptions,
) -> Result<DenseResponses> {
    let t = steps;
    let w = coupling.weight;
    let (inv_alpha, inv_nu) = (coupling.inv_alpha(), coupling.inv_nu());
    let id = DMatrix::<f64>::identity(t, t);
    let theta = toeplitz_matrix(&causal::step_kernel(eta, t));
    let mut r1 = id.clone();
    let mut r3 = id.clone();
    let mut r02 = DMatrix::zeros(t, t);
    let mut r24 = DMatrix::zeros(t, t);
    let mut diag = Diagnostics::default();
    for it in 1..=opts.max_iter {
        let theta_r3 = &theta * &r3;
        let loop_op = &theta_r3 * &r1;
        let mut new02 = DMatrix::zeros(t, t);
        let mut new24 = DMatrix::zeros(t, t);
        for &l in spec.eigenvalues() {
            let lu = (&id + &loop_op * l).lu();
            let a = lu
                .solve(&theta_r3)
                .ok_or_else(|| SolveError::Singular("mode resolvent in response block".into()))?;
            let b = lu
                .solve(&theta)
                .ok_or_else(|| SolveError::Singular("mode resolvent in response block".into()))?;
            new02 -= a * (w * l);
            new24 -= (&r1 * b) * (w * l);
        }
        let new1 = (&id - &new02 * inv_alpha)
            .try_inverse()
            .ok_or_else(|| SolveError::Singular("I - R02/alpha".into()))?;
        let new3 = (&id - &new24 * inv_nu)
            .try_inverse()
            .ok_or_else(|| SolveError::Singular("I - R24/nu".into()))?;
        let change = [(&new02, &r02), (&new1, &r1), (&new24, &r24), (&new3, &r3)]
            .iter()
            .map(|(a, b)| (*a - *b).norm() / a.norm().max(1e-300))
            .fold(0.0, f64::max);
        let keep = opts.damping;
        r02 = &new02 * (1.0 - keep) + &r02 * keep;
        r1 = &new1 * (1.0 - keep) + &r1 * keep;
        r24 = &new24 * (1.0 - keep) + &r24 * keep;
        r3 = &new3 * (1.0 - keep) + &r3 * keep;
        diag = Diagnostics {
            iterations: it,
            residual: change,
            converged: change < opts.tol,
        };
        if diag.converged {
            break;
        }
    }
    Ok(DenseResponses {
        r02,
        r1,
        r24,
        r3,
        diagnostics: diag,
    })
}

/// Where the data-side variance source comes from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DataSource {
    /// Fixed dataset: `C_1 = R_1 (C_0 + σ²) R_1ᵀ`, weighted by `1/α`.
    FullBatch,
    /// Fresh minibatches: the source is `diag(C_0(t,t) + σ²)` with weight `1/(B·weight)`.
    Online { inv_batch: f64 },
}

/// Which variance families enter the correlation block. Dropping a family
/// yields the cross-correlation of two systems that do not share that
/// piece of disorder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Families {
    pub data: bool,
    pub projection: bool,
}

impl Families {
    pub const ALL: Families = Families {
        data: true,
        projection: true,
    };
    pub const NONE: Families = Families {
        data: false,
        projection: false,
    };
}

#[derive(Debug, Clone)]
pub struct Correlations {
    pub c0: DMatrix<f64>,
    pub c1: DMatrix<f64>,
    pub c2: DMatrix<f64>,
    pub c3: DMatrix<f64>,
    pub noise_var: f64,
    pub diagnostics: Diagnostics,
}

impl Correlations {
    pub fn test_loss(&self) -> Vec<f64> {
        self.c0.diagonal().iter().map(|c| c + self.noise_var).collect()
    }

    pub fn train_loss(&self) -> Vec<f64> {
        self.c1.diagonal().iter().copied().collect()
    }
}

/// Mode-summed kernels shared by every correlation solve on one response set.
struct Kernels {
    conv: CausalConv2d,
    /// `Σ w λ_k f_k ⊗ f_k` with `f_k = G_k Θ`.
    ka: Spectrum2,
    /// `Σ w λ_k² f_k ⊗ f_k` composed with `(R_3R_1) ⊗ (R_3R_1)`.
    kb_rr: Spectrum2,
    /// `Σ w λ_k G_k ⊗ G_k` composed with `(R_3R_1) ⊗ (R_3R_1)`.
    kc_rr: Spectrum2,
    s0: DMatrix<f64>,
    /// `R_3 R_1 [Σ w λ² w*² h_k ⊗ h_k] R_1ᵀ R_3ᵀ`.
    s3: DMatrix<f64>,
    s2_base: DMatrix<f64>,
    kb: Spectrum2,
    kc: Spectrum2,
}

fn mode_gram(rows: &[Vec<f64>], weights: &[f64], t: usize) -> DMatrix<f64> {
    // Σ_k weights[k] x_k ⊗ x_k via one GEMM on a scaled M×T matrix.
    let m = rows.len();
    let mut scaled = DMatrix::zeros(m, t);
    let mut plain = DMatrix::zeros(m, t);
    for (k, row) in rows.iter().enumerate() {
        for n in 0..t {
            scaled[(k, n)] = weights[k] * row[n];
            plain[(k, n)] = row[n];
        }
    }
    plain.tr_mul(&scaled)
}

impl Kernels {
    fn build(resp: &Responses, spec: &Spectrum) -> Self {
        let t = resp.steps();
        let w = resp.weight;
        let eta = resp.eta;
        let conv = CausalConv2d::new(t);
        let lam = spec.eigenvalues();
        let w2 = spec.target_weights_sq();
        let f: Vec<Vec<f64>> = resp
            .transfer
            .iter()
            .map(|h| (0..t).map(|n| if n == 0 { 0.0 } else { eta * h[n - 1] }).collect())
            .collect();
        let wl: Vec<f64> = lam.iter().map(|l| w * l).collect();
        let wl2: Vec<f64> = lam.iter().map(|l| w * l * l).collect();
        let ka = mode_gram(&f, &wl, t);
        let kb = mode_gram(&f, &wl2, t);
        let kc = mode_gram(&resp.mode_kernels, &wl, t);
        let s0w: Vec<f64> = lam.iter().zip(w2).map(|(l, v)| w * l * v).collect();
        let s2w: Vec<f64> = lam.iter().zip(w2).map(|(l, v)| w * l * l * v).collect();
        let s0 = mode_gram(&resp.transfer, &s0w, t);
        let s2_base = mode_gram(&resp.transfer, &s2w, t);

        let rr = causal::convolve(&resp.r3, &resp.r1, t);
        let rr_hat = conv.separable(&rr, &rr);
        let kb_hat = conv.forward(&kb);
        let kc_hat = conv.forward(&kc);
        let kb_rr = conv.forward(&conv.inverse(&Spectrum2::product(&kb_hat, &rr_hat)));
        let kc_rr = conv.forward(&conv.inverse(&Spectrum2::product(&kc_hat, &rr_hat)));
        let s3 = conv.convolve(&rr_hat, &s2_base);
        Self {
            ka: conv.forward(&ka),
            kb_rr,
            kc_rr,
            s0,
            s3,
            s2_base,
            kb: kb_hat,
            kc: kc_hat,
            conv,
        }
    }
}

fn flatten(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Vec<f64> {
    a.iter().chain(b.iter()).copied().collect()
}

fn unflatten(v: &[f64], t: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = t * t;
    (
        DMatrix::from_column_slice(t, t, &v[..n]),
        DMatrix::from_column_slice(t, t, &v[n..]),
    )
}

/// Solves the correlation block for the given responses.
///
/// Returns correlations together with iteration diagnostics; a result that
/// missed the tolerance is still returned so callers can write it out.
pub fn solve_correlations(
    resp: &Responses,
    spec: &Spectrum,
    noise_var: f64,
    source: DataSource,
    families: Families,
    opts: &SolverOptions,
) -> Result<Correlations> {
    let kern = Kernels::build(resp, spec);
    solve_with_kernels(resp, &kern, noise_var, source, families, opts)
}

fn source_matrix(c0: &DMatrix<f64>, noise_var: f64, source: DataSource) -> DMatrix<f64> {
    match source {
        DataSource::FullBatch => c0.add_scalar(noise_var),
        DataSource::Online { .. } => {
            let t = c0.nrows();
            DMatrix::from_fn(t, t, |i, j| if i == j { c0[(i, i)] + noise_var } else { 0.0 })
        }
    }
}

fn solve_with_kernels(
    resp: &Responses,
    kern: &Kernels,
    noise_var: f64,
    source: DataSource,
    families: Families,
    opts: &SolverOptions,
) -> Result<Correlations> {
    let t = resp.steps();
    let conv = &kern.conv;
    let data_coef = match (families.data, source) {
        (false, _) => 0.0,
        (true, DataSource::FullBatch) => resp.inv_alpha,
        (true, DataSource::Online { inv_batch }) => inv_batch,
    };
    let init_coef = if families.projection { resp.inv_nu } else { 0.0 };

    let step = |c0: &DMatrix<f64>, c3: &DMatrix<f64>| -> (DMatrix<f64>, DMatrix<f64>) {
        let mut acc0 = conv.zeros();
        let mut acc3 = conv.zeros();
        if data_coef != 0.0 {
            let fx = conv.forward(&source_matrix(c0, noise_var, source));
            acc0.add_product(data_coef, &kern.kb_rr, &fx);
            acc3.add_product(data_coef, &kern.kc_rr, &fx);
        }
        if init_coef != 0.0 {
            let f3 = conv.forward(c3);
            acc0.add_product(init_coef, &kern.ka, &f3);
            acc3.add_product(init_coef, &kern.kb_rr, &f3);
        }
        let mut n0 = kern.s0.clone();
        let mut n3 = kern.s3.clone();
        if data_coef != 0.0 || init_coef != 0.0 {
            n0 += conv.inverse(&acc0);
            n3 += conv.inverse(&acc3);
        }
        (n0, n3)
    };

    let mut c0 = kern.s0.clone();
    let mut c3 = kern.s3.clone();
    let mut diag = Diagnostics {
        iterations: 0,
        residual: 0.0,
        converged: true,
    };
    if data_coef != 0.0 || init_coef != 0.0 {
        let mut mixer = Anderson::new(opts.anderson_depth);
        diag.converged = false;
        for it in 1..=opts.max_iter {
            let (n0, n3) = step(&c0, &c3);
            let res0 = (&n0 - &c0).norm() / n0.norm().max(1e-300);
            let res3 = (&n3 - &c3).norm() / n3.norm().max(1e-300);
            let residual = res0.max(res3);
            diag = Diagnostics {
                iterations: it,
                residual,
                converged: residual < opts.tol,
            };
            if diag.converged {
                c0 = n0;
                c3 = n3;
                break;
            }
            let x = flatten(&c0, &c3);
            let gx = flatten(&n0, &n3);
            let next = mixer.step(&x, &gx);
            (c0, c3) = unflatten(&next, t);
        }
    }

    // Recover C1 and C2 from the converged pair.
    let r1_hat = conv.separable(&resp.r1, &resp.r1);
    let x = source_matrix(&c0, noise_var, source);
    let c1 = match source {
        DataSource::FullBatch => conv.convolve(&r1_hat, &x),
        DataSource::Online { .. } => x.clone(),
    };
    let mut acc2 = conv.zeros();
    if data_coef != 0.0 {
        acc2.add_product(data_coef, &kern.kc, &conv.forward(&c1));
    }
    if init_coef != 0.0 {
        let z = conv.convolve(&r1_hat, &c3);
        acc2.add_product(init_coef, &kern.kb, &conv.forward(&z));
    }
    let c2 = conv.convolve(&r1_hat, &kern.s2_base) + conv.inverse(&acc2);
    Ok(Correlations {
        c0,
        c1,
        c2,
        c3,
        noise_var,
        diagnostics: diag,
    })
}

/// Responses plus correlations for one configuration.
#[derive(Debug, Clone)]
pub struct OrderParameters {
    pub responses: Responses,
    pub correlations: Correlations,
}

impl OrderParameters {
    pub fn test_loss(&self) -> Vec<f64> {
        self.correlations.test_loss()
    }

    pub fn train_loss(&self) -> Vec<f64> {
        self.correlations.train_loss()
    }

    /// Test minus train loss read directly off the correlation diagonals.
    pub fn gap_direct(&self) -> Vec<f64> {
        self.test_loss()
            .iter()
            .zip(self.train_loss())
            .map(|(a, b)| a - b)
            .collect()
    }

    pub fn gap_formula(&self) -> Vec<f64> {
        train_test_gap(&self.responses, &self.correlations.c1)
    }

    pub fn to_csv(&self) -> CsvTable {
        let mut table = CsvTable::new(["t", "test_loss", "train_loss", "gap"]);
        let gap = self.gap_formula();
        for (n, ((te, tr), g)) in self.test_loss().into_iter().zip(self.train_loss()).zip(gap).enumerate() {
            table.push(vec![n as f64, te, tr, g]);
        }
        table
    }

    /// Writes each order-parameter matrix as `<stem>_<name>.bin`.
    pub fn dump_matrices(&self, dir: &Path, stem: &str) -> Result<Vec<std::path::PathBuf>> {
        let r = &self.responses;
        let c = &self.correlations;
        let items: [(&str, DMatrix<f64>); 8] = [
            ("r02", toeplitz_matrix(&r.r02)),
            ("r1", toeplitz_matrix(&r.r1)),
            ("r24", toeplitz_matrix(&r.r24)),
            ("r3", toeplitz_matrix(&r.r3)),
            ("c0", c.c0.clone()),
            ("c1", c.c1.clone()),
            ("c2", c.c2.clone()),
            ("c3", c.c3.clone()),
        ];
        let mut paths = Vec::new();
        for (name, m) in items {
            let p = dir.join(format!("{stem}_{name}.bin"));
            save_matrix(&p, &m)?;
            paths.push(p);
        }
        Ok(paths)
    }
}

/// Full-batch solve: responses, then correlations.
pub fn solve(
    spec: &Spectrum,
    coupling: &Coupling,
    steps: usize,
    eta: f64,
    opts: &SolverOptions,
) -> Result<OrderParameters> {
    let responses = solve_responses(spec, coupling, steps, eta)?;
    let correlations = solve_correlations(
        &responses,
        spec,
        coupling.noise_var,
        DataSource::FullBatch,
        Families::ALL,
        opts,
    )?;
    Ok(OrderParameters {
        responses,
        correlations,
    })
}

/// Correlation solves that share one response set and one kernel build.
pub struct CorrelationSolver<'a> {
    resp: &'a Responses,
    kern: Kernels,
}

impl<'a> CorrelationSolver<'a> {
    pub fn new(resp: &'a Responses, spec: &Spectrum) -> Self {
        Self {
            resp,
            kern: Kernels::build(resp, spec),
        }
    }

    pub fn solve(&self, noise_var: f64, source: DataSource, families: Families, opts: &SolverOptions) -> Result<Correlations> {
        solve_with_kernels(self.resp, &self.kern, noise_var, source, families, opts)
    }
}

/// `L(t) - L̂(t)` from the response `R_{0,2}` and the train correlation `C_1`.
pub fn train_test_gap(resp: &Responses, c1: &DMatrix<f64>) -> Vec<f64> {
    let t = resp.steps();
    let a = resp.inv_alpha;
    (0..t)
        .map(|n| {
            let row: Vec<f64> = (0..=n).map(|s| resp.r02[n - s]).collect();
            let linear: f64 = (0..=n).map(|s| row[s] * c1[(n, s)]).sum();
            let mut quad = 0.0;
            for s1 in 0..=n {
                if row[s1] == 0.0 {
                    continue;
                }
                let inner: f64 = (0..=n).map(|s2| row[s2] * c1[(s1, s2)]).sum();
                quad += row[s1] * inner;
            }
            -2.0 * a * linear + a * a * quad
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectrum::{LimitMode, SystemShape};

    fn coupling(nu: f64, alpha: f64, m: usize, sigma: f64) -> Coupling {
        SystemShape::from_ratios(nu, alpha, m, sigma).unwrap().coupling(m)
    }

    #[test]
    fn infinite_sizes_give_identity_responses() {
        let spec = Spectrum::power_law(1.5, 1.0, 16).unwrap();
        let c = coupling(f64::INFINITY, f64::INFINITY, 16, 0.0);
        let r = solve_responses(&spec, &c, 20, 0.1).unwrap();
        assert_eq!(r.r1, causal::delta(20));
        assert_eq!(r.r3, causal::delta(20));
        let one = SolverOptions {
            max_iter: 1,
            ..SolverOptions::default()
        };
        let d = solve_responses_dense(&spec, &c, 6, 0.1, &one).unwrap();
        assert_eq!(d.r1, DMatrix::identity(6, 6));
        assert_eq!(d.r3, DMatrix::identity(6, 6));
    }

    #[test]
    fn marching_matches_dense_fixed_point() {
        let spec = Spectrum::power_law(1.8, 1.2, 12).unwrap();
        let c = coupling(0.7, 1.3, 12, 0.0);
        let t = 14;
        let r = solve_responses(&spec, &c, t, 0.3).unwrap();
        let d = solve_responses_dense(&spec, &c, t, 0.3, &SolverOptions::default()).unwrap();
        assert!(d.diagnostics.converged);
        assert!(d.tti_deviation() < 1e-8);
        for (dense, seq) in [(&d.r1, &r.r1), (&d.r3, &r.r3), (&d.r02, &r.r02), (&d.r24, &r.r24)] {
            let want = toeplitz_matrix(seq);
            assert!((dense - want).abs().max() < 1e-7);
        }
    }

    #[test]
    fn decoupled_modes_decay_geometrically() {
        let spec = Spectrum::power_law(2.0, 1.0, 8).unwrap();
        let c = coupling(f64::INFINITY, f64::INFINITY, 8, 0.0);
        let eta = 0.2;
        let op = solve(&spec, &c, 30, eta, &SolverOptions::default()).unwrap();
        let loss = op.test_loss();
        for (n, l) in loss.iter().enumerate() {
            let want: f64 = spec
                .iter()
                .map(|(lam, w)| lam * w * (1.0 - eta * lam).powi(2 * n as i32))
                .sum::<f64>()
                / 8.0;
            assert!((l - want).abs() < 1e-13, "t={n}: {l} vs {want}");
        }
    }

    #[test]
    fn initial_loss_and_gap_consistency() {
        let spec = Spectrum::power_law(1.5, 1.25, 32).unwrap();
        let c = coupling(0.5, 0.75, 32, 0.3);
        let op = solve(&spec, &c, 40, 0.1, &SolverOptions::default()).unwrap();
        assert!(op.correlations.diagnostics.converged);
        let l0 = spec.target_power() / 32.0;
        assert!((op.correlations.c0[(0, 0)] - l0).abs() < 1e-12);
        let direct = op.gap_direct();
        let formula = op.gap_formula();
        assert!(direct[0].abs() < 1e-12);
        for (a, b) in direct.iter().zip(&formula) {
            assert!((a - b).abs() <= 1e-7 * a.abs().max(1e-3), "{a} vs {b}");
        }
    }

    #[test]
    fn correlations_symmetric_and_psd_diagonal() {
        let spec = Spectrum::white(16).unwrap();
        let c = coupling(2.0, 0.5, 16, 0.0);
        let op = solve(&spec, &c, 25, 0.2, &SolverOptions::default()).unwrap();
        for m in [&op.correlations.c0, &op.correlations.c1, &op.correlations.c2, &op.correlations.c3] {
            assert!((m - m.transpose()).abs().max() < 1e-9 * m.abs().max());
            assert!(m.diagonal().iter().all(|v| *v >= -1e-12));
            let eig = m.clone().symmetric_eigen();
            assert!(eig.eigenvalues.min() > -1e-8 * m.abs().max());
        }
    }

    #[test]
    fn nonproportional_is_scaled_proportional() {
        let m = 24;
        let spec = Spectrum::power_law(1.6, 1.1, m).unwrap();
        let sigma = 0.4;
        let prop = SystemShape::new(30.0, 18.0, sigma / (m as f64).sqrt(), LimitMode::Proportional)
            .unwrap()
            .coupling(m);
        let nonprop = SystemShape::new(30.0, 18.0, sigma, LimitMode::NonProportional)
            .unwrap()
            .coupling(m);
        let a = solve(&spec, &prop, 20, 0.1, &SolverOptions::default()).unwrap();
        let b = solve(&spec, &nonprop, 20, 0.1, &SolverOptions::default()).unwrap();
        for (x, y) in a.test_loss().iter().zip(b.test_loss()) {
            assert!((x * m as f64 - y).abs() < 1e-9 * y);
        }
    }
}
