//! Frequency-domain solution of the time-translation-invariant equations.
//!
//! Everything reduces to one complex unknown per frequency, `x = R1·R3`:
//! with `S(x) = Σ λ x/(s + λ x)`, the responses are `R1 = 1 − S/P` and
//! `R3 = 1 − S/N`. Continuous time uses `s` directly; discrete dynamics use
//! the effective `s` of a step kernel in the z-domain. Time-domain curves
//! come from a fixed Talbot contour (continuous) or a trapezoid rule on a
//! circle `|z| = ρ > 1` (discrete).

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::asymptotics;
use crate::dmft_discrete::Families;
use crate::error::{Result, SolveError};
use crate::io::CsvTable;
use crate::simulator::LossCurve;
use crate::spectrum::{Coupling, Spectrum, SystemShape};

const NEWTON_TOL: f64 = 1e-14;
const NEWTON_MAX: usize = 40;
const NEWTON_FLOOR: f64 = 1e-10;
/// Largest relative change of `x` accepted in one continuation step.
const MAX_JUMP: f64 = 0.3;
/// Largest change of `ln s` per continuation step along geometric paths.
const GEOMETRIC_STRIDE: f64 = 0.2;
/// Largest relative miss of the linear predictor before the step is halved.
const PREDICTOR_TOL: f64 = 0.1;

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

/// Newton solver for `x = R1 R3` at complex `s`, with path continuation
/// from large `|s|` where `x ≈ 1`.
#[derive(Debug, Clone)]
pub struct ResponseSolver {
    eigenvalues: Vec<f64>,
    inv_p: f64,
    inv_n: f64,
    far: f64,
}

impl ResponseSolver {
    pub fn new(spec: &Spectrum, coupling: &Coupling) -> Self {
        let total: f64 = spec.eigenvalues().iter().sum();
        let load = (coupling.inv_p + coupling.inv_n) * total;
        Self {
            eigenvalues: spec.eigenvalues().to_vec(),
            inv_p: coupling.inv_p,
            inv_n: coupling.inv_n,
            far: 1e8 * (spec.top_eigenvalue() + load).max(1.0),
        }
    }

    fn trivial(&self) -> bool {
        self.inv_p == 0.0 && self.inv_n == 0.0
    }

    /// `S(x)` and `dS/dx`.
    fn mode_sum(&self, s: Complex64, x: Complex64) -> (Complex64, Complex64) {
        let mut sum = c(0.0, 0.0);
        let mut deriv = c(0.0, 0.0);
        for &l in &self.eigenvalues {
            let inv = 1.0 / (s + l * x);
            sum += l * x * inv;
            deriv += l * s * inv * inv;
        }
        (sum, deriv)
    }

    pub fn responses(&self, s: Complex64, x: Complex64) -> (Complex64, Complex64) {
        let (sum, _) = self.mode_sum(s, x);
        (1.0 - self.inv_p * sum, 1.0 - self.inv_n * sum)
    }

    /// `|x − R1 R3|`.
    pub fn residual(&self, s: Complex64, x: Complex64) -> f64 {
        let (r1, r3) = self.responses(s, x);
        (x - r1 * r3).norm()
    }

    fn newton(&self, s: Complex64, mut x: Complex64) -> Option<Complex64> {
        let mut last = f64::INFINITY;
        for _ in 0..NEWTON_MAX {
            let (sum, deriv) = self.mode_sum(s, x);
            let r1 = 1.0 - self.inv_p * sum;
            let r3 = 1.0 - self.inv_n * sum;
            let g = x - r1 * r3;
            let dg = 1.0 + (self.inv_p * r3 + self.inv_n * r1) * deriv;
            let dx = g / dg;
            if !dx.is_finite() {
                return None;
            }
            x -= dx;
            let size = dx.norm();
            let scale = x.norm().max(1e-300);
            // Near a branch cut roundoff can keep the step above NEWTON_TOL;
            // a step that no longer shrinks at that level is converged.
            if size <= NEWTON_TOL * scale || (size <= NEWTON_FLOOR * scale && size >= 0.5 * last) {
                return Some(x);
            }
            last = size;
        }
        None
    }

    /// Follows the root along `path(τ)` for `τ` from 0 to 1, starting from `x0` at `path(0)`.
    pub fn continue_along<F>(&self, path: F, x0: Complex64) -> Result<Complex64>
    where
        F: Fn(f64) -> Complex64,
    {
        self.continue_with(path, x0, 0.25)
    }

    fn continue_with<F>(&self, path: F, x0: Complex64, max_step: f64) -> Result<Complex64>
    where
        F: Fn(f64) -> Complex64,
    {
        if self.trivial() {
            return Ok(c(1.0, 0.0));
        }
        let mut x = x0;
        let mut tau = 0.0f64;
        let mut step = max_step;
        // Secant slope dx/dτ from the last accepted step, for the predictor.
        let mut slope: Option<Complex64> = None;
        while tau < 1.0 {
            let next = (tau + step).min(1.0);
            let guess = slope.map_or(x, |d| x + d * (next - tau));
            let accepted = self.newton(path(next), guess).filter(|y| {
                let scale = y.norm().max(x.norm());
                (y - x).norm() <= MAX_JUMP * scale && (slope.is_none() || (y - guess).norm() <= PREDICTOR_TOL * scale)
            });
            match accepted {
                Some(y) => {
                    slope = Some((y - x) / (next - tau));
                    x = y;
                    tau = next;
                    step = (step * 1.5).min(max_step);
                }
                None => {
                    step *= 0.5;
                    if step < 1e-9 {
                        return Err(SolveError::NonConvergence {
                            iterations: NEWTON_MAX,
                            residual: self.residual(path(next), x),
                        });
                    }
                }
            }
        }
        Ok(x)
    }

    /// Geometric path from `a` to `b`.
    fn geometric(a: Complex64, b: Complex64) -> impl Fn(f64) -> Complex64 {
        let log = (b / a).ln();
        move |tau| if tau >= 1.0 { b } else { a * (log * tau).exp() }
    }

    /// Follows the root geometrically from `a` to `b`, changing `s` by at
    /// most a factor `e^GEOMETRIC_STRIDE` per step so close roots are not confused.
    fn continue_geometric(&self, a: Complex64, b: Complex64, x0: Complex64) -> Result<Complex64> {
        let length = (b / a).ln().norm();
        let max_step = if length > 0.0 { (GEOMETRIC_STRIDE / length).min(0.25) } else { 0.25 };
        self.continue_with(Self::geometric(a, b), x0, max_step)
    }

    fn far_point(&self, s: Complex64) -> Complex64 {
        s * (self.far / s.norm()).max(1.0)
    }

    /// Solves at `s` by continuing radially inward from large `|s|`.
    pub fn solve(&self, s: Complex64) -> Result<Complex64> {
        let start = self.far_point(s);
        let x0 = self.newton(start, c(1.0, 0.0)).unwrap_or(c(1.0, 0.0));
        self.continue_geometric(start, s, x0)
    }

    /// Solves at points ordered along a path, warm-starting each from the previous.
    pub fn solve_chain(&self, points: &[Complex64]) -> Result<Vec<Complex64>> {
        let mut out = Vec::with_capacity(points.len());
        let Some(&first) = points.first() else { return Ok(out) };
        let mut x = self.solve(first)?;
        out.push(x);
        for w in points.windows(2) {
            x = self.continue_geometric(w[0], w[1], x)?;
            out.push(x);
        }
        Ok(out)
    }
}

/// One evaluation point: effective `s`, the step-kernel transform and the
/// transform of the unit sequence (or unit function).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Node {
    pub s: Complex64,
    pub step: Complex64,
    pub unit: Complex64,
}

impl Node {
    pub fn continuous(s: Complex64) -> Self {
        Self {
            s,
            step: 1.0 / s,
            unit: 1.0 / s,
        }
    }

    /// Heavy-ball step with momentum `mu` (plain descent at `mu = 0`).
    pub fn discrete(z: Complex64, eta: f64, mu: f64) -> Self {
        let step = eta * z / ((z - 1.0) * (z - mu));
        Self {
            s: 1.0 / step,
            step,
            unit: z / (z - 1.0),
        }
    }
}

/// Responses and per-mode kernels `G_k = s/(s + λ_k x)` at a set of nodes.
pub struct NodeSet {
    pub nodes: Vec<Node>,
    pub x: Vec<Complex64>,
    pub r1: Vec<Complex64>,
    pub r3: Vec<Complex64>,
    /// `2n × M`: real parts of `G` in the top half, imaginary parts below.
    kernels: DMatrix<f64>,
}

impl NodeSet {
    pub fn new(solver: &ResponseSolver, nodes: Vec<Node>, x: Vec<Complex64>) -> Self {
        let n = nodes.len();
        let m = solver.eigenvalues.len();
        let mut kernels = DMatrix::zeros(2 * n, m);
        let mut r1 = Vec::with_capacity(n);
        let mut r3 = Vec::with_capacity(n);
        for (i, (node, &xi)) in nodes.iter().zip(&x).enumerate() {
            let (a, b) = solver.responses(node.s, xi);
            r1.push(a);
            r3.push(b);
            for (k, &l) in solver.eigenvalues.iter().enumerate() {
                let g = node.s / (node.s + l * xi);
                kernels[(i, k)] = g.re;
                kernels[(n + i, k)] = g.im;
            }
        }
        Self {
            nodes,
            x,
            r1,
            r3,
            kernels,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `H_k = G_k û` at node `i`.
    pub fn transfer(&self, i: usize, k: usize) -> Complex64 {
        let n = self.len();
        c(self.kernels[(i, k)], self.kernels[(n + i, k)]) * self.nodes[i].unit
    }

    /// `Σ_k d_k G_k(i) G_k(j)` for all node pairs.
    fn pair_sums(&self, weights: &[f64]) -> DMatrix<Complex64> {
        let n = self.len();
        let mut scaled = self.kernels.clone();
        for (k, &d) in weights.iter().enumerate() {
            scaled.column_mut(k).scale_mut(d);
        }
        let gram = &scaled * self.kernels.transpose();
        DMatrix::from_fn(n, n, |i, j| {
            c(
                gram[(i, j)] - gram[(n + i, n + j)],
                gram[(i, n + j)] + gram[(n + i, j)],
            )
        })
    }
}

/// Mode weights `w λ`, `w λ²`, `w λ (w*)²`, `w λ² (w*)²`.
struct ModeWeights {
    a: Vec<f64>,
    b: Vec<f64>,
    target: Vec<f64>,
    target_b: Vec<f64>,
}

impl ModeWeights {
    fn new(spec: &Spectrum, weight: f64) -> Self {
        let mut out = ModeWeights {
            a: Vec::new(),
            b: Vec::new(),
            target: Vec::new(),
            target_b: Vec::new(),
        };
        for (l, t) in spec.iter() {
            out.a.push(weight * l);
            out.b.push(weight * l * l);
            out.target.push(weight * l * t);
            out.target_b.push(weight * l * l * t);
        }
        out
    }
}

/// Two-frequency correlations at every node pair.
pub struct PairCorrelations {
    pub c0: DMatrix<Complex64>,
    pub c1: DMatrix<Complex64>,
    pub c2: DMatrix<Complex64>,
    pub c3: DMatrix<Complex64>,
}

struct PairSums {
    a: DMatrix<Complex64>,
    b: DMatrix<Complex64>,
    target: DMatrix<Complex64>,
    target_b: DMatrix<Complex64>,
}

impl PairSums {
    fn new(set: &NodeSet, w: &ModeWeights) -> Self {
        Self {
            a: set.pair_sums(&w.a),
            b: set.pair_sums(&w.b),
            target: set.pair_sums(&w.target),
            target_b: set.pair_sums(&w.target_b),
        }
    }
}

/// Solves the 2×2 system in `(C0, C3)` at one pair and back-substitutes.
#[allow(clippy::too_many_arguments)]
fn pair_solve(
    coupling: &Coupling,
    noise_var: f64,
    families: Families,
    (ni, nj): (&Node, &Node),
    r1: Complex64,
    r3: Complex64,
    sums: [Complex64; 4],
) -> Result<[Complex64; 4]> {
    let [pa, pb, pw, pbw] = sums;
    let a = if families.data { coupling.inv_alpha() } else { 0.0 };
    let n = if families.projection { coupling.inv_nu() } else { 0.0 };
    let var = if families.data { noise_var } else { 0.0 };
    let th = ni.step * nj.step;
    let u = ni.unit * nj.unit;
    let m00 = 1.0 - th * a * r3 * r1 * pb;
    let m01 = -th * n * pa;
    let m10 = -r3 * a * pa * r1;
    let m11 = 1.0 - r3 * r1 * n * th * pb;
    let b0 = pw * u + th * a * r3 * r1 * pb * var * u;
    let b1 = r3 * r1 * (pbw * u + a * pa * var * u);
    let det = m00 * m11 - m01 * m10;
    if det.norm() == 0.0 || !det.is_finite() {
        return Err(SolveError::Singular("two-frequency system is singular".into()));
    }
    let c0 = (b0 * m11 - m01 * b1) / det;
    let c3 = (m00 * b1 - m10 * b0) / det;
    let c1 = r1 * (c0 + var * u);
    let c2 = a * pa * c1 + r1 * (pbw * u + n * th * pb * c3);
    Ok([c0, c1, c2, c3])
}

fn pair_correlations(
    set: &NodeSet,
    sums: &PairSums,
    coupling: &Coupling,
    noise_var: f64,
    families: Families,
) -> Result<PairCorrelations> {
    let n = set.len();
    let zero = DMatrix::from_element(n, n, c(0.0, 0.0));
    let mut out = PairCorrelations {
        c0: zero.clone(),
        c1: zero.clone(),
        c2: zero.clone(),
        c3: zero,
    };
    for i in 0..n {
        for j in 0..n {
            let [c0, c1, c2, c3] = pair_solve(
                coupling,
                noise_var,
                families,
                (&set.nodes[i], &set.nodes[j]),
                set.r1[i] * set.r1[j],
                set.r3[i] * set.r3[j],
                [sums.a[(i, j)], sums.b[(i, j)], sums.target[(i, j)], sums.target_b[(i, j)]],
            )?;
            out.c0[(i, j)] = c0;
            out.c1[(i, j)] = c1;
            out.c2[(i, j)] = c2;
            out.c3[(i, j)] = c3;
        }
    }
    Ok(out)
}

/// `(C0, C1, C2, C3)` at one pair of continuous-time frequencies `s = ε + iω`.
pub fn correlation_two_freq(
    omega: (f64, f64),
    eps: f64,
    spec: &Spectrum,
    shape: &SystemShape,
) -> Result<[Complex64; 4]> {
    let coupling = shape.coupling(spec.modes());
    let solver = ResponseSolver::new(spec, &coupling);
    let nodes = vec![Node::continuous(c(eps, omega.0)), Node::continuous(c(eps, omega.1))];
    let x = nodes.iter().map(|n| solver.solve(n.s)).collect::<Result<Vec<_>>>()?;
    let set = NodeSet::new(&solver, nodes, x);
    let sums = PairSums::new(&set, &ModeWeights::new(spec, coupling.weight));
    let corr = pair_correlations(&set, &sums, &coupling, shape.noise_std.powi(2), Families::ALL)?;
    Ok([corr.c0[(0, 1)], corr.c1[(0, 1)], corr.c2[(0, 1)], corr.c3[(0, 1)]])
}

/// `(R1, R3)` at `s = ε + iω`.
pub fn solve_response_at(omega: f64, spec: &Spectrum, shape: &SystemShape, eps: f64) -> Result<(Complex64, Complex64)> {
    if !(eps > 0.0) {
        return Err(SolveError::Invalid(format!("regulator must be positive, got {eps}")));
    }
    let solver = ResponseSolver::new(spec, &shape.coupling(spec.modes()));
    let s = c(eps, omega);
    let x = solver.solve(s)?;
    Ok(solver.responses(s, x))
}

/// Symmetric log-spaced real-frequency grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrequencyGrid {
    pub lo: f64,
    pub hi: f64,
    pub points_per_sign: usize,
    pub eps: f64,
}

impl FrequencyGrid {
    /// `[1e-6 λ_M, 1e3 λ_1]`, 1000 points per sign, `ε = 1e-9 λ_1`.
    pub fn for_spectrum(spec: &Spectrum) -> Self {
        Self {
            lo: 1e-6 * spec.bottom_eigenvalue(),
            hi: 1e3 * spec.top_eigenvalue(),
            points_per_sign: 1000,
            eps: 1e-9 * spec.top_eigenvalue(),
        }
    }

    pub fn omegas(&self) -> Vec<f64> {
        let pos = asymptotics::log_grid(self.lo, self.hi, self.points_per_sign);
        pos.iter().rev().map(|w| -w).chain(pos.iter().copied()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct FrequencySolution {
    pub omegas: Vec<f64>,
    pub eps: f64,
    pub x: Vec<Complex64>,
    pub r1: Vec<Complex64>,
    pub r3: Vec<Complex64>,
    eigenvalues: Vec<f64>,
}

impl FrequencySolution {
    pub fn solve(spec: &Spectrum, shape: &SystemShape, grid: &FrequencyGrid) -> Result<Self> {
        let solver = ResponseSolver::new(spec, &shape.coupling(spec.modes()));
        let omegas = grid.omegas();
        let half = grid.points_per_sign;
        // Positive half from high to low frequency, mirrored by conjugation.
        let points: Vec<Complex64> = omegas[half..].iter().rev().map(|&w| c(grid.eps, w)).collect();
        let mut xs = solver.solve_chain(&points)?;
        xs.reverse();
        let x: Vec<Complex64> = xs.iter().rev().map(|v| v.conj()).chain(xs.iter().copied()).collect();
        let (r1, r3) = omegas
            .iter()
            .zip(&x)
            .map(|(&w, &xi)| solver.responses(c(grid.eps, w), xi))
            .unzip();
        Ok(Self {
            omegas,
            eps: grid.eps,
            x,
            r1,
            r3,
            eigenvalues: spec.eigenvalues().to_vec(),
        })
    }

    pub fn transfer(&self, index: usize, k: usize) -> Complex64 {
        1.0 / (c(self.eps, self.omegas[index]) + self.eigenvalues[k] * self.x[index])
    }

    pub fn to_csv(&self) -> CsvTable {
        let mut table = CsvTable::new(["omega", "re_R1", "im_R1", "re_R3", "im_R3"]);
        for i in 0..self.omegas.len() {
            table.push(vec![self.omegas[i], self.r1[i].re, self.r1[i].im, self.r3[i].re, self.r3[i].im]);
        }
        table.comment("eps", self.eps);
        table
    }
}

/// `H_k(ω) = 1/(ε + iω + λ_k R1 R3)`.
pub fn transfer_function(omega: f64, k: usize, spec: &Spectrum, shape: &SystemShape, eps: f64) -> Result<Complex64> {
    let solver = ResponseSolver::new(spec, &shape.coupling(spec.modes()));
    let s = c(eps, omega);
    let x = solver.solve(s)?;
    Ok(1.0 / (s + spec.eigenvalues()[k] * x))
}

/// z-transform of the mode-`k` transfer sequence on the unit circle.
pub fn z_transfer(z: Complex64, k: usize, spec: &Spectrum, shape: &SystemShape, eta: f64, mu: f64) -> Result<Complex64> {
    if (z.norm() - 1.0).abs() > 1e-12 {
        return Err(SolveError::Invalid(format!("|z| must be 1, got {}", z.norm())));
    }
    let solver = ResponseSolver::new(spec, &shape.coupling(spec.modes()));
    let node = Node::discrete(z, eta, mu);
    let x = solver.solve(node.s)?;
    Ok(node.s / (node.s + spec.eigenvalues()[k] * x) * node.unit)
}

/// Fixed Talbot contour for inverse Laplace transforms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Talbot {
    /// Nodes per half contour; the full symmetric contour has `2n − 1` nodes.
    pub nodes: usize,
}

impl Default for Talbot {
    fn default() -> Self {
        Self { nodes: 18 }
    }
}

impl Talbot {
    /// Node positions at `t = 1`; the contour for time `t` is these over `t`.
    pub fn unit_nodes(&self) -> Vec<Complex64> {
        let m = self.nodes as f64;
        let r = 2.0 * m / 5.0;
        let count = self.nodes as i64;
        (-(count - 1)..count)
            .map(|k| {
                if k == 0 {
                    return c(r, 0.0);
                }
                let th = k as f64 * std::f64::consts::PI / m;
                r * th * c(1.0 / th.tan(), 1.0)
            })
            .collect()
    }

    /// Quadrature weights at time `t`, paired with `unit_nodes()[k] / t`.
    pub fn weights(&self, t: f64) -> Vec<Complex64> {
        let m = self.nodes as f64;
        let r = 2.0 * m / (5.0 * t);
        let count = self.nodes as i64;
        (-(count - 1)..count)
            .map(|k| {
                if k == 0 {
                    return c(r / m * 0.5 * (r * t).exp(), 0.0);
                }
                let th = k as f64 * std::f64::consts::PI / m;
                let cot = 1.0 / th.tan();
                let sigma = th + (th * cot - 1.0) * cot;
                let s = r * th * c(cot, 1.0);
                (r / m) * 0.5 * (s * t).exp() * c(1.0, sigma)
            })
            .collect()
    }

    /// Inverts `f` at time `t > 0`.
    pub fn invert<F: Fn(Complex64) -> Complex64>(&self, t: f64, f: F) -> f64 {
        self.unit_nodes()
            .iter()
            .zip(self.weights(t))
            .map(|(s, w)| w * f(s / t))
            .sum::<Complex64>()
            .re
    }
}

/// Continuous-time (gradient flow) curves through Talbot inversion.
pub struct ContinuousSolver<'a> {
    spec: &'a Spectrum,
    coupling: Coupling,
    noise_var: f64,
    solver: ResponseSolver,
    pub talbot: Talbot,
}

/// Test and train loss at one time for each requested family selection.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagonals {
    pub time: f64,
    /// `C0(t,t)` per family selection.
    pub c0: Vec<f64>,
    /// `C1(t,t)` per family selection.
    pub c1: Vec<f64>,
}

impl<'a> ContinuousSolver<'a> {
    pub fn new(spec: &'a Spectrum, shape: &SystemShape) -> Self {
        let coupling = shape.coupling(spec.modes());
        Self {
            spec,
            coupling,
            noise_var: shape.noise_std * shape.noise_std,
            solver: ResponseSolver::new(spec, &coupling),
            talbot: Talbot::default(),
        }
    }

    pub fn coupling(&self) -> &Coupling {
        &self.coupling
    }

    fn check_times(times: &[f64]) -> Result<()> {
        if times.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return Err(SolveError::Invalid("Talbot times must be positive and finite".into()));
        }
        Ok(())
    }

    /// Node sets for every time, solved ray by ray from small to large `t`.
    fn node_sets(&self, times: &[f64]) -> Result<Vec<NodeSet>> {
        Self::check_times(times)?;
        let unit = self.talbot.unit_nodes();
        let mut order: Vec<usize> = (0..times.len()).collect();
        order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
        let mut xs = vec![vec![c(0.0, 0.0); unit.len()]; times.len()];
        for (k, &u) in unit.iter().enumerate() {
            let points: Vec<Complex64> = order.iter().map(|&i| u / times[i]).collect();
            let chain = self.solver.solve_chain(&points)?;
            for (&i, x) in order.iter().zip(chain) {
                xs[i][k] = x;
            }
        }
        Ok(times
            .iter()
            .zip(xs)
            .map(|(&t, x)| {
                let nodes = unit.iter().map(|&u| Node::continuous(u / t)).collect();
                NodeSet::new(&self.solver, nodes, x)
            })
            .collect())
    }

    /// `H_k(t)` for the listed modes.
    pub fn transfer(&self, modes: &[usize], times: &[f64]) -> Result<Vec<Vec<f64>>> {
        let sets = self.node_sets(times)?;
        Ok(sets
            .iter()
            .zip(times)
            .map(|(set, &t)| {
                let w = self.talbot.weights(t);
                modes
                    .iter()
                    .map(|&k| (0..set.len()).map(|i| w[i] * set.transfer(i, k)).sum::<Complex64>().re)
                    .collect()
            })
            .collect())
    }

    /// Equal-time diagonals of `C0` and `C1` for each family selection.
    pub fn diagonals(&self, times: &[f64], families: &[Families]) -> Result<Vec<Diagonals>> {
        let sets = self.node_sets(times)?;
        let weights = ModeWeights::new(self.spec, self.coupling.weight);
        let mut out = Vec::with_capacity(times.len());
        for (set, &t) in sets.iter().zip(times) {
            let w = self.talbot.weights(t);
            let sums = PairSums::new(set, &weights);
            let mut d = Diagonals {
                time: t,
                c0: Vec::new(),
                c1: Vec::new(),
            };
            for &f in families {
                let corr = pair_correlations(set, &sums, &self.coupling, self.noise_var, f)?;
                d.c0.push(double_sum(&w, &corr.c0));
                d.c1.push(double_sum(&w, &corr.c1));
            }
            out.push(d);
        }
        Ok(out)
    }

    pub fn loss_curve(&self, times: &[f64]) -> Result<LossCurve> {
        let diags = self.diagonals(times, &[Families::ALL])?;
        let test = diags.iter().map(|d| d.c0[0] + self.noise_var).collect();
        let train = diags.iter().map(|d| d.c1[0]).collect();
        Ok(LossCurve::single(times.to_vec(), train, test))
    }
}

fn double_sum(w: &[Complex64], m: &DMatrix<Complex64>) -> f64 {
    let mut total = c(0.0, 0.0);
    for i in 0..w.len() {
        for j in 0..w.len() {
            total += w[i] * w[j] * m[(i, j)];
        }
    }
    total.re
}

/// Inverse transform of `H_k` for one mode.
pub fn inverse_transfer(k: usize, spec: &Spectrum, shape: &SystemShape, times: &[f64]) -> Result<Vec<f64>> {
    let solver = ContinuousSolver::new(spec, shape);
    Ok(solver.transfer(&[k], times)?.into_iter().map(|v| v[0]).collect())
}

/// Discrete-time curves (plain or heavy-ball descent) by trapezoid
/// quadrature on `|z| = ρ`.
pub struct DiscreteSolver<'a> {
    spec: &'a Spectrum,
    coupling: Coupling,
    noise_var: f64,
    solver: ResponseSolver,
    eta: f64,
    mu: f64,
    steps: usize,
    points: usize,
    radius: f64,
}

/// Aliasing suppression `ρ^L` of the circle quadrature.
const CIRCLE_DAMPING: f64 = 1e10;
/// Row block for the pair-sum sweep.
const BLOCK: usize = 64;

impl<'a> DiscreteSolver<'a> {
    pub fn new(spec: &'a Spectrum, shape: &SystemShape, eta: f64, mu: f64, steps: usize) -> Result<Self> {
        if !(eta > 0.0) || !(0.0..1.0).contains(&mu) || steps == 0 {
            return Err(SolveError::Invalid(format!("need η > 0, 0 ≤ μ < 1, T ≥ 1 (η={eta}, μ={mu}, T={steps})")));
        }
        let coupling = shape.coupling(spec.modes());
        let points = 4 * steps.max(8);
        Ok(Self {
            spec,
            coupling,
            noise_var: shape.noise_std * shape.noise_std,
            solver: ResponseSolver::new(spec, &coupling),
            eta,
            mu,
            steps,
            points,
            radius: CIRCLE_DAMPING.powf(1.0 / points as f64),
        })
    }

    fn z(&self, j: f64) -> Complex64 {
        let phi = 2.0 * std::f64::consts::PI * j / self.points as f64;
        self.radius * c(phi.cos(), phi.sin())
    }

    fn node_set(&self) -> Result<NodeSet> {
        let l = self.points;
        let half = l / 2;
        let eff = |j: f64| Node::discrete(self.z(j), self.eta, self.mu).s;
        let mut x = vec![c(0.0, 0.0); l];
        x[0] = self.solver.solve(eff(0.0))?;
        for j in 1..=half {
            let a = (j - 1) as f64;
            x[j] = self.solver.continue_along(|tau| eff(a + tau), x[j - 1])?;
        }
        for j in half + 1..l {
            x[j] = x[l - j].conj();
        }
        let nodes = (0..l).map(|j| Node::discrete(self.z(j as f64), self.eta, self.mu)).collect();
        Ok(NodeSet::new(&self.solver, nodes, x))
    }

    /// Inverts a sequence transform sampled on the circle.
    fn invert_1d(&self, values: &[Complex64]) -> Vec<f64> {
        let l = self.points as f64;
        (0..self.steps)
            .map(|t| {
                let s: Complex64 = values.iter().enumerate().map(|(j, v)| v * self.z(j as f64).powu(t as u32) / self.radius.powi(t as i32)).sum();
                s.re * self.radius.powi(t as i32) / l
            })
            .collect()
    }

    /// `H_k(t)` for the listed modes, `t = 0..T`.
    pub fn transfer(&self, modes: &[usize]) -> Result<Vec<Vec<f64>>> {
        let set = self.node_set()?;
        Ok(modes
            .iter()
            .map(|&k| {
                let vals: Vec<Complex64> = (0..set.len()).map(|i| set.transfer(i, k)).collect();
                self.invert_1d(&vals)
            })
            .collect())
    }

    /// Diagonals of `C0`, `C1` for each family selection, `t = 0..T`.
    pub fn diagonals(&self, families: &[Families]) -> Result<Vec<Diagonals>> {
        let set = self.node_set()?;
        let l = self.points;
        let weights = ModeWeights::new(self.spec, self.coupling.weight);
        let mut anti0 = vec![vec![c(0.0, 0.0); l]; families.len()];
        let mut anti1 = anti0.clone();
        let all: Vec<usize> = (0..l).collect();
        for start in (0..l).step_by(BLOCK) {
            let rows: Vec<usize> = (start..(start + BLOCK).min(l)).collect();
            let block = PairBlock::new(&set, &rows, &all, &weights);
            for (fi, &f) in families.iter().enumerate() {
                for (bi, &i) in rows.iter().enumerate() {
                    for j in 0..l {
                        let [c0, c1, _, _] = pair_solve(
                            &self.coupling,
                            self.noise_var,
                            f,
                            (&set.nodes[i], &set.nodes[j]),
                            set.r1[i] * set.r1[j],
                            set.r3[i] * set.r3[j],
                            block.sums(bi, j),
                        )?;
                        let m = (i + j) % l;
                        anti0[fi][m] += c0;
                        anti1[fi][m] += c1;
                    }
                }
            }
        }
        let diag = |anti: &[Complex64]| -> Vec<f64> {
            let lf = l as f64;
            (0..self.steps)
                .map(|t| {
                    let phase = |m: usize| {
                        let ang = 2.0 * std::f64::consts::PI * ((m * t) % l) as f64 / lf;
                        c(ang.cos(), ang.sin())
                    };
                    let s: Complex64 = anti.iter().enumerate().map(|(m, v)| v * phase(m)).sum();
                    s.re * self.radius.powi(2 * t as i32) / (lf * lf)
                })
                .collect()
        };
        let d0: Vec<Vec<f64>> = anti0.iter().map(|a| diag(a)).collect();
        let d1: Vec<Vec<f64>> = anti1.iter().map(|a| diag(a)).collect();
        Ok((0..self.steps)
            .map(|t| Diagonals {
                time: t as f64,
                c0: d0.iter().map(|d| d[t]).collect(),
                c1: d1.iter().map(|d| d[t]).collect(),
            })
            .collect())
    }

    pub fn loss_curve(&self) -> Result<LossCurve> {
        let diags = self.diagonals(&[Families::ALL])?;
        let times = (0..self.steps).map(|t| t as f64).collect();
        let test = diags.iter().map(|d| d.c0[0] + self.noise_var).collect();
        let train = diags.iter().map(|d| d.c1[0]).collect();
        Ok(LossCurve::single(times, train, test))
    }
}

/// Pair sums between a block of rows and a set of columns.
struct PairBlock {
    a: DMatrix<Complex64>,
    b: DMatrix<Complex64>,
    target: DMatrix<Complex64>,
    target_b: DMatrix<Complex64>,
}

impl PairBlock {
    fn new(set: &NodeSet, rows: &[usize], cols: &[usize], w: &ModeWeights) -> Self {
        let n = set.len();
        let pick = |idx: &[usize]| {
            let mut m = DMatrix::zeros(2 * idx.len(), set.kernels.ncols());
            for (r, &i) in idx.iter().enumerate() {
                m.row_mut(r).copy_from(&set.kernels.row(i));
                m.row_mut(idx.len() + r).copy_from(&set.kernels.row(n + i));
            }
            m
        };
        let left = pick(rows);
        let right = pick(cols);
        let (nr, nc) = (rows.len(), cols.len());
        let sums = |d: &[f64]| {
            let mut scaled = left.clone();
            for (k, &v) in d.iter().enumerate() {
                scaled.column_mut(k).scale_mut(v);
            }
            let g = &scaled * right.transpose();
            DMatrix::from_fn(nr, nc, |i, j| c(g[(i, j)] - g[(nr + i, nc + j)], g[(i, nc + j)] + g[(nr + i, j)]))
        };
        Self {
            a: sums(&w.a),
            b: sums(&w.b),
            target: sums(&w.target),
            target_b: sums(&w.target_b),
        }
    }

    fn sums(&self, i: usize, j: usize) -> [Complex64; 4] {
        [self.a[(i, j)], self.b[(i, j)], self.target[(i, j)], self.target_b[(i, j)]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimescaleDensity {
    pub rates: Vec<f64>,
    pub density: Vec<f64>,
    /// Weight of the zero rate (never-learned part of the mode).
    pub mass_at_zero: f64,
}

impl TimescaleDensity {
    pub fn to_csv(&self) -> CsvTable {
        let mut table = CsvTable::new(["u", "rho"]);
        for (u, r) in self.rates.iter().zip(&self.density) {
            table.push(vec![*u, *r]);
        }
        table.comment("mass_at_zero", self.mass_at_zero);
        table
    }
}

/// Density of decay rates in `H_k(t)`, from `Im H_k` just below the
/// negative real axis, with one Richardson step in the offset.
pub fn timescale_density(k: usize, spec: &Spectrum, shape: &SystemShape, rates: &[f64], offset: f64) -> Result<TimescaleDensity> {
    let coupling = shape.coupling(spec.modes());
    let solver = ResponseSolver::new(spec, &coupling);
    let lam = spec.eigenvalues()[k];
    let sample = |u: f64, delta: f64| -> Result<f64> {
        let target = c(-u, -delta);
        let start = c(-u, -solver.far);
        let x0 = solver.solve(start)?;
        let x = solver.continue_geometric(start, target, x0)?;
        Ok((1.0 / (target + lam * x)).im / std::f64::consts::PI)
    };
    let density = rates
        .iter()
        .map(|&u| Ok(2.0 * sample(u, offset / 2.0)? - sample(u, offset)?))
        .collect::<Result<Vec<_>>>()?;
    let mass_at_zero = asymptotics::solve_r(spec, shape)?.transfer[k];
    Ok(TimescaleDensity {
        rates: rates.to_vec(),
        density,
        mass_at_zero,
    })
}
