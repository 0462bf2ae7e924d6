//! Late-time limits, the kernel-regression limit, early-time corrections,
//! power-law exponents, and the white-spectrum closed forms.

use num_complex::Complex64;

use crate::error::{Result, SolveError};
use crate::io::CsvTable;
use crate::roots::increasing_root;
use crate::spectrum::{Coupling, Spectrum, SystemShape};

const R_BRACKET: (f64, f64) = (1e-12, 1e12);
const ROOT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    /// Fewer samples than parameters: the train loss reaches zero.
    Over,
    /// Fewer parameters than samples.
    Under,
    /// Both `N` and `P` cover every mode; all of the target is learned.
    FullRank,
}

#[derive(Debug, Clone)]
pub struct AsymptoticSolution {
    /// `+∞` on the full-rank branch.
    pub r: f64,
    pub branch: Branch,
    /// Per-mode limit `H_k(∞) = 1/(1 + λ_k r)`.
    pub transfer: Vec<f64>,
    pub coupling: Coupling,
    /// `N` was nudged off `N = P`.
    pub knife_edge: bool,
}

/// Relative nudge applied to `N` when `N = P` exactly.
pub const KNIFE_EDGE_NUDGE: f64 = 1e-6;

/// `Σ λ r / (1 + λ r)`, the number of modes effectively resolved at scale `r`.
fn resolved_modes(spec: &Spectrum, r: f64) -> f64 {
    spec.eigenvalues().iter().map(|l| l * r / (1.0 + l * r)).sum()
}

fn resolved_modes_deriv(spec: &Spectrum, r: f64) -> f64 {
    spec.eigenvalues().iter().map(|l| l / (1.0 + l * r).powi(2)).sum()
}

/// Solves `Σ λ r/(1+λ r) = target` for `r`.
pub fn solve_resolution(spec: &Spectrum, target: f64) -> Result<f64> {
    if !(target > 0.0) {
        return Err(SolveError::Invalid(format!("rank target must be positive, got {target}")));
    }
    if target >= spec.modes() as f64 {
        return Ok(f64::INFINITY);
    }
    increasing_root(
        |r| resolved_modes(spec, r) - target,
        |r| resolved_modes_deriv(spec, r),
        R_BRACKET.0,
        R_BRACKET.1,
        ROOT_TOL,
    )
    .ok_or_else(|| SolveError::Singular(format!("no resolution scale in [{:e}, {:e}] for target {target}", R_BRACKET.0, R_BRACKET.1)))
}

pub fn solve_r(spec: &Spectrum, shape: &SystemShape) -> Result<AsymptoticSolution> {
    let mut shape = *shape;
    let knife_edge = shape.model_size == shape.dataset_size && shape.model_size.is_finite();
    if knife_edge {
        shape.model_size *= 1.0 + KNIFE_EDGE_NUDGE;
    }
    let coupling = shape.coupling(spec.modes());
    let (n, p) = (shape.model_size, shape.dataset_size);
    let rank = n.min(p);
    let r = if rank.is_finite() {
        solve_resolution(spec, rank)?
    } else {
        f64::INFINITY
    };
    let branch = if r.is_infinite() {
        Branch::FullRank
    } else if n > p {
        Branch::Over
    } else {
        Branch::Under
    };
    let transfer = spec
        .eigenvalues()
        .iter()
        .map(|l| if r.is_infinite() { 0.0 } else { 1.0 / (1.0 + l * r) })
        .collect();
    Ok(AsymptoticSolution {
        r,
        branch,
        transfer,
        coupling,
        knife_edge,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinalLoss {
    pub test: f64,
    pub train: f64,
    /// Late-time `C_0`, the test loss without the noise floor.
    pub c0: f64,
    pub c1: f64,
    pub c3: f64,
}

/// Mode sums over the late-time transfer functions.
struct LimitSums {
    q1: f64,
    q2: f64,
    qw: f64,
    q2w: f64,
}

impl LimitSums {
    fn new(spec: &Spectrum, sol: &AsymptoticSolution) -> Self {
        let w = sol.coupling.weight;
        let mut s = LimitSums {
            q1: 0.0,
            q2: 0.0,
            qw: 0.0,
            q2w: 0.0,
        };
        for ((l, t), h) in spec.iter().zip(&sol.transfer) {
            let h2 = h * h;
            s.q1 += w * l * h2;
            s.q2 += w * l * l * h2;
            s.qw += w * l * t * h2;
            s.q2w += w * l * l * t * h2;
        }
        s
    }
}

fn solve2(a: [[f64; 2]; 2], b: [f64; 2]) -> Result<[f64; 2]> {
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    if det.abs() <= 1e-14 * scale * scale || !det.is_finite() {
        return Err(SolveError::Singular("late-time system is singular (interpolation threshold)".into()));
    }
    Ok([
        (b[0] * a[1][1] - a[0][1] * b[1]) / det,
        (a[0][0] * b[1] - a[1][0] * b[0]) / det,
    ])
}

/// Late-time test and train loss from the reduced linear system of each branch.
pub fn final_loss(sol: &AsymptoticSolution, spec: &Spectrum, noise_std: f64) -> Result<FinalLoss> {
    let c = &sol.coupling;
    let var = noise_std * noise_std;
    let (ia, inu) = (c.inv_alpha(), c.inv_nu());
    let out = match sol.branch {
        Branch::FullRank => {
            let load = c.inv_p * spec.modes() as f64;
            if load >= 1.0 {
                return Err(SolveError::Singular("late-time system is singular (P = M)".into()));
            }
            let c0 = load * var / (1.0 - load);
            let r1 = 1.0 - load;
            let c1 = r1 * r1 * (c0 + var);
            FinalLoss {
                test: c0 + var,
                train: c1,
                c0,
                c1,
                c3: 0.0,
            }
        }
        Branch::Over => {
            let q = LimitSums::new(spec, sol);
            let r3 = 1.0 - c.inv_n / c.inv_p;
            let rho = sol.r / r3;
            let k = ia * r3 * r3 * q.q2 * rho * rho;
            let [c0, c3] = solve2(
                [
                    [1.0 - k, -inu * q.q1],
                    [-ia * r3 * r3 * q.q1 * rho * rho, 1.0 - r3 * r3 * rho * rho * inu * q.q2],
                ],
                [q.qw + k * var, r3 * r3 * rho * rho * (q.q2w + ia * q.q1 * var)],
            )?;
            FinalLoss {
                test: c0 + var,
                train: 0.0,
                c0,
                c1: 0.0,
                c3,
            }
        }
        Branch::Under => {
            let q = LimitSums::new(spec, sol);
            let r1 = 1.0 - c.inv_p / c.inv_n;
            let rho = sol.r / r1;
            let r1sq = r1 * r1;
            let [c0, c3] = solve2(
                [
                    [1.0 - ia * rho * rho * q.q2 * r1sq, -inu * q.q1],
                    [-rho * rho * ia * q.q1 * r1sq, 1.0 - rho * rho * r1sq * inu * q.q2],
                ],
                [
                    q.qw + ia * rho * rho * q.q2 * r1sq * var,
                    rho * rho * (ia * q.q1 * r1sq * var + r1sq * q.q2w),
                ],
            )?;
            let c1 = r1sq * (c0 + var);
            FinalLoss {
                test: c0 + var,
                train: c1,
                c0,
                c1,
                c3,
            }
        }
    };
    if out.c0 < -1e-12 * out.test.abs() || !out.test.is_finite() {
        return Err(SolveError::Singular(format!("late-time loss is unphysical ({})", out.test)));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelLimit {
    pub kappa: f64,
    pub gamma: f64,
    /// Test loss including the noise floor.
    pub loss: f64,
}

/// Ridgeless regression on the full features (`N = ∞`) with `P` samples.
pub fn kernel_regression_limit(spec: &Spectrum, dataset_size: f64, noise_std: f64, limit: crate::LimitMode) -> Result<KernelLimit> {
    let shape = SystemShape::new(f64::INFINITY, dataset_size, noise_std, limit)?;
    let sol = solve_r(spec, &shape)?;
    let c = sol.coupling;
    let var = noise_std * noise_std;
    let (kappa, gamma, bias) = if sol.r.is_infinite() {
        (0.0, c.inv_p * spec.modes() as f64, 0.0)
    } else {
        let q = LimitSums::new(spec, &sol);
        (1.0 / (c.inv_alpha() * sol.r), c.inv_alpha() * sol.r * sol.r * q.q2, q.qw)
    };
    if gamma >= 1.0 {
        return Err(SolveError::Singular("kernel limit at the interpolation threshold".into()));
    }
    Ok(KernelLimit {
        kappa,
        gamma,
        loss: (bias + gamma * var) / (1.0 - gamma) + var,
    })
}

/// First-order finite-size correction to `H_k(t)` at early times.
pub fn early_time_transfer(eigenvalue: f64, t: f64, spec: &Spectrum, coupling: &Coupling) -> f64 {
    let mean = coupling.weight * spec.eigenvalues().iter().sum::<f64>();
    let lt = eigenvalue * t;
    let decay = (-lt).exp();
    decay + mean * (coupling.inv_alpha() + coupling.inv_nu()) / eigenvalue * (1.0 - decay - lt * decay)
}

/// Loss with `N = P = ∞`: `w Σ λ (w*)² e^{−2λt}`.
pub fn infinite_size_loss(spec: &Spectrum, weight: f64, t: f64) -> f64 {
    weight * spec.iter().map(|(l, w2)| l * w2 * (-2.0 * l * t).exp()).sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingReport {
    pub time: f64,
    pub model: f64,
    pub data: f64,
    /// `min(a−1, 2b)`.
    pub bottleneck: f64,
    pub compute_model: f64,
    pub compute_time: f64,
    pub compute_loss: f64,
    /// The `2b` branch of the minimum is active.
    pub easy_task: bool,
}

fn check_exponents(a: f64, b: f64) -> Result<()> {
    if !(a > 1.0 && b > 0.0) {
        return Err(SolveError::Invalid(format!("need a > 1 and b > 0, got a={a}, b={b}")));
    }
    Ok(())
}

pub fn bottleneck_exponents(a: f64, b: f64) -> Result<ScalingReport> {
    compute_optimal(a, b)
}

pub fn compute_optimal(a: f64, b: f64) -> Result<ScalingReport> {
    check_exponents(a, b)?;
    let m = (a - 1.0).min(2.0 * b);
    let denom = a - 1.0 + b * m;
    Ok(ScalingReport {
        time: (a - 1.0) / b,
        model: m,
        data: m,
        bottleneck: m,
        compute_model: (a - 1.0) / denom,
        compute_time: b * m / denom,
        compute_loss: (a - 1.0) * m / denom,
        easy_task: 2.0 * b < a - 1.0,
    })
}

impl ScalingReport {
    pub fn to_csv(&self) -> CsvTable {
        let mut table = CsvTable::new(["quantity", "exponent", "source"]);
        // Source 0 marks closed-form continuum exponents.
        for (i, v) in [
            self.time,
            self.model,
            self.data,
            self.compute_model,
            self.compute_time,
            self.compute_loss,
        ]
        .into_iter()
        .enumerate()
        {
            table.push(vec![i as f64, v, 0.0]);
        }
        table.comment("quantity_codes", "0=time;1=model;2=data;3=compute_model;4=compute_time;5=compute_loss");
        table.comment("source_codes", "0=continuum;1=fit");
        table
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerLawFit {
    pub exponent: f64,
    pub prefactor: f64,
    pub r_squared: f64,
    pub points: usize,
}

/// Least squares of `log y` on `log x` over points with `x ∈ [lo, hi]`.
pub fn fit_power_law(x: &[f64], y: &[f64], window: (f64, f64)) -> Result<PowerLawFit> {
    if x.len() != y.len() {
        return Err(SolveError::Invalid("x and y lengths differ".into()));
    }
    let mut pts = Vec::new();
    for (&xi, &yi) in x.iter().zip(y) {
        if xi < window.0 || xi > window.1 {
            continue;
        }
        if !(xi > 0.0 && yi > 0.0) {
            return Err(SolveError::Invalid(format!("nonpositive value in fit window at x={xi}, y={yi}")));
        }
        pts.push((xi.ln(), yi.ln()));
    }
    if pts.len() < 8 {
        return Err(SolveError::Invalid(format!("{} points in fit window, need at least 8", pts.len())));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(SolveError::Invalid("all x values in the window coincide".into()));
    }
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(PowerLawFit {
        exponent: slope,
        prefactor: (my - slope * mx).exp(),
        r_squared,
        points: pts.len(),
    })
}

/// One `(N, t, loss)` sample of a loss surface.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfacePoint {
    pub model_size: f64,
    pub time: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrontierPoint {
    pub compute: f64,
    pub loss: f64,
    pub model_size: f64,
    pub time: f64,
}

/// Log-spaced grid with `n` points spanning `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

/// Minimum loss over model sizes at each compute `C = N t`. Each size's
/// curve is interpolated log-log in time; compute values no curve reaches
/// are skipped.
pub fn pareto_frontier(surface: &[SurfacePoint], compute: &[f64]) -> Vec<FrontierPoint> {
    let mut sizes: Vec<f64> = surface.iter().map(|p| p.model_size).collect();
    sizes.sort_by(f64::total_cmp);
    sizes.dedup();
    let curves: Vec<(f64, Vec<(f64, f64)>)> = sizes
        .into_iter()
        .map(|n| {
            let mut pts: Vec<(f64, f64)> = surface
                .iter()
                .filter(|p| p.model_size == n && p.time > 0.0 && p.loss > 0.0)
                .map(|p| (p.time, p.loss))
                .collect();
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            (n, pts)
        })
        .collect();
    let mut out = Vec::new();
    for &c in compute {
        let mut best: Option<FrontierPoint> = None;
        for (n, pts) in &curves {
            let t = c / n;
            let Some(loss) = loglog_interp(pts, t) else { continue };
            if best.is_none_or(|b| loss < b.loss) {
                best = Some(FrontierPoint {
                    compute: c,
                    loss,
                    model_size: *n,
                    time: t,
                });
            }
        }
        out.extend(best);
    }
    out
}

fn loglog_interp(pts: &[(f64, f64)], t: f64) -> Option<f64> {
    let first = pts.first()?;
    let last = pts.last()?;
    if t < first.0 || t > last.0 {
        return None;
    }
    let i = pts.partition_point(|p| p.0 < t);
    if i == 0 || pts[i].0 == t {
        return Some(pts[i].1);
    }
    let (t0, l0) = pts[i - 1];
    let (t1, l1) = pts[i];
    let f = (t.ln() - t0.ln()) / (t1.ln() - t0.ln());
    Some((l0.ln() + f * (l1.ln() - l0.ln())).exp())
}

pub fn frontier_csv(points: &[FrontierPoint]) -> CsvTable {
    let mut table = CsvTable::new(["C", "loss_star", "N_star", "t_star"]);
    for p in points {
        table.push(vec![p.compute, p.loss, p.model_size, p.time]);
    }
    table
}

/// Closed-form responses for a white spectrum (all `λ = 1`, unit target).
pub mod white {
    use super::*;

    /// Roots of `c3 y³ + c2 y² + c1 y + c0`, dropping vanishing leading terms.
    pub fn polynomial_roots(c3: Complex64, c2: Complex64, c1: Complex64, c0: Complex64) -> Vec<Complex64> {
        let scale = c2.norm().max(c1.norm()).max(c0.norm());
        if c3.norm() > 1e-14 * scale {
            return cubic_roots(c2 / c3, c1 / c3, c0 / c3);
        }
        if c2.norm() > 1e-14 * scale {
            let disc = (c1 * c1 - 4.0 * c2 * c0).sqrt();
            let q = -0.5 * (c1 + if (c1.conj() * disc).re >= 0.0 { disc } else { -disc });
            return vec![q / c2, c0 / q];
        }
        vec![-c0 / c1]
    }

    /// Roots of the monic cubic `y³ + a y² + b y + c` by Cardano, Newton-polished.
    fn cubic_roots(a: Complex64, b: Complex64, c: Complex64) -> Vec<Complex64> {
        let p = b - a * a / 3.0;
        let q = 2.0 * a * a * a / 27.0 - a * b / 3.0 + c;
        let disc = (q * q / 4.0 + p * p * p / 27.0).sqrt();
        let mut u3 = -q / 2.0 + disc;
        if u3.norm() < (-q / 2.0 - disc).norm() {
            u3 = -q / 2.0 - disc;
        }
        let u = u3.powf(1.0 / 3.0);
        let omega = Complex64::new(-0.5, 3f64.sqrt() / 2.0);
        let mut roots = Vec::with_capacity(3);
        let mut uk = u;
        for _ in 0..3 {
            let t = if uk.norm() == 0.0 { Complex64::new(0.0, 0.0) } else { uk - p / (3.0 * uk) };
            roots.push(t - a / 3.0);
            uk *= omega;
        }
        for y in &mut roots {
            for _ in 0..3 {
                let f = ((*y + a) * *y + b) * *y + c;
                let df = (3.0 * *y + 2.0 * a) * *y + b;
                if df.norm() == 0.0 {
                    break;
                }
                *y -= f / df;
            }
        }
        roots
    }

    /// Candidate values of `y = x/(s+x)` with `x = R1 R3`, from
    /// `(1−y)(1−y/α)(1−y/ν) = s y`.
    pub fn candidates(s: Complex64, inv_alpha: f64, inv_nu: f64) -> Vec<Complex64> {
        let (a, n) = (inv_alpha, inv_nu);
        let one = Complex64::new(1.0, 0.0);
        polynomial_roots(
            Complex64::new(-a * n, 0.0),
            Complex64::new(a * n + a + n, 0.0),
            -(one * (1.0 + a + n) + s),
            one,
        )
    }

    /// `(R1, R3)` at complex frequency `s`, following the root that vanishes
    /// as `|s| → ∞` along the ray through `s`.
    pub fn responses(s: Complex64, inv_alpha: f64, inv_nu: f64) -> (Complex64, Complex64) {
        let far = 1e8_f64.max(100.0 * (1.0 + inv_alpha + inv_nu));
        let steps = 80;
        let start = s * (far / s.norm()).max(1.0);
        let ratio = (s.norm() / start.norm()).powf(1.0 / steps as f64);
        let mut y = Complex64::new(0.0, 0.0);
        let mut point = start;
        for i in 0..=steps {
            let roots = candidates(point, inv_alpha, inv_nu);
            y = if i == 0 {
                *roots.iter().min_by(|a, b| a.norm().total_cmp(&b.norm())).unwrap()
            } else {
                *roots.iter().min_by(|a, b| (*a - y).norm().total_cmp(&(*b - y).norm())).unwrap()
            };
            point = if i + 1 == steps { s } else { point * ratio };
        }
        (1.0 - y * inv_alpha, 1.0 - y * inv_nu)
    }

    /// `R3` for `P = ∞` from the quadratic `R² − (1 − 1/ν − s) R − s = 0`.
    pub fn response_infinite_data(s: Complex64, inv_nu: f64) -> Complex64 {
        let b = 1.0 - inv_nu - s;
        let disc = (b * b + 4.0 * s).sqrt();
        let (r1, r2) = ((b + disc) / 2.0, (b - disc) / 2.0);
        // The physical root tends to 1 at large |s|; pick it by the ray continuation.
        let (_, r3) = responses(s, 0.0, inv_nu);
        if (r1 - r3).norm() <= (r2 - r3).norm() {
            r1
        } else {
            r2
        }
    }

    /// `H(τ)` for `ν ≪ 1` with infinite data.
    pub fn transfer_small_width(nu: f64, tau: f64) -> f64 {
        (1.0 - nu) + nu * (-tau / nu).exp()
    }

    /// `H(τ)` for `ν > 1` with infinite data.
    pub fn transfer_large_width(nu: f64, tau: f64) -> f64 {
        (-tau).exp() * (tau / nu.sqrt()).cosh()
    }

    /// Marchenko–Pastur density of `ΨᵀΨ/P` for `M/P = ratio < 1`.
    pub fn marchenko_pastur(ratio: f64, u: f64) -> f64 {
        let lo = (1.0 - ratio.sqrt()).powi(2);
        let hi = (1.0 + ratio.sqrt()).powi(2);
        if u <= lo || u >= hi {
            return 0.0;
        }
        ((hi - u) * (u - lo)).sqrt() / (2.0 * std::f64::consts::PI * ratio * u)
    }
}
