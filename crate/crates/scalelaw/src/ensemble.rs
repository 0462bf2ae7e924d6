//! Averaging predictors over independent projections (ensembling) and
//! independent datasets (bagging).
//!
//! Two members either share a projection, share a dataset, share both
//! (the same system) or share nothing. Each case is one correlation solve
//! with the unshared variance families switched off, and the averaged
//! predictor's loss is a fixed combination of the four.

use crate::dmft_discrete::{self, CorrelationSolver, DataSource, Families, SolverOptions};
use crate::dmft_fourier::ContinuousSolver;
use crate::error::{Result, SolveError};
use crate::io::CsvTable;
use crate::spectrum::{Spectrum, SystemShape};

const SAME_PROJECTION: Families = Families {
    data: false,
    projection: true,
};
const SAME_DATA: Families = Families {
    data: true,
    projection: false,
};
const SELECTIONS: [Families; 4] = [Families::ALL, SAME_PROJECTION, SAME_DATA, Families::NONE];

/// Equal-time cross-correlations `C0(t,t)` between two members, by what they share.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossCorrelations {
    pub times: Vec<f64>,
    /// Same projection and same data: the single-system `C0`.
    pub same_system: Vec<f64>,
    pub same_projection: Vec<f64>,
    pub same_data: Vec<f64>,
    /// Nothing shared: the irreducible bias `w Σ λ (w*)² H_k(t)²`.
    pub independent: Vec<f64>,
    pub noise_var: f64,
}

/// Per-time terms of the ensembled loss; the four terms sum to `loss − σ²`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSolution {
    pub ensemble: usize,
    pub bags: usize,
    pub times: Vec<f64>,
    pub loss: Vec<f64>,
    pub bias: Vec<f64>,
    pub var_init: Vec<f64>,
    pub var_data: Vec<f64>,
    pub var_inter: Vec<f64>,
}

impl EnsembleSolution {
    pub fn to_csv(&self) -> CsvTable {
        let mut table = CsvTable::new(["t", "loss_ens", "bias", "var_init", "var_data", "var_inter"]);
        for i in 0..self.times.len() {
            table.push(vec![
                self.times[i],
                self.loss[i],
                self.bias[i],
                self.var_init[i],
                self.var_data[i],
                self.var_inter[i],
            ]);
        }
        table.comment("ensemble", self.ensemble).comment("bags", self.bags);
        table
    }
}

/// Unscaled bias and variance terms at one time (`E = Bags = 1`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasVariance {
    pub bias: f64,
    pub var_init: f64,
    pub var_data: f64,
    pub var_inter: f64,
}

impl CrossCorrelations {
    /// Gradient flow, through Talbot inversion at the given times.
    pub fn continuous(spec: &Spectrum, shape: &SystemShape, times: &[f64]) -> Result<Self> {
        let solver = ContinuousSolver::new(spec, shape);
        let diags = solver.diagonals(times, &SELECTIONS)?;
        let pick = |i: usize| diags.iter().map(|d| d.c0[i]).collect::<Vec<_>>();
        Ok(Self {
            times: times.to_vec(),
            same_system: pick(0),
            same_projection: pick(1),
            same_data: pick(2),
            independent: pick(3),
            noise_var: shape.noise_std * shape.noise_std,
        })
    }

    /// Full-batch gradient descent with step `eta`, `t = 0..steps`.
    pub fn discrete(spec: &Spectrum, shape: &SystemShape, eta: f64, steps: usize, opts: &SolverOptions) -> Result<Self> {
        let coupling = shape.coupling(spec.modes());
        let resp = dmft_discrete::solve_responses(spec, &coupling, steps, eta)?;
        let solver = CorrelationSolver::new(&resp, spec);
        let noise_var = shape.noise_std * shape.noise_std;
        let mut diag = Vec::with_capacity(4);
        for f in SELECTIONS {
            let c = solver.solve(noise_var, DataSource::FullBatch, f, opts)?;
            c.diagnostics.ensure_converged()?;
            diag.push(c.c0.diagonal().iter().copied().collect::<Vec<_>>());
        }
        let mut it = diag.into_iter();
        Ok(Self {
            times: (0..steps).map(|t| t as f64).collect(),
            same_system: it.next().unwrap_or_default(),
            same_projection: it.next().unwrap_or_default(),
            same_data: it.next().unwrap_or_default(),
            independent: it.next().unwrap_or_default(),
            noise_var,
        })
    }

    pub fn bias_variance(&self, index: usize) -> BiasVariance {
        let b = self.independent[index];
        let a = self.same_projection[index];
        let d = self.same_data[index];
        BiasVariance {
            bias: b,
            var_init: a - b,
            var_data: d - b,
            var_inter: self.same_system[index] - a - d + b,
        }
    }

    /// Loss of the predictor averaged over `ensemble` projections and `bags` datasets.
    pub fn ensembled(&self, ensemble: usize, bags: usize) -> Result<EnsembleSolution> {
        if ensemble == 0 || bags == 0 {
            return Err(SolveError::Invalid("ensemble and bag counts must be at least 1".into()));
        }
        let (e, b) = (ensemble as f64, bags as f64);
        let n = self.times.len();
        let mut out = EnsembleSolution {
            ensemble,
            bags,
            times: self.times.clone(),
            loss: Vec::with_capacity(n),
            bias: Vec::with_capacity(n),
            var_init: Vec::with_capacity(n),
            var_data: Vec::with_capacity(n),
            var_inter: Vec::with_capacity(n),
        };
        for i in 0..n {
            let bv = self.bias_variance(i);
            let (vi, vd, vx) = (bv.var_init / e, bv.var_data / b, bv.var_inter / (e * b));
            out.loss.push(bv.bias + vi + vd + vx + self.noise_var);
            out.bias.push(bv.bias);
            out.var_init.push(vi);
            out.var_data.push(vd);
            out.var_inter.push(vx);
        }
        Ok(out)
    }
}

/// One cell of the fixed-compute grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WidthCell {
    pub nu: f64,
    pub ensemble: usize,
    pub loss: f64,
    pub bias: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WidthTradeoff {
    pub cells: Vec<WidthCell>,
    pub best: WidthCell,
    /// Bias does not increase with width across the grid.
    pub bias_monotone: bool,
    /// Single-model variance does not increase with width across the grid.
    pub variance_monotone: bool,
}

impl WidthTradeoff {
    pub fn to_csv(&self) -> CsvTable {
        let mut table = CsvTable::new(["nu", "E", "loss"]);
        for c in &self.cells {
            table.push(vec![c.nu, c.ensemble as f64, c.loss]);
        }
        table.comment("best_nu", self.best.nu).comment("best_E", self.best.ensemble);
        table
    }
}

/// Splits a total width `N·E` across `E` members for each `E` in
/// `ensembles` and compares the ensembled gradient-flow loss at `time`.
pub fn ensemble_vs_width(
    spec: &Spectrum,
    shape: &SystemShape,
    total_width: f64,
    ensembles: &[usize],
    time: f64,
) -> Result<WidthTradeoff> {
    if ensembles.is_empty() {
        return Err(SolveError::Invalid("no ensemble sizes given".into()));
    }
    let m = spec.modes() as f64;
    let mut cells = Vec::with_capacity(ensembles.len());
    for &e in ensembles {
        if e == 0 {
            return Err(SolveError::Invalid("ensemble size must be at least 1".into()));
        }
        let width = total_width / e as f64;
        let member = shape.with_model_size(width);
        let cross = CrossCorrelations::continuous(spec, &member, &[time])?;
        let ens = cross.ensembled(e, 1)?;
        let bv = cross.bias_variance(0);
        cells.push(WidthCell {
            nu: width / m,
            ensemble: e,
            loss: ens.loss[0],
            bias: bv.bias,
            variance: cross.same_system[0] - bv.bias,
        });
    }
    let mut by_width = cells.clone();
    by_width.sort_by(|a, b| a.nu.total_cmp(&b.nu));
    let tol = 1e-12;
    let bias_monotone = by_width.windows(2).all(|w| w[1].bias <= w[0].bias * (1.0 + tol) + tol);
    let variance_monotone = by_width.windows(2).all(|w| w[1].variance <= w[0].variance * (1.0 + tol) + tol);
    let best = *cells
        .iter()
        .min_by(|a, b| a.loss.total_cmp(&b.loss))
        .ok_or_else(|| SolveError::Invalid("empty grid".into()))?;
    Ok(WidthTradeoff {
        cells,
        best,
        bias_monotone,
        variance_monotone,
    })
}
