//! One-pass SGD with fresh minibatches.
//!
//! The data response is trivial (`R1 = 1`), the batch noise is white in
//! time, and train and test loss coincide.

use num_complex::Complex64;

use crate::asymptotics;
use crate::dmft_discrete::{self, CorrelationSolver, Correlations, DataSource, Families, Responses, SolverOptions};
use crate::dmft_fourier::{Node, ResponseSolver};
use crate::error::{Result, SolveError};
use crate::io::CsvTable;
use crate::simulator::LossCurve;
use crate::spectrum::{Coupling, Spectrum, SystemShape};

#[derive(Debug, Clone)]
pub struct SgdOrderParameters {
    pub responses: Responses,
    pub correlations: Correlations,
    pub batch_size: usize,
    pub eta: f64,
}

#[derive(Debug, Clone)]
pub struct SgdSolution {
    pub order: SgdOrderParameters,
    pub loss: Vec<f64>,
    /// Loss of the noiseless (infinite batch) trajectory.
    pub bias: Vec<f64>,
    /// `loss − bias`: the contribution of minibatch sampling.
    pub variance: Vec<f64>,
}

impl SgdSolution {
    pub fn curve(&self) -> LossCurve {
        let times = (0..self.loss.len()).map(|t| t as f64).collect();
        LossCurve::single(times, self.order.correlations.train_loss(), self.loss.clone())
    }

    pub fn to_csv(&self) -> CsvTable {
        let mut table = CsvTable::new(["t", "loss", "bias_component", "variance_component"]);
        for t in 0..self.loss.len() {
            table.push(vec![t as f64, self.loss[t], self.bias[t], self.variance[t]]);
        }
        table.comment("batch_size", self.order.batch_size);
        table.comment("eta", self.order.eta);
        table
    }
}

/// Coupling for streaming data: the dataset size drops out.
pub fn online_coupling(spec: &Spectrum, shape: &SystemShape) -> Coupling {
    shape.with_dataset_size(f64::INFINITY).coupling(spec.modes())
}

fn check_batch(batch_size: usize) -> Result<f64> {
    if batch_size == 0 {
        return Err(SolveError::Invalid("batch size must be at least 1".into()));
    }
    Ok(batch_size as f64)
}

/// Time-domain solution for `steps` steps. The dataset size in `shape` is ignored.
pub fn solve_sgd_dmft(
    spec: &Spectrum,
    shape: &SystemShape,
    batch_size: usize,
    eta: f64,
    steps: usize,
    opts: &SolverOptions,
) -> Result<SgdSolution> {
    let b = check_batch(batch_size)?;
    let coupling = online_coupling(spec, shape);
    let responses = dmft_discrete::solve_responses(spec, &coupling, steps, eta)?;
    let solver = CorrelationSolver::new(&responses, spec);
    let noise_var = shape.noise_std * shape.noise_std;
    let source = DataSource::Online {
        inv_batch: 1.0 / (b * coupling.weight),
    };
    let full = solver.solve(noise_var, source, Families::ALL, opts)?;
    let clean = solver.solve(
        noise_var,
        source,
        Families {
            data: false,
            projection: true,
        },
        opts,
    )?;
    let loss = full.test_loss();
    let bias = clean.test_loss();
    let variance = loss.iter().zip(&bias).map(|(l, b)| l - b).collect();
    let diag = full.diagnostics;
    let initial = loss.first().copied().unwrap_or(0.0);
    if let Some(step) = loss.iter().position(|l| !l.is_finite() || *l > crate::simulator::DIVERGENCE_FACTOR * initial) {
        return Err(SolveError::Diverged { step, loss: loss[step] });
    }
    diag.ensure_converged()?;
    Ok(SgdSolution {
        order: SgdOrderParameters {
            responses,
            correlations: full,
            batch_size,
            eta,
        },
        loss,
        bias,
        variance,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdPlateau {
    /// Late-time loss including the label-noise floor.
    pub loss: f64,
    /// Late-time loss of the noiseless trajectory, without the noise floor.
    pub bias: f64,
    /// Excess due to minibatch sampling.
    pub variance: f64,
    /// Stationary gain from batch noise to loss; stability needs `gain/B·w < 1`.
    pub gain: f64,
}

/// Points per unit of `ln φ` in the circle integral.
const PLATEAU_DENSITY: f64 = 160.0;
const PLATEAU_PHI_MIN: f64 = 1e-10;

/// Late-time loss of one-pass SGD from the stationary balance between
/// the deterministic limit and the white minibatch noise.
pub fn sgd_asymptote(spec: &Spectrum, shape: &SystemShape, eta: f64, batch_size: usize) -> Result<SgdPlateau> {
    let b = check_batch(batch_size)?;
    if !(eta > 0.0) {
        return Err(SolveError::Invalid(format!("learning rate must be positive, got {eta}")));
    }
    let coupling = online_coupling(spec, shape);
    let noise_var = shape.noise_std * shape.noise_std;
    let det_shape = shape.with_dataset_size(f64::INFINITY).with_noise(0.0);
    let bias = asymptotics::final_loss(&asymptotics::solve_r(spec, &det_shape)?, spec, 0.0)?.c0;
    let gain = stationary_gain(spec, &coupling, eta)?;
    let inv_batch = 1.0 / (b * coupling.weight);
    let load = inv_batch * gain;
    if load >= 1.0 {
        return Err(SolveError::Singular(format!("batch-noise load {load:.3} ≥ 1, SGD does not settle")));
    }
    let c0 = (bias + load * noise_var) / (1.0 - load);
    Ok(SgdPlateau {
        loss: c0 + noise_var,
        bias,
        variance: c0 - bias,
        gain,
    })
}

/// `(1/2π) ∮ K(z, z̄) dφ` where `K` maps a unit white source on the data
/// channel to the stationary variance of `C0`.
fn stationary_gain(spec: &Spectrum, coupling: &Coupling, eta: f64) -> Result<f64> {
    let solver = ResponseSolver::new(spec, coupling);
    let w = coupling.weight;
    let inv_nu = coupling.inv_nu();
    let count = ((std::f64::consts::PI / PLATEAU_PHI_MIN).ln() * PLATEAU_DENSITY).ceil() as usize | 1;
    let (lo, hi) = (PLATEAU_PHI_MIN.ln(), std::f64::consts::PI.ln());
    let phis: Vec<f64> = (0..count).rev().map(|i| (lo + (hi - lo) * i as f64 / (count - 1) as f64).exp()).collect();
    let nodes: Vec<Node> = phis.iter().map(|&p| Node::discrete(Complex64::from_polar(1.0, p), eta, 0.0)).collect();
    let points: Vec<Complex64> = nodes.iter().map(|n| n.s).collect();
    let xs = solver.solve_chain(&points)?;
    let integrand: Vec<f64> = nodes
        .iter()
        .zip(&xs)
        .map(|(node, &x)| {
            let (_, r3) = solver.responses(node.s, x);
            let r3sq = r3.norm_sqr();
            let (mut fa, mut fb, mut ga) = (0.0, 0.0, 0.0);
            for &l in spec.eigenvalues() {
                let g = node.s / (node.s + l * x);
                let f2 = (node.step * g).norm_sqr();
                fa += w * l * f2;
                fb += w * l * l * f2;
                ga += w * l * g.norm_sqr();
            }
            r3sq * fb + inv_nu * r3sq * fa * ga / (1.0 - inv_nu * r3sq * fb)
        })
        .collect();
    // Simpson in ln φ over (φ_min, π), doubled for the lower half circle.
    let h = (hi - lo) / (count - 1) as f64;
    let mut total = 0.0;
    for (i, (v, p)) in integrand.iter().rev().zip(phis.iter().rev()).enumerate() {
        let coef = if i == 0 || i == count - 1 {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        total += coef * v * p;
    }
    let integral = total * h / 3.0;
    if !integral.is_finite() {
        return Err(SolveError::Singular("stationary gain is not finite".into()));
    }
    Ok(integral / std::f64::consts::PI)
}
