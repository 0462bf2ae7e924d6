//! Direct simulation of the random-projection model.
//!
//! The residual `v⁰ = w* − Aᵀw/√N` is evolved by the actual optimizer;
//! losses are read off exactly as the mean-field solvers define them.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, SolveError};
use crate::io::CsvTable;
use crate::spectrum::{Coupling, Spectrum, SystemShape};

/// Default cap on disorder storage, in bytes.
pub const DEFAULT_MEMORY_BUDGET: usize = 2 << 30;

/// Test loss above this multiple of the initial loss counts as divergence.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

#[derive(Debug, Clone)]
pub struct Disorder {
    /// `N×M`, i.i.d. standard normal.
    pub projection: DMatrix<f64>,
    /// `P×M`, column `k` has variance `λ_k`.
    pub design: DMatrix<f64>,
    /// Length `P`, i.i.d. standard normal.
    pub label_noise: DVector<f64>,
    pub seed: u64,
}

fn finite_size(x: f64, what: &str) -> Result<usize> {
    if x.is_finite() && x >= 1.0 && x.fract() == 0.0 {
        Ok(x as usize)
    } else {
        Err(SolveError::Invalid(format!("{what} must be a finite positive integer, got {x}")))
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, col_std: &[f64]) -> DMatrix<f64> {
    // Fill row by row so the stream order does not depend on storage layout.
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            let z: f64 = StandardNormal.sample(rng);
            m[(i, j)] = z * col_std[j];
        }
    }
    m
}

pub fn draw_disorder(shape: &SystemShape, spec: &Spectrum, seed: u64) -> Result<Disorder> {
    draw_disorder_with_budget(shape, spec, seed, DEFAULT_MEMORY_BUDGET)
}

pub fn draw_disorder_with_budget(shape: &SystemShape, spec: &Spectrum, seed: u64, budget: usize) -> Result<Disorder> {
    let n = finite_size(shape.model_size, "model size N")?;
    let p = finite_size(shape.dataset_size, "dataset size P")?;
    let m = spec.modes();
    let bytes = (n * m + p * m + p).saturating_mul(8);
    if bytes > budget {
        return Err(SolveError::Invalid(format!(
            "disorder needs {bytes} bytes, over the {budget}-byte budget"
        )));
    }
    let mut rng = rng(seed);
    let unit = vec![1.0; m];
    let std: Vec<f64> = spec.eigenvalues().iter().map(|l| l.sqrt()).collect();
    let projection = normal_matrix(&mut rng, n, m, &unit);
    let design = normal_matrix(&mut rng, p, m, &std);
    let label_noise = DVector::from_fn(p, |_, _| StandardNormal.sample(&mut rng));
    Ok(Disorder {
        projection,
        design,
        label_noise,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    GradientFlowExact,
    DiscreteGd,
    DiscreteGdMomentum,
    OnePassSgd,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Number of recorded time points, `t = 0..steps`.
    pub steps: usize,
}

impl OptimizerConfig {
    pub fn gd(learning_rate: f64, steps: usize) -> Self {
        Self {
            kind: OptimizerKind::DiscreteGd,
            learning_rate,
            momentum: 0.0,
            batch_size: 1,
            steps,
        }
    }

    pub fn momentum(learning_rate: f64, momentum: f64, steps: usize) -> Self {
        Self {
            kind: OptimizerKind::DiscreteGdMomentum,
            momentum,
            ..Self::gd(learning_rate, steps)
        }
    }

    pub fn sgd(learning_rate: f64, batch_size: usize, steps: usize) -> Self {
        Self {
            kind: OptimizerKind::OnePassSgd,
            batch_size,
            ..Self::gd(learning_rate, steps)
        }
    }

    /// `0.5 / λ_1`, the flow-like default step.
    pub fn default_learning_rate(spec: &Spectrum) -> f64 {
        0.5 / spec.top_eigenvalue()
    }
}

/// Train and test loss over time, optionally with cross-seed spread.
#[derive(Debug, Clone, PartialEq)]
pub struct LossCurve {
    pub times: Vec<f64>,
    pub train_loss: Vec<f64>,
    pub test_loss: Vec<f64>,
    pub std_train: Option<Vec<f64>>,
    pub std_test: Option<Vec<f64>>,
    pub samples: usize,
}

impl LossCurve {
    pub fn single(times: Vec<f64>, train_loss: Vec<f64>, test_loss: Vec<f64>) -> Self {
        Self {
            times,
            train_loss,
            test_loss,
            std_train: None,
            std_test: None,
            samples: 1,
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Cross-seed standard error of the mean test loss.
    pub fn stderr_test(&self) -> Option<Vec<f64>> {
        let n = (self.samples as f64).sqrt();
        self.std_test.as_ref().map(|s| s.iter().map(|v| v / n).collect())
    }

    pub fn stderr_train(&self) -> Option<Vec<f64>> {
        let n = (self.samples as f64).sqrt();
        self.std_train.as_ref().map(|s| s.iter().map(|v| v / n).collect())
    }

    /// Mean and sample standard deviation over runs sharing one time grid.
    pub fn aggregate(runs: &[LossCurve]) -> Result<LossCurve> {
        let first = runs
            .first()
            .ok_or_else(|| SolveError::Invalid("no runs to aggregate".into()))?;
        let t = first.len();
        if runs.iter().any(|r| r.len() != t) {
            return Err(SolveError::Invalid("runs have different lengths".into()));
        }
        let n = runs.len() as f64;
        let stats = |pick: fn(&LossCurve) -> &Vec<f64>| {
            let mean: Vec<f64> = (0..t).map(|i| runs.iter().map(|r| pick(r)[i]).sum::<f64>() / n).collect();
            let std: Vec<f64> = (0..t)
                .map(|i| {
                    if runs.len() < 2 {
                        return 0.0;
                    }
                    let ss: f64 = runs.iter().map(|r| (pick(r)[i] - mean[i]).powi(2)).sum();
                    (ss / (n - 1.0)).sqrt()
                })
                .collect();
            (mean, std)
        };
        let (train, std_train) = stats(|r| &r.train_loss);
        let (test, std_test) = stats(|r| &r.test_loss);
        Ok(LossCurve {
            times: first.times.clone(),
            train_loss: train,
            test_loss: test,
            std_train: Some(std_train),
            std_test: Some(std_test),
            samples: runs.len(),
        })
    }

    pub fn to_csv(&self) -> CsvTable {
        let mut table = CsvTable::new(["t", "train_loss", "test_loss", "std_train", "std_test"]);
        let zeros = vec![0.0; self.len()];
        let st = self.std_train.as_ref().unwrap_or(&zeros);
        let se = self.std_test.as_ref().unwrap_or(&zeros);
        for i in 0..self.len() {
            table.push(vec![self.times[i], self.train_loss[i], self.test_loss[i], st[i], se[i]]);
        }
        table.comment("samples", self.samples);
        table
    }
}

/// Quantities shared by every stepping routine.
struct Model<'a> {
    spec: &'a Spectrum,
    coupling: Coupling,
    scale: f64,
    sigma: f64,
}

impl<'a> Model<'a> {
    fn new(spec: &'a Spectrum, shape: &SystemShape) -> Self {
        let coupling = shape.coupling(spec.modes());
        Self {
            spec,
            coupling,
            scale: coupling.feature_scale(),
            sigma: shape.noise_std,
        }
    }

    fn init(&self) -> DVector<f64> {
        DVector::from_iterator(self.spec.modes(), self.spec.target_weights_sq().iter().map(|w| w.sqrt()))
    }

    fn test_loss(&self, v: &DVector<f64>) -> f64 {
        let s: f64 = self.spec.eigenvalues().iter().zip(v.iter()).map(|(l, x)| l * x * x).sum();
        self.coupling.weight * s + self.sigma * self.sigma
    }

    /// `v¹ = sΨv⁰ + σε`.
    fn residual(&self, design: &DMatrix<f64>, noise: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let mut r = design * v;
        r *= self.scale;
        r.axpy(self.sigma, noise, 1.0);
        r
    }

    /// `(1/N) AᵀA (1/(B s)) Ψᵀ v¹`.
    fn update(&self, projection: &DMatrix<f64>, design: &DMatrix<f64>, v1: &DVector<f64>) -> DVector<f64> {
        let rows = design.nrows() as f64;
        let n = projection.nrows() as f64;
        let g = design.tr_mul(v1) / (rows * self.scale);
        let h = projection * g;
        projection.tr_mul(&h) / n
    }
}

fn check_divergence(step: usize, loss: f64, initial: f64) -> Result<()> {
    if !loss.is_finite() || loss > DIVERGENCE_FACTOR * initial {
        return Err(SolveError::Diverged { step, loss });
    }
    Ok(())
}

/// Full-batch gradient descent, with heavy-ball momentum for `DiscreteGdMomentum`.
pub fn run_discrete_gd(d: &Disorder, spec: &Spectrum, shape: &SystemShape, opt: &OptimizerConfig) -> Result<LossCurve> {
    let mu = match opt.kind {
        OptimizerKind::DiscreteGd => 0.0,
        OptimizerKind::DiscreteGdMomentum => opt.momentum,
        other => return Err(SolveError::Invalid(format!("run_discrete_gd cannot run {other:?}"))),
    };
    let model = Model::new(spec, shape);
    let mut v = model.init();
    let mut velocity = DVector::zeros(v.len());
    let p = d.design.nrows() as f64;
    let mut train = Vec::with_capacity(opt.steps);
    let mut test = Vec::with_capacity(opt.steps);
    let initial = model.test_loss(&v);
    for step in 0..opt.steps {
        let v1 = model.residual(&d.design, &d.label_noise, &v);
        train.push(v1.norm_squared() / p);
        let loss = model.test_loss(&v);
        check_divergence(step, loss, initial)?;
        test.push(loss);
        if step + 1 == opt.steps {
            break;
        }
        let upd = model.update(&d.projection, &d.design, &v1);
        velocity *= mu;
        velocity.axpy(-opt.learning_rate, &upd, 1.0);
        v += &velocity;
    }
    let times = (0..opt.steps).map(|t| t as f64).collect();
    Ok(LossCurve::single(times, train, test))
}

/// Closed-form gradient flow through the eigendecomposition of the `N×N`
/// matrix `K = (1/N) A (1/P ΨᵀΨ) Aᵀ`. Infinite times give the converged
/// (minimum-norm) solution.
pub fn run_gradient_flow_exact(d: &Disorder, spec: &Spectrum, shape: &SystemShape, times: &[f64]) -> Result<LossCurve> {
    let model = Model::new(spec, shape);
    let v0 = model.init();
    let n = d.projection.nrows() as f64;
    let p = d.design.nrows() as f64;
    let sqrt_n = n.sqrt();
    // L = Aᵀ/√N, K = Lᵀ S L with S = ΨᵀΨ/P.
    let x = &d.design * d.projection.transpose() / sqrt_n;
    let k = x.tr_mul(&x) / p;
    let eig = k.symmetric_eigen();
    let q = &eig.eigenvectors;
    let evals = &eig.eigenvalues;
    let cutoff = evals.iter().fold(0.0f64, |a, &b| a.max(b.abs())) * 1e-12;
    let ls_v0 = x.tr_mul(&(&d.design * &v0)) / p;
    let noise_grad = x.tr_mul(&d.label_noise) * (model.sigma / (p * model.scale));
    let a = q.tr_mul(&ls_v0);
    let b = q.tr_mul(&noise_grad);
    let mut train = Vec::with_capacity(times.len());
    let mut test = Vec::with_capacity(times.len());
    for &t in times {
        let coef = DVector::from_fn(evals.len(), |i, _| {
            let lam = evals[i];
            if lam <= cutoff {
                if t.is_finite() {
                    -t * (a[i] + b[i])
                } else {
                    0.0
                }
            } else {
                let decay = if t.is_finite() { (-t * lam).exp() } else { 0.0 };
                ((decay - 1.0) * a[i] - (1.0 - decay) * b[i]) / lam
            }
        });
        let v = &v0 + d.projection.tr_mul(&(q * coef)) / sqrt_n;
        let v1 = model.residual(&d.design, &d.label_noise, &v);
        train.push(v1.norm_squared() / p);
        test.push(model.test_loss(&v));
    }
    Ok(LossCurve::single(times.to_vec(), train, test))
}

/// One-pass SGD: the projection is fixed, each step draws a fresh batch.
pub fn run_one_pass_sgd(spec: &Spectrum, shape: &SystemShape, opt: &OptimizerConfig, seed: u64) -> Result<LossCurve> {
    if opt.kind != OptimizerKind::OnePassSgd {
        return Err(SolveError::Invalid(format!("run_one_pass_sgd cannot run {:?}", opt.kind)));
    }
    if opt.batch_size == 0 {
        return Err(SolveError::Invalid("batch size must be at least 1".into()));
    }
    let n = finite_size(shape.model_size, "model size N")?;
    let m = spec.modes();
    let model = Model::new(spec, shape);
    let mut rng = rng(seed);
    let unit = vec![1.0; m];
    let std: Vec<f64> = spec.eigenvalues().iter().map(|l| l.sqrt()).collect();
    let projection = normal_matrix(&mut rng, n, m, &unit);
    let mut v = model.init();
    let initial = model.test_loss(&v);
    let b = opt.batch_size;
    let mut train = Vec::with_capacity(opt.steps);
    let mut test = Vec::with_capacity(opt.steps);
    for step in 0..opt.steps {
        let design = normal_matrix(&mut rng, b, m, &std);
        let noise = DVector::from_fn(b, |_, _| StandardNormal.sample(&mut rng));
        let v1 = model.residual(&design, &noise, &v);
        train.push(v1.norm_squared() / b as f64);
        let loss = model.test_loss(&v);
        check_divergence(step, loss, initial)?;
        test.push(loss);
        if step + 1 < opt.steps {
            let upd = model.update(&projection, &design, &v1);
            v.axpy(-opt.learning_rate, &upd, 1.0);
        }
    }
    let times = (0..opt.steps).map(|t| t as f64).collect();
    Ok(LossCurve::single(times, train, test))
}

/// Trains `ensemble × bags` full-batch GD systems (independent projections
/// across the ensemble, independent datasets across bags) and reports the
/// loss of the averaged residual. The train column holds the mean member train loss.
pub fn run_ensemble_bag(
    spec: &Spectrum,
    shape: &SystemShape,
    opt: &OptimizerConfig,
    ensemble: usize,
    bags: usize,
    seed: u64,
) -> Result<LossCurve> {
    if ensemble == 0 || bags == 0 {
        return Err(SolveError::Invalid("ensemble and bag counts must be at least 1".into()));
    }
    let n = finite_size(shape.model_size, "model size N")?;
    let p = finite_size(shape.dataset_size, "dataset size P")?;
    let m = spec.modes();
    let model = Model::new(spec, shape);
    let mut rng = rng(seed);
    let unit = vec![1.0; m];
    let std: Vec<f64> = spec.eigenvalues().iter().map(|l| l.sqrt()).collect();
    let projections: Vec<DMatrix<f64>> = (0..ensemble).map(|_| normal_matrix(&mut rng, n, m, &unit)).collect();
    let datasets: Vec<(DMatrix<f64>, DVector<f64>)> = (0..bags)
        .map(|_| {
            let design = normal_matrix(&mut rng, p, m, &std);
            let noise = DVector::from_fn(p, |_, _| StandardNormal.sample(&mut rng));
            (design, noise)
        })
        .collect();
    let steps = opt.steps;
    let members = (ensemble * bags) as f64;
    let mut mean_v = vec![DVector::zeros(m); steps];
    let mut train = vec![0.0; steps];
    for a in &projections {
        for (design, noise) in &datasets {
            let d = Disorder {
                projection: a.clone(),
                design: design.clone(),
                label_noise: noise.clone(),
                seed,
            };
            let mut v = model.init();
            let initial = model.test_loss(&v);
            for step in 0..steps {
                let v1 = model.residual(&d.design, &d.label_noise, &v);
                train[step] += v1.norm_squared() / p as f64 / members;
                check_divergence(step, model.test_loss(&v), initial)?;
                mean_v[step].axpy(1.0 / members, &v, 1.0);
                if step + 1 < steps {
                    let upd = model.update(&d.projection, &d.design, &v1);
                    v.axpy(-opt.learning_rate, &upd, 1.0);
                }
            }
        }
    }
    let test = mean_v.iter().map(|v| model.test_loss(v)).collect();
    let times = (0..steps).map(|t| t as f64).collect();
    Ok(LossCurve::single(times, train, test))
}

/// Runs `f` once per seed and aggregates mean and spread, ordered by seed.
pub fn over_seeds<F>(seeds: &[u64], f: F) -> Result<LossCurve>
where
    F: Fn(u64) -> Result<LossCurve>,
{
    let runs = seeds.iter().map(|&s| f(s)).collect::<Result<Vec<_>>>()?;
    LossCurve::aggregate(&runs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectrum::LimitMode;

    fn shape(n: f64, p: f64, sigma: f64) -> SystemShape {
        SystemShape::new(n, p, sigma, LimitMode::Proportional).unwrap()
    }

    #[test]
    fn disorder_is_reproducible() {
        let spec = Spectrum::power_law(1.5, 1.0, 6).unwrap();
        let s = shape(4.0, 5.0, 0.0);
        let a = draw_disorder(&s, &spec, 7).unwrap();
        let b = draw_disorder(&s, &spec, 7).unwrap();
        let c = draw_disorder(&s, &spec, 8).unwrap();
        assert_eq!(a.projection, b.projection);
        assert_eq!(a.design, b.design);
        assert_ne!(a.projection, c.projection);
    }

    #[test]
    fn design_column_variance() {
        let spec = Spectrum::new(vec![4.0], vec![1.0]).unwrap();
        let p = 10_000.0;
        let d = draw_disorder(&shape(1.0, p, 0.0), &spec, 3).unwrap();
        let col = d.design.column(0);
        let var = col.iter().map(|x| x * x).sum::<f64>() / p;
        // Standard error of a variance estimate is √(2/P)·σ².
        assert!((var - 4.0).abs() < 5.0 * (2.0 / p).sqrt() * 4.0);
    }

    #[test]
    fn memory_budget_enforced() {
        let spec = Spectrum::white(1000).unwrap();
        let r = draw_disorder_with_budget(&shape(1000.0, 1000.0, 0.0), &spec, 1, 1024);
        assert!(matches!(r, Err(SolveError::Invalid(_))));
    }

    #[test]
    fn degenerate_disorder_is_scalar_recursion() {
        // A = √N·I, Ψ = √P·I with N = M = P, white spectrum.
        let m = 5;
        let spec = Spectrum::white(m).unwrap();
        let s = shape(m as f64, m as f64, 0.0);
        let root = (m as f64).sqrt();
        let d = Disorder {
            projection: DMatrix::identity(m, m) * root,
            design: DMatrix::identity(m, m) * root,
            label_noise: DVector::zeros(m),
            seed: 0,
        };
        let eta = 0.5;
        let curve = run_discrete_gd(&d, &spec, &s, &OptimizerConfig::gd(eta, 10)).unwrap();
        for (t, l) in curve.test_loss.iter().enumerate() {
            let want = (1.0 - eta).powi(2 * t as i32);
            assert!((l - want).abs() < 1e-12, "{l} vs {want}");
        }
    }

    #[test]
    fn initial_loss_includes_noise() {
        let spec = Spectrum::power_law(2.0, 1.0, 8).unwrap();
        let s = shape(6.0, 7.0, 0.3);
        let d = draw_disorder(&s, &spec, 1).unwrap();
        let c = run_discrete_gd(&d, &spec, &s, &OptimizerConfig::gd(0.1, 3)).unwrap();
        assert!((c.test_loss[0] - (spec.target_power() / 8.0 + 0.09)).abs() < 1e-14);
        let f = run_gradient_flow_exact(&d, &spec, &s, &[0.0]).unwrap();
        assert!((f.test_loss[0] - c.test_loss[0]).abs() < 1e-12);
    }

    #[test]
    fn full_rank_flow_learns_everything() {
        let spec = Spectrum::power_law(1.5, 0.5, 10).unwrap();
        let s = shape(20.0, 30.0, 0.0);
        let d = draw_disorder(&s, &spec, 2).unwrap();
        let c = run_gradient_flow_exact(&d, &spec, &s, &[f64::INFINITY]).unwrap();
        assert!(c.test_loss[0] < 1e-20);
    }

    #[test]
    fn flow_agrees_with_small_step_gd() {
        let spec = Spectrum::power_law(1.5, 1.0, 12).unwrap();
        let s = shape(8.0, 9.0, 0.2);
        let d = draw_disorder(&s, &spec, 5).unwrap();
        let horizon = 2.0;
        let flow = run_gradient_flow_exact(&d, &spec, &s, &[horizon]).unwrap().test_loss[0];
        let err = |eta: f64| {
            let steps = (horizon / eta).round() as usize + 1;
            let c = run_discrete_gd(&d, &spec, &s, &OptimizerConfig::gd(eta, steps)).unwrap();
            (c.test_loss[steps - 1] - flow).abs()
        };
        let (e1, e2) = (err(0.02), err(0.01));
        assert!(e2 < e1 && e1 / e2 > 1.6 && e1 / e2 < 2.4, "{e1} {e2}");
    }

    #[test]
    fn sgd_and_ensemble_degenerate_cases() {
        let spec = Spectrum::power_law(1.5, 1.0, 6).unwrap();
        let s = shape(4.0, 5.0, 0.0);
        let opt = OptimizerConfig::sgd(0.1, 3, 4);
        let c = run_one_pass_sgd(&spec, &s, &opt, 1).unwrap();
        assert!((c.test_loss[0] - spec.target_power() / 6.0).abs() < 1e-14);
        assert_eq!(run_one_pass_sgd(&spec, &s, &opt, 1).unwrap(), c);

        let gd = OptimizerConfig::gd(0.1, 6);
        let e = run_ensemble_bag(&spec, &s, &gd, 1, 1, 9).unwrap();
        let d = draw_disorder(&s, &spec, 9).unwrap();
        let single = run_discrete_gd(&d, &spec, &s, &gd).unwrap();
        for (a, b) in e.test_loss.iter().zip(&single.test_loss) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_statistics() {
        let a = LossCurve::single(vec![0.0], vec![1.0], vec![2.0]);
        let b = LossCurve::single(vec![0.0], vec![3.0], vec![4.0]);
        let agg = LossCurve::aggregate(&[a, b]).unwrap();
        assert_eq!(agg.train_loss, vec![2.0]);
        assert!((agg.std_test.as_ref().unwrap()[0] - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(agg.samples, 2);
    }
}
