//! Batch driver behind the `scalelaw` binary: runs one configured solver or
//! a sweep of them, writes CSVs with provenance comments, then the manifest.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::asymptotics::{self, fit_power_law, frontier_csv, pareto_frontier, Branch, SurfacePoint};
use crate::config::{ConfigError, RunConfig, SolverKind, SweepParameter};
use crate::dmft_discrete::{self, SolverOptions};
use crate::dmft_fourier::{timescale_density, ContinuousSolver, DiscreteSolver, FrequencyGrid, FrequencySolution};
use crate::ensemble::{ensemble_vs_width, CrossCorrelations};
use crate::error::SolveError;
use crate::io::CsvTable;
use crate::sgd_online::{sgd_asymptote, solve_sgd_dmft};
use crate::simulator::{
    draw_disorder, over_seeds, run_discrete_gd, run_ensemble_bag, run_gradient_flow_exact, run_one_pass_sgd, LossCurve,
    OptimizerConfig, OptimizerKind,
};

pub const TOOL_VERSION: &str = concat!("scalelaw ", env!("CARGO_PKG_VERSION"));
pub const THREADS_ENV: &str = "SCALELAW_THREADS";
pub const MANIFEST_NAME: &str = "manifest.toml";

/// Process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Exit {
    Success = 0,
    ConfigError = 1,
    SolverFailure = 2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    NonConverged,
    Diverged,
    Singular,
    Invalid,
}

impl CellStatus {
    fn exit(self) -> Exit {
        match self {
            Self::Ok => Exit::Success,
            Self::Invalid => Exit::ConfigError,
            Self::NonConverged | Self::Diverged | Self::Singular => Exit::SolverFailure,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellReport {
    pub label: String,
    pub status: CellStatus,
    pub outputs: Vec<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub residual: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub started_unix: u64,
    pub wall_time_s: f64,
    pub threads: usize,
    pub exit_code: i32,
    /// Every file written by this run, the manifest excepted.
    pub outputs: Vec<PathBuf>,
    pub cells: Vec<CellReport>,
    pub config: String,
}

impl RunManifest {
    pub fn exit(&self) -> Exit {
        self.cells.iter().map(|c| c.status.exit()).max().unwrap_or(Exit::Success)
    }
}

/// Worker count from `SCALELAW_THREADS`, defaulting to the available cores.
pub fn threads_from_env() -> Result<usize, ConfigError> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(ConfigError::Invalid(format!("{THREADS_ENV}={v:?} is not a positive integer"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}

/// Loss curve of one cell, kept for the combined sweep grid.
#[derive(Debug, Clone, Default)]
struct CellCurve {
    times: Vec<f64>,
    train: Vec<f64>,
    test: Vec<f64>,
}

impl From<&LossCurve> for CellCurve {
    fn from(c: &LossCurve) -> Self {
        Self {
            times: c.times.clone(),
            train: c.train_loss.clone(),
            test: c.test_loss.clone(),
        }
    }
}

struct CellOutcome {
    report: CellReport,
    curve: Option<CellCurve>,
}

/// Collects written files for one cell and stamps provenance comments.
struct Writer<'a> {
    cfg: &'a RunConfig,
    hash: String,
    dir: PathBuf,
    outputs: Vec<PathBuf>,
}

impl<'a> Writer<'a> {
    fn new(cfg: &'a RunConfig, dir: &Path) -> Self {
        Self {
            cfg,
            hash: cfg.hash(),
            dir: dir.to_path_buf(),
            outputs: Vec::new(),
        }
    }

    fn csv(&mut self, name: &str, mut table: CsvTable) -> Result<(), SolveError> {
        let seeds: Vec<String> = self.cfg.seeds.iter().map(u64::to_string).collect();
        let mut head = CsvTable::default();
        head.comment("tool", TOOL_VERSION)
            .comment("solver", self.cfg.solver)
            .comment("config_hash", &self.hash)
            .comment("seeds", seeds.join(";"));
        head.comments.append(&mut table.comments);
        // Full config echo so a CSV stands alone without its manifest.
        let echo = self.cfg.canonical();
        head.comments
            .extend(echo.lines().filter(|l| !l.trim().is_empty()).map(|l| format!("config: {l}")));
        table.comments = head.comments;
        let path = self.dir.join(name);
        table.write(&path)?;
        self.outputs.push(path);
        Ok(())
    }
}

struct Solved {
    curve: Option<CellCurve>,
    iterations: Option<usize>,
    residual: Option<f64>,
    converged: bool,
}

impl Solved {
    fn curve(c: &LossCurve) -> Self {
        Self {
            curve: Some(c.into()),
            iterations: None,
            residual: None,
            converged: true,
        }
    }
}

fn solver_options(cfg: &RunConfig) -> SolverOptions {
    SolverOptions {
        tol: cfg.tolerances.tol,
        max_iter: cfg.tolerances.max_iter,
        ..SolverOptions::default()
    }
}

fn solve_cell(cfg: &RunConfig, w: &mut Writer) -> Result<Solved, SolveError> {
    let spec = cfg.build_spectrum().map_err(|e| SolveError::Invalid(e.to_string()))?;
    let shape = cfg.build_shape(spec.modes()).map_err(|e| SolveError::Invalid(e.to_string()))?;
    let o = &cfg.optimizer;
    let eta = o.eta.unwrap_or_else(|| OptimizerConfig::default_learning_rate(&spec));
    let times = cfg.times.values();
    let opts = solver_options(cfg);
    match cfg.solver {
        SolverKind::Simulate => {
            let kind = o.kind.unwrap_or(if o.momentum > 0.0 {
                OptimizerKind::DiscreteGdMomentum
            } else {
                OptimizerKind::DiscreteGd
            });
            let opt = OptimizerConfig {
                kind,
                learning_rate: eta,
                momentum: o.momentum,
                batch_size: o.batch.unwrap_or(1),
                steps: o.steps,
            };
            let curve = if let Some(e) = &cfg.ensemble {
                over_seeds(&cfg.seeds, |seed| run_ensemble_bag(&spec, &shape, &opt, e.members, e.bags, seed))?
            } else {
                over_seeds(&cfg.seeds, |seed| match kind {
                    OptimizerKind::GradientFlowExact => {
                        run_gradient_flow_exact(&draw_disorder(&shape, &spec, seed)?, &spec, &shape, &times)
                    }
                    OptimizerKind::DiscreteGd | OptimizerKind::DiscreteGdMomentum => {
                        run_discrete_gd(&draw_disorder(&shape, &spec, seed)?, &spec, &shape, &opt)
                    }
                    OptimizerKind::OnePassSgd => {
                        // Streaming data: the dataset size plays no role.
                        let online = if shape.dataset_size.is_finite() {
                            shape
                        } else {
                            shape.with_dataset_size(1.0)
                        };
                        run_one_pass_sgd(&spec, &online, &opt, seed)
                    }
                })?
            };
            w.csv("simulate.csv", curve.to_csv())?;
            Ok(Solved::curve(&curve))
        }
        SolverKind::Dmft if o.momentum > 0.0 => {
            let curve = DiscreteSolver::new(&spec, &shape, eta, o.momentum, o.steps)?.loss_curve()?;
            let mut table = curve.to_csv();
            table.comment("eta", eta).comment("momentum", o.momentum);
            w.csv("dmft.csv", table)?;
            Ok(Solved::curve(&curve))
        }
        SolverKind::Dmft => {
            let order = dmft_discrete::solve(&spec, &shape.coupling(spec.modes()), o.steps, eta, &opts)?;
            let diag = order.correlations.diagnostics;
            let mut table = order.to_csv();
            table.comment("eta", eta);
            w.csv("dmft.csv", table)?;
            if cfg.dump_matrices {
                let paths = order.dump_matrices(&w.dir, "order")?;
                w.outputs.extend(paths);
            }
            let times = (0..o.steps).map(|t| t as f64).collect();
            Ok(Solved {
                curve: Some(CellCurve {
                    times,
                    train: order.train_loss(),
                    test: order.test_loss(),
                }),
                iterations: Some(diag.iterations),
                residual: Some(diag.residual),
                converged: diag.converged,
            })
        }
        SolverKind::Fourier => {
            let curve = ContinuousSolver::new(&spec, &shape).loss_curve(&times)?;
            w.csv("fourier.csv", curve.to_csv())?;
            let freq = FrequencySolution::solve(&spec, &shape, &FrequencyGrid::for_spectrum(&spec))?;
            w.csv("responses.csv", freq.to_csv())?;
            if let Some(d) = &cfg.density {
                let dens = timescale_density(d.mode, &spec, &shape, &d.rates.values(), d.offset)?;
                w.csv("density.csv", dens.to_csv())?;
            }
            Ok(Solved::curve(&curve))
        }
        SolverKind::Sgd => {
            let batch = o.batch.unwrap_or(1);
            let sol = solve_sgd_dmft(&spec, &shape, batch, eta, o.steps, &opts)?;
            let mut table = sol.to_csv();
            match sgd_asymptote(&spec, &shape, eta, batch) {
                Ok(p) => {
                    table.comment("plateau_loss", p.loss).comment("plateau_variance", p.variance);
                }
                Err(SolveError::Singular(_)) => {
                    table.comment("plateau_loss", "unstable");
                }
                Err(e) => return Err(e),
            }
            w.csv("sgd.csv", table)?;
            let diag = sol.order.correlations.diagnostics;
            Ok(Solved {
                curve: Some((&sol.curve()).into()),
                iterations: Some(diag.iterations),
                residual: Some(diag.residual),
                converged: diag.converged,
            })
        }
        SolverKind::Ensemble => {
            let e = cfg.ensemble.clone().unwrap_or_default();
            let cross = if e.continuous {
                CrossCorrelations::continuous(&spec, &shape, &times)?
            } else {
                CrossCorrelations::discrete(&spec, &shape, eta, o.steps, &opts)?
            };
            let sol = cross.ensembled(e.members, e.bags)?;
            w.csv("ensemble.csv", sol.to_csv())?;
            if let (Some(total), false) = (e.total_width, e.split.is_empty()) {
                let horizon = times.last().copied().unwrap_or(1.0);
                let trade = ensemble_vs_width(&spec, &shape, total, &e.split, horizon)?;
                let mut table = trade.to_csv();
                table.comment("time", horizon);
                w.csv("width_tradeoff.csv", table)?;
            }
            Ok(Solved {
                curve: Some(CellCurve {
                    times: sol.times.clone(),
                    train: vec![f64::NAN; sol.times.len()],
                    test: sol.loss.clone(),
                }),
                iterations: None,
                residual: None,
                converged: true,
            })
        }
        SolverKind::Asymptote => {
            let sol = asymptotics::solve_r(&spec, &shape)?;
            let fl = asymptotics::final_loss(&sol, &spec, shape.noise_std)?;
            let branch = match sol.branch {
                Branch::Over => 0.0,
                Branch::Under => 1.0,
                Branch::FullRank => 2.0,
            };
            let mut table = CsvTable::new(["nu", "alpha", "test_loss", "train_loss", "branch"]);
            let m = spec.modes();
            table.push(vec![shape.nu(m), shape.alpha(m), fl.test, fl.train, branch]);
            table.comment("branch_codes", "0=over;1=under;2=full_rank");
            table.comment("knife_edge", sol.knife_edge);
            w.csv("final.csv", table)?;
            if let Some(p) = cfg.spectrum.power_law {
                w.csv("scaling.csv", asymptotics::compute_optimal(p.a, p.b)?.to_csv())?;
            }
            Ok(Solved {
                curve: Some(CellCurve {
                    times: vec![f64::INFINITY],
                    train: vec![fl.train],
                    test: vec![fl.test],
                }),
                iterations: None,
                residual: None,
                converged: true,
            })
        }
        SolverKind::Frontier => {
            let f = cfg
                .frontier
                .as_ref()
                .ok_or_else(|| SolveError::Invalid("missing [frontier] block".into()))?;
            let mut surface = Vec::new();
            let mut table = CsvTable::new(["N", "t", "loss"]);
            for &n in &f.widths {
                let curve = ContinuousSolver::new(&spec, &shape.with_model_size(n)).loss_curve(&times)?;
                for (t, l) in curve.times.iter().zip(&curve.test_loss) {
                    surface.push(SurfacePoint {
                        model_size: n,
                        time: *t,
                        loss: *l,
                    });
                    table.push(vec![n, *t, *l]);
                }
            }
            w.csv("surface.csv", table)?;
            let frontier = pareto_frontier(&surface, &f.compute.values());
            let mut ftable = frontier_csv(&frontier);
            let xs: Vec<f64> = frontier.iter().map(|p| p.compute).collect();
            let ys: Vec<f64> = frontier.iter().map(|p| p.loss - shape.noise_std * shape.noise_std).collect();
            if let Ok(fit) = fit_power_law(&xs, &ys, (0.0, f64::INFINITY)) {
                ftable.comment("fit_exponent", fit.exponent).comment("fit_r_squared", fit.r_squared);
            }
            w.csv("frontier.csv", ftable)?;
            Ok(Solved {
                curve: None,
                iterations: None,
                residual: None,
                converged: true,
            })
        }
    }
}

fn classify(err: &SolveError) -> CellStatus {
    match err {
        SolveError::NonConvergence { .. } => CellStatus::NonConverged,
        SolveError::Diverged { .. } => CellStatus::Diverged,
        SolveError::Singular(_) => CellStatus::Singular,
        SolveError::Invalid(_) | SolveError::Spectrum(_) | SolveError::Io(_) => CellStatus::Invalid,
    }
}

fn run_cell(cfg: &RunConfig, dir: &Path, label: String) -> CellOutcome {
    let mut w = Writer::new(cfg, dir);
    let result = solve_cell(cfg, &mut w);
    let outputs = std::mem::take(&mut w.outputs);
    match result {
        Ok(s) => CellOutcome {
            report: CellReport {
                label,
                status: if s.converged {
                    CellStatus::Ok
                } else {
                    CellStatus::NonConverged
                },
                outputs,
                iterations: s.iterations,
                residual: s.residual,
                message: None,
            },
            curve: s.curve,
        },
        Err(e) => {
            let (iterations, residual) = match &e {
                SolveError::NonConvergence { iterations, residual } => (Some(*iterations), Some(*residual)),
                _ => (None, None),
            };
            CellOutcome {
                report: CellReport {
                    label,
                    status: classify(&e),
                    outputs,
                    iterations,
                    residual,
                    message: Some(e.to_string()),
                },
                curve: None,
            }
        }
    }
}

/// Runs `jobs` on at most `threads` workers; results keep job order.
fn pool<T: Send, R: Send>(jobs: Vec<T>, threads: usize, f: impl Fn(T) -> R + Sync) -> Vec<R> {
    let n = jobs.len();
    let slots: Vec<Mutex<Option<T>>> = jobs.into_iter().map(|j| Mutex::new(Some(j))).collect();
    let results: Vec<Mutex<Option<R>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let job = slots[i].lock().ok().and_then(|mut g| g.take());
                if let Some(job) = job {
                    let r = f(job);
                    if let Ok(mut g) = results[i].lock() {
                        *g = Some(r);
                    }
                }
            });
        }
    });
    results
        .into_iter()
        .filter_map(|m| m.into_inner().ok().flatten())
        .collect()
}

fn format_value(v: f64) -> String {
    format!("{v}")
}

/// Executes the config, sweeping if it carries a `[sweep]` block, and
/// writes the manifest last. Config problems surface as `Err`.
pub fn run(cfg: &RunConfig, threads: usize) -> Result<RunManifest, ConfigError> {
    let started = Instant::now();
    let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let out = cfg.output.clone();
    std::fs::create_dir_all(&out).map_err(|e| ConfigError::Invalid(format!("cannot create {}: {e}", out.display())))?;
    let mut outputs = Vec::new();
    let cells = match cfg.sweep_plan()? {
        None => {
            let outcome = run_cell(cfg, &out, cfg.solver.to_string());
            outputs.extend(outcome.report.outputs.iter().cloned());
            vec![outcome.report]
        }
        Some((param, values, dropped)) => {
            for v in &dropped {
                eprintln!("warning: duplicate {} value {} dropped", param.key(), format_value(*v));
            }
            let jobs: Vec<(f64, RunConfig)> = values
                .iter()
                .map(|&v| cfg.with_parameter(param, v).map(|c| (v, c)))
                .collect::<Result<_, _>>()?;
            let outcomes = pool(jobs, threads, |(v, cell)| {
                let label = format!("{}={}", param.key(), format_value(v));
                let dir = out.join(&label);
                (v, run_cell(&cell, &dir, label))
            });
            let grid = sweep_grid(param, &outcomes);
            let mut w = Writer::new(cfg, &out);
            w.csv("grid.csv", grid).map_err(|e| ConfigError::Invalid(e.to_string()))?;
            for (_, o) in &outcomes {
                outputs.extend(o.report.outputs.iter().cloned());
            }
            outputs.extend(w.outputs);
            outcomes.into_iter().map(|(_, o)| o.report).collect()
        }
    };
    let mut manifest = RunManifest {
        tool_version: TOOL_VERSION.to_string(),
        config_hash: cfg.hash(),
        started_unix,
        wall_time_s: 0.0,
        threads,
        exit_code: 0,
        outputs,
        cells,
        config: cfg.canonical(),
    };
    manifest.exit_code = manifest.exit() as i32;
    manifest.wall_time_s = started.elapsed().as_secs_f64();
    write_manifest(&out, &manifest)?;
    Ok(manifest)
}

/// One row per time point per cell; failed cells get a single invalid row.
fn sweep_grid(param: SweepParameter, outcomes: &[(f64, CellOutcome)]) -> CsvTable {
    let mut table = CsvTable::new([param.key(), "t", "train_loss", "test_loss", "valid"]);
    for (v, o) in outcomes {
        let ok = o.report.status == CellStatus::Ok;
        match (&o.curve, ok) {
            (Some(c), true) => {
                for i in 0..c.times.len() {
                    table.push(vec![*v, c.times[i], c.train[i], c.test[i], 1.0]);
                }
            }
            _ => table.push(vec![*v, f64::NAN, f64::NAN, f64::NAN, if ok { 1.0 } else { 0.0 }]),
        }
    }
    table.comment("parameter", param.key());
    table
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<(), ConfigError> {
    let text = toml::to_string(manifest).map_err(|e| ConfigError::Invalid(format!("manifest: {e}")))?;
    let tmp = dir.join(format!("{MANIFEST_NAME}.partial"));
    let dest = dir.join(MANIFEST_NAME);
    std::fs::write(&tmp, text)
        .and_then(|_| std::fs::rename(&tmp, &dest))
        .map_err(|e| ConfigError::Invalid(format!("cannot write {}: {e}", dest.display())))
}
