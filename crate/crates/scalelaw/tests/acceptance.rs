//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass criterion numbers as arguments to run a subset.

use std::process::ExitCode;
use std::time::Instant;

use num_complex::Complex64;
use scalelaw::asymptotics::{self, fit_power_law, log_grid, pareto_frontier, white, Branch, SurfacePoint};
use scalelaw::dmft_discrete::{self, SolverOptions};
use scalelaw::dmft_fourier::{timescale_density, ContinuousSolver, ResponseSolver};
use scalelaw::ensemble::{ensemble_vs_width, CrossCorrelations};
use scalelaw::sgd_online::{sgd_asymptote, solve_sgd_dmft};
use scalelaw::simulator::{
    draw_disorder, over_seeds, run_discrete_gd, run_ensemble_bag, run_gradient_flow_exact, LossCurve, OptimizerConfig,
};
use scalelaw::{LimitMode, Spectrum, SystemShape};

type Check = Result<Verdict, String>;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Check {
    Ok(Verdict {
        pass,
        detail: detail.into(),
    })
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn seeds(n: u64) -> Vec<u64> {
    (0..n).collect()
}

fn within_two_stderr(theory: &[f64], mc: &LossCurve) -> f64 {
    let se = mc.stderr_test().unwrap_or_else(|| vec![0.0; mc.len()]);
    let hits = theory
        .iter()
        .zip(&mc.test_loss)
        .zip(&se)
        .filter(|((t, m), s)| (*t - *m).abs() <= 2.0 * **s)
        .count();
    hits as f64 / theory.len() as f64
}

fn slope(x: &[f64], y: &[f64]) -> Result<f64, String> {
    Ok(fit_power_law(x, y, (0.0, f64::INFINITY)).map_err(err)?.exponent)
}

fn shape(n: f64, p: f64, sigma: f64, limit: LimitMode) -> Result<SystemShape, String> {
    SystemShape::new(n, p, sigma, limit).map_err(err)
}

/// DMFT against the simulator for widths and dataset sizes.
fn dmft_vs_monte_carlo() -> Check {
    let m = 512;
    let spec = Spectrum::power_law(1.5, 1.25, m).map_err(err)?;
    let eta = 0.05 / spec.top_eigenvalue();
    let steps = 1000;
    let opt = OptimizerConfig::gd(eta, steps);
    let mut worst = (1.0f64, String::new());
    let mut lines = Vec::new();
    let cases = [32.0, 64.0, 128.0, 256.0]
        .map(|n| (n, 512.0))
        .into_iter()
        .chain([32.0, 64.0, 128.0, 256.0].map(|p| (512.0, p)));
    for (n, p) in cases {
        let sh = shape(n, p, 0.0, LimitMode::Proportional)?;
        let theory = dmft_discrete::solve(&spec, &sh.coupling(m), steps, eta, &SolverOptions::default()).map_err(err)?;
        theory.correlations.diagnostics.ensure_converged().map_err(err)?;
        let mc = over_seeds(&seeds(20), |s| run_discrete_gd(&draw_disorder(&sh, &spec, s)?, &spec, &sh, &opt)).map_err(err)?;
        let frac = within_two_stderr(&theory.test_loss(), &mc);
        let label = format!("N={n} P={p}");
        lines.push(format!("{label}:{:.1}%", 100.0 * frac));
        if frac < worst.0 {
            worst = (frac, label);
        }
    }
    verdict(
        worst.0 >= 0.95,
        format!("worst {} at {:.1}% within 2 s.e. [{}]", worst.1, 100.0 * worst.0, lines.join(" ")),
    )
}

fn bottleneck_fit(sweep_width: bool) -> Check {
    let spec = Spectrum::power_law(1.5, 1.25, 1 << 20).map_err(err)?;
    let sizes = log_grid(64.0, 2048.0, 11);
    let mut losses = Vec::new();
    for &x in &sizes {
        let sh = if sweep_width {
            shape(x, f64::INFINITY, 0.0, LimitMode::NonProportional)?
        } else {
            shape(f64::INFINITY, x, 0.0, LimitMode::NonProportional)?
        };
        let sol = asymptotics::solve_r(&spec, &sh).map_err(err)?;
        losses.push(asymptotics::final_loss(&sol, &spec, 0.0).map_err(err)?.test);
    }
    let s = slope(&sizes, &losses)?;
    verdict((s + 0.5).abs() <= 0.1, format!("slope {s:.4} (target -0.5 ± 0.1)"))
}

fn time_bottleneck() -> Check {
    let m = 1 << 22;
    let spec = Spectrum::power_law(1.5, 1.25, m).map_err(err)?;
    let times = log_grid(1e2, 1e4, 21);
    let losses: Vec<f64> = times
        .iter()
        .map(|&t| asymptotics::infinite_size_loss(&spec, 1.0 / m as f64, t))
        .collect();
    let s = slope(&times, &losses)?;
    verdict((s + 0.4).abs() <= 0.05, format!("slope {s:.4} (target -0.4 ± 0.05)"))
}

fn frontiers() -> Check {
    let widths = log_grid(32.0, 1024.0, 11).iter().map(|w| w.round()).collect::<Vec<_>>();
    let mut ok = true;
    let mut parts = Vec::new();
    for (b, target) in [(1.0, -0.5), (1.5, -0.4), (2.0, -1.0 / 3.0)] {
        let spec = Spectrum::power_law(2.0, b, 1 << 13).map_err(err)?;
        let times = log_grid(1.0, 1e6, 31);
        let mut surface = Vec::new();
        for &n in &widths {
            let sh = shape(n, f64::INFINITY, 0.0, LimitMode::NonProportional)?;
            let curve = ContinuousSolver::new(&spec, &sh).loss_curve(&times).map_err(err)?;
            for (t, l) in times.iter().zip(&curve.test_loss) {
                surface.push(SurfacePoint {
                    model_size: n,
                    time: *t,
                    loss: *l,
                });
            }
        }
        let compute = log_grid(32.0, 1024.0 * 1e6, 121);
        let interior: Vec<_> = pareto_frontier(&surface, &compute)
            .into_iter()
            .filter(|p| p.model_size > widths[0] && p.model_size < widths[widths.len() - 1])
            .collect();
        let xs: Vec<f64> = interior.iter().map(|p| p.compute).collect();
        let ys: Vec<f64> = interior.iter().map(|p| p.loss).collect();
        let s = slope(&xs, &ys)?;
        ok &= (s - target).abs() <= 0.05;
        parts.push(format!("b={b}: {s:.3} (target {target:.2})"));
    }
    verdict(ok, parts.join(", "))
}

fn ridgeless() -> Check {
    let m = 2048;
    let over = [(0.25, 0.125), (0.25, 0.0625), (0.1875, 0.125), (0.1875, 0.0625), (0.125, 0.0625), (0.25, 0.1875)];
    let mut worst = 0.0f64;
    let mut max_train = 0.0f64;
    let mut count = 0;
    for spec in [Spectrum::white(m).map_err(err)?, Spectrum::power_law(1.5, 1.25, m).map_err(err)?] {
        for (i, &(big, small)) in over.iter().enumerate() {
            for branch in [Branch::Over, Branch::Under] {
                let (nu, alpha) = if branch == Branch::Over { (big, small) } else { (small, big) };
                let sigma = if i % 2 == 0 { 0.0 } else { 0.3 };
                let sh = SystemShape::from_ratios(nu, alpha, m, sigma).map_err(err)?;
                let sol = asymptotics::solve_r(&spec, &sh).map_err(err)?;
                if sol.branch != branch {
                    return verdict(false, format!("nu={nu} alpha={alpha} solved on {:?}", sol.branch));
                }
                let theory = asymptotics::final_loss(&sol, &spec, sigma).map_err(err)?;
                let mc = over_seeds(&seeds(20), |s| {
                    run_gradient_flow_exact(&draw_disorder(&sh, &spec, s)?, &spec, &sh, &[f64::INFINITY])
                })
                .map_err(err)?;
                let se = mc.stderr_test().unwrap_or_default()[0];
                worst = worst.max((theory.test - mc.test_loss[0]).abs() / se);
                if branch == Branch::Over {
                    if theory.train != 0.0 {
                        return verdict(false, format!("theory train {} on over branch", theory.train));
                    }
                    max_train = max_train.max(mc.train_loss[0]);
                }
                count += 1;
            }
        }
    }
    verdict(
        worst <= 2.0 && max_train < 1e-8,
        format!("{count} points, worst |theory − sim| = {worst:.2} s.e., max over-branch sim train {max_train:.1e}"),
    )
}

fn marchenko_pastur() -> Check {
    let m = 400;
    let spec = Spectrum::white(m).map_err(err)?;
    let sh = SystemShape::from_ratios(f64::INFINITY, 4.0, m, 0.0).map_err(err)?;
    let (lo, hi) = (0.25, 2.25);
    let margin = 0.01 * (hi - lo);
    let rates: Vec<f64> = (0..200).map(|i| lo + margin + (hi - lo - 2.0 * margin) * i as f64 / 199.0).collect();
    let dens = timescale_density(0, &spec, &sh, &rates, 1e-4).map_err(err)?;
    let sup = rates
        .iter()
        .zip(&dens.density)
        .map(|(&u, &d)| (d - white::marchenko_pastur(0.25, u)).abs())
        .fold(0.0, f64::max);
    verdict(sup <= 1e-3, format!("sup error {sup:.2e} on 200 points"))
}

fn early_corrections() -> Check {
    let spec = Spectrum::power_law(1.5, 1.25, 4096).map_err(err)?;
    let times = [1.0, 2.0, 5.0, 10.0];
    let sizes = log_grid(256.0, 4096.0, 9);
    let base: Vec<f64> = times.iter().map(|&t| asymptotics::infinite_size_loss(&spec, 1.0, t)).collect();
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for (label, width) in [("N", true), ("P", false)] {
        let mut gaps = vec![Vec::new(); times.len()];
        for &x in &sizes {
            let sh = if width {
                shape(x, f64::INFINITY, 0.0, LimitMode::NonProportional)?
            } else {
                shape(f64::INFINITY, x, 0.0, LimitMode::NonProportional)?
            };
            let curve = ContinuousSolver::new(&spec, &sh).loss_curve(&times).map_err(err)?;
            for (i, l) in curve.test_loss.iter().enumerate() {
                gaps[i].push((l - base[i]).abs());
            }
        }
        for (i, g) in gaps.iter().enumerate() {
            let s = slope(&sizes, g)?;
            worst = worst.max((s + 1.0).abs());
            parts.push(format!("{label} t={}: {s:.3}", times[i]));
        }
    }
    verdict(worst <= 0.15, format!("worst |slope + 1| = {worst:.3} [{}]", parts.join(", ")))
}

fn train_test_gap() -> Check {
    let m = 256;
    let spec = Spectrum::power_law(1.5, 1.25, m).map_err(err)?;
    let eta = 0.5 / spec.top_eigenvalue();
    let steps = 100;
    let mut formula_err: f64 = 0.0;
    let sizes = log_grid(1024.0, 16384.0, 9);
    let mut gaps = Vec::new();
    for &p in &sizes {
        let sh = shape(128.0, p.round(), 0.2, LimitMode::Proportional)?;
        let order = dmft_discrete::solve(&spec, &sh.coupling(m), steps, eta, &SolverOptions::default()).map_err(err)?;
        let direct = order.gap_direct();
        for (a, b) in order.gap_formula().iter().zip(&direct) {
            if b.abs() > 1e-14 {
                formula_err = formula_err.max((a - b).abs() / b.abs());
            }
        }
        gaps.push(direct[20]);
    }
    let s = slope(&sizes, &gaps)?;
    verdict(
        formula_err <= 1e-6 && (s + 1.0).abs() <= 0.15,
        format!("formula rel. error {formula_err:.1e}, gap slope vs P at t=20: {s:.3}"),
    )
}

fn sgd_plateaus() -> Check {
    let m = 64;
    let spec = Spectrum::power_law(1.5, 1.25, m).map_err(err)?;
    let sh = shape(32.0, f64::INFINITY, 0.2, LimitMode::Proportional)?;
    let sol = solve_sgd_dmft(&spec, &sh, 8, 0.5, 80, &SolverOptions::default()).map_err(err)?;
    let curve = sol.curve();
    let identical = curve.train_loss == curve.test_loss;

    let big = Spectrum::power_law(1.5, 1.25, 1 << 14).map_err(err)?;
    let eta = 0.5;
    let quiet = |n: f64| -> Result<f64, String> {
        let sh = shape(n, f64::INFINITY, 0.0, LimitMode::NonProportional)?;
        Ok(sgd_asymptote(&big, &sh, eta, 64).map_err(err)?.loss)
    };
    let ratio = quiet(512.0)? / quiet(256.0)?;
    let target = 2f64.powf(-0.5);
    let ratio_ok = (ratio / target - 1.0).abs() <= 0.15;

    let noisy = shape(256.0, f64::INFINITY, 1.0, LimitMode::NonProportional)?;
    let floor = |b: usize| -> Result<f64, String> { Ok(sgd_asymptote(&big, &noisy, eta, b).map_err(err)?.variance) };
    let doubling = floor(32)? / floor(64)?;
    let batch_ok = (doubling / 2.0 - 1.0).abs() <= 0.15;
    verdict(
        identical && ratio_ok && batch_ok,
        format!(
            "train==test: {identical}, plateau(2N)/plateau(N) = {ratio:.3} (target {target:.3}), variance floor B/2 vs B: {doubling:.3}"
        ),
    )
}

fn ensembling() -> Check {
    let m = 128;
    let spec = Spectrum::power_law(1.5, 1.0, m).map_err(err)?;
    let sh = shape(48.0, 64.0, 0.3, LimitMode::Proportional)?;
    let eta = 0.5;
    let steps = 150;
    let opts = SolverOptions::default();
    let cross = CrossCorrelations::discrete(&spec, &sh, eta, steps, &opts).map_err(err)?;
    let single = dmft_discrete::solve(&spec, &sh.coupling(m), steps, eta, &opts).map_err(err)?;
    let one = cross.ensembled(1, 1).map_err(err)?;
    let single_err = one
        .loss
        .iter()
        .zip(single.test_loss())
        .map(|(a, b)| (a - b).abs() / b)
        .fold(0.0, f64::max);

    let times = log_grid(0.1, 100.0, 12);
    let cont = CrossCorrelations::continuous(&spec, &sh, &times).map_err(err)?;
    let modes: Vec<usize> = (0..m).collect();
    let h = ContinuousSolver::new(&spec, &sh).transfer(&modes, &times).map_err(err)?;
    let mut limit_err: f64 = 0.0;
    for (i, row) in h.iter().enumerate() {
        let want: f64 = spec.iter().zip(row).map(|((l, w2), hk)| l * w2 * hk * hk).sum::<f64>() / m as f64;
        limit_err = limit_err.max((cont.independent[i] - want).abs() / want);
    }

    let members = 32;
    let theory = cross.ensembled(members, 1).map_err(err)?;
    let opt = OptimizerConfig::gd(eta, steps);
    let mc = over_seeds(&seeds(20), |s| run_ensemble_bag(&spec, &sh, &opt, members, 1, s)).map_err(err)?;
    let frac = within_two_stderr(&theory.loss, &mc);

    let wide = Spectrum::power_law(2.0, 1.0, 4096).map_err(err)?;
    let mut width_wins = true;
    for t in [1.0, 10.0, 100.0, 1000.0] {
        for total in [256.0, 1024.0] {
            let base = shape(total, f64::INFINITY, 0.0, LimitMode::NonProportional)?;
            let trade = ensemble_vs_width(&wide, &base, total, &[1, 2, 4, 8, 16], t).map_err(err)?;
            width_wins &= trade.best.ensemble == 1;
        }
    }
    verdict(
        single_err <= 1e-6 && limit_err <= 1e-6 && frac >= 0.95 && width_wins,
        format!(
            "E=B=1 rel. error {single_err:.1e}, infinite-ensemble rel. error {limit_err:.1e}, E=32 sim within 2 s.e. at {:.1}%, max width wins: {width_wins}",
            100.0 * frac
        ),
    )
}

fn white_closed_forms() -> Check {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    let spec = Spectrum::white(10).map_err(err)?;
    let mut dev: f64 = 0.0;
    for _ in 0..100 {
        let omega = 10f64.powf(rng.random_range(-2.0..2.0)) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let alpha = 10f64.powf(rng.random_range(-1.0..1.0));
        let nu = 10f64.powf(rng.random_range(-1.0..1.0));
        let sh = SystemShape::from_ratios(nu, alpha, 10, 0.0).map_err(err)?;
        let coupling = sh.coupling(10);
        let solver = ResponseSolver::new(&spec, &coupling);
        let s = Complex64::new(0.0, omega);
        let x = solver.solve(s).map_err(err)?;
        let (r1, r3) = solver.responses(s, x);
        let (c1, c3) = white::responses(s, coupling.inv_alpha(), coupling.inv_nu());
        dev = dev.max((r1 - c1).norm()).max((r3 - c3).norm());
    }

    let taus = log_grid(0.05, 5.0, 15);
    let mut pert: f64 = 0.0;
    for (nu, small) in [(0.02, true), (0.05, true), (100.0, false), (400.0, false)] {
        let m = 200;
        let spec = Spectrum::white(m).map_err(err)?;
        let sh = SystemShape::from_ratios(nu, f64::INFINITY, m, 0.0).map_err(err)?;
        let h = ContinuousSolver::new(&spec, &sh).transfer(&[0], &taus).map_err(err)?;
        for (row, &tau) in h.iter().zip(&taus) {
            let approx = if small {
                white::transfer_small_width(nu, tau)
            } else {
                white::transfer_large_width(nu, tau)
            };
            pert = pert.max((row[0] - approx).abs() / row[0].abs());
        }
    }
    verdict(
        dev < 1e-8 && pert <= 0.05,
        format!("closed-form max deviation {dev:.1e}, perturbative forms max rel. error {:.2}%", 100.0 * pert),
    )
}

fn double_descent() -> Check {
    let m = 500;
    let spec = Spectrum::white(m).map_err(err)?;
    let alpha = 0.8;
    let nus = [0.2, 0.4, 0.6, 0.7, 0.75, 0.78, 0.82, 0.85, 0.9, 1.0, 1.2, 1.6, 2.4, 4.0];
    let times = log_grid(0.05, 1e4, 60);
    let mut late = Vec::new();
    let mut stopped = Vec::new();
    for &nu in &nus {
        let sh = SystemShape::from_ratios(nu, alpha, m, 0.0).map_err(err)?;
        let sol = asymptotics::solve_r(&spec, &sh).map_err(err)?;
        late.push(asymptotics::final_loss(&sol, &spec, 0.0).map_err(err)?.test);
        let curve = ContinuousSolver::new(&spec, &sh).loss_curve(&times).map_err(err)?;
        stopped.push(curve.test_loss.iter().copied().fold(f64::INFINITY, f64::min));
    }
    let peak = (0..nus.len()).max_by(|&a, &b| late[a].total_cmp(&late[b])).unwrap_or(0);
    let peak_near = (nus[peak] / alpha - 1.0).abs() <= 0.05;
    let rises = late[0] < late[peak] && late[nus.len() - 1] < late[peak];
    let monotone = stopped.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9));
    verdict(
        peak_near && rises && monotone,
        format!(
            "late-time peak at nu={} (alpha={alpha}), non-monotone: {rises}, early-stopped monotone: {monotone}",
            nus[peak]
        ),
    )
}

fn main() -> ExitCode {
    let checks: [(u32, &str, fn() -> Check); 13] = [
        (1, "DMFT vs Monte Carlo", dmft_vs_monte_carlo),
        (2, "model bottleneck exponent", || bottleneck_fit(true)),
        (3, "data bottleneck exponent", || bottleneck_fit(false)),
        (4, "time bottleneck exponent", time_bottleneck),
        (5, "compute-optimal frontiers", frontiers),
        (6, "final value vs ridgeless regression", ridgeless),
        (7, "Marchenko-Pastur recovery", marchenko_pastur),
        (8, "early-time 1/N and 1/P corrections", early_corrections),
        (9, "train-test gap", train_test_gap),
        (10, "one-pass SGD identity and plateaus", sgd_plateaus),
        (11, "ensembling limits", ensembling),
        (12, "white-model closed forms", white_closed_forms),
        (13, "double descent", double_descent),
    ];
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, check) in checks {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = match check() {
            Ok(v) => (v.pass, v.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!pass);
        println!(
            "criterion {id:>2} {} {name}: {detail} ({:.1} s)",
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
