use scalelaw::dmft_discrete::SolverOptions;
use scalelaw::dmft_fourier::{ContinuousSolver, DiscreteSolver};
use scalelaw::ensemble::CrossCorrelations;
use scalelaw::sgd_online::solve_sgd_dmft;
use scalelaw::simulator::*;
use scalelaw::{LimitMode, Spectrum, SystemShape};

fn fraction_within(theory: &[f64], mc: &LossCurve, k: f64) -> f64 {
    let se = mc.stderr_test().unwrap();
    let hits = (0..theory.len())
        .filter(|&i| (theory[i] - mc.test_loss[i]).abs() <= k * se[i])
        .count();
    hits as f64 / theory.len() as f64
}

fn seeds(n: u64) -> Vec<u64> {
    (0..n).collect()
}

#[test]
fn momentum_theory_tracks_simulation() {
    let m = 256;
    let spec = Spectrum::white(m).unwrap();
    let shape = SystemShape::new(64.0, 64.0, 0.0, LimitMode::Proportional).unwrap();
    let (eta, mu, steps) = (0.05, 0.9, 200);
    let theory = DiscreteSolver::new(&spec, &shape, eta, mu, steps).unwrap().loss_curve().unwrap();
    let opt = OptimizerConfig::momentum(eta, mu, steps);
    let mc = over_seeds(&seeds(20), |s| run_discrete_gd(&draw_disorder(&shape, &spec, s)?, &spec, &shape, &opt)).unwrap();
    let frac = fraction_within(&theory.test_loss, &mc, 2.0);
    assert!(frac >= 0.9, "{frac}");
}

#[test]
fn sgd_theory_tracks_simulation() {
    let m = 128;
    let spec = Spectrum::power_law(1.5, 1.25, m).unwrap();
    let shape = SystemShape::new(64.0, f64::INFINITY, 0.2, LimitMode::Proportional).unwrap();
    let (batch, eta, steps) = (16, 0.5, 150);
    let theory = solve_sgd_dmft(&spec, &shape, batch, eta, steps, &SolverOptions::default()).unwrap();
    let opt = OptimizerConfig::sgd(eta, batch, steps);
    let mc = over_seeds(&seeds(30), |s| run_one_pass_sgd(&spec, &shape, &opt, s)).unwrap();
    let frac = fraction_within(&theory.loss, &mc, 2.0);
    assert!(frac >= 0.9, "{frac}");
}

#[test]
fn bagged_ensemble_tracks_simulation() {
    let m = 128;
    let spec = Spectrum::power_law(1.5, 1.0, m).unwrap();
    let shape = SystemShape::new(48.0, 64.0, 0.3, LimitMode::Proportional).unwrap();
    let (eta, steps) = (0.5, 120);
    let cross = CrossCorrelations::discrete(&spec, &shape, eta, steps, &SolverOptions::default()).unwrap();
    let theory = cross.ensembled(4, 4).unwrap();
    let opt = OptimizerConfig::gd(eta, steps);
    let mc = over_seeds(&seeds(20), |s| run_ensemble_bag(&spec, &shape, &opt, 4, 4, s)).unwrap();
    let frac = fraction_within(&theory.loss, &mc, 2.0);
    assert!(frac >= 0.9, "{frac}");
    // The decomposition adds back up to the loss.
    for i in 0..steps {
        let sum = theory.bias[i] + theory.var_init[i] + theory.var_data[i] + theory.var_inter[i] + cross.noise_var;
        assert!((sum - theory.loss[i]).abs() < 1e-12);
    }
}

#[test]
fn gradient_flow_theory_tracks_exact_flow() {
    let m = 256;
    let spec = Spectrum::power_law(1.5, 1.25, m).unwrap();
    let shape = SystemShape::new(96.0, 160.0, 0.1, LimitMode::Proportional).unwrap();
    let times = scalelaw::asymptotics::log_grid(0.1, 500.0, 30);
    let theory = ContinuousSolver::new(&spec, &shape).loss_curve(&times).unwrap();
    let mc = over_seeds(&seeds(20), |s| {
        run_gradient_flow_exact(&draw_disorder(&shape, &spec, s)?, &spec, &shape, &times)
    })
    .unwrap();
    let frac = fraction_within(&theory.test_loss, &mc, 2.0);
    assert!(frac >= 0.9, "{frac}");
    let train_se = mc.stderr_train().unwrap();
    let train_hits = (0..times.len())
        .filter(|&i| (theory.train_loss[i] - mc.train_loss[i]).abs() <= 2.0 * train_se[i])
        .count();
    assert!(train_hits as f64 >= 0.9 * times.len() as f64, "{train_hits}");
}

#[test]
fn non_proportional_is_rescaled_proportional() {
    let m = 64;
    let spec = Spectrum::power_law(1.5, 1.25, m).unwrap();
    let sigma = 0.4;
    let times = [0.5, 5.0, 50.0];
    let prop = SystemShape::new(24.0, 40.0, sigma / (m as f64).sqrt(), LimitMode::Proportional).unwrap();
    let nonprop = SystemShape::new(24.0, 40.0, sigma, LimitMode::NonProportional).unwrap();
    let a = ContinuousSolver::new(&spec, &prop).loss_curve(&times).unwrap();
    let b = ContinuousSolver::new(&spec, &nonprop).loss_curve(&times).unwrap();
    for i in 0..times.len() {
        assert!((b.test_loss[i] - m as f64 * a.test_loss[i]).abs() < 1e-8 * b.test_loss[i]);
    }
}
