use proptest::prelude::*;
use sdde_insider::donsker::GaussianInsiderSpec;
use sdde_insider::harvest::{
    harvest_report, optimal_harvest_control, optimal_harvest_simplified, positivity_slack, solve_harvest_adjoint, HarvestParams, HarvestWeight, OptimalHarvest,
};
use sdde_insider::maxprinciple::{
    absde_residual, absde_residual_with, adjoint_drift_mu, hamiltonian, hamiltonian_partials, performance_j_total, performance_samples,
    solve_linear_absde, verify_perturbation, verify_stationarity, AdmissibleSet, HamiltonianInputs, PerturbationSpec, LinearAdvancedGenerator, TerminalPayoff,
};
use sdde_insider::paths::{mc_aggregate, SeedPolicy};
use sdde_insider::sdde::{simulate_sdde, ConstantControl, Noise, OpenLoop, PolicyContext};
use sdde_insider::TimeFunction;

fn params(dt: f64) -> HarvestParams {
    HarvestParams {
        alpha: 0.1,
        beta_birth: 0.3,
        sigma: 0.1,
        delay: 0.25,
        rho: 0.05,
        gamma: 0.5,
        theta: HarvestWeight::Deterministic(1.0),
        eta: TimeFunction::Constant(1.0),
        horizon: 1.0,
        insider: GaussianInsiderSpec::constant(1.0, 2.0, dt).unwrap(),
    }
}

#[test]
fn numeric_and_exact_factors_agree_for_time_varying_wrapper() {
    let exact = solve_linear_absde(&LinearAdvancedGenerator::new(0.1, 0.3, 0.2, TerminalPayoff::Deterministic(1.0)), 0.25, 1.0).unwrap();
    let custom = LinearAdvancedGenerator::new(
        TimeFunction::custom(|_| 0.1),
        TimeFunction::custom(|_| 0.3),
        TimeFunction::custom(|_| 0.2),
        TerminalPayoff::Deterministic(1.0),
    );
    let numeric = solve_linear_absde(&custom, 0.25, 1.0).unwrap();
    assert!(exact.is_exact() && !numeric.is_exact());
    for i in 0..=200 {
        let t = i as f64 / 200.0;
        assert!((exact.g(t) - numeric.g(t)).abs() < 1e-10, "g at {t}");
        assert!((exact.h(t) - numeric.h(t)).abs() < 1e-10, "h at {t}");
    }
}

#[test]
fn residual_detects_a_wrong_factor() {
    let p = params(1e-3);
    let adjoint = solve_harvest_adjoint(&p).unwrap();
    let sol = adjoint.solution();
    let wrong = |t: f64| sol.g(t) * (1.0 + 0.01 * (1.0 - t));
    let bad = absde_residual_with(sol.generator(), &wrong, &|_| 0.0, 0.25, 1.0, &p.insider, 0.0, 4000, 3).unwrap();
    assert!(bad.weak.gap_sigmas(0.0).abs() > 4.0, "{:?}", bad.weak);

    let martingale = LinearAdvancedGenerator::new(0.0, 0.0, 0.0, TerminalPayoff::Deterministic(1.0));
    let flat = solve_linear_absde(&martingale, 0.25, 1.0).unwrap();
    let good = absde_residual(&flat, &p.insider, 0.0, 4000, 3).unwrap();
    assert!(good.weak.within(0.0, 4.0), "{:?}", good.weak);
}

#[test]
fn adjoint_drift_from_hamiltonian_matches_generator() {
    let p = params(1e-3);
    let adjoint = solve_harvest_adjoint(&p).unwrap();
    let problem = p.problem().unwrap();
    let (path, _) = problem.noise(&SeedPolicy::new(5), 0).unwrap();
    let policy = OptimalHarvest::new(&p, &adjoint).unwrap();
    let grid = problem.grid().unwrap();
    let state = simulate_sdde(&p.model(), &policy, 0.0, Noise::brownian(&path), &p.delay_spec(), grid).unwrap();
    let adj = adjoint.path(&p, 0.0, &path).unwrap();
    let m = state.delay_steps();
    for k in [0, 100, 500, 749, 750, 900] {
        let mu = adjoint_drift_mu(&p.model(), &state, &adj, k, 0.0, None).unwrap();
        let advanced = if k + m <= grid.n_steps() { adj.p(k + m) } else { 0.0 };
        let expected = 0.1 * adj.p(k) - 0.3 * advanced;
        assert!((mu - expected).abs() < 1e-12 * (1.0 + expected.abs()), "k {k}: {mu} vs {expected}");
    }
}

#[test]
fn optimum_dominates_random_competitors() {
    let p = params(1e-2);
    let adjoint = solve_harvest_adjoint(&p).unwrap();
    let optimal = OptimalHarvest::new(&p, &adjoint).unwrap();
    let problem = p.problem().unwrap();
    let schedule = optimal.schedule().unwrap().to_vec();
    let n = schedule.len() - 1;
    let base = performance_samples(&problem, &optimal, 0.0, 2000, 17).unwrap();
    let mut rng_state = 0x2545_f491_4f6c_dd1du64;
    let mut uniform = || {
        rng_state ^= rng_state << 13;
        rng_state ^= rng_state >> 7;
        rng_state ^= rng_state << 17;
        (rng_state >> 11) as f64 / (1u64 << 53) as f64
    };
    for trial in 0..10 {
        let (amp, freq, phase) = (0.2 + 0.6 * uniform(), 1.0 + 5.0 * uniform(), std::f64::consts::TAU * uniform());
        let control: Vec<f64> =
            (0..n).map(|k| schedule[k] * (1.0 + amp * (freq * k as f64 / n as f64 + phase).sin())).collect();
        let other = performance_samples(&problem, &OpenLoop(control), 0.0, 2000, 17).unwrap();
        let margin = mc_aggregate(base.iter().zip(&other).map(|(a, b)| a - b), 17).unwrap();
        assert!(margin.mean > 0.0 && margin.gap_sigmas(0.0) > 4.0, "trial {trial}: {margin:?}");
    }
}

#[test]
fn harvest_report_at_small_scale() {
    let p = params(1e-2);
    let report = harvest_report(&p, 0.5, 5000, 1).unwrap();
    assert!(report.stationarity.max_abs_hu < 1e-10);
    assert!(report.stationarity.sweep_ok(), "{:?}", report.stationarity.sweep);
    assert!(report.all_beaten(4.0));
    assert!(report.perturbation.concavity.mean < 0.0);
    assert!(report.perturbation.finite_difference.within(0.0, 4.0));
}

#[test]
fn total_performance_integrates_kernel_out() {
    let p = params(1e-2);
    let problem = p.problem().unwrap();
    let z_grid: Vec<f64> = (0..=160).map(|i| -8.0 + 0.1 * i as f64).collect();
    let total = performance_j_total(&problem, |_| ConstantControl(0.2), &z_grid, 500, 2).unwrap();
    // Common noise across z: the kernel integrates to one on every path.
    let seeds = SeedPolicy::new(2);
    let grid = problem.grid().unwrap();
    let model = p.model();
    let plain = (0..500u64)
        .map(|i| {
            let (path, _) = problem.noise(&seeds, i).unwrap();
            let s = simulate_sdde(&model, &ConstantControl(0.2), 0.0, Noise::brownian(&path), &p.delay_spec(), grid).unwrap();
            let running: f64 = (0..grid.n_steps()).map(|k| (-0.05 * grid.time(k)).exp() * 0.2f64.sqrt() / 0.5).sum::<f64>() * grid.dt();
            running + s.terminal()
        })
        .sum::<f64>()
        / 500.0;
    assert!((total - plain).abs() < 1e-6 * plain.abs(), "{total} vs {plain}");
    assert!(performance_j_total(&problem, |_| ConstantControl(0.2), &[-1.0, 0.0, 1.0], 10, 2).is_err());
}

#[test]
fn scaled_candidate_is_flagged() {
    let p = params(1e-2);
    let adjoint = solve_harvest_adjoint(&p).unwrap();
    let optimal = OptimalHarvest::new(&p, &adjoint).unwrap();
    let problem = p.problem().unwrap();
    let adjoint_for = |path: &sdde_insider::BrownianPath| adjoint.path(&p, 0.0, path);
    let off = optimal.scaled(1.1).unwrap();
    let report = verify_stationarity(&problem, &off, &adjoint_for, 0.0, 20, 2).unwrap();
    assert!(report.max_abs_hu > 1e-3, "{}", report.max_abs_hu);
    assert!(!report.sweep_ok());
}

#[test]
fn overharvesting_has_negative_derivative() {
    let p = params(1e-2);
    let adjoint = solve_harvest_adjoint(&p).unwrap();
    let optimal = OptimalHarvest::new(&p, &adjoint).unwrap();
    let schedule = optimal.schedule().unwrap().to_vec();
    let problem = p.problem().unwrap();
    let spec = PerturbationSpec::new(move |ctx: &PolicyContext<'_>| schedule[ctx.k], 2.0, AdmissibleSet::Positive).unwrap();
    let over = optimal.scaled(1.2).unwrap();
    let report = verify_perturbation(&problem, &over, &spec, 1e-2, 0.0, 5000, 6).unwrap();
    assert!(report.finite_difference.mean < 0.0 && report.finite_difference.gap_sigmas(0.0) < -4.0, "{report:?}");
    assert!(report.variational.gap_sigmas(0.0) < -4.0, "{report:?}");
}

#[test]
fn simplified_control_matches_the_kernel_form() {
    let p = params(1e-2);
    let adjoint = solve_harvest_adjoint(&p).unwrap();
    let problem = p.problem().unwrap();
    let seeds = SeedPolicy::new(19);
    for i in 0..100 {
        let (path, _) = problem.noise(&seeds, i).unwrap();
        for t in [0.0, 0.37, 0.8, 1.0] {
            let full = optimal_harvest_control(&p, &adjoint, t, 0.3, &path).unwrap();
            let simple = optimal_harvest_simplified(&p, &adjoint, t).unwrap();
            assert!((full - simple).abs() <= 1e-12 * simple, "path {i}, t {t}");
        }
    }
}

#[test]
fn positivity_bound_of_the_factor() {
    let p = params(1e-3);
    let adjoint = solve_harvest_adjoint(&p).unwrap();
    assert!(positivity_slack(&p, &adjoint).unwrap() >= -1e-14);
    let u0 = optimal_harvest_simplified(&p, &adjoint, 0.0).unwrap();
    assert!((u0 - adjoint.g(0.0).powi(-2)).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hamiltonian_is_affine_in_adjoints(p1 in -3.0f64..3.0, p2 in -3.0f64..3.0, q1 in -3.0f64..3.0, q2 in -3.0f64..3.0, w in 0.0f64..1.0) {
        let model = params(1e-2).model();
        let at = |p: f64, q: f64| HamiltonianInputs { t: 0.3, x: 1.1, y: 0.8, u: 0.4, z: 0.0, p, q, r: &[], kernel: 0.7 };
        let h = |p, q| hamiltonian(&model, &at(p, q), None).unwrap();
        let mix = h(w * p1 + (1.0 - w) * p2, w * q1 + (1.0 - w) * q2);
        prop_assert!((mix - (w * h(p1, q1) + (1.0 - w) * h(p2, q2))).abs() < 1e-12);
    }

    #[test]
    fn stationary_point_of_hamiltonian(t in 0.0f64..1.0, kernel in 0.05f64..2.0) {
        let p = params(1e-2);
        let adjoint = solve_harvest_adjoint(&p).unwrap();
        let u = optimal_harvest_simplified(&p, &adjoint, t).unwrap();
        let pv = adjoint.g(t) * kernel;
        let inputs = HamiltonianInputs { t, x: 1.0, y: 1.0, u, z: 0.0, p: pv, q: 0.0, r: &[], kernel };
        let du = hamiltonian_partials(&p.model(), &inputs, None).unwrap().du;
        prop_assert!(du.abs() < 1e-12 * (1.0 + pv));
        for s in [0.8, 1.2] {
            let off = HamiltonianInputs { u: s * u, ..inputs };
            prop_assert!(hamiltonian(&p.model(), &off, None).unwrap() < hamiltonian(&p.model(), &inputs, None).unwrap());
        }
    }

    #[test]
    fn factor_is_positive_for_nonnegative_rates(alpha in 0.0f64..1.0, beta in 0.0f64..1.0, delay in 0.05f64..1.5) {
        let g = solve_linear_absde(&LinearAdvancedGenerator::new(alpha, beta, 0.0, TerminalPayoff::Deterministic(1.0)), delay, 1.0).unwrap();
        for i in 0..=20 {
            let t = i as f64 / 20.0;
            prop_assert!(g.g(t) >= (-alpha * (1.0 - t)).exp() - 1e-12);
        }
        prop_assert!(g.intervals() == (1.0f64 / delay).ceil() as usize || delay >= 1.0);
    }
}
