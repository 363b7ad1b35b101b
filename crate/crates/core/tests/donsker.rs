use proptest::prelude::*;
use sdde_insider::donsker::{
    conditional_density, conditional_derivative, information_drift, information_state, kernel, pair_expectation_quadrature,
    GaussianInsiderSpec,
};
use sdde_insider::paths::{mc_aggregate, run_paths, sample_brownian, Channel, SeedPolicy};

fn trapezoid(f: impl Fn(f64) -> f64, lo: f64, hi: f64, m: usize) -> f64 {
    let h = (hi - lo) / m as f64;
    (0..=m).map(|j| if j == 0 || j == m { 0.5 } else { 1.0 } * f(lo + h * j as f64)).sum::<f64>() * h
}

#[test]
fn information_drift_second_moment() {
    let spec = GaussianInsiderSpec::constant(1.0, 1.0, 1e-3).unwrap();
    let seeds = SeedPolicy::new(21);
    let rows = run_paths(20_000, |i| {
        let path = sample_brownian(*spec.grid(), &mut seeds.stream(Channel::Brownian, i));
        Ok([information_drift(&spec, 0.5, &path)?, information_drift(&spec, 0.8, &path)?])
    })
    .unwrap();
    for (j, t) in [0.5, 0.8].into_iter().enumerate() {
        let sq = mc_aggregate(rows.iter().map(|r| r[j] * r[j]), 21).unwrap();
        assert!(sq.within(1.0 / (1.0 - t), 4.0), "t = {t}: {sq:?}");
        let mean = mc_aggregate(rows.iter().map(|r| r[j]), 21).unwrap();
        assert!(mean.within(0.0, 4.0));
    }
}

#[test]
fn clark_ocone_sum_reproduces_terminal_kernel() {
    let spec = GaussianInsiderSpec::constant(1.0, 1.0, 1e-3).unwrap();
    let n = spec.grid().index_of(0.6).unwrap();
    let seeds = SeedPolicy::new(4);
    let gaps = run_paths(10_000, |i| {
        let path = sample_brownian(*spec.grid(), &mut seeds.stream(Channel::Brownian, i));
        let track = spec.kernel_track(0.2, &path, n)?;
        let stoch: f64 = (0..n).map(|k| track.derivative[k] * path.increment(k)).sum();
        Ok(track.density[n] - track.density[0] - stoch)
    })
    .unwrap();
    let est = mc_aggregate(gaps, 4).unwrap();
    assert!(est.within(0.0, 4.0), "{est:?}");
}

#[test]
fn pair_expectation_quadrature_matches_monte_carlo() {
    let spec = GaussianInsiderSpec::constant(1.0, 1.0, 1e-3).unwrap();
    let horizon = 0.6;
    let z = 0.3;
    let n = spec.grid().index_of(horizon).unwrap();
    let h = |b: f64| 1.0 + b * b;
    let seeds = SeedPolicy::new(8);
    let start = sample_brownian(*spec.grid(), &mut seeds.stream(Channel::Brownian, 0));
    let quad = pair_expectation_quadrature(&spec, h, z, 0.0, horizon, &start).unwrap();
    let values = run_paths(40_000, |i| {
        let path = sample_brownian(*spec.grid(), &mut seeds.stream(Channel::Brownian, i));
        Ok(h(path.value(n)) * spec.kernel_track(z, &path, n)?.density[n])
    })
    .unwrap();
    let est = mc_aggregate(values, 8).unwrap();
    assert!(est.within(quad, 4.0), "quadrature {quad}, mc {est:?}");
}

#[test]
fn time_varying_integrand_is_normalised() {
    let spec = GaussianInsiderSpec::from_fn(1.0, 1e-3, |t| 1.0 + t).unwrap();
    let path = sample_brownian(*spec.grid(), &mut SeedPolicy::new(1).stream(Channel::Brownian, 0));
    let k = spec.grid().index_of(0.5).unwrap();
    let sd = spec.remaining_variance(k).sqrt();
    let centre = information_state(&spec, &path, 0.5).unwrap();
    let total = trapezoid(|z| conditional_density(&spec, z, 0.5, &path).unwrap(), centre - 12.0 * sd, centre + 12.0 * sd, 4000);
    assert!((total - 1.0).abs() < 1e-9);
    assert!(spec.constant_beta().is_none());
}

#[test]
fn kernel_after_insider_horizon_is_refused() {
    let spec = GaussianInsiderSpec::constant(1.0, 1.0, 1e-2).unwrap();
    let path = sample_brownian(*spec.grid(), &mut SeedPolicy::new(1).stream(Channel::Brownian, 0));
    assert!(kernel(&spec, 0.0, 1.0, &path).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kernel_is_a_density_in_z(seed in any::<u64>(), t in 0.0f64..0.9, beta in 0.2f64..3.0) {
        let spec = GaussianInsiderSpec::constant(beta, 1.0, 1e-2).unwrap();
        let t = (t * 100.0).round() / 100.0;
        let path = sample_brownian(*spec.grid(), &mut SeedPolicy::new(seed).stream(Channel::Brownian, 0));
        let k = spec.grid().index_of(t).unwrap();
        let sd = spec.remaining_variance(k).sqrt();
        let centre = information_state(&spec, &path, t).unwrap();
        let total = trapezoid(|z| conditional_density(&spec, z, t, &path).unwrap(), centre - 12.0 * sd, centre + 12.0 * sd, 2000);
        prop_assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn derivative_over_density_at_z_equals_drift(seed in any::<u64>(), t in 0.0f64..0.9) {
        let spec = GaussianInsiderSpec::constant(1.0, 1.0, 1e-2).unwrap();
        let t = (t * 100.0).round() / 100.0;
        let path = sample_brownian(*spec.grid(), &mut SeedPolicy::new(seed).stream(Channel::Brownian, 0));
        let z = path.terminal();
        let ratio = conditional_derivative(&spec, z, t, &path).unwrap() / conditional_density(&spec, z, t, &path).unwrap();
        let drift = information_drift(&spec, t, &path).unwrap();
        prop_assert!((ratio - drift).abs() <= 1e-9 * (1.0 + drift.abs()));
        prop_assert!((drift - (path.terminal() - path.value(spec.grid().index_of(t).unwrap())) / (1.0 - t)).abs() < 1e-9 * (1.0 + drift.abs()));
    }

    #[test]
    fn kernel_is_positive(seed in any::<u64>(), z in -5.0f64..5.0) {
        let spec = GaussianInsiderSpec::constant(1.0, 1.0, 1e-2).unwrap();
        let path = sample_brownian(*spec.grid(), &mut SeedPolicy::new(seed).stream(Channel::Brownian, 0));
        let kv = kernel(&spec, z, 0.5, &path).unwrap();
        prop_assert!(kv.density > 0.0 && kv.density.is_finite());
    }
}

#[test]
fn density_and_derivative_plug_in_values() {
    let spec = GaussianInsiderSpec::constant(1.0, 1.0, 1e-2).unwrap();
    let path = sample_brownian(*spec.grid(), &mut SeedPolicy::new(1).stream(Channel::Brownian, 0));
    let kv = kernel(&spec, 1.0, 0.0, &path).unwrap();
    assert!((kv.density - 0.241_970_724_519_143_37).abs() < 1e-12);
    assert!((kv.derivative - 0.241_970_724_519_143_37).abs() < 1e-12);
}

#[test]
fn information_variance_for_linear_integrand() {
    let spec = GaussianInsiderSpec::from_fn(1.5, 1e-3, |s| s).unwrap();
    let seeds = SeedPolicy::new(31);
    let k = spec.grid().index_of(1.0).unwrap();
    let z = run_paths(40_000, |i| {
        let path = sample_brownian(*spec.grid(), &mut seeds.stream(Channel::Brownian, i));
        Ok(spec.information_path(&path)?[k])
    })
    .unwrap();
    let sq = mc_aggregate(z.iter().map(|v| v * v), 31).unwrap();
    assert!(sq.within(1.0 / 3.0, 4.0), "{sq:?}");
}

#[test]
fn kernel_is_a_martingale_from_a_fixed_past() {
    let spec = GaussianInsiderSpec::constant(1.0, 1.0, 1e-3).unwrap();
    let grid = *spec.grid();
    let (k1, k2) = (grid.index_of(0.3).unwrap(), grid.index_of(0.7).unwrap());
    let seeds = SeedPolicy::new(77);
    let past = sample_brownian(grid, &mut seeds.stream(Channel::Auxiliary, 0));
    let past_incs: Vec<f64> = past.increments().take(k1).collect();
    let z = 0.4;
    let start = spec.kernel_track(z, &past, k1).unwrap().density[k1];
    let values = run_paths(20_000, |i| {
        let fresh = sample_brownian(grid, &mut seeds.stream(Channel::Brownian, i));
        let mut incs = past_incs.clone();
        incs.extend(fresh.increments().skip(k1));
        let path = sdde_insider::BrownianPath::from_increments(grid, &incs)?;
        Ok(spec.kernel_track(z, &path, k2)?.density[k2])
    })
    .unwrap();
    let est = mc_aggregate(values, 77).unwrap();
    assert!(est.within(start, 4.0), "{est:?} vs {start}");
}

#[test]
fn pair_expectation_of_constant_is_the_kernel() {
    let spec = GaussianInsiderSpec::constant(1.0, 1.5, 1e-3).unwrap();
    let path = sample_brownian(*spec.grid(), &mut SeedPolicy::new(4).stream(Channel::Brownian, 0));
    for t in [0.0, 0.4, 0.9] {
        let pe = pair_expectation_quadrature(&spec, |_| 1.0, 0.2, t, 1.0, &path).unwrap();
        let m = conditional_density(&spec, 0.2, t, &path).unwrap();
        assert!((pe - m).abs() < 1e-12 * m.max(1.0), "t {t}: {pe} vs {m}");
    }
}
