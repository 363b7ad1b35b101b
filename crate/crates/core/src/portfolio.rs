//! Insider log-utility portfolio in a market with delay:
//!
//! ```text
//! dX(t) = X(t) π(t) θ(t) (b(t) dt + σ(t) dB(t)),   θ(t) = X(t-r)/X(t) 1_{t<τ₀},   X = ξ on [-r, 0]
//! ```
//!
//! with inside information `Z = B(T₀)`. Writing `ψ = θ π`,
//! `ln X(T) = ∫ (b ψ - σ²ψ²/2) ds + ∫ σ ψ d⁻B`, and the optimum is
//! `ψ̂ = Φ/σ + b/σ²` with `Φ(t) = (B(T₀) - B(t))/(T₀ - t)`, for which
//! `E[ln X̂(T)] = ½∫ b²/σ² ds + ½ ln(T₀/(T₀ - T))`.

use rand_distr::{Distribution, StandardNormal};

use crate::donsker::{information_drift, GaussianInsiderSpec};
use crate::error::{ensure_finite, LabError, Result};
use crate::func::TimeFunction;
use crate::paths::{mc_aggregate, run_paths, sample_brownian, BrownianPath, Channel, MCEstimate, SeedPolicy, TimeGrid};
use crate::sdde::{first_hit_zero, simulate_sdde, Anticipating, DelaySpec, ModelCoefficients, Noise, PolicyContext};

#[derive(Debug, Clone)]
pub struct MarketParams {
    pub b: TimeFunction,
    pub sigma: TimeFunction,
    pub delay: f64,
    pub xi: TimeFunction,
    pub horizon: f64,
    pub t0: f64,
    pub dt: f64,
}

impl MarketParams {
    /// `b ≡ 0`, `σ ≡ 1`, `ξ ≡ 1`.
    pub fn driftless(delay: f64, horizon: f64, t0: f64, dt: f64) -> Self {
        Self {
            b: TimeFunction::Constant(0.0),
            sigma: TimeFunction::Constant(1.0),
            delay,
            xi: TimeFunction::Constant(1.0),
            horizon,
            t0,
            dt,
        }
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::with_step(0.0, self.horizon, self.dt)
    }

    pub fn delay_steps(&self) -> Result<usize> {
        crate::paths::steps_in(self.delay, self.dt, "delay")
    }

    pub fn validate(&self) -> Result<()> {
        let grid = self.grid()?;
        self.delay_steps()?;
        if !(self.t0 >= self.horizon) {
            return Err(LabError::InvalidParameter {
                name: "t0",
                reason: format!("insider horizon T0 = {} precedes T = {}", self.t0, self.horizon),
            });
        }
        crate::paths::steps_in(self.t0 - self.horizon, self.dt, "t0 - horizon")?;
        if (self.xi.eval(0.0) - 1.0).abs() > 1e-12 {
            return Err(LabError::InvalidParameter { name: "xi", reason: format!("ξ(0) must be 1, got {}", self.xi.eval(0.0)) });
        }
        let m = self.delay_steps()?;
        for i in 0..=m {
            let v = self.xi.eval(-self.delay + i as f64 * self.dt);
            if !(v > 0.0) || !v.is_finite() {
                return Err(LabError::InvalidParameter { name: "xi", reason: format!("initial segment must be > 0, got {v}") });
            }
        }
        for k in 0..=grid.n_steps() {
            let t = grid.time(k);
            let (b, s) = (self.b.eval(t), self.sigma.eval(t));
            if !b.is_finite() || !(s > 0.0) || !s.is_finite() {
                return Err(LabError::InvalidParameter {
                    name: "sigma",
                    reason: format!("need finite b and σ > 0, got b = {b}, σ = {s} at t = {t}"),
                });
            }
        }
        Ok(())
    }

    /// Information `Z = B(T₀)` on the full grid `[0, T₀]`.
    pub fn insider(&self) -> Result<GaussianInsiderSpec> {
        GaussianInsiderSpec::constant(1.0, self.t0, self.dt)
    }
}

/// Driving noise of one path: `B` on `[0, T]` and the value `B(T₀)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketNoise {
    pub path: BrownianPath,
    pub b_t0: f64,
}

impl MarketNoise {
    /// Path `index` of `master_seed`; `B(T₀) - B(T)` is drawn exactly from the auxiliary channel.
    pub fn sample(params: &MarketParams, seeds: &SeedPolicy, index: u64) -> Result<Self> {
        let grid = params.grid()?;
        let path = sample_brownian(grid, &mut seeds.stream(Channel::Brownian, index));
        let xi: f64 = StandardNormal.sample(&mut seeds.stream(Channel::Auxiliary, index));
        let b_t0 = path.terminal() + (params.t0 - params.horizon).sqrt() * xi;
        Ok(Self { path, b_t0 })
    }

    /// Restriction of a path on `[0, T₀]`.
    pub fn from_full_path(params: &MarketParams, full: &BrownianPath) -> Result<Self> {
        let n = params.grid()?.n_steps();
        let path = BrownianPath::from_increments(params.grid()?, &full.increments().take(n).collect::<Vec<_>>())?;
        if (full.grid().t_end() - params.t0).abs() > 1e-9 * params.t0 {
            return Err(LabError::PathTooShort { needed: params.t0, available: full.grid().t_end() });
        }
        Ok(Self { path, b_t0: full.terminal() })
    }

    /// `Φ(t_k) = (B(T₀) - B(t_k))/(T₀ - t_k)`.
    pub fn information_drift(&self, params: &MarketParams, k: usize) -> Result<f64> {
        let t = self.path.grid().time(k);
        let tau = params.t0 - t;
        if !(tau > 0.0) {
            return Err(LabError::DegenerateKernel(tau));
        }
        Ok((self.b_t0 - self.path.value(k)) / tau)
    }
}

/// Portfolio rules `π(t)` seen from wealth `X(t)`, `X(t-r)` and the drift `Φ(t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PortfolioPolicy {
    Optimal,
    /// `factor · π̂`.
    Scaled(f64),
    /// `π = c X(t)/X(t-r)`, i.e. `ψ ≡ c`.
    ConstantExposure(f64),
    /// `π ≡ c`.
    ConstantFraction(f64),
    Zero,
}

/// `π̂ = X(t)/(σ X(t-r)) Φ + b/σ² · X(t)/X(t-r)`.
pub fn optimal_portfolio(params: &MarketParams, t: f64, x: f64, x_lag: f64, phi: f64) -> Result<f64> {
    if x_lag == 0.0 {
        return Err(LabError::InvalidParameter { name: "x_lag", reason: "X(t-r) = 0".into() });
    }
    let (b, s) = (params.b.eval(t), params.sigma.eval(t));
    ensure_finite(x / (s * x_lag) * phi + b / (s * s) * x / x_lag, || format!("optimal portfolio at t = {t}"))
}

impl PortfolioPolicy {
    pub fn portfolio(&self, params: &MarketParams, t: f64, x: f64, x_lag: f64, phi: f64) -> Result<f64> {
        match *self {
            PortfolioPolicy::Optimal => optimal_portfolio(params, t, x, x_lag, phi),
            PortfolioPolicy::Scaled(f) => Ok(f * optimal_portfolio(params, t, x, x_lag, phi)?),
            PortfolioPolicy::ConstantExposure(c) => Ok(c * x / x_lag),
            PortfolioPolicy::ConstantFraction(c) => Ok(c),
            PortfolioPolicy::Zero => Ok(0.0),
        }
    }
}

fn initial_segment(params: &MarketParams) -> Result<Vec<f64>> {
    let m = params.delay_steps()?;
    Ok((0..=m).map(|i| params.xi.eval(-params.delay + i as f64 * params.dt)).collect())
}

/// Terminal log-wealth of the exponential form and `∫ ψ² ds`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogWealth {
    pub log_terminal: f64,
    pub exposure_sq: f64,
}

/// `ln X(T) = Σ (b ψ_k - σ²ψ_k²/2) dt + σ ψ_k ΔB_k`, left-endpoint (forward) sums.
pub fn simulate_log_wealth(params: &MarketParams, policy: PortfolioPolicy, noise: &MarketNoise) -> Result<LogWealth> {
    let grid = params.grid()?;
    let n = grid.n_steps();
    let m = params.delay_steps()?;
    let dt = params.dt;
    let history: Vec<f64> = initial_segment(params)?.iter().map(|v| v.ln()).collect();
    let mut logs = Vec::with_capacity(n + 1);
    logs.push(history[m]);
    let mut exposure_sq = 0.0;
    for k in 0..n {
        let t = grid.time(k);
        let log_lag = if k >= m { logs[k - m] } else { history[k] };
        let (x, x_lag) = (logs[k].exp(), log_lag.exp());
        let phi = noise.information_drift(params, k)?;
        let pi = policy.portfolio(params, t, x, x_lag, phi)?;
        let psi = x_lag / x * pi;
        let (b, s) = (params.b.eval(t), params.sigma.eval(t));
        let next = logs[k] + (b * psi - 0.5 * s * s * psi * psi) * dt + s * psi * noise.path.increment(k);
        logs.push(ensure_finite(next, || format!("log wealth at t = {}", grid.time(k + 1)))?);
        exposure_sq += psi * psi * dt;
    }
    Ok(LogWealth { log_terminal: logs[n], exposure_sq })
}

struct DelayMarket<'a> {
    params: &'a MarketParams,
}

impl ModelCoefficients for DelayMarket<'_> {
    fn drift(&self, t: f64, x: f64, y: f64, u: f64, _z: f64) -> f64 {
        if x > 0.0 {
            u * y * self.params.b.eval(t)
        } else {
            0.0
        }
    }

    fn diffusion(&self, t: f64, x: f64, y: f64, u: f64, _z: f64) -> f64 {
        if x > 0.0 {
            u * y * self.params.sigma.eval(t)
        } else {
            0.0
        }
    }

    fn running_profit(&self, _t: f64, _x: f64, _u: f64, _z: f64) -> f64 {
        0.0
    }

    fn terminal_payoff(&self, x: f64, _z: f64, _b: f64) -> f64 {
        x.ln()
    }
}

/// Outcome of the direct Euler scheme for the wealth equation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirectWealth {
    /// `ln X(T)`, absent when wealth reached 0.
    pub log_terminal: Option<f64>,
    pub tau0: Option<f64>,
}

/// Euler scheme `X_{k+1} = X_k + π_k X_{k-m} (b dt + σ ΔB_k)`, frozen once `X ≤ 0`.
pub fn simulate_wealth_direct(params: &MarketParams, policy: PortfolioPolicy, noise: &MarketNoise) -> Result<DirectWealth> {
    let grid = params.grid()?;
    let coeffs = DelayMarket { params };
    let control = Anticipating(|ctx: &PolicyContext<'_>| {
        let x = ctx.state[ctx.k];
        if x <= 0.0 {
            return 0.0;
        }
        noise
            .information_drift(params, ctx.k)
            .and_then(|phi| policy.portfolio(params, ctx.t, x, ctx.delayed, phi))
            .unwrap_or(f64::NAN)
    });
    let state = simulate_sdde(&coeffs, &control, noise.b_t0, Noise::brownian(&noise.path), &DelaySpec::new(params.delay, params.xi.clone()), grid)?;
    let tau0 = first_hit_zero(&state);
    Ok(DirectWealth { log_terminal: tau0.is_none().then(|| state.terminal().ln()), tau0 })
}

/// `½∫₀ᵀ b²/σ² ds + ½ ln(T₀/(T₀-T))`; `+∞` when `T₀ = T`.
pub fn expected_log_utility_analytic(params: &MarketParams) -> Result<f64> {
    expected_log_utility_scaled(params, 1.0)
}

/// Expected log-utility of `factor · π̂`: `½(1 - ε²)(∫ b²/σ² + ln(T₀/(T₀-T)))`, `ε = factor - 1`.
pub fn expected_log_utility_scaled(params: &MarketParams, factor: f64) -> Result<f64> {
    if !(params.t0 >= params.horizon) {
        return Err(LabError::InvalidParameter {
            name: "t0",
            reason: format!("insider horizon T0 = {} precedes T = {}", params.t0, params.horizon),
        });
    }
    let eps = factor - 1.0;
    let weight = 0.5 * (1.0 - eps * eps);
    if params.t0 == params.horizon {
        return Ok(if weight > 0.0 {
            f64::INFINITY
        } else if weight < 0.0 {
            f64::NEG_INFINITY
        } else {
            0.0
        });
    }
    let info = (params.t0 / (params.t0 - params.horizon)).ln();
    Ok(weight * (info + sharpe_integral(params)))
}

/// Same quantity for the left-endpoint scheme on the grid: `ln(T₀/(T₀-T))`
/// becomes `Σ dt/(T₀ - t_k)` and the Sharpe integral a left Riemann sum.
pub fn discrete_expected_log_utility(params: &MarketParams, factor: f64) -> Result<f64> {
    let grid = params.grid()?;
    let eps = factor - 1.0;
    let sum: f64 = (0..grid.n_steps())
        .map(|k| {
            let t = grid.time(k);
            let r = params.b.eval(t) / params.sigma.eval(t);
            (1.0 / (params.t0 - t) + r * r) * params.dt
        })
        .sum();
    Ok(0.5 * (1.0 - eps * eps) * sum)
}

/// `∫₀ᵀ b²/σ² ds`, exact for constants, composite Simpson otherwise.
fn sharpe_integral(params: &MarketParams) -> f64 {
    let f = |t: f64| {
        let r = params.b.eval(t) / params.sigma.eval(t);
        r * r
    };
    if let (Some(b), Some(s)) = (params.b.as_constant(), params.sigma.as_constant()) {
        return (b / s) * (b / s) * params.horizon;
    }
    let n = 4000;
    let h = params.horizon / n as f64;
    let interior: f64 = (1..n).map(|i| if i % 2 == 1 { 4.0 } else { 2.0 } * f(h * i as f64)).sum();
    h / 3.0 * (f(0.0) + interior + f(params.horizon))
}

fn check_mc(params: &MarketParams) -> Result<()> {
    params.validate()?;
    if params.t0 == params.horizon {
        return Err(LabError::Unsupported(
            "Monte Carlo at T0 = T is refused (divergent integrand); use the analytic value".into(),
        ));
    }
    Ok(())
}

/// Per-path log-wealth under `policy`.
pub fn log_utility_samples(params: &MarketParams, policy: PortfolioPolicy, n_paths: usize, master_seed: u64) -> Result<Vec<LogWealth>> {
    check_mc(params)?;
    let seeds = SeedPolicy::new(master_seed);
    run_paths(n_paths, |i| simulate_log_wealth(params, policy, &MarketNoise::sample(params, &seeds, i)?))
}

/// `E[ln X(T)]`.
pub fn expected_log_utility_mc(params: &MarketParams, policy: PortfolioPolicy, n_paths: usize, master_seed: u64) -> Result<MCEstimate> {
    let samples = log_utility_samples(params, policy, n_paths, master_seed)?;
    mc_aggregate(samples.iter().map(|s| s.log_terminal), master_seed)
}

/// `E[∫ (X(s-r)/X(s))² π² ds]`.
pub fn admissibility_check(params: &MarketParams, policy: PortfolioPolicy, n_paths: usize, master_seed: u64) -> Result<MCEstimate> {
    let samples = log_utility_samples(params, policy, n_paths, master_seed)?;
    mc_aggregate(samples.iter().map(|s| s.exposure_sq), master_seed)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViabilityRow {
    pub t0: f64,
    pub mc: MCEstimate,
    pub analytic: f64,
    pub gap_sigmas: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViabilitySweep {
    pub rows: Vec<ViabilityRow>,
    /// Least-squares slope of the MC means against `-ln(T₀ - T)`.
    pub slope: f64,
    /// The same fit applied to the analytic values.
    pub analytic_slope: f64,
}

/// `E[ln X̂(T)]` for each insider horizon, on common random numbers.
pub fn viability_sweep(params: &MarketParams, t0_list: &[f64], n_paths: usize, master_seed: u64) -> Result<ViabilitySweep> {
    if t0_list.len() < 2 {
        return Err(LabError::InvalidParameter { name: "t0_list", reason: "need at least two insider horizons".into() });
    }
    let mut rows = Vec::with_capacity(t0_list.len());
    for &t0 in t0_list {
        let p = MarketParams { t0, ..params.clone() };
        if !(t0 > p.horizon) {
            return Err(LabError::InvalidParameter { name: "t0", reason: format!("sweep needs T0 > T, got {t0}") });
        }
        let mc = expected_log_utility_mc(&p, PortfolioPolicy::Optimal, n_paths, master_seed)?;
        let analytic = expected_log_utility_analytic(&p)?;
        rows.push(ViabilityRow { t0, mc, analytic, gap_sigmas: mc.gap_sigmas(analytic) });
    }
    let xs: Vec<f64> = rows.iter().map(|r| -(r.t0 - params.horizon).ln()).collect();
    let slope = least_squares_slope(&xs, &rows.iter().map(|r| r.mc.mean).collect::<Vec<_>>());
    let analytic_slope = least_squares_slope(&xs, &rows.iter().map(|r| r.analytic).collect::<Vec<_>>());
    Ok(ViabilitySweep { rows, slope, analytic_slope })
}

pub fn least_squares_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Largest `|ln X̂(T; r) - ln X̂(T; r')|` over the given delays on shared noise.
pub fn delay_cancellation_gap(params: &MarketParams, delays: &[f64], n_paths: usize, master_seed: u64) -> Result<f64> {
    let variants: Vec<MarketParams> = delays.iter().map(|&delay| MarketParams { delay, ..params.clone() }).collect();
    for v in &variants {
        check_mc(v)?;
    }
    let seeds = SeedPolicy::new(master_seed);
    let gaps = run_paths(n_paths, |i| {
        let noise = MarketNoise::sample(params, &seeds, i)?;
        let logs = variants
            .iter()
            .map(|v| Ok(simulate_log_wealth(v, PortfolioPolicy::Optimal, &noise)?.log_terminal))
            .collect::<Result<Vec<f64>>>()?;
        let (lo, hi) = logs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        Ok(hi - lo)
    })?;
    Ok(gaps.into_iter().fold(0.0, f64::max))
}

/// Gap between the direct Euler scheme and the exponential form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EulerGap {
    pub signed: MCEstimate,
    pub absolute: MCEstimate,
    /// Paths on which the direct scheme hit 0 before `T`.
    pub hits: usize,
}

pub fn euler_gap(params: &MarketParams, policy: PortfolioPolicy, n_paths: usize, master_seed: u64) -> Result<EulerGap> {
    check_mc(params)?;
    let seeds = SeedPolicy::new(master_seed);
    let per_path = run_paths(n_paths, |i| {
        let noise = MarketNoise::sample(params, &seeds, i)?;
        let exp_form = simulate_log_wealth(params, policy, &noise)?.log_terminal;
        Ok(simulate_wealth_direct(params, policy, &noise)?.log_terminal.map(|d| d - exp_form))
    })?;
    let hits = per_path.iter().filter(|g| g.is_none()).count();
    let gaps: Vec<f64> = per_path.into_iter().flatten().collect();
    Ok(EulerGap {
        signed: mc_aggregate(gaps.iter().copied(), master_seed)?,
        absolute: mc_aggregate(gaps.iter().map(|g| g.abs()), master_seed)?,
        hits,
    })
}

/// Number of direct-Euler paths under `π̂` that reach 0 before `T`.
pub fn ruin_count(params: &MarketParams, n_paths: usize, master_seed: u64) -> Result<usize> {
    check_mc(params)?;
    let seeds = SeedPolicy::new(master_seed);
    let hits = run_paths(n_paths, |i| {
        let noise = MarketNoise::sample(params, &seeds, i)?;
        Ok(simulate_wealth_direct(params, PortfolioPolicy::Optimal, &noise)?.tau0.is_some())
    })?;
    Ok(hits.into_iter().filter(|&h| h).count())
}

/// `Φ(t)` through the general Donsker-kernel ratio on a path over `[0, T₀]`.
pub fn information_drift_from_kernel(params: &MarketParams, t: f64, full: &BrownianPath) -> Result<f64> {
    information_drift(&params.insider()?, t, full)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn market(delay: f64) -> MarketParams {
        MarketParams::driftless(delay, 1.0, 2.0, 1e-2)
    }

    #[test]
    fn optimal_portfolio_arithmetic() {
        let p = MarketParams { b: 0.1.into(), sigma: 0.2.into(), ..market(0.25) };
        assert!((optimal_portfolio(&p, 0.3, 1.7, 1.7, 0.5).unwrap() - 5.0).abs() < 1e-12);
        assert_eq!(optimal_portfolio(&market(0.25), 0.3, 1.0, 2.0, 0.0).unwrap(), 0.0);
        assert!(optimal_portfolio(&p, 0.3, 1.0, 0.0, 0.5).is_err());
    }

    #[test]
    fn no_position_keeps_unit_wealth() {
        let p = market(0.25);
        let noise = MarketNoise::sample(&p, &SeedPolicy::new(1), 0).unwrap();
        let w = simulate_log_wealth(&p, PortfolioPolicy::Zero, &noise).unwrap();
        assert_eq!(w.log_terminal, 0.0);
        assert_eq!(w.exposure_sq, 0.0);
    }

    #[test]
    fn analytic_values() {
        let p = market(0.25);
        assert!((expected_log_utility_analytic(&p).unwrap() - 0.5 * 2f64.ln()).abs() < 1e-15);
        let flat = MarketParams { t0: 1.0, ..p.clone() };
        assert_eq!(expected_log_utility_analytic(&flat).unwrap(), f64::INFINITY);
        let early = MarketParams { t0: 0.5, ..p.clone() };
        assert!(expected_log_utility_analytic(&early).is_err());
        let far = MarketParams { b: 1.0.into(), t0: 1e12, ..p };
        assert!((expected_log_utility_analytic(&far).unwrap() - 0.5).abs() < 1e-9);
    }

    #[test]
    fn time_varying_sharpe_integral() {
        let p = MarketParams { b: TimeFunction::custom(|t| t), sigma: TimeFunction::custom(|_| 2.0), t0: 1e15, ..market(0.0) };
        // ½ ∫ t²/4 dt = 1/24
        assert!((expected_log_utility_analytic(&p).unwrap() - 1.0 / 24.0).abs() < 1e-12);
    }

    #[test]
    fn kernel_drift_matches_closed_form() {
        let p = market(0.0);
        let insider = p.insider().unwrap();
        let full = sample_brownian(*insider.grid(), &mut SeedPolicy::new(3).stream(Channel::Brownian, 0));
        let noise = MarketNoise::from_full_path(&p, &full).unwrap();
        for k in [0, 10, 50, 99] {
            let t = k as f64 * p.dt;
            let a = information_drift_from_kernel(&p, t, &full).unwrap();
            let b = noise.information_drift(&p, k).unwrap();
            assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn monte_carlo_refused_without_information_gap() {
        let p = MarketParams { t0: 1.0, ..market(0.25) };
        assert!(matches!(expected_log_utility_mc(&p, PortfolioPolicy::Optimal, 10, 1), Err(LabError::Unsupported(_))));
    }

    #[test]
    fn slope_fit_is_exact_on_lines() {
        let xs = [0.0, 1.0, 2.0, 5.0];
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 - 0.5 * x).collect();
        assert!((least_squares_slope(&xs, &ys) + 0.5).abs() < 1e-14);
    }
}
