//! Linear time-advanced BSDEs
//!
//! ```text
//! dp(t) = (a(t) p(t) - c(t) E[p(t+δ) 1_{t ≤ T-δ} | F_t] + d(t)) dt + q(t) dB(t),   p(T) = κ M_T
//! ```
//!
//! with `M_t = E[δ_Z(z)|F_t]`. Since `M` is a martingale, `p = κ g M + h`
//! where the deterministic factors solve the advanced delay ODEs
//! `g' = a g - c g(·+δ) 1`, `g(T) = 1` and `h' = a h - c h(·+δ) 1 + d`,
//! `h(T) = 0`, integrated backward over `[T-δ, T]`, `[T-2δ, T-δ]`, ...

use std::fmt;
use std::sync::Arc;

use crate::delay_ode::{backward_breaks, solve_advanced_constant, solve_advanced_numeric, NumericCurve, PiecewiseExpPoly};
use crate::donsker::{pair_expectation_from_state, GaussianInsiderSpec};
use crate::error::{LabError, Result};
use crate::func::TimeFunction;
use crate::paths::{mc_aggregate, run_paths, sample_brownian, BrownianPath, Channel, MCEstimate, SeedPolicy, TimeGrid};

/// Terminal weight `κ` multiplying the kernel at `T`.
#[derive(Clone)]
pub enum TerminalPayoff {
    Deterministic(f64),
    /// `κ = h(B(T))`.
    BrownianFunction(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl TerminalPayoff {
    pub fn brownian_function(h: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        TerminalPayoff::BrownianFunction(Arc::new(h))
    }

    pub fn weight(&self, brownian_terminal: f64) -> f64 {
        match self {
            TerminalPayoff::Deterministic(k) => *k,
            TerminalPayoff::BrownianFunction(h) => h(brownian_terminal),
        }
    }
}

impl fmt::Debug for TerminalPayoff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TerminalPayoff::Deterministic(k) => write!(f, "Deterministic({k})"),
            TerminalPayoff::BrownianFunction(_) => f.write_str("BrownianFunction(..)"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LinearAdvancedGenerator {
    pub a: TimeFunction,
    pub c: TimeFunction,
    pub d: TimeFunction,
    pub terminal: TerminalPayoff,
}

impl LinearAdvancedGenerator {
    pub fn new(
        a: impl Into<TimeFunction>,
        c: impl Into<TimeFunction>,
        d: impl Into<TimeFunction>,
        terminal: TerminalPayoff,
    ) -> Self {
        Self { a: a.into(), c: c.into(), d: d.into(), terminal }
    }

    /// Largest `|a|, |c|, |d|` seen on 1001 points of `[0, horizon]`; errors when not finite.
    pub fn coefficient_bound(&self, horizon: f64) -> Result<f64> {
        let mut sup = 0.0f64;
        for i in 0..=1000 {
            let t = horizon * i as f64 / 1000.0;
            for v in [self.a.eval(t), self.c.eval(t), self.d.eval(t)] {
                if !v.is_finite() {
                    return Err(LabError::NonFinite(format!("generator coefficient at t = {t}")));
                }
                sup = sup.max(v.abs());
            }
        }
        Ok(sup)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Factor {
    Exact(PiecewiseExpPoly),
    Numeric(NumericCurve),
    Zero,
}

impl Factor {
    fn eval(&self, t: f64) -> f64 {
        match self {
            Factor::Exact(f) => f.eval(t),
            Factor::Numeric(f) => f.eval(t),
            Factor::Zero => 0.0,
        }
    }
}

/// Deterministic factors of the solution.
#[derive(Debug, Clone)]
pub struct AdjointSolution {
    generator: LinearAdvancedGenerator,
    delay: f64,
    horizon: f64,
    breaks: Vec<f64>,
    g: Factor,
    h: Factor,
}

/// Solves the advanced BSDE by the backward method of steps. Constant
/// coefficients are integrated exactly, time-varying ones by RK4.
pub fn solve_linear_absde(generator: &LinearAdvancedGenerator, delay: f64, horizon: f64) -> Result<AdjointSolution> {
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(LabError::InvalidParameter { name: "horizon", reason: format!("must be > 0, got {horizon}") });
    }
    if !(delay >= 0.0) || !delay.is_finite() {
        return Err(LabError::InvalidParameter { name: "delay", reason: format!("must be >= 0, got {delay}") });
    }
    generator.coefficient_bound(horizon)?;
    // With no lag the advanced term is c p(t) itself.
    let (a_fn, c_fn, lag) = if delay == 0.0 {
        let (a, c) = (generator.a.clone(), generator.c.clone());
        let merged = match (a.as_constant(), c.as_constant()) {
            (Some(a), Some(c)) => TimeFunction::Constant(a - c),
            _ => TimeFunction::custom(move |t| a.eval(t) - c.eval(t)),
        };
        (merged, TimeFunction::Constant(0.0), horizon)
    } else {
        (generator.a.clone(), generator.c.clone(), delay)
    };
    let d_fn = generator.d.clone();
    let forced = d_fn.as_constant() != Some(0.0);
    let exact = match (a_fn.as_constant(), c_fn.as_constant(), d_fn.as_constant()) {
        (Some(a), Some(c), Some(d)) => Some((a, c, d)),
        _ => None,
    };
    let (g, h) = match exact {
        Some((a, c, d)) => (
            Factor::Exact(solve_advanced_constant(a, c, 0.0, lag, horizon, 1.0)),
            if forced { Factor::Exact(solve_advanced_constant(a, c, d, lag, horizon, 0.0)) } else { Factor::Zero },
        ),
        None => {
            let max_step = (horizon / 4096.0).min(lag / 64.0);
            let (fa, fc, fd) = (|t| a_fn.eval(t), |t| c_fn.eval(t), |t| d_fn.eval(t));
            let g = Factor::Numeric(solve_advanced_numeric(&fa, &fc, &|_| 0.0, lag, horizon, 1.0, max_step));
            let h = if forced {
                Factor::Numeric(solve_advanced_numeric(&fa, &fc, &fd, lag, horizon, 0.0, max_step))
            } else {
                Factor::Zero
            };
            (g, h)
        }
    };
    let g_check = g.eval(0.0);
    if !g_check.is_finite() {
        return Err(LabError::NonFinite("adjoint factor g".into()));
    }
    Ok(AdjointSolution {
        generator: generator.clone(),
        delay,
        horizon,
        breaks: backward_breaks(lag, horizon),
        g,
        h,
    })
}

impl AdjointSolution {
    /// Factor `g` with `p = κ g M + h`.
    pub fn g(&self, t: f64) -> f64 {
        self.g.eval(t)
    }

    /// Forcing part `h`; identically 0 without forcing.
    pub fn h(&self, t: f64) -> f64 {
        self.h.eval(t)
    }

    pub fn delay(&self) -> f64 {
        self.delay
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn generator(&self) -> &LinearAdvancedGenerator {
        &self.generator
    }

    /// Interval boundaries `0 = s_0 < ... < s_m = T` of the backward recursion.
    pub fn breaks(&self) -> &[f64] {
        &self.breaks
    }

    pub fn intervals(&self) -> usize {
        self.breaks.len() - 1
    }

    pub fn is_exact(&self) -> bool {
        matches!(self.g, Factor::Exact(_))
    }

    /// `(p, q)` along a Brownian path at the information grid points of `[0, T]`.
    pub fn adjoint_path(&self, insider: &GaussianInsiderSpec, z: f64, path: &BrownianPath) -> Result<AdjointPath> {
        let n = insider.grid().steps_for(self.horizon, "horizon")?;
        let grid = TimeGrid::new(0.0, insider.grid().time(n), n)?;
        if path.grid().n_steps() < n {
            return Err(LabError::PathTooShort { needed: self.horizon, available: path.grid().t_end() });
        }
        let track = insider.kernel_track(z, path, n)?;
        let mut p = Vec::with_capacity(n + 1);
        let mut q = Vec::with_capacity(n + 1);
        match &self.generator.terminal {
            TerminalPayoff::Deterministic(kappa) => {
                for k in 0..=n {
                    let t = grid.time(k);
                    let g = self.g(t);
                    p.push(kappa * g * track.density[k] + self.h(t));
                    q.push(kappa * g * track.derivative[k]);
                }
            }
            TerminalPayoff::BrownianFunction(hfun) => {
                if self.delay < self.horizon {
                    return Err(LabError::Unsupported(
                        "random terminal weight is only solved on the last recursion interval [T-δ, T]".into(),
                    ));
                }
                let beta = insider.constant_beta().ok_or_else(|| {
                    LabError::Unsupported("random terminal weight needs a constant information integrand".into())
                })?;
                let info = insider.information_path(path)?;
                let eps = 1e-5;
                for (k, &zk) in info.iter().enumerate().take(n + 1) {
                    let t = grid.time(k);
                    let g = self.g(t);
                    let b = path.value(k);
                    let pe = |shift: f64| {
                        pair_expectation_from_state(insider, hfun.as_ref(), z, k, self.horizon, b + shift, zk + beta * shift)
                    };
                    let centre = pe(0.0)?;
                    let slope = (pe(eps)? - pe(-eps)?) / (2.0 * eps);
                    p.push(g * centre + self.h(t));
                    q.push(g * slope);
                }
            }
        }
        let kernel = track.density;
        let weight = self.generator.terminal.weight(path.value(n));
        let terminal = TerminalRecord { time: grid.time(n), value: p[n], expected: weight * kernel[n] };
        Ok(AdjointPath { grid, p, q, r: Vec::new(), kernel, terminal })
    }
}

/// Adjoint after the fact: `p(T)` and the value it should have.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TerminalRecord {
    pub time: f64,
    pub value: f64,
    pub expected: f64,
}

/// `(p, q, r)` and the kernel on the grid points of `[0, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointPath {
    grid: TimeGrid,
    p: Vec<f64>,
    q: Vec<f64>,
    r: Vec<Vec<f64>>,
    kernel: Vec<f64>,
    terminal: TerminalRecord,
}

impl AdjointPath {
    /// Adjoint from explicit sequences of equal length `n + 1`; `r` may be empty.
    pub fn from_parts(grid: TimeGrid, p: Vec<f64>, q: Vec<f64>, r: Vec<Vec<f64>>, kernel: Vec<f64>, expected_terminal: f64) -> Result<Self> {
        let len = grid.n_steps() + 1;
        if p.len() != len || q.len() != len || kernel.len() != len || !(r.is_empty() || r.len() == len) {
            return Err(LabError::InvalidParameter { name: "adjoint", reason: format!("sequences must have {len} points") });
        }
        if p.iter().chain(&q).chain(&kernel).chain(r.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(LabError::NonFinite("adjoint sequence".into()));
        }
        let terminal = TerminalRecord { time: grid.t_end(), value: p[len - 1], expected: expected_terminal };
        Ok(Self { grid, p, q, r, kernel, terminal })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    pub fn p(&self, k: usize) -> f64 {
        self.p[k]
    }

    pub fn q(&self, k: usize) -> f64 {
        self.q[k]
    }

    pub fn r(&self, k: usize) -> &[f64] {
        self.r.get(k).map_or(&[], Vec::as_slice)
    }

    pub fn kernel(&self, k: usize) -> f64 {
        self.kernel[k]
    }

    pub fn p_values(&self) -> &[f64] {
        &self.p
    }

    pub fn q_values(&self) -> &[f64] {
        &self.q
    }

    pub fn kernel_values(&self) -> &[f64] {
        &self.kernel
    }

    pub fn terminal(&self) -> TerminalRecord {
        self.terminal
    }
}

/// Discrete defects `p_{k+1} - p_k - drift_k dt - q_k ΔB_k` of an adjoint candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualReport {
    /// Signed sum of the defects over `[0, T]`.
    pub weak: MCEstimate,
    /// Mean absolute defect per step.
    pub mean_abs_step: MCEstimate,
    pub dt: f64,
}

/// Residual of the solved factors along freshly sampled paths.
pub fn absde_residual(
    solution: &AdjointSolution,
    insider: &GaussianInsiderSpec,
    z: f64,
    n_paths: usize,
    master_seed: u64,
) -> Result<ResidualReport> {
    absde_residual_with(
        solution.generator(),
        &|t| solution.g(t),
        &|t| solution.h(t),
        solution.delay(),
        solution.horizon(),
        insider,
        z,
        n_paths,
        master_seed,
    )
}

/// Residual of the candidate `p = κ g M + h` for arbitrary factors `g, h`.
#[allow(clippy::too_many_arguments)]
pub fn absde_residual_with(
    generator: &LinearAdvancedGenerator,
    g: &(dyn Fn(f64) -> f64 + Sync),
    h: &(dyn Fn(f64) -> f64 + Sync),
    delay: f64,
    horizon: f64,
    insider: &GaussianInsiderSpec,
    z: f64,
    n_paths: usize,
    master_seed: u64,
) -> Result<ResidualReport> {
    let TerminalPayoff::Deterministic(kappa) = generator.terminal else {
        return Err(LabError::Unsupported("residual check needs a deterministic terminal weight".into()));
    };
    let dt = insider.dt();
    let n = insider.grid().steps_for(horizon, "horizon")?;
    let m = insider.grid().steps_for(delay, "delay")?;
    let grid = TimeGrid::new(0.0, insider.grid().time(n), n)?;
    let times: Vec<f64> = grid.times().collect();
    let gv: Vec<f64> = times.iter().map(|&t| g(t)).collect();
    let hv: Vec<f64> = times.iter().map(|&t| h(t)).collect();
    let av: Vec<f64> = times.iter().map(|&t| generator.a.eval(t)).collect();
    let cv: Vec<f64> = times.iter().map(|&t| generator.c.eval(t)).collect();
    let dv: Vec<f64> = times.iter().map(|&t| generator.d.eval(t)).collect();
    let seeds = SeedPolicy::new(master_seed);
    let per_path = run_paths(n_paths, |i| {
        let path = sample_brownian(grid, &mut seeds.stream(Channel::Brownian, i));
        let track = insider.kernel_track(z, &path, n)?;
        let (mut signed, mut abs) = (0.0, 0.0);
        for k in 0..n {
            let mk = track.density[k];
            let p0 = kappa * gv[k] * mk + hv[k];
            let p1 = kappa * gv[k + 1] * track.density[k + 1] + hv[k + 1];
            let q0 = kappa * gv[k] * track.derivative[k];
            let advanced = if k + m <= n { kappa * gv[k + m] * mk + hv[k + m] } else { 0.0 };
            let drift = av[k] * p0 - cv[k] * advanced + dv[k];
            let defect = p1 - p0 - drift * dt - q0 * path.increment(k);
            signed += defect;
            abs += defect.abs();
        }
        Ok((signed, abs / n as f64))
    })?;
    Ok(ResidualReport {
        weak: mc_aggregate(per_path.iter().map(|r| r.0), master_seed)?,
        mean_abs_step: mc_aggregate(per_path.iter().map(|r| r.1), master_seed)?,
        dt,
    })
}
