//! Performance functionals and numerical checks of the maximum principles.

use std::sync::Arc;

use statrs::function::erf::erfc;

use super::{hamiltonian, hamiltonian_partials, inputs_at, AdjointPath};
use crate::donsker::{GaussianInsiderSpec, KernelTrack};
use crate::error::{ensure_finite, LabError, Result};
use crate::paths::{
    mc_aggregate, run_paths, sample_brownian, sample_jumps, BrownianPath, Channel, JumpModel, JumpPath, MCEstimate,
    SeedPolicy, TimeGrid,
};
use crate::sdde::{
    simulate_sdde, simulate_variational, ControlPolicy, DelaySpec, ModelCoefficients, Noise, OpenLoop, PolicyContext,
    SegmentedState,
};

/// Model, inside information and delay of a parameterised control problem on `[0, T]`.
#[derive(Debug, Clone)]
pub struct ControlProblem<C> {
    pub coeffs: C,
    pub insider: GaussianInsiderSpec,
    pub delay: DelaySpec,
    pub horizon: f64,
    pub jumps: Option<JumpModel>,
}

/// One simulated path: weighted payoff, state and kernel.
#[derive(Debug, Clone)]
pub struct PathOutcome {
    pub payoff: f64,
    pub state: SegmentedState,
    pub kernel: KernelTrack,
}

impl<C: ModelCoefficients> ControlProblem<C> {
    pub fn new(coeffs: C, insider: GaussianInsiderSpec, delay: DelaySpec, horizon: f64) -> Result<Self> {
        let problem = Self { coeffs, insider, delay, horizon, jumps: None };
        problem.grid()?;
        Ok(problem)
    }

    pub fn with_jumps(mut self, jumps: JumpModel) -> Self {
        self.jumps = Some(jumps);
        self
    }

    /// Simulation grid `[0, T]` with the information step; needs `T < T₀`.
    pub fn grid(&self) -> Result<TimeGrid> {
        if !(self.horizon < self.insider.t0()) {
            return Err(LabError::InvalidParameter {
                name: "horizon",
                reason: format!("T = {} must be below the information horizon T0 = {}", self.horizon, self.insider.t0()),
            });
        }
        let n = self.insider.grid().steps_for(self.horizon, "horizon")?;
        self.delay.steps(self.insider.grid())?;
        TimeGrid::new(0.0, self.insider.grid().time(n), n)
    }

    pub fn noise(&self, seeds: &SeedPolicy, index: u64) -> Result<(BrownianPath, Option<JumpPath>)> {
        let grid = self.grid()?;
        let path = sample_brownian(grid, &mut seeds.stream(Channel::Brownian, index));
        let jumps = match self.jumps {
            Some(model) => Some(sample_jumps(grid, model, &mut seeds.stream(Channel::Jumps, index))?),
            None => None,
        };
        Ok((path, jumps))
    }

    /// `Σ f(t_k, X_k, u_k, z) M_k dt + g(X_T, z) M_T` along one noise path.
    pub fn outcome<P>(&self, policy: &P, z: f64, path: &BrownianPath, jumps: Option<&JumpPath>) -> Result<PathOutcome>
    where
        P: ControlPolicy + ?Sized,
    {
        let grid = self.grid()?;
        let state = simulate_sdde(&self.coeffs, policy, z, Noise { brownian: path, jumps }, &self.delay, grid)?;
        let kernel = self.insider.kernel_track(z, path, grid.n_steps())?;
        let payoff = self.weighted_payoff(&state, &kernel, z, path)?;
        Ok(PathOutcome { payoff, state, kernel })
    }

    fn weighted_payoff(&self, state: &SegmentedState, kernel: &KernelTrack, z: f64, path: &BrownianPath) -> Result<f64> {
        let grid = state.grid();
        let n = grid.n_steps();
        let dt = grid.dt();
        let running: f64 = (0..n)
            .map(|k| self.coeffs.running_profit(grid.time(k), state.value(k), state.controls()[k], z) * kernel.density[k])
            .sum::<f64>()
            * dt;
        let terminal = self.coeffs.terminal_payoff(state.terminal(), z, path.value(n)) * kernel.density[n];
        ensure_finite(running + terminal, || "weighted payoff".into())
    }
}

/// Per-path weighted payoffs, path `i` driven by substream `i` of `master_seed`.
pub fn performance_samples<C, P>(problem: &ControlProblem<C>, policy: &P, z: f64, n_paths: usize, master_seed: u64) -> Result<Vec<f64>>
where
    C: ModelCoefficients,
    P: ControlPolicy + ?Sized,
{
    let seeds = SeedPolicy::new(master_seed);
    run_paths(n_paths, |i| {
        let (path, jumps) = problem.noise(&seeds, i)?;
        Ok(problem.outcome(policy, z, &path, jumps.as_ref())?.payoff)
    })
}

/// `j(u)(z) = E[∫ f M dt + g(X(T)) M_T]`.
pub fn performance_j<C, P>(problem: &ControlProblem<C>, policy: &P, z: f64, n_paths: usize, master_seed: u64) -> Result<MCEstimate>
where
    C: ModelCoefficients,
    P: ControlPolicy + ?Sized,
{
    mc_aggregate(performance_samples(problem, policy, z, n_paths, master_seed)?, master_seed)
}

/// `J(u) = ∫ j(u)(z) dz` by the trapezoid rule over `z_grid` (ascending), with
/// common random numbers across `z`. The grid must leave a tail mass of `Z`
/// below 1e-6.
pub fn performance_j_total<C, P, F>(
    problem: &ControlProblem<C>,
    policy_for: F,
    z_grid: &[f64],
    n_paths: usize,
    master_seed: u64,
) -> Result<f64>
where
    C: ModelCoefficients,
    P: ControlPolicy,
    F: Fn(f64) -> P,
{
    if z_grid.len() < 2 || z_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(LabError::InvalidParameter { name: "z_grid", reason: "needs at least 2 strictly increasing points".into() });
    }
    let sd = problem.insider.total_variance().sqrt();
    let (lo, hi) = (z_grid[0], z_grid[z_grid.len() - 1]);
    let tail = 0.5 * erfc(-lo / (sd * std::f64::consts::SQRT_2)) + 0.5 * erfc(hi / (sd * std::f64::consts::SQRT_2));
    if tail > 1e-6 {
        return Err(LabError::InvalidParameter {
            name: "z_grid",
            reason: format!("[{lo}, {hi}] leaves tail mass {tail:.3e} of Z outside (limit 1e-6)"),
        });
    }
    let values = z_grid
        .iter()
        .map(|&z| Ok(performance_j(problem, &policy_for(z), z, n_paths, master_seed)?.mean))
        .collect::<Result<Vec<f64>>>()?;
    Ok(z_grid.windows(2).zip(values.windows(2)).map(|(z, v)| 0.5 * (z[1] - z[0]) * (v[0] + v[1])).sum())
}

/// Grid search of `u ↦ H` around the candidate at one `(t, path)` point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepProbe {
    pub t: f64,
    pub candidate: f64,
    pub argmax: f64,
    pub resolution: f64,
    pub h_candidate: f64,
    pub h_max: f64,
}

impl SweepProbe {
    pub fn argmax_matches(&self) -> bool {
        (self.argmax - self.candidate).abs() <= self.resolution
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationarityReport {
    pub max_abs_hu: f64,
    pub samples: usize,
    pub sweep: Vec<SweepProbe>,
}

impl StationarityReport {
    pub fn sweep_ok(&self) -> bool {
        self.sweep.iter().all(|p| p.argmax_matches() && p.h_max <= p.h_candidate + 1e-12 * p.h_candidate.abs().max(1.0))
    }
}

/// `max |∂H/∂u|` along `n_paths` simulated candidate trajectories, plus a
/// grid sweep of `H(u)` at 5 sampled points.
pub fn verify_stationarity<C, P>(
    problem: &ControlProblem<C>,
    candidate: &P,
    adjoint_for: &(dyn Fn(&BrownianPath) -> Result<AdjointPath> + Sync),
    z: f64,
    n_paths: usize,
    master_seed: u64,
) -> Result<StationarityReport>
where
    C: ModelCoefficients,
    P: ControlPolicy + ?Sized,
{
    let seeds = SeedPolicy::new(master_seed);
    let levy = problem.jumps.as_ref();
    let n = problem.grid()?.n_steps();
    let per_path = run_paths(n_paths, |i| {
        let (path, jumps) = problem.noise(&seeds, i)?;
        let out = problem.outcome(candidate, z, &path, jumps.as_ref())?;
        let adjoint = adjoint_for(&path)?;
        let mut worst = 0.0f64;
        for k in 0..n {
            let hu = hamiltonian_partials(&problem.coeffs, &inputs_at(&out.state, &adjoint, k, z), levy)?.du;
            worst = worst.max(hu.abs());
        }
        let probe = if i < 5 {
            let k = ((2 * i as usize + 1) * n / 10).min(n - 1);
            Some(sweep_point(&problem.coeffs, &out.state, &adjoint, k, z, levy)?)
        } else {
            None
        };
        Ok((worst, probe))
    })?;
    Ok(StationarityReport {
        max_abs_hu: per_path.iter().map(|r| r.0).fold(0.0, f64::max),
        samples: n_paths * n,
        sweep: per_path.into_iter().filter_map(|r| r.1).collect(),
    })
}

fn sweep_point<C: ModelCoefficients>(
    coeffs: &C,
    state: &SegmentedState,
    adjoint: &AdjointPath,
    k: usize,
    z: f64,
    levy: Option<&JumpModel>,
) -> Result<SweepProbe> {
    let base = inputs_at(state, adjoint, k, z);
    let u_hat = base.u;
    let (lo, hi) = if u_hat > 0.0 { (0.25 * u_hat, 2.5 * u_hat) } else { (u_hat - 1.0, u_hat + 1.0) };
    let points = 2001;
    let step = (hi - lo) / (points - 1) as f64;
    let mut best = (f64::NEG_INFINITY, lo);
    for j in 0..points {
        let u = lo + step * j as f64;
        let h = hamiltonian(coeffs, &super::HamiltonianInputs { u, ..base }, levy)?;
        if h > best.0 {
            best = (h, u);
        }
    }
    Ok(SweepProbe {
        t: base.t,
        candidate: u_hat,
        argmax: best.1,
        resolution: step,
        h_candidate: hamiltonian(coeffs, &base, levy)?,
        h_max: best.0,
    })
}

/// Control set `U`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AdmissibleSet {
    Real,
    /// `(0, ∞)`.
    Positive,
    /// `(lo, hi)`.
    Interval(f64, f64),
}

impl AdmissibleSet {
    pub fn contains(&self, u: f64) -> bool {
        match *self {
            AdmissibleSet::Real => u.is_finite(),
            AdmissibleSet::Positive => u > 0.0,
            AdmissibleSet::Interval(lo, hi) => u > lo && u < hi,
        }
    }

    /// `dist(u, ∂U)` for `u ∈ U`, 0 outside.
    pub fn distance_to_boundary(&self, u: f64) -> f64 {
        if !self.contains(u) {
            return 0.0;
        }
        match *self {
            AdmissibleSet::Real => f64::INFINITY,
            AdmissibleSet::Positive => u,
            AdmissibleSet::Interval(lo, hi) => (u - lo).min(hi - u),
        }
    }
}

/// Direction `β = δ β₀` with `δ(t,z) = min(dist(u, ∂U), 1) / (2K)` and `|β₀| ≤ K`,
/// so that `u + aβ ∈ U` for all `a ∈ (-1, 1)`.
#[derive(Clone)]
pub struct PerturbationSpec {
    direction: Arc<dyn Fn(&PolicyContext<'_>) -> f64 + Send + Sync>,
    bound: f64,
    set: AdmissibleSet,
}

impl std::fmt::Debug for PerturbationSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PerturbationSpec").field("bound", &self.bound).field("set", &self.set).finish_non_exhaustive()
    }
}

impl PerturbationSpec {
    pub fn new(
        direction: impl Fn(&PolicyContext<'_>) -> f64 + Send + Sync + 'static,
        bound: f64,
        set: AdmissibleSet,
    ) -> Result<Self> {
        if !(bound > 0.0) || !bound.is_finite() {
            return Err(LabError::InvalidParameter { name: "bound", reason: format!("K must be finite and > 0, got {bound}") });
        }
        Ok(Self { direction: Arc::new(direction), bound, set })
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn set(&self) -> AdmissibleSet {
        self.set
    }

    pub fn delta(&self, u: f64) -> Result<f64> {
        let dist = self.set.distance_to_boundary(u);
        if !(dist > 0.0) {
            return Err(LabError::InvalidParameter { name: "candidate", reason: format!("u = {u} lies on the boundary of U") });
        }
        Ok(dist.min(1.0) / (2.0 * self.bound))
    }

    pub fn beta(&self, ctx: &PolicyContext<'_>, u: f64) -> Result<f64> {
        let b0 = (self.direction)(ctx);
        if !(b0.abs() <= self.bound * (1.0 + 1e-12)) {
            return Err(LabError::InvalidParameter {
                name: "direction",
                reason: format!("|β₀| = {} exceeds the bound K = {}", b0.abs(), self.bound),
            });
        }
        Ok(self.delta(u)? * b0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationReport {
    pub base: MCEstimate,
    /// `(j(u + aβ) - j(u - aβ)) / 2a` on common random numbers.
    pub finite_difference: MCEstimate,
    /// `E[∫ (f_x χ + f_u β) M dt + g_x(X(T)) χ(T) M_T]`.
    pub variational: MCEstimate,
    /// `j(u + aβ) + j(u - aβ) - 2 j(u)`.
    pub concavity: MCEstimate,
    pub step: f64,
}

/// Directional derivative of `j` at the candidate along `spec`.
pub fn verify_perturbation<C, P>(
    problem: &ControlProblem<C>,
    candidate: &P,
    spec: &PerturbationSpec,
    step: f64,
    z: f64,
    n_paths: usize,
    master_seed: u64,
) -> Result<PerturbationReport>
where
    C: ModelCoefficients,
    P: ControlPolicy + ?Sized,
{
    if !(step > 0.0 && step < 1.0) {
        return Err(LabError::InvalidParameter { name: "step", reason: format!("a must lie in (0, 1), got {step}") });
    }
    let seeds = SeedPolicy::new(master_seed);
    let grid = problem.grid()?;
    let n = grid.n_steps();
    let dt = grid.dt();
    let per_path = run_paths(n_paths, |i| {
        let (path, jumps) = problem.noise(&seeds, i)?;
        let base = problem.outcome(candidate, z, &path, jumps.as_ref())?;
        let state = &base.state;
        let bvals = path.values();
        let beta = (0..n)
            .map(|k| {
                let ctx = PolicyContext {
                    k,
                    t: grid.time(k),
                    z,
                    state: &state.values()[..=k],
                    delayed: state.delayed(k),
                    brownian: &bvals[..=k],
                    full_path: None,
                };
                spec.beta(&ctx, state.controls()[k])
            })
            .collect::<Result<Vec<f64>>>()?;
        let shifted = |sign: f64| -> Result<f64> {
            let u: Vec<f64> = state.controls().iter().zip(&beta).map(|(u, b)| u + sign * step * b).collect();
            Ok(problem.outcome(&OpenLoop(u), z, &path, jumps.as_ref())?.payoff)
        };
        let (up, down) = (shifted(1.0)?, shifted(-1.0)?);
        let noise = Noise { brownian: &path, jumps: jumps.as_ref() };
        let chi = simulate_variational(&problem.coeffs, state, &beta, z, noise)?;
        let m = &base.kernel.density;
        let running: f64 = (0..n)
            .map(|k| {
                let (fx, fu) = problem.coeffs.profit_partials(grid.time(k), state.value(k), state.controls()[k], z);
                (fx * chi.values[k] + fu * beta[k]) * m[k]
            })
            .sum::<f64>()
            * dt;
        let terminal = problem.coeffs.terminal_dx(state.terminal(), z, path.value(n)) * chi.terminal() * m[n];
        Ok([base.payoff, (up - down) / (2.0 * step), running + terminal, up + down - 2.0 * base.payoff])
    })?;
    let column = |j: usize| mc_aggregate(per_path.iter().map(|r| r[j]), master_seed);
    Ok(PerturbationReport {
        base: column(0)?,
        finite_difference: column(1)?,
        variational: column(2)?,
        concavity: column(3)?,
        step,
    })
}

/// Sampled sup of the state derivatives of `b`, `σ`, `γ`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LipschitzReport {
    pub drift_x: f64,
    pub drift_y: f64,
    pub diffusion_x: f64,
    pub diffusion_y: f64,
    pub jump_x: f64,
    pub jump_y: f64,
}

impl LipschitzReport {
    pub fn max(&self) -> f64 {
        [self.drift_x, self.drift_y, self.diffusion_x, self.diffusion_y, self.jump_x, self.jump_y]
            .into_iter()
            .fold(0.0, f64::max)
    }

    pub fn within(&self, threshold: f64) -> bool {
        self.max() <= threshold
    }
}

/// Bound probe over every grid point of the given trajectories.
pub fn lipschitz_probe<C>(coeffs: &C, states: &[SegmentedState], z: f64, jumps: Option<&JumpModel>) -> LipschitzReport
where
    C: ModelCoefficients + ?Sized,
{
    let marks: Vec<f64> = jumps.map(|j| j.levy_grid().into_iter().map(|(m, _)| m).collect()).unwrap_or_default();
    let mut rep = LipschitzReport::default();
    for s in states {
        for (k, &u) in s.controls().iter().enumerate() {
            let (t, x, y) = (s.grid().time(k), s.value(k), s.delayed(k));
            let b = coeffs.drift_partials(t, x, y, u, z);
            let sg = coeffs.diffusion_partials(t, x, y, u, z);
            rep.drift_x = rep.drift_x.max(b.dx.abs());
            rep.drift_y = rep.drift_y.max(b.dy.abs());
            rep.diffusion_x = rep.diffusion_x.max(sg.dx.abs());
            rep.diffusion_y = rep.diffusion_y.max(sg.dy.abs());
            for &mark in &marks {
                let g = coeffs.jump_partials(t, x, y, u, z, mark);
                rep.jump_x = rep.jump_x.max(g.dx.abs());
                rep.jump_y = rep.jump_y.max(g.dy.abs());
            }
        }
    }
    rep
}
