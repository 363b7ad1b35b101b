//! Insider harvesting of a population with a development delay `r`:
//!
//! ```text
//! dX(t) = (-α X(t) + β X(t-r) - u(t)) dt + σ dB(t),   X = η on [-r, 0]
//! J(u)  = E[∫ e^{-ρt} u^γ/γ dt + θ X(T)]
//! ```
//!
//! The adjoint is `p = θ g M` with `g' = α g - β g(·+r) 1_{t ≤ T-r}`, `g(T) = 1`,
//! and stationarity of the Hamiltonian gives
//! `û = e^{ρt/(γ-1)} M^{-1/(γ-1)} p^{1/(γ-1)}`.

use std::fmt;
use std::sync::Arc;

use crate::donsker::{pair_expectation_from_state, GaussianInsiderSpec};
use crate::error::{LabError, Result};
use crate::func::TimeFunction;
use crate::maxprinciple::{
    solve_linear_absde, verify_perturbation, verify_stationarity, AdjointPath, AdjointSolution, AdmissibleSet,
    ControlProblem, LinearAdvancedGenerator, PerturbationReport, PerturbationSpec, StationarityReport, TerminalPayoff,
};
use crate::paths::{mc_aggregate, run_paths, BrownianPath, MCEstimate, SeedPolicy};
use crate::sdde::{ControlPolicy, DelaySpec, Feedback, ModelCoefficients, OpenLoop, Partials, PolicyContext};

/// Terminal weight `θ`.
#[derive(Clone)]
pub enum HarvestWeight {
    Deterministic(f64),
    /// `θ = h(B(T))` with `lower ≤ h ≤ upper`.
    Brownian { h: Arc<dyn Fn(f64) -> f64 + Send + Sync>, lower: f64, upper: f64 },
}

impl HarvestWeight {
    pub fn value(&self, brownian_terminal: f64) -> f64 {
        match self {
            HarvestWeight::Deterministic(t) => *t,
            HarvestWeight::Brownian { h, .. } => h(brownian_terminal),
        }
    }

    fn lower(&self) -> f64 {
        match self {
            HarvestWeight::Deterministic(t) => *t,
            HarvestWeight::Brownian { lower, .. } => *lower,
        }
    }
}

impl fmt::Debug for HarvestWeight {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HarvestWeight::Deterministic(t) => write!(f, "Deterministic({t})"),
            HarvestWeight::Brownian { lower, upper, .. } => write!(f, "Brownian {{ lower: {lower}, upper: {upper} }}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct HarvestParams {
    pub alpha: f64,
    pub beta_birth: f64,
    pub sigma: f64,
    pub delay: f64,
    pub rho: f64,
    pub gamma: f64,
    pub theta: HarvestWeight,
    pub eta: TimeFunction,
    pub horizon: f64,
    pub insider: GaussianInsiderSpec,
}

impl HarvestParams {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [("alpha", self.alpha), ("beta_birth", self.beta_birth), ("rho", self.rho)];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(LabError::InvalidParameter { name, reason: format!("must be finite and >= 0, got {v}") });
            }
        }
        if !self.sigma.is_finite() {
            return Err(LabError::NonFinite("sigma".into()));
        }
        if !(self.delay > 0.0) {
            return Err(LabError::InvalidParameter { name: "delay", reason: format!("r must be > 0, got {}", self.delay) });
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(LabError::InvalidParameter { name: "gamma", reason: format!("must lie in (0, 1), got {}", self.gamma) });
        }
        match &self.theta {
            HarvestWeight::Deterministic(t) if !(*t > 0.0) || !t.is_finite() => {
                return Err(LabError::InvalidParameter { name: "theta", reason: format!("must be > 0, got {t}") });
            }
            HarvestWeight::Brownian { lower, upper, .. } if !(*lower > 0.0 && upper >= lower && upper.is_finite()) => {
                return Err(LabError::InvalidParameter {
                    name: "theta",
                    reason: format!("bounds must satisfy 0 < {lower} <= {upper} < inf"),
                });
            }
            _ => {}
        }
        self.problem().map(|_| ())
    }

    pub fn model(&self) -> HarvestModel {
        HarvestModel {
            alpha: self.alpha,
            beta_birth: self.beta_birth,
            sigma: self.sigma,
            rho: self.rho,
            gamma: self.gamma,
            theta: self.theta.clone(),
        }
    }

    pub fn delay_spec(&self) -> DelaySpec {
        DelaySpec::new(self.delay, self.eta.clone())
    }

    pub fn problem(&self) -> Result<ControlProblem<HarvestModel>> {
        ControlProblem::new(self.model(), self.insider.clone(), self.delay_spec(), self.horizon)
    }

    pub fn dt(&self) -> f64 {
        self.insider.dt()
    }

    pub fn n_steps(&self) -> Result<usize> {
        self.insider.grid().steps_for(self.horizon, "horizon")
    }
}

/// Coefficients of the controlled population equation, with analytic partials.
#[derive(Debug, Clone)]
pub struct HarvestModel {
    pub alpha: f64,
    pub beta_birth: f64,
    pub sigma: f64,
    pub rho: f64,
    pub gamma: f64,
    pub theta: HarvestWeight,
}

impl ModelCoefficients for HarvestModel {
    fn drift(&self, _t: f64, x: f64, y: f64, u: f64, _z: f64) -> f64 {
        -self.alpha * x + self.beta_birth * y - u
    }

    fn diffusion(&self, _t: f64, _x: f64, _y: f64, _u: f64, _z: f64) -> f64 {
        self.sigma
    }

    fn running_profit(&self, t: f64, _x: f64, u: f64, _z: f64) -> f64 {
        (-self.rho * t).exp() * u.powf(self.gamma) / self.gamma
    }

    fn terminal_payoff(&self, x: f64, _z: f64, brownian_terminal: f64) -> f64 {
        self.theta.value(brownian_terminal) * x
    }

    fn drift_partials(&self, _t: f64, _x: f64, _y: f64, _u: f64, _z: f64) -> Partials {
        Partials { dx: -self.alpha, dy: self.beta_birth, du: -1.0 }
    }

    fn diffusion_partials(&self, _t: f64, _x: f64, _y: f64, _u: f64, _z: f64) -> Partials {
        Partials::default()
    }

    fn profit_partials(&self, t: f64, _x: f64, u: f64, _z: f64) -> (f64, f64) {
        (0.0, (-self.rho * t).exp() * u.powf(self.gamma - 1.0))
    }

    fn terminal_dx(&self, _x: f64, _z: f64, brownian_terminal: f64) -> f64 {
        self.theta.value(brownian_terminal)
    }
}

#[derive(Debug, Clone)]
pub struct HarvestAdjoint {
    solution: AdjointSolution,
}

impl HarvestAdjoint {
    /// Deterministic factor `g` of `p = θ g M`.
    pub fn g(&self, t: f64) -> f64 {
        self.solution.g(t)
    }

    pub fn solution(&self) -> &AdjointSolution {
        &self.solution
    }

    pub fn path(&self, params: &HarvestParams, z: f64, path: &BrownianPath) -> Result<AdjointPath> {
        self.solution.adjoint_path(&params.insider, z, path)
    }
}

pub fn solve_harvest_adjoint(params: &HarvestParams) -> Result<HarvestAdjoint> {
    params.validate()?;
    let terminal = match &params.theta {
        HarvestWeight::Deterministic(t) => TerminalPayoff::Deterministic(*t),
        HarvestWeight::Brownian { h, .. } => TerminalPayoff::BrownianFunction(h.clone()),
    };
    let generator = LinearAdvancedGenerator::new(params.alpha, params.beta_birth, 0.0, terminal);
    let solution = solve_linear_absde(&generator, params.delay, params.horizon)?;
    Ok(HarvestAdjoint { solution })
}

fn stationary_control(params: &HarvestParams, t: f64, kernel: f64, p: f64) -> Result<f64> {
    if !(p > 0.0) {
        return Err(LabError::Invariant(format!("adjoint p = {p} is not positive at t = {t}")));
    }
    let e = 1.0 / (params.gamma - 1.0);
    let u = (params.rho * t * e).exp() * kernel.powf(-e) * p.powf(e);
    if u.is_finite() {
        Ok(u)
    } else {
        Err(LabError::NonFinite(format!("optimal harvest at t = {t}")))
    }
}

/// `û(t, z)` from the kernel and the adjoint along `path`.
pub fn optimal_harvest_control(
    params: &HarvestParams,
    adjoint: &HarvestAdjoint,
    t: f64,
    z: f64,
    path: &BrownianPath,
) -> Result<f64> {
    let k = params.insider.grid().index_of(t)?;
    if k > params.n_steps()? {
        return Err(LabError::InvalidParameter { name: "t", reason: format!("{t} lies beyond the horizon") });
    }
    let adj = adjoint.path(params, z, path)?;
    stationary_control(params, t, adj.kernel(k), adj.p(k))
}

/// `û(t) = e^{ρt/(γ-1)} (θ g(t))^{1/(γ-1)}` for deterministic `θ`, where the kernel cancels.
pub fn optimal_harvest_simplified(params: &HarvestParams, adjoint: &HarvestAdjoint, t: f64) -> Result<f64> {
    let HarvestWeight::Deterministic(theta) = params.theta else {
        return Err(LabError::Unsupported("closed form needs a deterministic terminal weight".into()));
    };
    stationary_control(params, t, 1.0, theta * adjoint.g(t))
}

/// Optimal harvesting policy: a deterministic schedule for deterministic `θ`,
/// otherwise evaluated from `B(t)` (only when `r ≥ T`).
pub struct OptimalHarvest {
    inner: HarvestRule,
}

enum HarvestRule {
    Schedule(Vec<f64>),
    Adapted(Box<(HarvestParams, HarvestAdjoint)>),
}

impl OptimalHarvest {
    pub fn new(params: &HarvestParams, adjoint: &HarvestAdjoint) -> Result<Self> {
        let inner = match params.theta {
            HarvestWeight::Deterministic(_) => {
                let n = params.n_steps()?;
                let grid = params.insider.grid();
                let schedule = (0..=n).map(|k| optimal_harvest_simplified(params, adjoint, grid.time(k))).collect::<Result<_>>()?;
                HarvestRule::Schedule(schedule)
            }
            HarvestWeight::Brownian { .. } => {
                if params.delay < params.horizon {
                    return Err(LabError::Unsupported(
                        "random terminal weight is only solved on the last recursion interval [T-r, T]".into(),
                    ));
                }
                HarvestRule::Adapted(Box::new((params.clone(), adjoint.clone())))
            }
        };
        Ok(Self { inner })
    }

    /// `û(t_k)` for deterministic `θ`.
    pub fn schedule(&self) -> Option<&[f64]> {
        match &self.inner {
            HarvestRule::Schedule(s) => Some(s),
            HarvestRule::Adapted(_) => None,
        }
    }

    /// The schedule scaled by `factor`, as an open-loop control.
    pub fn scaled(&self, factor: f64) -> Option<OpenLoop> {
        self.schedule().map(|s| OpenLoop(s.iter().map(|u| factor * u).collect()))
    }
}

impl ControlPolicy for OptimalHarvest {
    fn control(&self, ctx: &PolicyContext<'_>) -> f64 {
        match &self.inner {
            HarvestRule::Schedule(s) => s[ctx.k],
            HarvestRule::Adapted(inner) => {
                let (params, adjoint) = inner.as_ref();
                let HarvestWeight::Brownian { h, .. } = &params.theta else { unreachable!() };
                let insider = &params.insider;
                let b = ctx.brownian[ctx.k];
                let beta = insider.constant_beta().unwrap_or(f64::NAN);
                let pe = pair_expectation_from_state(insider, h.as_ref(), ctx.z, ctx.k, params.horizon, b, beta * b);
                let kernel = insider.kernel_from_state(ctx.z, ctx.k, beta * b).map(|kv| kv.density);
                match (pe, kernel) {
                    (Ok(pe), Ok(m)) => stationary_control(params, ctx.t, m, adjoint.g(ctx.t) * pe).unwrap_or(f64::NAN),
                    _ => f64::NAN,
                }
            }
        }
    }
}

/// One competitor of the optimal control.
#[derive(Debug, Clone, PartialEq)]
pub struct CompetitorResult {
    pub name: String,
    pub j: MCEstimate,
    /// `j(û) - j(u)` on common random numbers.
    pub margin: MCEstimate,
}

impl CompetitorResult {
    pub fn beaten(&self, k_sigma: f64) -> bool {
        self.margin.mean > k_sigma * self.margin.stderr
    }
}

#[derive(Debug, Clone)]
pub struct HarvestReport {
    pub z: f64,
    pub optimal: MCEstimate,
    pub competitors: Vec<CompetitorResult>,
    pub stationarity: StationarityReport,
    pub perturbation: PerturbationReport,
    /// `E[∫ û² dt]`.
    pub admissibility: MCEstimate,
}

impl HarvestReport {
    pub fn all_beaten(&self, k_sigma: f64) -> bool {
        self.competitors.iter().all(|c| c.beaten(k_sigma))
    }
}

/// Performance of `û` against five competitors (zero, constant at the mean of
/// `û`, proportional to `|X|`, `û/2`, `3û/2`), with stationarity and
/// perturbation checks. Needs deterministic `θ`.
pub fn harvest_report(params: &HarvestParams, z: f64, n_paths: usize, master_seed: u64) -> Result<HarvestReport> {
    let adjoint = solve_harvest_adjoint(params)?;
    let optimal = OptimalHarvest::new(params, &adjoint)?;
    let Some(schedule) = optimal.schedule() else {
        return Err(LabError::Unsupported("harvest report needs a deterministic terminal weight".into()));
    };
    let problem = params.problem()?;
    let n = schedule.len() - 1;
    let mean_u = schedule[..n].iter().sum::<f64>() / n as f64;
    let eta0 = params.eta.eval(0.0).abs();
    let ratio = if eta0 > 0.0 { mean_u / eta0 } else { 1.0 };
    let proportional = Feedback(move |ctx: &PolicyContext<'_>| ratio * ctx.state[ctx.k].abs());
    let competitors: Vec<(&str, Box<dyn ControlPolicy>)> = vec![
        ("zero", Box::new(OpenLoop(vec![0.0; n]))),
        ("constant", Box::new(OpenLoop(vec![mean_u; n]))),
        ("proportional", Box::new(proportional)),
        ("half", Box::new(optimal.scaled(0.5).expect("schedule"))),
        ("one_and_half", Box::new(optimal.scaled(1.5).expect("schedule"))),
    ];
    let seeds = SeedPolicy::new(master_seed);
    let rows = run_paths(n_paths, |i| {
        let (path, jumps) = problem.noise(&seeds, i)?;
        let mut row = Vec::with_capacity(competitors.len() + 1);
        row.push(problem.outcome(&optimal, z, &path, jumps.as_ref())?.payoff);
        for (_, c) in &competitors {
            row.push(problem.outcome(c.as_ref(), z, &path, jumps.as_ref())?.payoff);
        }
        Ok(row)
    })?;
    let opt_est = mc_aggregate(rows.iter().map(|r| r[0]), master_seed)?;
    let competitors = competitors
        .iter()
        .enumerate()
        .map(|(j, (name, _))| {
            Ok(CompetitorResult {
                name: name.to_string(),
                j: mc_aggregate(rows.iter().map(|r| r[j + 1]), master_seed)?,
                margin: mc_aggregate(rows.iter().map(|r| r[0] - r[j + 1]), master_seed)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let adjoint_for = |path: &BrownianPath| adjoint.path(params, z, path);
    let stationarity = verify_stationarity(&problem, &optimal, &adjoint_for, z, n_paths.min(100), master_seed)?;
    let spec = PerturbationSpec::new(|_| 1.0, 1.0, AdmissibleSet::Positive)?;
    let perturbation = verify_perturbation(&problem, &optimal, &spec, 1e-2, z, n_paths, master_seed)?;
    let dt = params.dt();
    let energy = schedule[..n].iter().map(|u| u * u).sum::<f64>() * dt;
    let admissibility = mc_aggregate(std::iter::repeat_n(energy, n_paths.max(2)), master_seed)?;
    Ok(HarvestReport { z, optimal: opt_est, competitors, stationarity, perturbation, admissibility })
}

/// Lower bound `g(t) ≥ e^{-α(T-t)}` on the grid; returns the smallest slack.
pub fn positivity_slack(params: &HarvestParams, adjoint: &HarvestAdjoint) -> Result<f64> {
    let n = params.n_steps()?;
    let grid = params.insider.grid();
    let lower = params.theta.lower();
    Ok((0..=n)
        .map(|k| {
            let t = grid.time(k);
            lower * (adjoint.g(t) - (-params.alpha * (params.horizon - t)).exp())
        })
        .fold(f64::INFINITY, f64::min))
}
