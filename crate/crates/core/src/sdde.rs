//! Euler–Maruyama simulation of controlled SDDEs
//!
//! ```text
//! dX(t) = b(t,X,Y,u,z) dt + σ(t,X,Y,u,z) dB(t) + ∫ γ(t,X,Y,u,z,ζ) Ñ(dt,dζ),   Y(t) = X(t-δ)
//! ```
//!
//! All coefficients are evaluated at the left end of each step. For an
//! anticipating control this is the discrete forward integral.

use crate::error::{ensure_finite, LabError, Result};
use crate::func::TimeFunction;
use crate::paths::{BrownianPath, JumpPath, TimeGrid};

/// First partial derivatives in `(x, y, u)`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Partials {
    pub dx: f64,
    pub dy: f64,
    pub du: f64,
}

/// Central difference with relative step 1e-6 and absolute floor 1e-9.
pub fn central_difference(f: impl Fn(f64) -> f64, at: f64) -> f64 {
    let h = (1e-6 * at.abs()).max(1e-9);
    (f(at + h) - f(at - h)) / (2.0 * h)
}

/// Model coefficients `b, σ, γ, f, g`. Partial derivatives default to
/// central finite differences; override them when closed forms exist.
pub trait ModelCoefficients: Sync {
    fn drift(&self, t: f64, x: f64, y: f64, u: f64, z: f64) -> f64;

    fn diffusion(&self, t: f64, x: f64, y: f64, u: f64, z: f64) -> f64;

    fn jump(&self, _t: f64, _x: f64, _y: f64, _u: f64, _z: f64, _mark: f64) -> f64 {
        0.0
    }

    fn running_profit(&self, t: f64, x: f64, u: f64, z: f64) -> f64;

    /// `g(x, z)`; `brownian_terminal` is `B(T)` for payoffs weighted by a functional of the path.
    fn terminal_payoff(&self, x: f64, z: f64, brownian_terminal: f64) -> f64;

    fn drift_partials(&self, t: f64, x: f64, y: f64, u: f64, z: f64) -> Partials {
        Partials {
            dx: central_difference(|v| self.drift(t, v, y, u, z), x),
            dy: central_difference(|v| self.drift(t, x, v, u, z), y),
            du: central_difference(|v| self.drift(t, x, y, v, z), u),
        }
    }

    fn diffusion_partials(&self, t: f64, x: f64, y: f64, u: f64, z: f64) -> Partials {
        Partials {
            dx: central_difference(|v| self.diffusion(t, v, y, u, z), x),
            dy: central_difference(|v| self.diffusion(t, x, v, u, z), y),
            du: central_difference(|v| self.diffusion(t, x, y, v, z), u),
        }
    }

    fn jump_partials(&self, t: f64, x: f64, y: f64, u: f64, z: f64, mark: f64) -> Partials {
        Partials {
            dx: central_difference(|v| self.jump(t, v, y, u, z, mark), x),
            dy: central_difference(|v| self.jump(t, x, v, u, z, mark), y),
            du: central_difference(|v| self.jump(t, x, y, v, z, mark), u),
        }
    }

    /// `(∂f/∂x, ∂f/∂u)`.
    fn profit_partials(&self, t: f64, x: f64, u: f64, z: f64) -> (f64, f64) {
        (
            central_difference(|v| self.running_profit(t, v, u, z), x),
            central_difference(|v| self.running_profit(t, x, v, z), u),
        )
    }

    fn terminal_dx(&self, x: f64, z: f64, brownian_terminal: f64) -> f64 {
        central_difference(|v| self.terminal_payoff(v, z, brownian_terminal), x)
    }
}

/// Point `(t, x, y, u, z)` at which supplied derivatives are compared with finite differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbePoint {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub u: f64,
    pub z: f64,
}

fn rel_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Largest relative discrepancy between the supplied drift/diffusion/profit
/// partials and central differences over `probes`.
pub fn derivative_consistency<C: ModelCoefficients + ?Sized>(coeffs: &C, probes: &[ProbePoint]) -> f64 {
    let mut worst = 0.0f64;
    for p in probes {
        let db = coeffs.drift_partials(p.t, p.x, p.y, p.u, p.z);
        let ds = coeffs.diffusion_partials(p.t, p.x, p.y, p.u, p.z);
        let (fx, fu) = coeffs.profit_partials(p.t, p.x, p.u, p.z);
        let pairs = [
            (db.dx, central_difference(|v| coeffs.drift(p.t, v, p.y, p.u, p.z), p.x)),
            (db.dy, central_difference(|v| coeffs.drift(p.t, p.x, v, p.u, p.z), p.y)),
            (db.du, central_difference(|v| coeffs.drift(p.t, p.x, p.y, v, p.z), p.u)),
            (ds.dx, central_difference(|v| coeffs.diffusion(p.t, v, p.y, p.u, p.z), p.x)),
            (ds.dy, central_difference(|v| coeffs.diffusion(p.t, p.x, v, p.u, p.z), p.y)),
            (ds.du, central_difference(|v| coeffs.diffusion(p.t, p.x, p.y, v, p.z), p.u)),
            (fx, central_difference(|v| coeffs.running_profit(p.t, v, p.u, p.z), p.x)),
            (fu, central_difference(|v| coeffs.running_profit(p.t, p.x, v, p.z), p.u)),
        ];
        for (a, b) in pairs {
            worst = worst.max(rel_gap(a, b));
        }
    }
    worst
}

/// What a control may see at step `k`.
#[derive(Debug, Clone, Copy)]
pub struct PolicyContext<'a> {
    pub k: usize,
    pub t: f64,
    pub z: f64,
    /// `X(t_0), ..., X(t_k)`.
    pub state: &'a [f64],
    /// `X(t_k - δ)`.
    pub delayed: f64,
    /// `B(t_0), ..., B(t_k)`.
    pub brownian: &'a [f64],
    /// The whole driving path; only handed to anticipating policies.
    pub full_path: Option<&'a BrownianPath>,
}

pub trait ControlPolicy: Sync {
    fn control(&self, ctx: &PolicyContext<'_>) -> f64;

    fn is_anticipating(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantControl(pub f64);

impl ControlPolicy for ConstantControl {
    fn control(&self, _ctx: &PolicyContext<'_>) -> f64 {
        self.0
    }
}

/// Replays a fixed control sequence `u_0, ..., u_{n-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct OpenLoop(pub Vec<f64>);

impl ControlPolicy for OpenLoop {
    fn control(&self, ctx: &PolicyContext<'_>) -> f64 {
        self.0[ctx.k]
    }
}

/// Non-anticipating policy from a closure.
pub struct Feedback<F>(pub F);

impl<F> ControlPolicy for Feedback<F>
where
    F: Fn(&PolicyContext<'_>) -> f64 + Sync,
{
    fn control(&self, ctx: &PolicyContext<'_>) -> f64 {
        (self.0)(ctx)
    }
}

/// Policy allowed to read the whole driving path.
pub struct Anticipating<F>(pub F);

impl<F> ControlPolicy for Anticipating<F>
where
    F: Fn(&PolicyContext<'_>) -> f64 + Sync,
{
    fn control(&self, ctx: &PolicyContext<'_>) -> f64 {
        (self.0)(ctx)
    }

    fn is_anticipating(&self) -> bool {
        true
    }
}

/// Lag `δ` in whole grid steps together with the initial segment `ξ` on `[-δ, 0]`.
#[derive(Debug, Clone)]
pub struct DelaySpec {
    pub delay: f64,
    pub history: TimeFunction,
}

impl DelaySpec {
    pub fn new(delay: f64, history: impl Into<TimeFunction>) -> Self {
        Self { delay, history: history.into() }
    }

    pub fn steps(&self, grid: &TimeGrid) -> Result<usize> {
        if !(self.delay >= 0.0) {
            return Err(LabError::InvalidParameter { name: "delay", reason: format!("must be >= 0, got {}", self.delay) });
        }
        grid.steps_for(self.delay, "delay")
    }

    /// `ξ(-δ + i dt)` for `i = 0 ..= m`.
    pub fn sample_history(&self, grid: &TimeGrid) -> Result<Vec<f64>> {
        let m = self.steps(grid)?;
        let dt = grid.dt();
        let hist: Vec<f64> = (0..=m).map(|i| self.history.eval(-self.delay + i as f64 * dt)).collect();
        if hist.iter().any(|v| !v.is_finite()) {
            return Err(LabError::NonFinite("initial segment".into()));
        }
        Ok(hist)
    }
}

/// Simulated state on `[-δ, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentedState {
    grid: TimeGrid,
    delay_steps: usize,
    history: Vec<f64>,
    values: Vec<f64>,
    controls: Vec<f64>,
}

impl SegmentedState {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn delay_steps(&self) -> usize {
        self.delay_steps
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, k: usize) -> f64 {
        self.values[k]
    }

    pub fn terminal(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    /// `X(t_k - δ)`, read from the initial segment while `t_k < δ`.
    pub fn delayed(&self, k: usize) -> f64 {
        if k >= self.delay_steps {
            self.values[k - self.delay_steps]
        } else {
            self.history[k]
        }
    }

    pub fn history(&self) -> &[f64] {
        &self.history
    }

    /// Controls used on each step, `u_0, ..., u_{n-1}`.
    pub fn controls(&self) -> &[f64] {
        &self.controls
    }
}

/// Driving noise of one path.
#[derive(Debug, Clone, Copy)]
pub struct Noise<'a> {
    pub brownian: &'a BrownianPath,
    pub jumps: Option<&'a JumpPath>,
}

impl<'a> Noise<'a> {
    pub fn brownian(path: &'a BrownianPath) -> Self {
        Self { brownian: path, jumps: None }
    }

    fn check(&self, grid: &TimeGrid) -> Result<()> {
        let pg = self.brownian.grid();
        if (pg.dt() - grid.dt()).abs() > 1e-12 * grid.dt() || pg.t_start() != grid.t_start() {
            return Err(LabError::InvalidGrid(format!(
                "noise grid dt {} does not match simulation dt {}",
                pg.dt(),
                grid.dt()
            )));
        }
        if pg.n_steps() < grid.n_steps() {
            return Err(LabError::PathTooShort { needed: grid.t_end(), available: pg.t_end() });
        }
        if let Some(j) = self.jumps {
            if j.grid().n_steps() < grid.n_steps() || (j.grid().dt() - grid.dt()).abs() > 1e-12 * grid.dt() {
                return Err(LabError::InvalidGrid("jump path grid does not match simulation grid".into()));
            }
        }
        Ok(())
    }
}

/// Jump contribution of step `k`: `Σ_jumps h(ζ) - dt λ E[h(ζ)]`.
fn compensated_step(jumps: Option<&JumpPath>, k: usize, dt: f64, h: impl Fn(f64) -> f64) -> f64 {
    match jumps {
        None => 0.0,
        Some(path) => {
            let model = path.model();
            let raw: f64 = path.marks_in_step(k).map(&h).sum();
            if model.intensity > 0.0 {
                raw - dt * model.intensity * model.marks.expectation(&h)
            } else {
                raw
            }
        }
    }
}

/// Explicit Euler scheme on `grid` (which must start at 0).
pub fn simulate_sdde<C, P>(
    coeffs: &C,
    policy: &P,
    z: f64,
    noise: Noise<'_>,
    delay: &DelaySpec,
    grid: TimeGrid,
) -> Result<SegmentedState>
where
    C: ModelCoefficients + ?Sized,
    P: ControlPolicy + ?Sized,
{
    noise.check(&grid)?;
    let m = delay.steps(&grid)?;
    let history = delay.sample_history(&grid)?;
    let n = grid.n_steps();
    let dt = grid.dt();
    let bvals = noise.brownian.values();
    let mut values = Vec::with_capacity(n + 1);
    let mut controls = Vec::with_capacity(n);
    values.push(history[m]);
    let anticipating = policy.is_anticipating();
    for k in 0..n {
        let t = grid.time(k);
        let x = values[k];
        let y = if k >= m { values[k - m] } else { history[k] };
        let ctx = PolicyContext {
            k,
            t,
            z,
            state: &values,
            delayed: y,
            brownian: &bvals[..=k],
            full_path: anticipating.then_some(noise.brownian),
        };
        let u = policy.control(&ctx);
        let db = bvals[k + 1] - bvals[k];
        let jump = compensated_step(noise.jumps, k, dt, |mark| coeffs.jump(t, x, y, u, z, mark));
        let next = x + coeffs.drift(t, x, y, u, z) * dt + coeffs.diffusion(t, x, y, u, z) * db + jump;
        ensure_finite(next, || format!("state at t = {}", grid.time(k + 1)))?;
        controls.push(u);
        values.push(next);
    }
    Ok(SegmentedState { grid, delay_steps: m, history, values, controls })
}

/// First grid time `t > 0` with `X(t) ≤ 0`.
pub fn first_hit_zero(state: &SegmentedState) -> Option<f64> {
    state.values.iter().skip(1).position(|&x| x <= 0.0).map(|i| state.grid.time(i + 1))
}

/// Derivative process `χ = d/da X^{u + aβ}` at `a = 0`, with `χ ≡ 0` on `[-δ, 0]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    pub values: Vec<f64>,
    pub delay_steps: usize,
}

impl VariationalState {
    pub fn terminal(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    pub fn delayed(&self, k: usize) -> f64 {
        if k >= self.delay_steps {
            self.values[k - self.delay_steps]
        } else {
            0.0
        }
    }
}

/// Euler scheme for the linearised equation along `base`, driven by the same noise.
pub fn simulate_variational<C>(
    coeffs: &C,
    base: &SegmentedState,
    perturbation: &[f64],
    z: f64,
    noise: Noise<'_>,
) -> Result<VariationalState>
where
    C: ModelCoefficients + ?Sized,
{
    let grid = *base.grid();
    noise.check(&grid)?;
    let n = grid.n_steps();
    if perturbation.len() != n {
        return Err(LabError::InvalidParameter {
            name: "perturbation",
            reason: format!("{} values for {n} steps", perturbation.len()),
        });
    }
    let dt = grid.dt();
    let m = base.delay_steps;
    let bvals = noise.brownian.values();
    let mut chi = Vec::with_capacity(n + 1);
    chi.push(0.0);
    for k in 0..n {
        let t = grid.time(k);
        let (x, y, u) = (base.values[k], base.delayed(k), base.controls[k]);
        let c = chi[k];
        let c_lag = if k >= m { chi[k - m] } else { 0.0 };
        let beta = perturbation[k];
        let pb = coeffs.drift_partials(t, x, y, u, z);
        let ps = coeffs.diffusion_partials(t, x, y, u, z);
        let jump = compensated_step(noise.jumps, k, dt, |mark| {
            let pg = coeffs.jump_partials(t, x, y, u, z, mark);
            pg.dx * c + pg.dy * c_lag + pg.du * beta
        });
        let next = c
            + (pb.dx * c + pb.dy * c_lag + pb.du * beta) * dt
            + (ps.dx * c + ps.dy * c_lag + ps.du * beta) * (bvals[k + 1] - bvals[k])
            + jump;
        ensure_finite(next, || format!("derivative process at t = {}", grid.time(k + 1)))?;
        chi.push(next);
    }
    Ok(VariationalState { values: chi, delay_steps: m })
}

/// Left-endpoint forward integral `Σ φ(t_k) (B(t_{k+1}) - B(t_k))` over the first `phi.len()` steps.
pub fn forward_integral(phi: &[f64], path: &BrownianPath) -> Result<f64> {
    if path.grid().n_steps() < phi.len() {
        return Err(LabError::PathTooShort {
            needed: path.grid().time(0) + path.grid().dt() * phi.len() as f64,
            available: path.grid().t_end(),
        });
    }
    Ok(phi.iter().zip(path.increments()).map(|(p, db)| p * db).sum())
}

/// `∫₀ᵀ φ(s) (B(s+ε) - B(s)) / ε ds` by Riemann sums, `T = phi.len() * dt`.
pub fn forward_integral_epsilon(phi: &[f64], path: &BrownianPath, epsilon: f64) -> Result<f64> {
    let grid = path.grid();
    let m = grid.steps_for(epsilon, "epsilon")?;
    if m == 0 {
        return Err(LabError::InvalidParameter { name: "epsilon", reason: "must be at least one grid step".into() });
    }
    let n = phi.len();
    if grid.n_steps() < n + m {
        return Err(LabError::PathTooShort {
            needed: grid.t_start() + grid.dt() * (n + m) as f64,
            available: grid.t_end(),
        });
    }
    let b = path.values();
    let dt = grid.dt();
    Ok(phi.iter().enumerate().map(|(k, p)| p * (b[k + m] - b[k]) / epsilon * dt).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::{sample_brownian, Channel, SeedPolicy};

    struct Linear {
        alpha: f64,
        beta: f64,
        sigma: f64,
    }

    impl ModelCoefficients for Linear {
        fn drift(&self, _t: f64, x: f64, y: f64, u: f64, _z: f64) -> f64 {
            -self.alpha * x + self.beta * y - u
        }
        fn diffusion(&self, _t: f64, _x: f64, _y: f64, _u: f64, _z: f64) -> f64 {
            self.sigma
        }
        fn running_profit(&self, _t: f64, _x: f64, u: f64, _z: f64) -> f64 {
            u.sqrt()
        }
        fn terminal_payoff(&self, x: f64, _z: f64, _b: f64) -> f64 {
            x
        }
    }

    fn path(n: usize, t: f64, seed: u64) -> BrownianPath {
        sample_brownian(TimeGrid::new(0.0, t, n).unwrap(), &mut SeedPolicy::new(seed).stream(Channel::Brownian, 0))
    }

    #[test]
    fn frozen_dynamics_keep_initial_value() {
        let model = Linear { alpha: 0.0, beta: 0.0, sigma: 0.0 };
        let b = path(100, 1.0, 1);
        let s = simulate_sdde(&model, &ConstantControl(0.0), 0.0, Noise::brownian(&b), &DelaySpec::new(0.1, 2.5), *b.grid()).unwrap();
        assert!(s.values().iter().all(|&x| x == 2.5));
    }

    #[test]
    fn pure_noise_integrates_exactly() {
        let model = Linear { alpha: 0.0, beta: 0.0, sigma: 0.7 };
        let b = path(200, 1.0, 2);
        let s = simulate_sdde(&model, &ConstantControl(0.0), 0.0, Noise::brownian(&b), &DelaySpec::new(0.0, 0.0), *b.grid()).unwrap();
        for k in 0..=200 {
            assert!((s.value(k) - 0.7 * b.value(k)).abs() < 1e-12);
        }
    }

    #[test]
    fn misaligned_delay_is_rejected() {
        let model = Linear { alpha: 1.0, beta: 0.0, sigma: 0.0 };
        let b = path(100, 1.0, 1);
        let err = simulate_sdde(&model, &ConstantControl(0.0), 0.0, Noise::brownian(&b), &DelaySpec::new(0.105, 1.0), *b.grid());
        assert!(matches!(err, Err(LabError::Misaligned { .. })));
    }

    #[test]
    fn deterministic_crossing_time() {
        let grid = TimeGrid::new(0.0, 2.0, 200).unwrap();
        let values: Vec<f64> = grid.times().map(|t| 1.0 - t).collect();
        let s = SegmentedState { grid, delay_steps: 0, history: vec![1.0], values, controls: vec![0.0; 200] };
        assert!((first_hit_zero(&s).unwrap() - 1.0).abs() < 1e-12);
        let positive = SegmentedState { values: vec![1.0; 201], ..s };
        assert_eq!(first_hit_zero(&positive), None);
    }

    #[test]
    fn delayed_lookup_is_an_index_shift() {
        let model = Linear { alpha: 0.3, beta: 0.5, sigma: 0.2 };
        let b = path(100, 1.0, 5);
        let s = simulate_sdde(&model, &ConstantControl(0.1), 0.0, Noise::brownian(&b), &DelaySpec::new(0.25, TimeFunction::custom(|t| 1.0 + t)), *b.grid()).unwrap();
        assert_eq!(s.delay_steps(), 25);
        assert!((s.delayed(0) - 0.75).abs() < 1e-12);
        assert!((s.delayed(10) - 0.85).abs() < 1e-12);
        assert_eq!(s.delayed(40), s.value(15));
        assert_eq!(s.history()[25], s.value(0));
    }

    #[test]
    fn null_perturbation_gives_zero_derivative() {
        let model = Linear { alpha: 0.3, beta: 0.5, sigma: 0.2 };
        let b = path(100, 1.0, 6);
        let s = simulate_sdde(&model, &ConstantControl(0.4), 0.0, Noise::brownian(&b), &DelaySpec::new(0.2, 1.0), *b.grid()).unwrap();
        let chi = simulate_variational(&model, &s, &[0.0; 100], 0.0, Noise::brownian(&b)).unwrap();
        assert!(chi.values.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn linear_derivative_matches_ode() {
        // chi' = -alpha chi - 1, chi(0) = 0
        let alpha = 0.8;
        let exact = |t: f64| -(1.0 - (-alpha * t).exp()) / alpha;
        let mut errs = Vec::new();
        for n in [200, 400] {
            let model = Linear { alpha, beta: 0.0, sigma: 0.0 };
            let b = path(n, 1.0, 7);
            let s = simulate_sdde(&model, &ConstantControl(0.2), 0.0, Noise::brownian(&b), &DelaySpec::new(0.0, 1.0), *b.grid()).unwrap();
            let chi = simulate_variational(&model, &s, &vec![1.0; n], 0.0, Noise::brownian(&b)).unwrap();
            let err = (0..=n).map(|k| (chi.values[k] - exact(b.grid().time(k))).abs()).fold(0.0, f64::max);
            errs.push(err);
        }
        assert!(errs[0] < 5e-3);
        let ratio = errs[1] / errs[0];
        assert!((0.35..0.65).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn forward_integral_of_constant_telescopes() {
        let b = path(1100, 1.1, 8);
        let phi = vec![1.0; 1000];
        let dt = b.grid().dt();
        let fi = forward_integral_epsilon(&phi, &b, dt).unwrap();
        assert!((fi - b.value(1000)).abs() < 1e-12);
        assert!((forward_integral(&phi, &b).unwrap() - b.value(1000)).abs() < 1e-12);
        let wide = forward_integral_epsilon(&phi, &b, 100.0 * dt).unwrap();
        let telescoped = (b.values()[1000..1100].iter().sum::<f64>() - b.values()[..100].iter().sum::<f64>()) / 100.0;
        assert!((wide - telescoped).abs() < 1e-10);
        assert!(forward_integral_epsilon(&phi, &b, 1.5 * dt).is_err());
    }

    #[test]
    fn finite_difference_partials() {
        let model = Linear { alpha: 0.3, beta: 0.5, sigma: 0.2 };
        let p = model.drift_partials(0.0, 1.0, 2.0, 0.5, 0.0);
        assert!((p.dx + 0.3).abs() < 1e-8 && (p.dy - 0.5).abs() < 1e-8 && (p.du + 1.0).abs() < 1e-8);
        let (fx, fu) = model.profit_partials(0.0, 1.0, 0.25, 0.0);
        assert!(fx.abs() < 1e-8 && (fu - 1.0).abs() < 1e-6);
        let probes = [ProbePoint { t: 0.1, x: 1.0, y: 0.5, u: 0.3, z: 0.0 }];
        assert!(derivative_consistency(&model, &probes) < 1e-4);
    }
}
