//! Hamiltonian, adjoint equations and maximum-principle checks.
//!
//! ```text
//! H(t,x,y,u,z,p,q,r) = E[δ_Z(z)|F_t] f(t,x,u,z) + b p + σ q + ∫ γ(ζ) r(ζ) ν(dζ)
//! ```
//!
//! The jump integral is taken over the mark grid of a [`JumpModel`].

mod absde;
mod verify;

pub use absde::{
    absde_residual, absde_residual_with, solve_linear_absde, AdjointPath, AdjointSolution, LinearAdvancedGenerator,
    ResidualReport, TerminalPayoff, TerminalRecord,
};
pub use verify::{
    lipschitz_probe, performance_j, performance_j_total, performance_samples, verify_perturbation,
    verify_stationarity, AdmissibleSet, ControlProblem, LipschitzReport, PathOutcome, PerturbationReport,
    PerturbationSpec, StationarityReport, SweepProbe,
};

use crate::error::{LabError, Result};
use crate::paths::JumpModel;
use crate::sdde::{ModelCoefficients, Partials, SegmentedState};

/// Arguments of the Hamiltonian at one point.
#[derive(Debug, Clone, Copy)]
pub struct HamiltonianInputs<'a> {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub u: f64,
    pub z: f64,
    pub p: f64,
    pub q: f64,
    /// `r(ζ_i)` on the mark grid; empty means `r ≡ 0`.
    pub r: &'a [f64],
    /// `E[δ_Z(z)|F_t]`.
    pub kernel: f64,
}

fn mark_terms(levy: Option<&JumpModel>, r: &[f64]) -> Result<Vec<(f64, f64, f64)>> {
    let Some(model) = levy else {
        if r.iter().any(|&v| v != 0.0) {
            return Err(LabError::InvalidParameter { name: "r", reason: "jump adjoint given without a jump model".into() });
        }
        return Ok(Vec::new());
    };
    let grid = model.levy_grid();
    if r.is_empty() {
        return Ok(Vec::new());
    }
    if r.len() != grid.len() {
        return Err(LabError::InvalidParameter {
            name: "r",
            reason: format!("{} values for {} mark nodes", r.len(), grid.len()),
        });
    }
    Ok(grid.into_iter().zip(r).map(|((mark, w), &rv)| (mark, w, rv)).collect())
}

fn check_kernel(kernel: f64) -> Result<()> {
    if kernel > 0.0 && kernel.is_finite() {
        Ok(())
    } else {
        Err(LabError::InvalidParameter { name: "kernel", reason: format!("weight must be > 0, got {kernel}") })
    }
}

pub fn hamiltonian<C>(coeffs: &C, h: &HamiltonianInputs<'_>, levy: Option<&JumpModel>) -> Result<f64>
where
    C: ModelCoefficients + ?Sized,
{
    check_kernel(h.kernel)?;
    let mut value = h.kernel * coeffs.running_profit(h.t, h.x, h.u, h.z)
        + coeffs.drift(h.t, h.x, h.y, h.u, h.z) * h.p
        + coeffs.diffusion(h.t, h.x, h.y, h.u, h.z) * h.q;
    for (mark, w, rv) in mark_terms(levy, h.r)? {
        value += coeffs.jump(h.t, h.x, h.y, h.u, h.z, mark) * rv * w;
    }
    if value.is_finite() {
        Ok(value)
    } else {
        Err(LabError::NonFinite(format!("Hamiltonian at t = {}", h.t)))
    }
}

/// `(∂H/∂x, ∂H/∂y, ∂H/∂u)`; the running profit has no `y` argument.
pub fn hamiltonian_partials<C>(coeffs: &C, h: &HamiltonianInputs<'_>, levy: Option<&JumpModel>) -> Result<Partials>
where
    C: ModelCoefficients + ?Sized,
{
    check_kernel(h.kernel)?;
    let (fx, fu) = coeffs.profit_partials(h.t, h.x, h.u, h.z);
    let b = coeffs.drift_partials(h.t, h.x, h.y, h.u, h.z);
    let s = coeffs.diffusion_partials(h.t, h.x, h.y, h.u, h.z);
    let mut out = Partials {
        dx: h.kernel * fx + b.dx * h.p + s.dx * h.q,
        dy: b.dy * h.p + s.dy * h.q,
        du: h.kernel * fu + b.du * h.p + s.du * h.q,
    };
    for (mark, w, rv) in mark_terms(levy, h.r)? {
        let g = coeffs.jump_partials(h.t, h.x, h.y, h.u, h.z, mark);
        out.dx += g.dx * rv * w;
        out.dy += g.dy * rv * w;
        out.du += g.du * rv * w;
    }
    if out.dx.is_finite() && out.dy.is_finite() && out.du.is_finite() {
        Ok(out)
    } else {
        Err(LabError::NonFinite(format!("Hamiltonian derivative at t = {}", h.t)))
    }
}

/// Hamiltonian inputs at grid index `k` of a simulated trajectory. The
/// control at `T` is taken as the last control used.
pub(crate) fn inputs_at<'a>(state: &SegmentedState, adjoint: &'a AdjointPath, k: usize, z: f64) -> HamiltonianInputs<'a> {
    let controls = state.controls();
    HamiltonianInputs {
        t: state.grid().time(k),
        x: state.value(k),
        y: state.delayed(k),
        u: controls[k.min(controls.len() - 1)],
        z,
        p: adjoint.p(k),
        q: adjoint.q(k),
        r: adjoint.r(k),
        kernel: adjoint.kernel(k),
    }
}

/// Drift `μ(t) = -∂H/∂x(t) - ∂H/∂y(t+δ) 1_{t ≤ T-δ}` of the adjoint `p`.
pub fn adjoint_drift_mu<C>(
    coeffs: &C,
    state: &SegmentedState,
    adjoint: &AdjointPath,
    k: usize,
    z: f64,
    levy: Option<&JumpModel>,
) -> Result<f64>
where
    C: ModelCoefficients + ?Sized,
{
    let n = state.grid().n_steps();
    if adjoint.len() != n + 1 {
        return Err(LabError::InvalidParameter {
            name: "adjoint",
            reason: format!("{} adjoint points for {} grid points", adjoint.len(), n + 1),
        });
    }
    if k > n {
        return Err(LabError::InvalidParameter { name: "k", reason: format!("index {k} beyond the horizon") });
    }
    let here = hamiltonian_partials(coeffs, &inputs_at(state, adjoint, k, z), levy)?;
    let j = k + state.delay_steps();
    let advanced = if j <= n {
        hamiltonian_partials(coeffs, &inputs_at(state, adjoint, j, z), levy)?.dy
    } else {
        0.0
    };
    Ok(-here.dx - advanced)
}
