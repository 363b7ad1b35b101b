//! Conditional Donsker-delta kernel for first-chaos Gaussian information
//! `Z = ∫₀^{T₀} β(s) dB(s)`.
//!
//! With `σ²(t) = ∫ₜ^{T₀} β²(s) ds` the remaining information variance,
//!
//! ```text
//! E[δ_Z(z) | F_t]   = φ(Z(t) - z; σ²(t))
//! E[D_t δ_Z(z) | F_t] = -φ(Z(t) - z; σ²(t)) (Z(t) - z) β(t) / σ²(t)
//! ```
//!
//! where `φ(·; v)` is the centred normal density of variance `v`. All
//! quantities live on the information grid: `Z(t)` is the
//! left-endpoint Itô sum and `σ²(t)` the matching partial sum of `β² dt`.

use std::f64::consts::PI;

use crate::error::{LabError, Result};
use crate::paths::{BrownianPath, TimeGrid};
use crate::quadrature::GaussHermite;

/// Inside information `Z = Z(T₀)`, `Z(t) = Σ β_j ΔB_j`, on a uniform grid over `[0, T₀]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianInsiderSpec {
    grid: TimeGrid,
    beta: Vec<f64>,
    tail: Vec<f64>,
    constant: Option<f64>,
}

impl GaussianInsiderSpec {
    /// `β(s)` sampled at the left endpoint of every step of `grid` (which must start at 0).
    pub fn from_samples(grid: TimeGrid, beta: Vec<f64>) -> Result<Self> {
        if grid.t_start() != 0.0 {
            return Err(LabError::InvalidGrid("information grid must start at 0".into()));
        }
        if beta.len() != grid.n_steps() {
            return Err(LabError::InvalidParameter {
                name: "beta",
                reason: format!("{} samples for {} steps", beta.len(), grid.n_steps()),
            });
        }
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(LabError::NonFinite("information integrand beta".into()));
        }
        let dt = grid.dt();
        let mut tail = vec![0.0; beta.len() + 1];
        for k in (0..beta.len()).rev() {
            tail[k] = tail[k + 1] + beta[k] * beta[k] * dt;
        }
        let constant = beta.first().copied().filter(|&b0| beta.iter().all(|&b| b == b0));
        Ok(Self { grid, beta, tail, constant })
    }

    pub fn from_fn(t0: f64, dt: f64, beta: impl Fn(f64) -> f64) -> Result<Self> {
        let grid = TimeGrid::with_step(0.0, t0, dt)?;
        let samples = (0..grid.n_steps()).map(|k| beta(grid.time(k))).collect();
        Self::from_samples(grid, samples)
    }

    /// `β ≡ beta`; with `beta = 1` the information is `Z = B(T₀)`.
    pub fn constant(beta: f64, t0: f64, dt: f64) -> Result<Self> {
        Self::from_fn(t0, dt, |_| beta)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn t0(&self) -> f64 {
        self.grid.t_end()
    }

    pub fn dt(&self) -> f64 {
        self.grid.dt()
    }

    /// `Some(β)` when the integrand is constant.
    pub fn constant_beta(&self) -> Option<f64> {
        self.constant
    }

    pub fn beta_at(&self, k: usize) -> f64 {
        self.beta[k.min(self.beta.len() - 1)]
    }

    /// `‖β‖²_{[t_k, T₀]}`.
    pub fn remaining_variance(&self, k: usize) -> f64 {
        self.tail[k]
    }

    /// Variance `‖β‖²_{[0,T₀]}` of `Z`.
    pub fn total_variance(&self) -> f64 {
        self.tail[0]
    }

    /// Grid index of `t`, rejecting times within one step of `T₀` where the kernel degenerates.
    pub fn kernel_index(&self, t: f64) -> Result<usize> {
        let k = self.grid.index_of(t)?;
        self.check_kernel_index(k)?;
        Ok(k)
    }

    fn check_kernel_index(&self, k: usize) -> Result<()> {
        if k >= self.grid.n_steps() {
            return Err(LabError::InvalidParameter {
                name: "t",
                reason: format!("kernel needs t < T0 = {} (at least one grid step before)", self.t0()),
            });
        }
        let v = self.tail[k];
        if !(v > 0.0) {
            return Err(LabError::DegenerateKernel(v));
        }
        Ok(())
    }

    /// Checks that `path` lives on the information grid (possibly only up to an earlier time).
    pub fn check_path(&self, path: &BrownianPath) -> Result<()> {
        let pg = path.grid();
        let same_dt = (pg.dt() - self.dt()).abs() <= 1e-12 * self.dt();
        if pg.t_start() != 0.0 || !same_dt || pg.n_steps() > self.grid.n_steps() {
            return Err(LabError::InvalidGrid(format!(
                "path grid [{}, {}] with dt {} does not match information grid dt {} on [0, {}]",
                pg.t_start(),
                pg.t_end(),
                pg.dt(),
                self.dt(),
                self.t0()
            )));
        }
        Ok(())
    }

    /// `Z(t_k)` for every point of `path`.
    pub fn information_path(&self, path: &BrownianPath) -> Result<Vec<f64>> {
        self.check_path(path)?;
        let mut out = Vec::with_capacity(path.values().len());
        let mut z = 0.0;
        out.push(z);
        for (k, db) in path.increments().enumerate() {
            z += self.beta[k] * db;
            out.push(z);
        }
        Ok(out)
    }

    /// Kernel value at grid index `k` given the information state `Z(t_k)`.
    pub fn kernel_from_state(&self, z: f64, k: usize, information: f64) -> Result<KernelValue> {
        self.check_kernel_index(k)?;
        let v = self.tail[k];
        let density = normal_density(information - z, v);
        let derivative = -density * (information - z) / v * self.beta[k];
        Ok(KernelValue { density, derivative })
    }

    /// Kernel values along the first `n + 1` points of `path` for a fixed `z`.
    pub fn kernel_track(&self, z: f64, path: &BrownianPath, n: usize) -> Result<KernelTrack> {
        let info = self.information_path(path)?;
        if n >= info.len() {
            return Err(LabError::PathTooShort { needed: self.grid.time(n), available: path.grid().t_end() });
        }
        let mut density = Vec::with_capacity(n + 1);
        let mut derivative = Vec::with_capacity(n + 1);
        for (k, &zk) in info.iter().enumerate().take(n + 1) {
            let kv = self.kernel_from_state(z, k, zk)?;
            density.push(kv.density);
            derivative.push(kv.derivative);
        }
        Ok(KernelTrack { density, derivative })
    }
}

/// `E[δ_Z(z)|F_t]` and `E[D_t δ_Z(z)|F_t]` at one time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelValue {
    pub density: f64,
    pub derivative: f64,
}

/// Kernel martingale `M_k = E[δ_Z(z)|F_{t_k}]` and its Clark–Ocone integrand along a path.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelTrack {
    pub density: Vec<f64>,
    pub derivative: Vec<f64>,
}

pub fn normal_density(x: f64, variance: f64) -> f64 {
    (-(x * x) / (2.0 * variance)).exp() / (2.0 * PI * variance).sqrt()
}

fn path_index(spec: &GaussianInsiderSpec, path: &BrownianPath, t: f64) -> Result<usize> {
    spec.check_path(path)?;
    let k = spec.grid().index_of(t)?;
    if k > path.grid().n_steps() {
        return Err(LabError::PathTooShort { needed: t, available: path.grid().t_end() });
    }
    Ok(k)
}

/// `Z(t) = Σ_{t_j < t} β(t_j) ΔB_j`.
pub fn information_state(spec: &GaussianInsiderSpec, path: &BrownianPath, t: f64) -> Result<f64> {
    let k = path_index(spec, path, t)?;
    Ok(spec.information_path(path)?[k])
}

pub fn kernel(spec: &GaussianInsiderSpec, z: f64, t: f64, path: &BrownianPath) -> Result<KernelValue> {
    let k = path_index(spec, path, t)?;
    let info = information_state(spec, path, t)?;
    spec.kernel_from_state(z, k, info)
}

/// `E[δ_Z(z) | F_t]`.
pub fn conditional_density(spec: &GaussianInsiderSpec, z: f64, t: f64, path: &BrownianPath) -> Result<f64> {
    Ok(kernel(spec, z, t, path)?.density)
}

/// `E[D_t δ_Z(z) | F_t]`.
pub fn conditional_derivative(spec: &GaussianInsiderSpec, z: f64, t: f64, path: &BrownianPath) -> Result<f64> {
    Ok(kernel(spec, z, t, path)?.derivative)
}

/// Information drift `Φ(t) = β(t) (Z(T₀) - Z(t)) / ‖β‖²_{[t,T₀]}`, the ratio of the
/// two kernels at `z = Z`. Anticipating: needs the path up to `T₀`.
pub fn information_drift(spec: &GaussianInsiderSpec, t: f64, path: &BrownianPath) -> Result<f64> {
    let k = path_index(spec, path, t)?;
    spec.check_kernel_index(k)?;
    let n = spec.grid().n_steps();
    if path.grid().n_steps() < n {
        return Err(LabError::PathTooShort { needed: spec.t0(), available: path.grid().t_end() });
    }
    let info = spec.information_path(path)?;
    Ok(spec.beta_at(k) * (info[n] - info[k]) / spec.remaining_variance(k))
}

/// `E[h(B(T)) E[δ_Z(z)|F_T] | F_t]` for constant β, by Gauss–Hermite quadrature.
///
/// Conditionally on `F_t` the product of the Gaussian law of `B(T) - B(t)` and
/// the kernel at `T` is again Gaussian up to the factor `E[δ_Z(z)|F_t]`, so the
/// rule is applied to that tilted normal.
pub fn pair_expectation_quadrature(
    spec: &GaussianInsiderSpec,
    h: impl Fn(f64) -> f64,
    z: f64,
    t: f64,
    horizon: f64,
    path: &BrownianPath,
) -> Result<f64> {
    let k = path_index(spec, path, t)?;
    let info = spec.information_path(path)?;
    pair_expectation_from_state(spec, &h, z, k, horizon, path.value(k), info[k])
}

pub(crate) fn pair_expectation_from_state(
    spec: &GaussianInsiderSpec,
    h: &dyn Fn(f64) -> f64,
    z: f64,
    k: usize,
    horizon: f64,
    brownian: f64,
    information: f64,
) -> Result<f64> {
    let beta = spec.constant_beta().ok_or_else(|| {
        LabError::Unsupported("pair expectation quadrature requires a constant information integrand".into())
    })?;
    let k_horizon = spec.grid().index_of(horizon)?;
    spec.check_kernel_index(k_horizon)?;
    if k > k_horizon {
        return Err(LabError::InvalidParameter {
            name: "t",
            reason: format!("t = {} exceeds the horizon {horizon}", spec.grid().time(k)),
        });
    }
    let v_horizon = spec.remaining_variance(k_horizon);
    let tau = spec.grid().time(k_horizon) - spec.grid().time(k);
    let value = if k == k_horizon {
        h(brownian) * normal_density(information - z, v_horizon)
    } else {
        let precision = 1.0 / tau + beta * beta / v_horizon;
        let s2 = 1.0 / precision;
        let shift = s2 * beta * (z - information) / v_horizon;
        let weight = normal_density(information - z, spec.remaining_variance(k));
        weight * GaussHermite::standard(64).expect(brownian + shift, s2.sqrt(), h)
    };
    if value.is_finite() {
        Ok(value)
    } else {
        Err(LabError::NonFinite("pair expectation (payoff not integrable?)".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::{sample_brownian, Channel, SeedPolicy};

    fn flat_path(grid: TimeGrid) -> BrownianPath {
        BrownianPath::from_increments(grid, &vec![0.0; grid.n_steps()]).unwrap()
    }

    #[test]
    fn unit_integrand_reproduces_brownian() {
        let spec = GaussianInsiderSpec::constant(1.0, 2.0, 0.01).unwrap();
        let path = sample_brownian(*spec.grid(), &mut SeedPolicy::new(3).stream(Channel::Brownian, 0));
        for t in [0.0, 0.37, 1.0, 2.0] {
            let zt = information_state(&spec, &path, t).unwrap();
            let bt = path.value(spec.grid().index_of(t).unwrap());
            assert!((zt - bt).abs() < 1e-12);
        }
    }

    #[test]
    fn null_integrand_gives_zero_state() {
        let spec = GaussianInsiderSpec::from_fn(2.0, 0.01, |s| if s < 1.0 { 0.0 } else { 1.0 }).unwrap();
        let path = sample_brownian(*spec.grid(), &mut SeedPolicy::new(4).stream(Channel::Brownian, 0));
        assert_eq!(information_state(&spec, &path, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn density_at_centre_and_one_sigma() {
        let spec = GaussianInsiderSpec::constant(1.0, 1.0, 0.01).unwrap();
        let path = flat_path(*spec.grid());
        let c = conditional_density(&spec, 0.0, 0.0, &path).unwrap();
        assert!((c - 0.398_942_280_401_432_7).abs() < 1e-12);
        let one = conditional_density(&spec, 1.0, 0.0, &path).unwrap();
        assert!((one - 0.241_970_724_519_143_37).abs() < 1e-12);
        let d = conditional_derivative(&spec, 1.0, 0.0, &path).unwrap();
        assert!((d - 0.241_970_724_519_143_37).abs() < 1e-12);
    }

    #[test]
    fn derivative_vanishes_at_centre_and_has_sign() {
        let spec = GaussianInsiderSpec::constant(1.0, 1.5, 0.01).unwrap();
        let path = sample_brownian(*spec.grid(), &mut SeedPolicy::new(8).stream(Channel::Brownian, 0));
        let zt = information_state(&spec, &path, 0.5).unwrap();
        assert_eq!(conditional_derivative(&spec, zt, 0.5, &path).unwrap(), 0.0);
        assert!(conditional_derivative(&spec, zt + 0.3, 0.5, &path).unwrap() > 0.0);
        assert!(conditional_derivative(&spec, zt - 0.3, 0.5, &path).unwrap() < 0.0);
    }

    #[test]
    fn kernel_rejects_terminal_time_and_off_grid() {
        let spec = GaussianInsiderSpec::constant(1.0, 1.0, 0.01).unwrap();
        let path = flat_path(*spec.grid());
        assert!(conditional_density(&spec, 0.0, 1.0, &path).is_err());
        assert!(conditional_density(&spec, 0.0, 0.995, &path).is_err());
        assert!(conditional_density(&spec, 0.0, 0.99, &path).is_ok());
        let degenerate = GaussianInsiderSpec::from_fn(1.0, 0.01, |s| if s < 0.5 { 1.0 } else { 0.0 }).unwrap();
        assert!(matches!(
            conditional_density(&degenerate, 0.0, 0.6, &flat_path(*degenerate.grid())),
            Err(LabError::DegenerateKernel(_))
        ));
    }

    #[test]
    fn information_drift_arithmetic() {
        let grid = TimeGrid::new(0.0, 1.0, 2).unwrap();
        let path = BrownianPath::from_increments(grid, &[0.3, 0.5]).unwrap();
        let spec = GaussianInsiderSpec::from_samples(grid, vec![1.0, 1.0]).unwrap();
        // B(T0) = 0.8, B(0.5) = 0.3, T0 - t = 0.5
        assert!((information_drift(&spec, 0.5, &path).unwrap() - 1.0).abs() < 1e-12);
        let centred = BrownianPath::from_increments(grid, &[0.3, 0.0]).unwrap();
        assert_eq!(information_drift(&spec, 0.5, &centred).unwrap(), 0.0);
        let short = BrownianPath::from_increments(grid.prefix(1).unwrap(), &[0.3]).unwrap();
        assert!(matches!(information_drift(&spec, 0.5, &short), Err(LabError::PathTooShort { .. })));
    }

    #[test]
    fn normalization_over_z() {
        let spec = GaussianInsiderSpec::constant(1.0, 1.0, 1e-3).unwrap();
        let path = sample_brownian(*spec.grid(), &mut SeedPolicy::new(1).stream(Channel::Brownian, 0));
        for t in [0.2, 0.5, 0.8] {
            let k = spec.grid().index_of(t).unwrap();
            let zt = information_state(&spec, &path, t).unwrap();
            let sd = spec.remaining_variance(k).sqrt();
            let n = 4000;
            let (lo, hi) = (zt - 8.0 * sd, zt + 8.0 * sd);
            let h = (hi - lo) / n as f64;
            let mut total = 0.0;
            for i in 0..=n {
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                total += w * spec.kernel_from_state(lo + h * i as f64, k, zt).unwrap().density;
            }
            assert!((total * h - 1.0).abs() < 1e-6, "t={t}: {}", total * h);
        }
    }

    #[test]
    fn derivative_matches_directional_difference() {
        // Shifting B by ε on [t, T0] moves Z(t) by ε β(t) under the forward convention.
        let spec = GaussianInsiderSpec::from_fn(1.5, 1e-3, |s| 0.5 + s).unwrap();
        let path = sample_brownian(*spec.grid(), &mut SeedPolicy::new(2).stream(Channel::Brownian, 0));
        let eps = 1e-5;
        for (t, z) in [(0.3, 0.2), (0.7, -0.4), (1.1, 0.9)] {
            let k = spec.grid().index_of(t).unwrap();
            let zt = information_state(&spec, &path, t).unwrap();
            let b = spec.beta_at(k);
            let up = spec.kernel_from_state(z, k, zt + eps * b).unwrap().density;
            let dn = spec.kernel_from_state(z, k, zt - eps * b).unwrap().density;
            let fd = (up - dn) / (2.0 * eps);
            let exact = spec.kernel_from_state(z, k, zt).unwrap().derivative;
            assert!(((fd - exact) / exact).abs() < 1e-4, "t={t}: fd {fd} exact {exact}");
        }
    }

    #[test]
    fn pair_expectation_constant_payoff() {
        let spec = GaussianInsiderSpec::constant(1.0, 2.0, 1e-3).unwrap();
        let path = sample_brownian(spec.grid().prefix(1000).unwrap(), &mut SeedPolicy::new(5).stream(Channel::Brownian, 0));
        for t in [0.0, 0.4, 0.9, 1.0] {
            let m = conditional_density(&spec, 0.3, t, &path).unwrap();
            let one = pair_expectation_quadrature(&spec, |_| 1.0, 0.3, t, 1.0, &path).unwrap();
            let three = pair_expectation_quadrature(&spec, |_| 3.0, 0.3, t, 1.0, &path).unwrap();
            assert!(((one - m) / m).abs() < 1e-12);
            assert!(((three - 3.0 * m) / m).abs() < 1e-12);
        }
    }

    #[test]
    fn pair_expectation_requires_constant_beta() {
        let spec = GaussianInsiderSpec::from_fn(2.0, 0.01, |s| 1.0 + s).unwrap();
        let path = flat_path(*spec.grid());
        assert!(matches!(
            pair_expectation_quadrature(&spec, |_| 1.0, 0.0, 0.5, 1.0, &path),
            Err(LabError::Unsupported(_))
        ));
        let constant = GaussianInsiderSpec::constant(1.0, 2.0, 0.01).unwrap();
        assert!(pair_expectation_quadrature(&constant, |x| (x * x * x * x).exp(), 0.0, 0.0, 1.0, &flat_path(*constant.grid())).is_err());
    }
}
