//! Time grids, driving noise and Monte Carlo plumbing.
//!
//! Every random quantity in the crate is drawn from a [`SeedPolicy`] stream
//! keyed by `(master_seed, channel, path_index)`. A path therefore does not
//! depend on how the path indices are split between workers, and
//! [`run_paths`] returns results in index order whatever the thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;

use crate::error::{LabError, Result};
use crate::quadrature::GaussHermite;

/// Relative tolerance used when snapping times and lags onto a grid.
const GRID_TOL: f64 = 1e-8;

/// Uniform grid `t_start = t_0 < t_1 < ... < t_n = t_end`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    t_start: f64,
    t_end: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(t_start: f64, t_end: f64, n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(LabError::InvalidGrid("n_steps must be positive".into()));
        }
        if !(t_start.is_finite() && t_end.is_finite()) || t_end <= t_start {
            return Err(LabError::InvalidGrid(format!(
                "need t_end > t_start, got [{t_start}, {t_end}]"
            )));
        }
        Ok(Self { t_start, t_end, n_steps })
    }

    /// Grid on `[t_start, t_end]` with step `dt`; the span must be a multiple of `dt`.
    pub fn with_step(t_start: f64, t_end: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(LabError::InvalidGrid(format!("dt must be positive, got {dt}")));
        }
        let n = steps_in(t_end - t_start, dt, "grid span")?;
        Self::new(t_start, t_end, n)
    }

    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        (self.t_end - self.t_start) / self.n_steps as f64
    }

    pub fn span(&self) -> f64 {
        self.t_end - self.t_start
    }

    /// Time of grid point `k` (`0 ..= n_steps`).
    pub fn time(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.t_end
        } else {
            self.t_start + self.dt() * k as f64
        }
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.n_steps).map(move |k| self.time(k))
    }

    /// Index of the grid point equal to `t`.
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let dt = self.dt();
        let x = (t - self.t_start) / dt;
        let k = x.round();
        if k < 0.0 || k > self.n_steps as f64 || (x - k).abs() > GRID_TOL * k.max(1.0) {
            return Err(LabError::OffGrid { time: t, dt });
        }
        Ok(k as usize)
    }

    /// Number of whole steps in `duration`; errors when `duration` is not a multiple of dt.
    pub fn steps_for(&self, duration: f64, what: &'static str) -> Result<usize> {
        steps_in(duration, self.dt(), what)
    }

    /// The grid `[t_start, t_start + k*dt]`, sharing this grid's points.
    pub fn prefix(&self, k: usize) -> Result<TimeGrid> {
        if k == 0 || k > self.n_steps {
            return Err(LabError::InvalidGrid(format!(
                "prefix of {k} steps out of {}",
                self.n_steps
            )));
        }
        Ok(TimeGrid { t_start: self.t_start, t_end: self.time(k), n_steps: k })
    }
}

/// `duration / dt` as an exact step count.
pub fn steps_in(duration: f64, dt: f64, what: &'static str) -> Result<usize> {
    let x = duration / dt;
    let k = x.round();
    if !(duration >= 0.0) || !x.is_finite() || (x - k).abs() > GRID_TOL * k.max(1.0) {
        return Err(LabError::Misaligned { what, value: duration, dt });
    }
    Ok(k as usize)
}

/// Independent random channels drawn for one path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    Brownian,
    Jumps,
    Auxiliary,
}

impl Channel {
    fn tag(self) -> u64 {
        match self {
            Channel::Brownian => 0x42_52_4f_57,
            Channel::Jumps => 0x4a_55_4d_50,
            Channel::Auxiliary => 0x41_55_58_31,
        }
    }
}

/// Derives a ChaCha substream for every `(channel, path index)` from a master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedPolicy {
    pub master_seed: u64,
}

impl SeedPolicy {
    pub fn new(master_seed: u64) -> Self {
        Self { master_seed }
    }

    pub fn stream(&self, channel: Channel, path_index: u64) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        let mut state = self.master_seed ^ channel.tag().rotate_left(17);
        for chunk in key.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(path_index);
        rng
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Brownian motion sampled on a grid, `B(t_start) = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianPath {
    grid: TimeGrid,
    values: Vec<f64>,
}

impl BrownianPath {
    /// Builds the path from its increments `B(t_{k+1}) - B(t_k)`.
    pub fn from_increments(grid: TimeGrid, increments: &[f64]) -> Result<Self> {
        if increments.len() != grid.n_steps() {
            return Err(LabError::InvalidGrid(format!(
                "{} increments for {} steps",
                increments.len(),
                grid.n_steps()
            )));
        }
        let mut values = Vec::with_capacity(increments.len() + 1);
        let mut b = 0.0;
        values.push(b);
        for &db in increments {
            b += db;
            values.push(b);
        }
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, k: usize) -> f64 {
        self.values[k]
    }

    pub fn increment(&self, k: usize) -> f64 {
        self.values[k + 1] - self.values[k]
    }

    pub fn increments(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.windows(2).map(|w| w[1] - w[0])
    }

    pub fn terminal(&self) -> f64 {
        *self.values.last().expect("path has at least two points")
    }

    /// Every `factor`-th point, i.e. the same path seen on a grid with step `factor * dt`.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.grid.n_steps().is_multiple_of(factor) {
            return Err(LabError::InvalidGrid(format!(
                "cannot coarsen {} steps by {factor}",
                self.grid.n_steps()
            )));
        }
        let grid = TimeGrid::new(self.grid.t_start(), self.grid.t_end(), self.grid.n_steps() / factor)?;
        let values = self.values.iter().step_by(factor).copied().collect();
        Ok(Self { grid, values })
    }
}

/// Samples Brownian increments `sqrt(dt) * N(0,1)` in grid order.
///
/// Increments are drawn sequentially, so the first `k` increments of a path
/// on a longer grid coincide with the path sampled on its `k`-step prefix.
pub fn sample_brownian<R: Rng + ?Sized>(grid: TimeGrid, rng: &mut R) -> BrownianPath {
    let sd = grid.dt().sqrt();
    let mut values = Vec::with_capacity(grid.n_steps() + 1);
    let mut b = 0.0;
    values.push(b);
    for _ in 0..grid.n_steps() {
        let xi: f64 = StandardNormal.sample(rng);
        b += sd * xi;
        values.push(b);
    }
    BrownianPath { grid, values }
}

/// Distribution of jump marks ζ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MarkDistribution {
    Fixed(f64),
    Normal { mean: f64, std: f64 },
}

impl MarkDistribution {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            MarkDistribution::Fixed(v) => v,
            MarkDistribution::Normal { mean, std } => {
                let xi: f64 = StandardNormal.sample(rng);
                mean + std * xi
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            MarkDistribution::Fixed(v) => v,
            MarkDistribution::Normal { mean, .. } => mean,
        }
    }

    /// Nodes and probability weights (summing to 1) for expectations over the mark law.
    pub fn quadrature(&self) -> Vec<(f64, f64)> {
        match *self {
            MarkDistribution::Fixed(v) => vec![(v, 1.0)],
            MarkDistribution::Normal { mean, std } => {
                let rule = GaussHermite::standard(32);
                rule.nodes()
                    .iter()
                    .zip(rule.weights())
                    .map(|(&x, &w)| (mean + std * x, w))
                    .collect()
            }
        }
    }

    pub fn expectation(&self, f: impl Fn(f64) -> f64) -> f64 {
        match *self {
            MarkDistribution::Fixed(v) => f(v),
            MarkDistribution::Normal { mean, std } => GaussHermite::standard(32).expect(mean, std, f),
        }
    }
}

/// Compound Poisson intensity and mark law; the compensator is `ν(dζ) = λ F(dζ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JumpModel {
    pub intensity: f64,
    pub marks: MarkDistribution,
}

impl JumpModel {
    pub fn new(intensity: f64, marks: MarkDistribution) -> Result<Self> {
        if !(intensity >= 0.0) || !intensity.is_finite() {
            return Err(LabError::InvalidParameter {
                name: "intensity",
                reason: format!("must be finite and >= 0, got {intensity}"),
            });
        }
        Ok(Self { intensity, marks })
    }

    /// Mark nodes carrying the ν-weights `λ * w_i`.
    pub fn levy_grid(&self) -> Vec<(f64, f64)> {
        self.marks
            .quadrature()
            .into_iter()
            .map(|(m, w)| (m, self.intensity * w))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jump {
    pub time: f64,
    pub mark: f64,
    /// Grid step `k` with `time ∈ (t_k, t_{k+1}]`.
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JumpPath {
    grid: TimeGrid,
    model: JumpModel,
    jumps: Vec<Jump>,
}

impl JumpPath {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn model(&self) -> &JumpModel {
        &self.model
    }

    pub fn jumps(&self) -> &[Jump] {
        &self.jumps
    }

    pub fn count(&self) -> usize {
        self.jumps.len()
    }

    /// Marks of the jumps falling in step `k`.
    pub fn marks_in_step(&self, k: usize) -> impl Iterator<Item = f64> + '_ {
        let start = self.jumps.partition_point(|j| j.step < k);
        self.jumps[start..].iter().take_while(move |j| j.step == k).map(|j| j.mark)
    }

    /// `∫∫ φ(t,ζ) Ñ(dt,dζ)` with the compensator integrated by left-endpoint sums.
    pub fn compensated_integral(&self, phi: impl Fn(f64, f64) -> f64) -> f64 {
        let raw: f64 = self.jumps.iter().map(|j| phi(self.grid.time(j.step), j.mark)).sum();
        let dt = self.grid.dt();
        let comp: f64 = (0..self.grid.n_steps())
            .map(|k| {
                let t = self.grid.time(k);
                self.model.marks.expectation(|m| phi(t, m))
            })
            .sum();
        raw - self.model.intensity * dt * comp
    }
}

/// Poisson number of jumps on the grid span with uniform times and i.i.d. marks.
pub fn sample_jumps<R: Rng + ?Sized>(grid: TimeGrid, model: JumpModel, rng: &mut R) -> Result<JumpPath> {
    let model = JumpModel::new(model.intensity, model.marks)?;
    let mean = model.intensity * grid.span();
    let count = if mean > 0.0 {
        let poisson = Poisson::new(mean).map_err(|e| LabError::InvalidParameter {
            name: "intensity",
            reason: e.to_string(),
        })?;
        let c: f64 = poisson.sample(rng);
        c as usize
    } else {
        0
    };
    let mut times: Vec<f64> = (0..count)
        .map(|_| grid.t_start() + grid.span() * (1.0 - rng.random::<f64>()))
        .collect();
    times.sort_by(f64::total_cmp);
    let dt = grid.dt();
    let jumps = times
        .into_iter()
        .map(|time| {
            let pos = (time - grid.t_start()) / dt;
            let step = (pos.ceil() as usize).clamp(1, grid.n_steps()) - 1;
            Jump { time, mark: model.marks.sample(rng), step }
        })
        .collect();
    Ok(JumpPath { grid, model, jumps })
}

/// Monte Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MCEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
    pub master_seed: u64,
}

impl MCEstimate {
    /// `(mean - target) / stderr`; infinite when stderr is 0 and the mean is off target.
    pub fn gap_sigmas(&self, target: f64) -> f64 {
        let gap = self.mean - target;
        if self.stderr > 0.0 {
            gap / self.stderr
        } else if gap == 0.0 {
            0.0
        } else {
            gap.signum() * f64::INFINITY
        }
    }

    pub fn within(&self, target: f64, k_sigma: f64) -> bool {
        (self.mean - target).abs() <= k_sigma * self.stderr
    }
}

/// Two-pass mean and standard error of a sample.
pub fn mc_aggregate(values: impl IntoIterator<Item = f64>, master_seed: u64) -> Result<MCEstimate> {
    let values: Vec<f64> = values.into_iter().collect();
    let n = values.len();
    if n < 2 {
        return Err(LabError::InsufficientSamples(n));
    }
    if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
        return Err(LabError::NonFinite(format!("Monte Carlo sample {bad}")));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    let var = ss / (n - 1) as f64;
    Ok(MCEstimate { mean, stderr: (var / n as f64).sqrt(), n, master_seed })
}

/// Streaming Welford accumulator; partial accumulators merge with Chan's update.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct McAccumulator {
    n: usize,
    mean: f64,
    m2: f64,
}

impl McAccumulator {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn merge(&mut self, other: &McAccumulator) {
        if other.n == 0 {
            return;
        }
        let n = self.n + other.n;
        let d = other.mean - self.mean;
        self.mean += d * other.n as f64 / n as f64;
        self.m2 += other.m2 + d * d * (self.n as f64 * other.n as f64) / n as f64;
        self.n = n;
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn estimate(&self, master_seed: u64) -> Result<MCEstimate> {
        if self.n < 2 {
            return Err(LabError::InsufficientSamples(self.n));
        }
        let var = self.m2 / (self.n - 1) as f64;
        Ok(MCEstimate { mean: self.mean, stderr: (var / self.n as f64).sqrt(), n: self.n, master_seed })
    }
}

/// Evaluates `per_path(i)` for `i in 0..n` in parallel and returns the results in index order.
pub fn run_paths<T, F>(n: usize, per_path: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync,
{
    (0..n as u64).into_par_iter().map(&per_path).collect()
}
