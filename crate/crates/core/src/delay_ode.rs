//! Linear delay / advance ODEs solved by the method of steps.
//!
//! Constant coefficients keep every piece in the class of exponential
//! polynomials `Σ P_i(t) e^{λ_i t}`, which is closed under shifts and under
//! solving `y' = λ y + f`, so each interval is integrated exactly.
//! Time-varying coefficients fall back to RK4 on every interval with cubic
//! Hermite dense output for the lagged values.

/// `Σ_i P_i(t) e^{λ_i t}`, polynomials in absolute time.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExpPoly {
    terms: Vec<ExpTerm>,
}

#[derive(Debug, Clone, PartialEq)]
struct ExpTerm {
    rate: f64,
    coeffs: Vec<f64>,
}

fn poly_eval(coeffs: &[f64], t: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * t + c)
}

fn poly_derivative(coeffs: &[f64]) -> Vec<f64> {
    coeffs.iter().enumerate().skip(1).map(|(j, &c)| j as f64 * c).collect()
}

fn poly_integral(coeffs: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0];
    out.extend(coeffs.iter().enumerate().map(|(j, &c)| c / (j + 1) as f64));
    out
}

// P(t + s) by binomial expansion.
fn poly_shift(coeffs: &[f64], s: f64) -> Vec<f64> {
    let mut out = vec![0.0; coeffs.len()];
    for (i, &c) in coeffs.iter().enumerate() {
        let mut binom = 1.0;
        let mut pow = 1.0;
        // c * (t + s)^i = c * Σ_j C(i,j) s^{i-j} t^j, iterate j from i down to 0
        for j in (0..=i).rev() {
            out[j] += c * binom * pow;
            binom = binom * j as f64 / (i - j + 1) as f64;
            pow *= s;
        }
    }
    out
}

fn rates_equal(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0)
}

impl ExpPoly {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn constant(c: f64) -> Self {
        Self::exponential(0.0, c)
    }

    /// `c e^{rate t}`.
    pub fn exponential(rate: f64, c: f64) -> Self {
        let mut out = Self::zero();
        out.add_term(rate, vec![c]);
        out
    }

    fn add_term(&mut self, rate: f64, coeffs: Vec<f64>) {
        if let Some(term) = self.terms.iter_mut().find(|t| rates_equal(t.rate, rate)) {
            if term.coeffs.len() < coeffs.len() {
                term.coeffs.resize(coeffs.len(), 0.0);
            }
            for (a, b) in term.coeffs.iter_mut().zip(coeffs) {
                *a += b;
            }
        } else {
            self.terms.push(ExpTerm { rate, coeffs });
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.terms.iter().map(|term| poly_eval(&term.coeffs, t) * (term.rate * t).exp()).sum()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            terms: self
                .terms
                .iter()
                .map(|t| ExpTerm { rate: t.rate, coeffs: t.coeffs.iter().map(|x| x * c).collect() })
                .collect(),
        }
    }

    pub fn plus(&self, other: &ExpPoly) -> Self {
        let mut out = self.clone();
        for t in &other.terms {
            out.add_term(t.rate, t.coeffs.clone());
        }
        out
    }

    /// `t ↦ f(t + s)`.
    pub fn shifted(&self, s: f64) -> Self {
        Self {
            terms: self
                .terms
                .iter()
                .map(|t| ExpTerm {
                    rate: t.rate,
                    coeffs: poly_shift(&t.coeffs, s).into_iter().map(|c| c * (t.rate * s).exp()).collect(),
                })
                .collect(),
        }
    }

    /// Solution of `y' = rate * y + f(t)`, `y(t0) = y0`, where `f` is `self`.
    pub fn solve_linear(&self, rate: f64, t0: f64, y0: f64) -> ExpPoly {
        let mut out = ExpPoly::zero();
        let mut at_t0 = 0.0;
        for term in &self.terms {
            let nu = term.rate - rate;
            if rates_equal(term.rate, rate) {
                // e^{λt} ∫_{t0}^t P(s) ds
                let q = poly_integral(&term.coeffs);
                at_t0 += poly_eval(&q, t0) * (rate * t0).exp();
                out.add_term(rate, q);
            } else {
                // ∫ P(s) e^{νs} ds = e^{νs} Σ_k (-1)^k P^{(k)}(s) / ν^{k+1}
                let mut r = vec![0.0; term.coeffs.len()];
                let mut deriv = term.coeffs.clone();
                let mut sign = 1.0;
                let mut scale = 1.0 / nu;
                while !deriv.is_empty() {
                    for (a, b) in r.iter_mut().zip(&deriv) {
                        *a += sign * scale * b;
                    }
                    deriv = poly_derivative(&deriv);
                    sign = -sign;
                    scale /= nu;
                }
                at_t0 += poly_eval(&r, t0) * (term.rate * t0).exp();
                out.add_term(term.rate, r);
            }
        }
        // homogeneous part fixes y(t0) = y0
        out.add_term(rate, vec![(y0 - at_t0) * (-rate * t0).exp()]);
        out
    }
}

/// Piecewise function on consecutive intervals `[breaks[i], breaks[i+1]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseExpPoly {
    breaks: Vec<f64>,
    pieces: Vec<ExpPoly>,
}

impl PiecewiseExpPoly {
    pub fn eval(&self, t: f64) -> f64 {
        let i = self.breaks.partition_point(|&b| b <= t).saturating_sub(1).min(self.pieces.len() - 1);
        self.pieces[i].eval(t)
    }

    pub fn breaks(&self) -> &[f64] {
        &self.breaks
    }

    pub fn pieces(&self) -> &[ExpPoly] {
        &self.pieces
    }
}

/// Interval boundaries `T, T-δ, T-2δ, ...` down to 0, returned ascending.
pub fn backward_breaks(delay: f64, horizon: f64) -> Vec<f64> {
    let mut breaks = vec![horizon];
    let mut k = 1usize;
    loop {
        let b = horizon - k as f64 * delay;
        if b <= 1e-12 * horizon.max(1.0) {
            breaks.push(0.0);
            break;
        }
        breaks.push(b);
        k += 1;
    }
    breaks.reverse();
    breaks
}

/// `y'(t) = a y(t) - c y(t+δ) 1_{t ≤ T-δ} + d`, `y(T) = terminal`, constant coefficients.
pub fn solve_advanced_constant(a: f64, c: f64, d: f64, delay: f64, horizon: f64, terminal: f64) -> PiecewiseExpPoly {
    let breaks = backward_breaks(delay, horizon);
    let n = breaks.len() - 1;
    let mut rev: Vec<ExpPoly> = Vec::with_capacity(n);
    let forcing0 = ExpPoly::constant(d);
    rev.push(forcing0.solve_linear(a, horizon, terminal));
    for k in 1..n {
        let t_hi = breaks[n - k];
        let prev = &rev[k - 1];
        let forcing = prev.shifted(delay).scaled(-c).plus(&ExpPoly::constant(d));
        let y0 = prev.eval(t_hi);
        rev.push(forcing.solve_linear(a, t_hi, y0));
    }
    rev.reverse();
    PiecewiseExpPoly { breaks, pieces: rev }
}

/// `y'(t) = λ y(t) + κ y(t-r) + f` on `[0,T]` with `y = history` on `[-r, 0]`.
pub fn solve_delayed_constant(
    rate: f64,
    lag_coef: f64,
    forcing: f64,
    delay: f64,
    horizon: f64,
    history: &ExpPoly,
) -> PiecewiseExpPoly {
    let mut breaks = vec![0.0];
    let mut pieces: Vec<ExpPoly> = Vec::new();
    let mut prev = history.clone();
    let mut t0 = 0.0;
    loop {
        let t1 = (t0 + delay).min(horizon);
        let f = prev.shifted(-delay).scaled(lag_coef).plus(&ExpPoly::constant(forcing));
        let y0 = prev.eval(t0);
        let piece = f.solve_linear(rate, t0, y0);
        breaks.push(t1);
        pieces.push(piece.clone());
        prev = piece;
        t0 = t1;
        if t1 >= horizon - 1e-12 * horizon.max(1.0) {
            break;
        }
    }
    PiecewiseExpPoly { breaks, pieces }
}

/// One interval of an RK4 solution with cubic Hermite dense output.
#[derive(Debug, Clone, PartialEq)]
struct NumericPiece {
    times: Vec<f64>,
    values: Vec<f64>,
    slopes: Vec<f64>,
}

impl NumericPiece {
    fn eval(&self, t: f64) -> f64 {
        let n = self.times.len() - 1;
        let i = self.times.partition_point(|&s| s <= t).saturating_sub(1).min(n - 1);
        let (t0, t1) = (self.times[i], self.times[i + 1]);
        let h = t1 - t0;
        let s = ((t - t0) / h).clamp(0.0, 1.0);
        let (h00, h10, h01, h11) = (
            (1.0 + 2.0 * s) * (1.0 - s) * (1.0 - s),
            s * (1.0 - s) * (1.0 - s),
            s * s * (3.0 - 2.0 * s),
            s * s * (s - 1.0),
        );
        h00 * self.values[i] + h10 * h * self.slopes[i] + h01 * self.values[i + 1] + h11 * h * self.slopes[i + 1]
    }
}

/// Method-of-steps RK4 solution on `[0, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NumericCurve {
    breaks: Vec<f64>,
    pieces: Vec<NumericPiece>,
}

impl NumericCurve {
    pub fn eval(&self, t: f64) -> f64 {
        let i = self.breaks.partition_point(|&b| b <= t).saturating_sub(1).min(self.pieces.len() - 1);
        self.pieces[i].eval(t)
    }

    pub fn breaks(&self) -> &[f64] {
        &self.breaks
    }
}

/// Time-varying version of [`solve_advanced_constant`]; `max_step` bounds the RK4 step.
pub fn solve_advanced_numeric(
    a: &dyn Fn(f64) -> f64,
    c: &dyn Fn(f64) -> f64,
    d: &dyn Fn(f64) -> f64,
    delay: f64,
    horizon: f64,
    terminal: f64,
    max_step: f64,
) -> NumericCurve {
    let breaks = backward_breaks(delay, horizon);
    let n = breaks.len() - 1;
    let mut rev: Vec<NumericPiece> = Vec::with_capacity(n);
    for k in 0..n {
        let (t_lo, t_hi) = (breaks[n - k - 1], breaks[n - k]);
        let advance = |t: f64| -> f64 {
            if k == 0 {
                0.0
            } else {
                rev[k - 1].eval(t + delay)
            }
        };
        let rhs = |t: f64, y: f64| a(t) * y - c(t) * advance(t) + d(t);
        let m = ((t_hi - t_lo) / max_step).ceil().max(1.0) as usize;
        let h = (t_hi - t_lo) / m as f64;
        let mut y = if k == 0 { terminal } else { rev[k - 1].eval(t_hi) };
        let mut times = vec![t_hi];
        let mut values = vec![y];
        let mut slopes = vec![rhs(t_hi, y)];
        for j in 0..m {
            let t = t_hi - h * j as f64;
            let k1 = rhs(t, y);
            let k2 = rhs(t - 0.5 * h, y - 0.5 * h * k1);
            let k3 = rhs(t - 0.5 * h, y - 0.5 * h * k2);
            let t_next = if j + 1 == m { t_lo } else { t_hi - h * (j + 1) as f64 };
            let k4 = rhs(t_next, y - h * k3);
            y -= h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            times.push(t_next);
            values.push(y);
            slopes.push(rhs(t_next, y));
        }
        times.reverse();
        values.reverse();
        slopes.reverse();
        rev.push(NumericPiece { times, values, slopes });
    }
    rev.reverse();
    NumericCurve { breaks, pieces: rev }
}
