//! Continuous model data: coefficients, weights, survival probabilities,
//! controllability thresholds and the standing-assumption checks.
//!
//! The density `y(x, a, s, t)` lives on `(0,1) x (0,A) x (0,S)`. Diffusion in
//! `x` is `L u = k u_xx - b u_x`, written in divergence form
//! `L u = sigma (gamma u_x)_x` with
//!
//! ```text
//! gamma(x) = exp( int_x^{3/4} b/k ),     sigma(x) = k(x) / gamma(x).
//! ```
//!
//! Mortality splits as `mu(a, s) = mu1(a) + mu2(s)` with `mu1(a) = c1/(A-a)`
//! and `mu2(s) = c2/(S-s)`, so both survival probabilities have closed forms
//! and vanish at the maximal age and size.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::quad::adaptive_simpson;

const QUAD_TOL: f64 = 1e-13;

/// Rectangle `omega x (a1,a2) x (s1,s2)` where the control acts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlRegion {
    pub l1: f64,
    pub l2: f64,
    pub a1: f64,
    pub a2: f64,
    pub s1: f64,
    pub s2: f64,
}

impl ControlRegion {
    pub fn validate(&self, max_age: f64, max_size: f64) -> Result<()> {
        if !(0.0 <= self.l1 && self.l1 < self.l2 && self.l2 <= 1.0) {
            return Err(Error::param("control.l1/l2", "need 0 <= l1 < l2 <= 1"));
        }
        if !(0.0 <= self.a1 && self.a1 < self.a2 && self.a2 <= max_age) {
            return Err(Error::param("control.a1/a2", "need 0 <= a1 < a2 <= A"));
        }
        if !(0.0 <= self.s1 && self.s1 < self.s2 && self.s2 <= max_size) {
            return Err(Error::param("control.s1/s2", "need 0 <= s1 < s2 <= S"));
        }
        Ok(())
    }

    /// The whole domain `(0,1) x (0,A) x (0,S)`.
    pub fn full(max_age: f64, max_size: f64) -> Self {
        Self {
            l1: 0.0,
            l2: 1.0,
            a1: 0.0,
            a2: max_age,
            s1: 0.0,
            s2: max_size,
        }
    }
}

/// Spatial diffusion coefficient family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Diffusion {
    /// `k(x) = x^alpha (1-x)^alpha`, degenerate at both endpoints.
    Degenerate { alpha: f64 },
    /// `k(x) = k0`. Non-degenerate smoke case; fails the degeneracy check.
    Constant { k0: f64 },
}

impl Diffusion {
    pub fn k(&self, x: f64) -> f64 {
        match *self {
            Diffusion::Degenerate { alpha } => (x * (1.0 - x)).max(0.0).powf(alpha),
            Diffusion::Constant { k0 } => k0,
        }
    }

    pub fn k_prime(&self, x: f64) -> f64 {
        match *self {
            Diffusion::Degenerate { alpha } => {
                alpha
                    * (x.powf(alpha - 1.0) * (1.0 - x).powf(alpha)
                        - x.powf(alpha) * (1.0 - x).powf(alpha - 1.0))
            }
            Diffusion::Constant { .. } => 0.0,
        }
    }
}

/// Fertility family. Every family is supported on `(onset, A)`.
#[derive(Debug, Clone, PartialEq)]
pub enum Fertility {
    /// Smooth bump `amplitude * exp(1 - 1/(1 - z^2))`, `z` mapping `(onset, A)`
    /// onto `(-1, 1)`; its supremum is `amplitude`.
    Bump { amplitude: f64, onset: f64 },
    /// `amplitude` on `(onset, A)`, zero elsewhere.
    Step { amplitude: f64, onset: f64 },
    /// Piecewise-linear interpolation of `(age, value)` samples, zero outside.
    Tabulated { ages: Vec<f64>, values: Vec<f64> },
}

impl Fertility {
    pub fn eval(&self, a: f64, max_age: f64) -> f64 {
        match self {
            Fertility::Bump { amplitude, onset } => {
                if a <= *onset || a >= max_age {
                    return 0.0;
                }
                let z = (2.0 * a - onset - max_age) / (max_age - onset);
                let w = 1.0 - z * z;
                if w <= 0.0 {
                    0.0
                } else {
                    amplitude * (1.0 - 1.0 / w).exp()
                }
            }
            Fertility::Step { amplitude, onset } => {
                if a > *onset && a < max_age {
                    *amplitude
                } else {
                    0.0
                }
            }
            Fertility::Tabulated { ages, values } => {
                if ages.is_empty() || a < ages[0] || a > ages[ages.len() - 1] {
                    return 0.0;
                }
                let k = ages.partition_point(|&x| x <= a);
                if k == 0 {
                    return values[0];
                }
                if k >= ages.len() {
                    return values[ages.len() - 1];
                }
                let (x0, x1) = (ages[k - 1], ages[k]);
                let w = (a - x0) / (x1 - x0);
                values[k - 1] * (1.0 - w) + values[k] * w
            }
        }
    }

    /// Supremum norm. Exact for the closed-form families.
    pub fn sup_norm(&self) -> f64 {
        match self {
            Fertility::Bump { amplitude, .. } | Fertility::Step { amplitude, .. } => {
                amplitude.abs()
            }
            Fertility::Tabulated { values, .. } => {
                values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
            }
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        match self.clone() {
            Fertility::Bump { amplitude, onset } => Fertility::Bump {
                amplitude: amplitude * factor,
                onset,
            },
            Fertility::Step { amplitude, onset } => Fertility::Step {
                amplitude: amplitude * factor,
                onset,
            },
            Fertility::Tabulated { ages, values } => Fertility::Tabulated {
                ages,
                values: values.into_iter().map(|v| v * factor).collect(),
            },
        }
    }
}

/// All continuous-model data.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Maximal age `A`.
    pub max_age: f64,
    /// Maximal size `S`.
    pub max_size: f64,
    /// Minimal fertility age.
    pub a_hat: f64,
    pub fertility: Fertility,
    pub mu1_c: f64,
    pub mu2_c: f64,
    pub diffusion: Diffusion,
    /// Drift amplitude; `b = b_amp * k(x) * (1/2 - x)`.
    pub b_amp: f64,
    pub control: ControlRegion,
}

impl Default for ModelParams {
    /// The canonical geometry: `A=2, S=1, a_hat=a2=1.5, a1=0.2, s1=0.1,
    /// s2=0.9, omega=(0.3,0.7)`, giving `T* = 0.9`.
    fn default() -> Self {
        Self {
            max_age: 2.0,
            max_size: 1.0,
            a_hat: 1.5,
            fertility: Fertility::Bump {
                amplitude: 2.0,
                onset: 1.5,
            },
            mu1_c: 0.5,
            mu2_c: 0.5,
            diffusion: Diffusion::Degenerate { alpha: 1.0 },
            b_amp: 1.0,
            control: ControlRegion {
                l1: 0.3,
                l2: 0.7,
                a1: 0.2,
                a2: 1.5,
                s1: 0.1,
                s2: 0.9,
            },
        }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_age > 0.0 && self.max_age.is_finite()) {
            return Err(Error::param("A", "must be positive and finite"));
        }
        if !(self.max_size > 0.0 && self.max_size.is_finite()) {
            return Err(Error::param("S", "must be positive and finite"));
        }
        if !(self.a_hat > 0.0 && self.a_hat < self.max_age) {
            return Err(Error::param("a_hat", "need 0 < a_hat < A"));
        }
        if !(self.mu1_c > 0.0 && self.mu2_c > 0.0) {
            return Err(Error::param("mu1_c/mu2_c", "mortality strengths must be > 0"));
        }
        match self.diffusion {
            Diffusion::Degenerate { alpha } if !(alpha > 0.0 && alpha < 2.0) => {
                return Err(Error::param("k_alpha", format!("{alpha} not in (0, 2)")));
            }
            Diffusion::Constant { k0 } if !(k0 > 0.0) => {
                return Err(Error::param("k0", "constant diffusion must be > 0"));
            }
            _ => {}
        }
        if !self.b_amp.is_finite() {
            return Err(Error::param("b_amp", "must be finite"));
        }
        self.control.validate(self.max_age, self.max_size)
    }

    pub fn with_fertility(mut self, fertility: Fertility) -> Self {
        self.fertility = fertility;
        self
    }

    /// Small geometry with `S > A > a_hat`, so newborns appear well inside
    /// the size range and the Duhamel source is active on the newborn plane.
    pub fn smoke() -> Self {
        Self {
            max_age: 1.0,
            max_size: 2.0,
            a_hat: 0.25,
            fertility: Fertility::Bump {
                amplitude: 2.0,
                onset: 0.25,
            },
            control: ControlRegion {
                l1: 0.3,
                l2: 0.7,
                a1: 0.1,
                a2: 0.8,
                s1: 0.2,
                s2: 1.6,
            },
            ..Self::default()
        }
    }

    pub fn with_zero_fertility(self) -> Self {
        let onset = self.a_hat;
        self.with_fertility(Fertility::Step {
            amplitude: 0.0,
            onset,
        })
    }
}

/// Which survival probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Survival {
    /// `pi1(a) = exp(-int_0^a mu1)`.
    Age,
    /// `pi2(s) = exp(-int_0^s mu2)`.
    Size,
}

/// Coefficient evaluators for a validated parameter set.
#[derive(Debug, Clone)]
pub struct Coefficients {
    params: ModelParams,
}

/// Builds the evaluators for `k, b, beta, mu1, mu2` and the weights.
pub fn default_coefficients(params: &ModelParams) -> Result<Coefficients> {
    params.validate()?;
    Ok(Coefficients {
        params: params.clone(),
    })
}

impl Coefficients {
    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn k(&self, x: f64) -> f64 {
        self.params.diffusion.k(x)
    }

    pub fn b(&self, x: f64) -> f64 {
        self.params.b_amp * self.k(x) * (0.5 - x)
    }

    /// `b/k`, finite on `[0,1]` for this drift family.
    pub fn b_over_k(&self, x: f64) -> f64 {
        self.params.b_amp * (0.5 - x)
    }

    pub fn beta(&self, a: f64) -> f64 {
        self.params.fertility.eval(a, self.params.max_age)
    }

    pub fn mu1(&self, a: f64) -> f64 {
        self.params.mu1_c / (self.params.max_age - a)
    }

    pub fn mu2(&self, s: f64) -> f64 {
        self.params.mu2_c / (self.params.max_size - s)
    }

    /// `gamma(x) = exp(int_x^{3/4} b/k)` by adaptive quadrature.
    pub fn gamma_weight(&self, x: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&x) {
            return Err(Error::OutOfRange {
                what: "gamma position",
                value: x,
                max: 1.0,
            });
        }
        let integral = adaptive_simpson(|y| self.b_over_k(y), x, 0.75, QUAD_TOL)?;
        Ok(integral.exp())
    }

    /// `sigma(x) = k(x) / gamma(x)`.
    pub fn sigma_weight(&self, x: f64) -> Result<f64> {
        Ok(self.k(x) / self.gamma_weight(x)?)
    }

    /// Closed-form survival probability, e.g. `pi1(a) = ((A-a)/A)^c1`.
    pub fn survival(&self, which: Survival, v: f64) -> Result<f64> {
        let (max, c, what) = match which {
            Survival::Age => (self.params.max_age, self.params.mu1_c, "age"),
            Survival::Size => (self.params.max_size, self.params.mu2_c, "size"),
        };
        if !(0.0..=max).contains(&v) {
            return Err(Error::OutOfRange {
                what,
                value: v,
                max,
            });
        }
        Ok(((max - v) / max).powf(c))
    }
}

/// Observation horizons of the control geometry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    pub t0: f64,
    pub t1: f64,
    /// `A - a2 + a1 + S - s2 + s1`.
    pub t_star: f64,
}

pub fn thresholds(params: &ModelParams) -> Thresholds {
    let c = &params.control;
    let (a, s) = (params.max_age, params.max_size);
    Thresholds {
        t0: c.s1.max(s - c.s2),
        t1: c.s1.max(c.a1 + s - c.s2),
        t_star: a - c.a2 + c.a1 + s - c.s2 + c.s1,
    }
}

/// One row of the assumption report.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct AssumptionReport {
    /// `sup x k'/k` over the interior probe grid.
    pub m1_est: f64,
    /// `sup (x-1) k'/k` over the interior probe grid.
    pub m2_est: f64,
    pub b_over_k_integral: f64,
    pub b_over_k_integrable: bool,
    pub checks: Vec<Check>,
}

impl AssumptionReport {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("check_name,value,pass\n");
        for c in &self.checks {
            let _ = writeln!(out, "{},{},{}", c.name, c.value, c.pass);
        }
        out
    }
}

/// Probes the checkable parts of the standing assumptions on `n_probe`
/// points. Never fails; the report records violations.
pub fn validate_assumptions(params: &ModelParams, n_probe: usize) -> AssumptionReport {
    let n = n_probe.max(4);
    let diff = params.diffusion;
    let mut checks = Vec::new();
    let mut push = |name: &str, value: f64, pass: bool| {
        checks.push(Check {
            name: name.to_string(),
            value,
            pass,
        })
    };

    // degeneracy exponents
    let mut m1 = f64::NEG_INFINITY;
    let mut m2 = f64::NEG_INFINITY;
    let mut k_min = f64::INFINITY;
    for j in 1..=n {
        let x = j as f64 / (n + 1) as f64;
        let k = diff.k(x);
        let kp = diff.k_prime(x);
        k_min = k_min.min(k);
        m1 = m1.max(x * kp / k);
        m2 = m2.max((x - 1.0) * kp / k);
    }
    push("M1", m1, m1 < 2.0);
    push("M2", m2, m2 < 2.0);
    push("k_positive_interior", k_min, k_min > 0.0);
    let k_ends = diff.k(0.0).min(diff.k(1.0));
    push("k_degenerate_endpoint", k_ends, k_ends == 0.0);

    // b/k in L1(0,1)
    let b_amp = params.b_amp;
    let bk = adaptive_simpson(|x| (b_amp * (0.5 - x)).abs(), 0.0, 1.0, QUAD_TOL);
    let (bk_value, bk_ok) = match bk {
        Ok(v) => (v, v.is_finite()),
        Err(_) => (f64::INFINITY, false),
    };
    push("b_over_k_L1", bk_value, bk_ok);

    // H1/H2: locally integrable with divergent total integral.
    let h1 = divergence_probe(params.mu1_c, params.max_age);
    push("H1_mu1", h1.0, h1.1);
    let h2 = divergence_probe(params.mu2_c, params.max_size);
    push("H2_mu2", h2.0, h2.1);

    // H3: nonnegative and continuous. Jumps of a continuous function shrink
    // under refinement; a discontinuity keeps its jump.
    let a_max = params.max_age;
    let sample = |m: usize| -> (f64, f64) {
        let mut min = f64::INFINITY;
        let mut jump = 0.0_f64;
        let mut prev = params.fertility.eval(0.0, a_max);
        min = min.min(prev);
        for k in 1..=m {
            let v = params.fertility.eval(a_max * k as f64 / m as f64, a_max);
            min = min.min(v);
            jump = jump.max((v - prev).abs());
            prev = v;
        }
        (min, jump)
    };
    let (beta_min, jump_coarse) = sample(n);
    let (_, jump_fine) = sample(8 * n);
    let continuous = jump_coarse == 0.0 || jump_fine <= 0.5 * jump_coarse;
    push("H3_beta_nonnegative", beta_min, beta_min >= 0.0);
    push("H3_beta_continuous", jump_fine, continuous);

    // H4: beta vanishes on [0, a_hat].
    let mut worst = 0.0_f64;
    for k in 0..=n {
        let a = params.a_hat * k as f64 / n as f64;
        worst = worst.max(params.fertility.eval(a, a_max).abs());
    }
    push("H4_beta_zero_below_a_hat", worst, worst == 0.0);

    AssumptionReport {
        m1_est: m1,
        m2_est: m2,
        b_over_k_integral: bk_value,
        b_over_k_integrable: bk_ok,
        checks,
    }
}

/// Samples `int_0^{max-delta} c/(max-v) dv` at `delta = 1e-1..1e-4`.
/// Passes when every value is finite and the increments do not decay, the
/// signature of a logarithmically divergent total integral.
fn divergence_probe(c: f64, max: f64) -> (f64, bool) {
    let mut values = Vec::with_capacity(4);
    for e in 1..=4 {
        let delta = 10f64.powi(-e) * max;
        match adaptive_simpson(|v| c / (max - v), 0.0, max - delta, 1e-10) {
            Ok(v) if v.is_finite() => values.push(v),
            _ => return (f64::NAN, false),
        }
    }
    let incs: Vec<f64> = values.windows(2).map(|w| w[1] - w[0]).collect();
    let growing = c > 0.0
        && incs.iter().all(|&d| d > 0.0)
        && incs[incs.len() - 1] >= 0.5 * incs[0];
    (values[values.len() - 1], growing)
}
