//! Penalized HUM null controls, observability-cost estimates and the
//! newborn-source energy bound.
//!
//! With `y^{n+1} = M y^n + delta * chi u^n` the final state is
//! `y^nt = M^nt y0 + sum_n M^{nt-1-n} delta chi u^n`, so the control built
//! from an adjoint seed `q` is `u^n = B* (M*)^{nt-1-n} q` and the Gramian
//! `Lambda q = sum_k M^k delta chi B* (M*)^k q` is symmetric in `K`.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::adjoint::{adjoint_solve, StateStorage};
use crate::error::{Error, Result};
use crate::forward::{ControlSignal, StepFlags, System};
use crate::weighted_grid::Field3;

/// Solver settings for [`synthesize_control`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HumSettings {
    pub epsilon: f64,
    /// Relative residual target, measured against `||y(T)||`.
    pub cg_tol: f64,
    pub cg_max_iters: usize,
}

impl Default for HumSettings {
    fn default() -> Self {
        Self {
            epsilon: 1e-4,
            cg_tol: 1e-6,
            cg_max_iters: 200,
        }
    }
}

impl HumSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::param("epsilon", "must be > 0"));
        }
        if !(self.cg_tol > 0.0 && self.cg_tol < 1.0) {
            return Err(Error::param("cg_tol", "must be in (0, 1)"));
        }
        if self.cg_max_iters == 0 {
            return Err(Error::param("cg_max_iters", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct HumProblem<'a> {
    pub system: &'a System,
    pub y0: Field3,
    pub steps: usize,
    pub settings: HumSettings,
}

/// Result of one Gramian application.
#[derive(Debug, Clone)]
pub struct GramianOutput {
    /// `Lambda q`.
    pub image: Field3,
    /// `sum_n delta ||u^n||_U^2` of the generated control.
    pub control_energy: f64,
}

/// `u^n = B* (M*)^{steps-1-n} q` for `n < steps`.
pub fn control_from_seed(sys: &System, q: &Field3, steps: usize) -> Result<ControlSignal> {
    let traj = adjoint_solve(sys, q, steps.saturating_sub(1), StateStorage::None)?;
    let mut u = ControlSignal::zeros(sys.mask(), steps);
    for n in 0..steps {
        u.slice_mut(n).copy_from_slice(traj.observed(steps - 1 - n));
    }
    Ok(u)
}

pub fn control_energy(sys: &System, u: &ControlSignal) -> f64 {
    (0..u.steps())
        .map(|n| sys.control_inner(u.slice(n), u.slice(n)))
        .sum::<f64>()
        * sys.grid().delta
}

/// `Lambda q`: observe the adjoint on `Q1`, feed it back as a control from
/// zero data and return the final state.
pub fn gramian_apply(sys: &System, q: &Field3, steps: usize) -> Result<GramianOutput> {
    let u = control_from_seed(sys, q, steps)?;
    let energy = control_energy(sys, &u);
    let y = sys.simulate(&Field3::zeros(sys.grid()), Some(&u), steps)?;
    Ok(GramianOutput {
        image: y.final_state,
        control_energy: energy,
    })
}

/// Uncontrolled propagation `M^steps y0`.
pub fn free_evolution(sys: &System, y0: &Field3, steps: usize) -> Result<Field3> {
    Ok(sys.simulate(y0, None, steps)?.final_state)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    /// Iteration cap hit; the best iterate is returned.
    Degraded,
}

impl SolveStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SolveStatus::Converged => "converged",
            SolveStatus::Degraded => "degraded",
        }
    }
}

#[derive(Debug, Clone)]
pub struct HumResult {
    pub q0_opt: Field3,
    pub control: ControlSignal,
    /// `y(T)` from a controlled simulation.
    pub final_state: Field3,
    pub final_norm: f64,
    pub uncontrolled_norm: f64,
    /// `K`-norm residual of `(Lambda + eps I) q + M^nt y0` per iteration,
    /// starting with the initial residual.
    pub cg_residuals: Vec<f64>,
    pub gramian_applications: usize,
    pub status: SolveStatus,
    pub epsilon: f64,
    pub q_norm: f64,
    pub control_energy: f64,
}

impl HumResult {
    /// `|final_norm - eps ||q||| / final_norm`.
    pub fn identity_mismatch(&self) -> f64 {
        let e = self.epsilon * self.q_norm;
        if self.final_norm == 0.0 {
            if e == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            (self.final_norm - e).abs() / self.final_norm
        }
    }

    pub fn reduction(&self) -> f64 {
        if self.uncontrolled_norm == 0.0 {
            0.0
        } else {
            self.final_norm / self.uncontrolled_norm
        }
    }

    /// `key,value` rows.
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("key,value\n");
        let rows: [(&str, String); 10] = [
            ("status", self.status.as_str().to_string()),
            ("epsilon", self.epsilon.to_string()),
            ("final_norm", self.final_norm.to_string()),
            ("uncontrolled_norm", self.uncontrolled_norm.to_string()),
            ("reduction", self.reduction().to_string()),
            ("q0_norm", self.q_norm.to_string()),
            ("identity_mismatch", self.identity_mismatch().to_string()),
            ("control_energy", self.control_energy.to_string()),
            ("gramian_applications", self.gramian_applications.to_string()),
            ("cg_iterations", (self.cg_residuals.len().saturating_sub(1)).to_string()),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k},{v}");
        }
        s
    }

    pub fn residuals_csv(&self) -> String {
        let mut s = String::from("iteration,residual\n");
        for (k, r) in self.cg_residuals.iter().enumerate() {
            let _ = writeln!(s, "{k},{r}");
        }
        s
    }
}

/// `step,j,i,r,value` rows over the control support.
pub fn control_csv(sys: &System, u: &ControlSignal) -> String {
    let mask = sys.mask();
    let mut s = String::from("step,j,i,r,value\n");
    for n in 0..u.steps() {
        let vals = u.slice(n);
        let mut k = 0;
        for i in mask.i.clone() {
            for r in mask.r.clone() {
                for jj in mask.j.clone() {
                    let _ = writeln!(s, "{},{},{},{},{}", n, jj + 1, i, r, vals[k]);
                    k += 1;
                }
            }
        }
    }
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Solves `(Lambda + eps I) q = -M^nt y0` by the conjugate residual method
/// in the `K` inner product and synthesizes the control from `q`.
///
/// Stops once `||r|| <= cg_tol * ||r + eps q||`. Since
/// `y(T) = -(r + eps q)`, this bounds the mismatch in
/// `||y(T)|| = eps ||q||` by `cg_tol` relative.
pub fn synthesize_control(problem: &HumProblem) -> Result<HumResult> {
    let sys = problem.system;
    let set = problem.settings;
    set.validate()?;
    let steps = problem.steps;
    let eps = set.epsilon;
    let drift = free_evolution(sys, &problem.y0, steps)?;
    let uncontrolled_norm = sys.norm(&drift);
    let mut b = drift;
    b.scale(-1.0);

    let mut apps = 0usize;
    let apply = |v: &Field3, apps: &mut usize| -> Result<Field3> {
        *apps += 1;
        let mut out = gramian_apply(sys, v, steps)?.image;
        out.axpy(eps, v);
        if !out.is_finite() {
            return Err(Error::NonFinite { step: steps });
        }
        Ok(out)
    };

    let mut x = Field3::zeros(sys.grid());
    let mut r = b.clone();
    let mut residuals = vec![sys.norm(&r)];
    let mut status = SolveStatus::Converged;
    if residuals[0] > 0.0 {
        let mut ar = apply(&r, &mut apps)?;
        let mut p = r.clone();
        let mut ap = ar.clone();
        let mut rar = sys.inner(&r, &ar);
        status = SolveStatus::Degraded;
        for _ in 0..set.cg_max_iters {
            let apap = sys.inner(&ap, &ap);
            if !(apap > 0.0) {
                break;
            }
            let alpha = rar / apap;
            x.axpy(alpha, &p);
            r.axpy(-alpha, &ap);
            let rn = sys.norm(&r);
            residuals.push(rn);
            let mut yt = r.clone();
            yt.axpy(eps, &x);
            if rn <= set.cg_tol * sys.norm(&yt) {
                status = SolveStatus::Converged;
                break;
            }
            if apps >= set.cg_max_iters {
                break;
            }
            ar = apply(&r, &mut apps)?;
            let rar_new = sys.inner(&r, &ar);
            let beta = rar_new / rar;
            rar = rar_new;
            p.scale(beta);
            p.axpy(1.0, &r);
            ap.scale(beta);
            ap.axpy(1.0, &ar);
        }
    }

    let control = control_from_seed(sys, &x, steps)?;
    let energy = control_energy(sys, &control);
    let yt = sys.simulate(&problem.y0, Some(&control), steps)?.final_state;
    Ok(HumResult {
        final_norm: sys.norm(&yt),
        final_state: yt,
        q_norm: sys.norm(&x),
        q0_opt: x,
        control,
        uncontrolled_norm,
        cg_residuals: residuals,
        gramian_applications: apps,
        status,
        epsilon: eps,
        control_energy: energy,
    })
}

/// Outcome of [`observability_cost`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostEstimate {
    /// Lower bound on `C_T^2`, or `+inf` for a detected unobservable mode.
    pub cost: f64,
    pub sentinel: bool,
    /// Best ratio among the random samples, before refinement.
    pub sample_cost: f64,
    pub iterations: usize,
}

const SENTINEL_RATIO: f64 = 1e-14;

/// `N v = M^nt (M*)^nt v` together with `Lambda v`.
fn pair_apply(sys: &System, v: &Field3, steps: usize) -> Result<(Field3, Field3)> {
    let traj = adjoint_solve(sys, v, steps, StateStorage::None)?;
    let nv = free_evolution(sys, traj.final_state(), steps)?;
    Ok((nv, gramian_apply(sys, v, steps)?.image))
}

/// `||q(T)||^2 / sum_{k<nt} delta ||B* q^k||^2` for one seed.
pub fn observability_ratio(sys: &System, q0: &Field3, steps: usize) -> Result<(f64, f64)> {
    let traj = adjoint_solve(sys, q0, steps, StateStorage::None)?;
    let num = sys.norm(traj.final_state()).powi(2);
    let den = (0..steps)
        .map(|k| sys.control_inner(traj.observed(k), traj.observed(k)))
        .sum::<f64>()
        * sys.grid().delta;
    Ok((num, den))
}

/// Randomized lower bound on the observability constant at horizon
/// `steps * delta`: the best of `n_samples` seeded random ratios, refined by
/// `n_iters` Rayleigh-Ritz steps for `N x = c Lambda x` on
/// `span{x, N x - c Lambda x, previous step}`.
pub fn observability_cost(
    sys: &System,
    steps: usize,
    n_samples: usize,
    n_iters: usize,
    seed: u64,
) -> Result<CostEstimate> {
    let g = *sys.grid();
    let samples: Vec<(f64, f64, u64)> = (0..n_samples.max(1) as u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k.wrapping_mul(0x9E37_79B9)));
            let q0 = Field3::random_uniform(&g, &mut rng, -1.0, 1.0);
            observability_ratio(sys, &q0, steps).map(|(n, d)| (n, d, k))
        })
        .collect::<Result<_>>()?;
    let ratio = |n: f64, d: f64| -> Option<f64> {
        if d < SENTINEL_RATIO * n {
            None
        } else if n == 0.0 {
            Some(0.0)
        } else {
            Some(n / d)
        }
    };
    let mut best: Option<(f64, u64)> = None;
    for &(n, d, k) in &samples {
        match ratio(n, d) {
            None => {
                return Ok(CostEstimate {
                    cost: f64::INFINITY,
                    sentinel: true,
                    sample_cost: f64::INFINITY,
                    iterations: 0,
                })
            }
            Some(c) if best.is_none_or(|(b, _)| c > b) => best = Some((c, k)),
            _ => {}
        }
    }
    let (sample_cost, k) = best.expect("at least one sample");
    let mut est = CostEstimate {
        cost: sample_cost,
        sentinel: false,
        sample_cost,
        iterations: 0,
    };
    if sample_cost == 0.0 || n_iters == 0 {
        return Ok(est);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k.wrapping_mul(0x9E37_79B9)));
    let mut x = Field3::random_uniform(&g, &mut rng, -1.0, 1.0);
    let (mut nx, mut lx) = pair_apply(sys, &x, steps)?;
    let mut xl = sys.inner(&x, &lx);
    let mut prev: Option<(Field3, Field3, Field3)> = None;
    for it in 0..n_iters {
        let rho = sys.inner(&x, &nx) / xl;
        let mut gdir = nx.clone();
        gdir.axpy(-rho, &lx);
        let (ng, lg) = pair_apply(sys, &gdir, steps)?;
        let mut basis = vec![(x.clone(), nx.clone(), lx.clone()), (gdir, ng, lg)];
        if let Some(p) = prev.take() {
            basis.push(p);
        }
        let Some((cand, value)) = rayleigh_ritz(sys, &basis) else {
            break;
        };
        est.iterations = it + 1;
        match value {
            None => {
                est.cost = f64::INFINITY;
                est.sentinel = true;
                return Ok(est);
            }
            Some(v) => {
                if v > est.cost {
                    est.cost = v;
                }
            }
        }
        // previous direction: new iterate minus its component along x
        let (cx, cn, cl) = cand;
        let mut px = cx.clone();
        let mut pn = cn.clone();
        let mut pl = cl.clone();
        let c = sys.inner(&cx, &lx) / xl;
        px.axpy(-c, &x);
        pn.axpy(-c, &nx);
        pl.axpy(-c, &lx);
        prev = Some((px, pn, pl));
        x = cx;
        nx = cn;
        lx = cl;
        xl = sys.inner(&x, &lx);
        if !(xl > 0.0) {
            break;
        }
    }
    Ok(est)
}

type Triple = (Field3, Field3, Field3);

/// Largest generalized Ritz pair of `(N, Lambda)` on the span of `basis`
/// (each entry `(v, N v, Lambda v)`). `Some(None)` flags a direction with
/// negligible observation, `None` a degenerate basis.
fn rayleigh_ritz(sys: &System, basis: &[Triple]) -> Option<(Triple, Option<f64>)> {
    // Lambda-orthonormalise with modified Gram-Schmidt.
    let mut ortho: Vec<Triple> = Vec::new();
    let scale = basis
        .iter()
        .map(|(v, _, l)| sys.inner(v, l))
        .fold(0.0f64, f64::max);
    for (v, n, l) in basis {
        let (mut v, mut n, mut l) = (v.clone(), n.clone(), l.clone());
        for (ov, on, ol) in &ortho {
            let c = sys.inner(&v, ol);
            v.axpy(-c, ov);
            n.axpy(-c, on);
            l.axpy(-c, ol);
        }
        let vl = sys.inner(&v, &l);
        let vn = sys.inner(&v, &n);
        if vl < SENTINEL_RATIO * vn.abs() && vn > 0.0 {
            return Some(((v, n, l), None));
        }
        if vl <= 1e-12 * scale {
            continue;
        }
        let s = 1.0 / vl.sqrt();
        v.scale(s);
        n.scale(s);
        l.scale(s);
        ortho.push((v, n, l));
    }
    if ortho.is_empty() {
        return None;
    }
    let m = ortho.len();
    let h = DMatrix::from_fn(m, m, |a, b| {
        0.5 * (sys.inner(&ortho[a].0, &ortho[b].1) + sys.inner(&ortho[b].0, &ortho[a].1))
    });
    let eig = SymmetricEigen::new(h);
    let (idx, val) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, v)| (k, *v))?;
    let coef = eig.eigenvectors.column(idx);
    let g = *sys.grid();
    let mut v = Field3::zeros(&g);
    let mut n = Field3::zeros(&g);
    let mut l = Field3::zeros(&g);
    for (a, (ov, on, ol)) in ortho.iter().enumerate() {
        v.axpy(coef[a], ov);
        n.axpy(coef[a], on);
        l.axpy(coef[a], ol);
    }
    Some(((v, n, l), Some(val.max(0.0))))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanStatus {
    Observable,
    BlowsUp,
}

impl ScanStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            ScanStatus::Observable => "observable",
            ScanStatus::BlowsUp => "blows_up",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanRow {
    pub t: f64,
    pub steps: usize,
    pub cost: f64,
    pub iterations: usize,
    pub status: ScanStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanResult {
    pub rows: Vec<ScanRow>,
}

impl ScanResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("T,cost,iterations,status\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.t, r.cost, r.iterations, r.status.as_str());
        }
        s
    }

    pub fn cost_at(&self, t: f64) -> Option<f64> {
        self.rows.iter().find(|r| (r.t - t).abs() < 1e-12).map(|r| r.cost)
    }
}

/// Ratio to the cost at the largest horizon above which a row is flagged.
pub const BLOWUP_FACTOR: f64 = 1e6;

/// Observability cost for every horizon in `t_list` (strictly increasing).
/// A row is `blows_up` on the sentinel, or when its cost exceeds
/// [`BLOWUP_FACTOR`] times a positive finite cost at the largest horizon.
pub fn threshold_scan(
    sys: &System,
    t_list: &[f64],
    n_samples: usize,
    n_iters: usize,
    seed: u64,
) -> Result<ScanResult> {
    if t_list.is_empty() {
        return Err(Error::param("T_list", "must not be empty"));
    }
    if t_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::param("T_list", "must be strictly increasing"));
    }
    let est: Vec<(f64, usize, CostEstimate)> = t_list
        .par_iter()
        .map(|&t| {
            let steps = sys.grid().steps_for(t)?;
            observability_cost(sys, steps, n_samples, n_iters, seed).map(|e| (t, steps, e))
        })
        .collect::<Result<_>>()?;
    let reference = est.last().map(|e| e.2.cost).unwrap_or(f64::NAN);
    let rows = est
        .into_iter()
        .map(|(t, steps, e)| {
            let blows = e.sentinel
                || (reference.is_finite() && reference > 0.0 && e.cost > BLOWUP_FACTOR * reference);
            ScanRow {
                t,
                steps,
                cost: e.cost,
                iterations: e.iterations,
                status: if blows {
                    ScanStatus::BlowsUp
                } else {
                    ScanStatus::Observable
                },
            }
        })
        .collect();
    Ok(ScanResult { rows })
}

/// Both sides of the energy bound for the newborn-source part `v2`.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceBoundReport {
    pub eta: f64,
    pub t: f64,
    /// `sum_k delta ||v2^k||_K^2` over `eta <= t_k <= T`.
    pub lhs: f64,
    /// `sum_k delta int int q(x,0,s,t_k)^2 / sigma dx ds`.
    pub rhs: f64,
    /// `exp(1.5 T) ||beta||_inf^2 A`.
    pub constant: f64,
    pub pass: bool,
    /// `max_k ||q^k - v1^k - v2^k||_K / max(||q^k||_K)`.
    pub split_error: f64,
}

impl SourceBoundReport {
    pub fn ratio(&self) -> f64 {
        if self.rhs == 0.0 {
            if self.lhs == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            self.lhs / self.rhs
        }
    }

    pub fn to_csv(&self) -> String {
        format!(
            "eta,T,lhs,rhs,ratio,C,split_error,pass\n{},{},{},{},{},{},{},{}\n",
            self.eta,
            self.t,
            self.lhs,
            self.rhs,
            self.ratio(),
            self.constant,
            self.split_error,
            self.pass
        )
    }
}

/// Splits the adjoint on `[eta, T]` as `q = v1 + v2`, where both parts evolve
/// without renewal, `v1(eta) = q(eta)`, `v2(eta) = 0`, and `v2` is driven by
/// the newborn-plane source `beta(a) q(x,0,s,t)`. Sizes leave through `s = S`.
pub fn propo1_bound_check(sys: &System, q0: &Field3, steps: usize, eta_step: usize) -> Result<SourceBoundReport> {
    if eta_step > steps {
        return Err(Error::OutOfRange {
            what: "eta step",
            value: eta_step as f64,
            max: steps as f64,
        });
    }
    let g = *sys.grid();
    let free = sys.clone().with_flags(StepFlags {
        renewal: false,
        ..sys.flags()
    });
    let shift = free.clone().with_flags(StepFlags {
        diffusion: false,
        renewal: false,
        ..sys.flags()
    });
    let prop = sys.propagator();
    let w = sys.renewal_weights();
    let inv_sigma = sys.operator().inv_sigma().to_vec();

    let plane_energy = |q: &Field3| -> f64 {
        (0..=g.ns)
            .map(|r| crate::weighted_grid::weighted_line_dot(&inv_sigma, q.line(0, r), q.line(0, r)))
            .sum::<f64>()
            * g.dx()
            * g.delta
    };

    let mut q = q0.clone();
    for _ in 0..eta_step {
        sys.adjoint_step_in_place(&mut q);
    }
    let mut v1 = q.clone();
    let mut v2 = Field3::zeros(&g);
    let mut lhs = 0.0;
    let mut rhs = plane_energy(&q) * g.delta;
    let mut split = 0.0f64;
    let mut qmax = sys.norm(&q);
    for _ in eta_step..steps {
        // source from the diffused newborn lines of the current q
        let mut src = Field3::zeros(&g);
        for r in 1..=g.ns {
            let mut h = q.line(0, r).to_vec();
            prop.solve_in_place(&mut h);
            for i in 1..=g.na {
                if w[i] != 0.0 {
                    for (o, hv) in src.line_mut(i, r).iter_mut().zip(&h) {
                        *o = w[i] * hv;
                    }
                }
            }
        }
        // mortality and the diagonal shift, as in the adjoint step
        shift.adjoint_step_in_place(&mut src);

        sys.adjoint_step_in_place(&mut q);
        free.adjoint_step_in_place(&mut v1);
        free.adjoint_step_in_place(&mut v2);
        v2.axpy(1.0, &src);

        lhs += sys.norm(&v2).powi(2) * g.delta;
        rhs += plane_energy(&q) * g.delta;
        let mut d = q.clone();
        d.axpy(-1.0, &v1);
        d.axpy(-1.0, &v2);
        split = split.max(sys.norm(&d));
        qmax = qmax.max(sys.norm(&q));
    }
    let t = g.time(steps);
    let beta = sys.params().fertility.sup_norm();
    let constant = (1.5 * t).exp() * beta * beta * sys.params().max_age;
    Ok(SourceBoundReport {
        eta: g.time(eta_step),
        t,
        lhs,
        rhs,
        constant,
        pass: lhs <= constant * rhs * (1.0 + 1e-12),
        split_error: if qmax > 0.0 { split / qmax } else { 0.0 },
    })
}
