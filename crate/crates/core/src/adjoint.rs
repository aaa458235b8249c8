//! Adjoint evolution, its mild (characteristics) form and region geometry.
//!
//! The adjoint is stepped forward in its own time variable: `q^0 = q0` and
//! `q^{n+1} = M* q^n`, where `M*` is the `K`-transpose of the uncontrolled
//! forward step. Along a characteristic the state at `(a, s)` is fed from
//! `(a + t, s + t)` at time zero, so the age boundary `a = A` and the size
//! boundary `s = S` act as inflow boundaries carrying zero.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::forward::System;
use crate::model::Survival;
use crate::weighted_grid::{Field3, GridSpec};

/// Piece of the `(a, s, t)` domain according to where the backward
/// characteristic through the point starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RegionLabel {
    /// `t <= A - a` and `t <= S - s`: the characteristic starts on `t = 0`.
    A1,
    /// Leaves through `a = A` first.
    A1Prime,
    /// Leaves through `s = S` first.
    A2Prime,
}

impl RegionLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            RegionLabel::A1 => "A1",
            RegionLabel::A1Prime => "A1prime",
            RegionLabel::A2Prime => "A2prime",
        }
    }

    pub fn foot(self) -> Foot {
        match self {
            RegionLabel::A1 => Foot::InitialPlane,
            RegionLabel::A1Prime => Foot::AgeBoundary,
            RegionLabel::A2Prime => Foot::SizeBoundary,
        }
    }
}

/// Ties go to `A1`.
pub fn classify_region(a: f64, s: f64, t: f64, max_age: f64, max_size: f64) -> RegionLabel {
    let (ra, rs) = (max_age - a, max_size - s);
    if t <= ra && t <= rs {
        RegionLabel::A1
    } else if ra < rs {
        RegionLabel::A1Prime
    } else {
        RegionLabel::A2Prime
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Foot {
    InitialPlane,
    AgeBoundary,
    SizeBoundary,
}

/// How many full states an [`AdjointTrajectory`] keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateStorage {
    /// Only the newborn planes, the `Q1` restrictions and the final state.
    None,
    Full,
    /// Every `every`-th state; the rest are recomputed on demand.
    Checkpointed { every: usize },
    /// `Full` if it fits in `budget_bytes`, else checkpoints every
    /// `ceil(sqrt(nt))` steps.
    Auto { budget_bytes: usize },
}

pub const DEFAULT_MEMORY_BUDGET: usize = 512 << 20;

/// Output of [`adjoint_solve`].
#[derive(Debug, Clone)]
pub struct AdjointTrajectory {
    steps: usize,
    grid: GridSpec,
    /// `q^k(., 0, .)` for `k = 0..=steps`, laid out `r * nx + jj`.
    newborn: Vec<Vec<f64>>,
    /// `B* q^k` for `k = 0..=steps`.
    observed: Vec<Vec<f64>>,
    norms: Vec<f64>,
    every: usize,
    /// `(k, q^k)` for stored steps, sorted by `k`.
    stored: Vec<(usize, Field3)>,
    final_state: Field3,
}

fn newborn_plane(f: &Field3) -> Vec<f64> {
    let g = f.grid();
    let mut out = Vec::with_capacity((g.ns + 1) * g.nx);
    for r in 0..=g.ns {
        out.extend_from_slice(f.line(0, r));
    }
    out
}

/// Runs `steps` adjoint steps from `q0`.
pub fn adjoint_solve(
    sys: &System,
    q0: &Field3,
    steps: usize,
    storage: StateStorage,
) -> Result<AdjointTrajectory> {
    let g = *sys.grid();
    if q0.grid() != &g {
        return Err(Error::Shape("seed grid differs from system grid".into()));
    }
    let every = match storage {
        StateStorage::None => 0,
        StateStorage::Full => 1,
        StateStorage::Checkpointed { every } => every.max(1),
        StateStorage::Auto { budget_bytes } => {
            let bytes = (steps + 1) * g.len() * std::mem::size_of::<f64>();
            if bytes <= budget_bytes {
                1
            } else {
                ((steps as f64).sqrt().ceil() as usize).max(1)
            }
        }
    };
    let m = sys.mask().len();
    let mut q = q0.clone();
    let mut newborn = Vec::with_capacity(steps + 1);
    let mut observed = Vec::with_capacity(steps + 1);
    let mut norms = Vec::with_capacity(steps + 1);
    let mut stored = Vec::new();
    for k in 0..=steps {
        if k > 0 {
            sys.adjoint_step_in_place(&mut q);
            if !q.is_finite() {
                return Err(Error::NonFinite { step: k });
            }
        }
        newborn.push(newborn_plane(&q));
        let mut obs = vec![0.0; m];
        sys.restrict(&q, &mut obs);
        observed.push(obs);
        norms.push(sys.norm(&q));
        if every > 0 && k % every == 0 {
            stored.push((k, q.clone()));
        }
    }
    Ok(AdjointTrajectory {
        steps,
        grid: g,
        newborn,
        observed,
        norms,
        every,
        stored,
        final_state: q,
    })
}

impl AdjointTrajectory {
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn final_state(&self) -> &Field3 {
        &self.final_state
    }

    /// `||q^k||_K` for `k = 0..=steps`.
    pub fn norms(&self) -> &[f64] {
        &self.norms
    }

    /// Newborn plane of step `k`, laid out `r * nx + jj`.
    pub fn newborn(&self, k: usize) -> &[f64] {
        &self.newborn[k]
    }

    pub fn newborn_line(&self, k: usize, r: usize) -> &[f64] {
        let nx = self.grid.nx;
        &self.newborn[k][r * nx..(r + 1) * nx]
    }

    /// `B* q^k`.
    pub fn observed(&self, k: usize) -> &[f64] {
        &self.observed[k]
    }

    /// `q^k`, recomputed from the nearest earlier checkpoint when needed.
    /// Recomputation repeats the same floating-point operations, so the
    /// result is identical to the stored trajectory.
    pub fn state(&self, sys: &System, k: usize) -> Result<Field3> {
        if k > self.steps {
            return Err(Error::OutOfRange {
                what: "adjoint step",
                value: k as f64,
                max: self.steps as f64,
            });
        }
        if k == self.steps {
            return Ok(self.final_state.clone());
        }
        let pos = self.stored.partition_point(|(s, _)| *s <= k);
        if pos == 0 {
            return Err(Error::Shape("trajectory was solved without stored states".into()));
        }
        let (start, base) = &self.stored[pos - 1];
        let mut q = base.clone();
        for _ in *start..k {
            sys.adjoint_step_in_place(&mut q);
        }
        Ok(q)
    }

    pub fn checkpoint_interval(&self) -> usize {
        self.every
    }

    /// `step,j,r,value` rows of the newborn-plane history.
    pub fn newborn_csv(&self) -> String {
        let mut s = String::from("step,j,r,value\n");
        let nx = self.grid.nx;
        for (k, plane) in self.newborn.iter().enumerate() {
            for r in 0..=self.grid.ns {
                for jj in 0..nx {
                    let _ = writeln!(s, "{},{},{},{}", k, jj + 1, r, plane[r * nx + jj]);
                }
            }
        }
        s
    }

    pub fn write_newborn_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.newborn_csv()).map_err(|e| Error::io(path, e))
    }
}

/// `a,s,t,label` rows for the lattice points `0 <= i < na`, `0 <= r < ns`,
/// `1 <= n <= steps`.
pub fn region_csv(grid: &GridSpec, steps: usize) -> String {
    let mut s = String::from("a,s,t,label\n");
    for n in 1..=steps {
        let t = grid.time(n);
        for i in 0..grid.na {
            for r in 0..grid.ns {
                let (a, sz) = (grid.age(i), grid.size(r));
                let label = classify_region(a, sz, t, grid.max_age, grid.max_size);
                let _ = writeln!(s, "{a},{sz},{t},{}", label.as_str());
            }
        }
    }
    s
}

/// Quadrature for the Duhamel source integral along a characteristic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DuhamelRule {
    /// Left endpoints, aligned to the lattice. This is the rule hidden in
    /// the splitting, so it reproduces the stepper to roundoff.
    LeftRectangle,
    #[default]
    Trapezoid,
}

/// One source sample on a characteristic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceSample {
    /// Source time.
    pub tau: f64,
    /// Age and size where the source enters the characteristic.
    pub a: f64,
    pub s: f64,
    /// Survival from the entry point to the origin.
    pub survival: f64,
    pub beta: f64,
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct CharacteristicTrace {
    pub origin: (f64, f64, f64),
    pub label: RegionLabel,
    pub foot: Foot,
    pub samples: Vec<TraceSample>,
    /// Mild-formula value, one entry per interior spatial node.
    pub value: Vec<f64>,
}

const LATTICE_TOL: f64 = 1e-9;

fn snap(v: f64, delta: f64, max: usize) -> Option<usize> {
    let k = (v / delta).round();
    if k < 0.0 || k as usize > max || (v - k * delta).abs() > LATTICE_TOL * delta.max(v.abs()) {
        None
    } else {
        Some(k as usize)
    }
}

/// Survival ratio from node `(i, r)` to node `(i + lag, r + lag)` from the
/// closed-form `pi1, pi2`. Coordinates come from the lattice so that the
/// boundary nodes sit exactly on `A` and `S`.
fn survival_ratio(sys: &System, i: usize, r: usize, lag: usize) -> Result<f64> {
    let (c, g) = (sys.coefficients(), sys.grid());
    let num = c.survival(Survival::Age, g.age(i + lag))? * c.survival(Survival::Size, g.size(r + lag))?;
    let den = c.survival(Survival::Age, g.age(i))? * c.survival(Survival::Size, g.size(r))?;
    Ok(num / den)
}

/// Evaluates the mild formula at a lattice point,
///
/// `q(a,s,t) = E(t) e^{tL} q0(a+t, s+t)`
/// `         + int_{tau0}^{t} E(t-tau) beta(a+t-tau) e^{(t-tau)L} q(0, s+t-tau, tau) dtau`
///
/// with `E(tau) = pi1(a+tau)/pi1(a) * pi2(s+tau)/pi2(s)` and
/// `tau0 = max(0, t-S+s, t-A+a)`. The first term is present only in `A1`.
/// `e^{tL}` is realized by `t/delta` implicit diffusion steps and the newborn
/// planes are read from `trajectory`.
pub fn characteristics_evaluate(
    sys: &System,
    q0: &Field3,
    trajectory: &AdjointTrajectory,
    a: f64,
    s: f64,
    t: f64,
    rule: DuhamelRule,
) -> Result<CharacteristicTrace> {
    let g = *sys.grid();
    let off = || Error::OffLattice { a, s, t };
    let i = snap(a, g.delta, g.na).ok_or_else(off)?;
    let r = snap(s, g.delta, g.ns).ok_or_else(off)?;
    let n = snap(t, g.delta, trajectory.steps()).ok_or_else(off)?;
    let (a, s, t) = (g.age(i), g.size(r), g.time(n));
    // same rule as classify_region, on exact lattice distances
    let label = if n <= g.na - i && n <= g.ns - r {
        RegionLabel::A1
    } else if g.na - i < g.ns - r {
        RegionLabel::A1Prime
    } else {
        RegionLabel::A2Prime
    };
    let prop = sys.propagator();
    let mut value = vec![0.0; g.nx];
    let mut samples = Vec::new();
    if i == g.na || r == g.ns {
        return Ok(CharacteristicTrace {
            origin: (a, s, t),
            label,
            foot: label.foot(),
            samples,
            value,
        });
    }

    let room = (g.na - i).min(g.ns - r);
    let k_lo = n.saturating_sub(room);
    // Horner accumulation of sum_k w_k E beta D^{n-k} h_k: apply one
    // diffusion step between consecutive source times.
    if n > 0 {
        let last = n;
        for k in k_lo..=last {
            if k > k_lo {
                prop.solve_in_place(&mut value);
            }
            let lag = n - k;
            let w = match rule {
                DuhamelRule::LeftRectangle if k == last => 0.0,
                DuhamelRule::LeftRectangle => g.delta,
                DuhamelRule::Trapezoid if k == k_lo || k == last => 0.5 * g.delta,
                DuhamelRule::Trapezoid => g.delta,
            };
            let (ea, es) = (g.age(i + lag), g.size(r + lag));
            let beta = sys.coefficients().beta(ea);
            let surv = survival_ratio(sys, i, r, lag)?;
            samples.push(TraceSample {
                tau: g.time(k),
                a: ea,
                s: es,
                survival: surv,
                beta,
                weight: w,
            });
            let c = w * surv * beta;
            if c != 0.0 {
                for (v, h) in value.iter_mut().zip(trajectory.newborn_line(k, r + lag)) {
                    *v += c * h;
                }
            }
        }
    }
    if label == RegionLabel::A1 {
        let mut head = q0.line(i + n, r + n).to_vec();
        for _ in 0..n {
            prop.solve_in_place(&mut head);
        }
        let e = survival_ratio(sys, i, r, n)?;
        for (v, h) in value.iter_mut().zip(&head) {
            *v += e * h;
        }
    }
    Ok(CharacteristicTrace {
        origin: (a, s, t),
        label,
        foot: label.foot(),
        samples,
        value,
    })
}

/// Max over the newborn plane (`i = 0`, `0 < r < ns`, `1 <= n <= steps`)
/// of `|characteristics - stepper|`.
pub fn newborn_discrepancy(
    sys: &System,
    q0: &Field3,
    trajectory: &AdjointTrajectory,
    rule: DuhamelRule,
) -> Result<f64> {
    let g = *sys.grid();
    let mut worst = 0.0f64;
    for n in 1..=trajectory.steps() {
        for r in 1..g.ns {
            let tr = characteristics_evaluate(sys, q0, trajectory, 0.0, g.size(r), g.time(n), rule)?;
            for (x, y) in tr.value.iter().zip(trajectory.newborn_line(n, r)) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VanishingRegion {
    pub s_lo: f64,
    pub s_hi: f64,
    pub t_lo: f64,
    pub t_hi: f64,
    /// Sup of `|q(x,0,s,t)|` over the lattice image.
    pub sup: f64,
    /// Number of `(r, n)` lattice points inspected.
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VanishingReport {
    pub region: VanishingRegion,
    pub tol: f64,
    pub pass: bool,
}

impl VanishingReport {
    pub fn to_csv(&self) -> String {
        let v = &self.region;
        format!(
            "s_lo,s_hi,t_lo,t_hi,points,sup,tol,pass\n{},{},{},{},{},{},{},{}\n",
            v.s_lo, v.s_hi, v.t_lo, v.t_hi, v.points, v.sup, self.tol, self.pass
        )
    }
}

/// Checks that the newborn plane of the adjoint vanishes on
/// `(s2 - a1, S) x (S - s2 + a1, T]`, or on `(0, S) x (S - s2 + a1, T]` when
/// `s2 <= a1`.
pub fn vanishing_region_check(sys: &System, trajectory: &AdjointTrajectory, tol: f64) -> VanishingReport {
    let g = *sys.grid();
    let c = &sys.params().control;
    let s_lo = (c.s2 - c.a1).max(0.0);
    let t_lo = g.max_size - c.s2 + c.a1;
    let t_hi = g.time(trajectory.steps());
    let eps = 1e-12;
    let mut sup = 0.0f64;
    let mut points = 0;
    for n in 0..=trajectory.steps() {
        if g.time(n) <= t_lo + eps {
            continue;
        }
        for r in 0..g.ns {
            if g.size(r) <= s_lo + eps {
                continue;
            }
            points += 1;
            for v in trajectory.newborn_line(n, r) {
                sup = sup.max(v.abs());
            }
        }
    }
    VanishingReport {
        region: VanishingRegion {
            s_lo,
            s_hi: g.max_size,
            t_lo,
            t_hi,
            sup,
            points,
        },
        tol,
        pass: sup <= tol,
    }
}
