//! Time stepping of the primal system.
//!
//! One step of length `delta` is the Lie splitting
//!
//! 1. transport: `y(j,i,r) <- y(j,i-1,r-1)` (exact lattice shift),
//! 2. mortality: multiply by `pi1(a_i)/pi1(a_{i-1}) * pi2(s_r)/pi2(s_{r-1})`,
//! 3. boundaries: age-0 plane from the renewal integral of the post-mortality
//!    state, size-0 plane zero,
//! 4. diffusion: backward Euler on every `(i, r)` spatial line,
//! 5. control: add `delta * u_n` on the grid image of `Q1`.
//!
//! Mortality is never evaluated pointwise; survival ratios are finite and hit
//! exactly zero on the last age and size cells.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::model::{default_coefficients, Coefficients, ControlRegion, ModelParams};
use crate::weighted_grid::{assemble_operator, DiffusionPropagator, Field3, GridSpec, TridiagOperator};

/// Test hooks for switching splitting substeps off.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepFlags {
    pub transport: bool,
    pub mortality: bool,
    pub renewal: bool,
    pub diffusion: bool,
}

impl Default for StepFlags {
    fn default() -> Self {
        Self {
            transport: true,
            mortality: true,
            renewal: true,
            diffusion: true,
        }
    }
}

/// Index ranges of the lattice nodes strictly inside `Q1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ControlMask {
    /// Zero-based interior spatial indices.
    pub j: Range<usize>,
    pub i: Range<usize>,
    pub r: Range<usize>,
}

const MASK_TOL: f64 = 1e-12;

fn open_range(lo: f64, hi: f64, n: usize, coord: impl Fn(usize) -> f64) -> Range<usize> {
    let inside: Vec<usize> = (0..n)
        .filter(|&k| {
            let c = coord(k);
            c > lo + MASK_TOL && c < hi - MASK_TOL
        })
        .collect();
    match (inside.first(), inside.last()) {
        (Some(&a), Some(&b)) => a..b + 1,
        _ => 0..0,
    }
}

impl ControlMask {
    pub fn from_region(region: &ControlRegion, grid: &GridSpec) -> Self {
        Self {
            j: open_range(region.l1, region.l2, grid.nx, |k| grid.x(k)),
            i: open_range(region.a1, region.a2, grid.na + 1, |k| grid.age(k)),
            r: open_range(region.s1, region.s2, grid.ns + 1, |k| grid.size(k)),
        }
    }

    pub fn len(&self) -> usize {
        self.j.len() * self.i.len() * self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, jj: usize, i: usize, r: usize) -> bool {
        self.j.contains(&jj) && self.i.contains(&i) && self.r.contains(&r)
    }

    /// Visits every masked node in slice order, passing the slice position
    /// and the field index.
    pub fn for_each(&self, grid: &GridSpec, mut f: impl FnMut(usize, usize)) {
        let mut k = 0;
        for i in self.i.clone() {
            for r in self.r.clone() {
                let base = grid.line_start(i, r);
                for jj in self.j.clone() {
                    f(k, base + jj);
                    k += 1;
                }
            }
        }
    }
}

/// Control values on `Q1` for each step; zero elsewhere by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSignal {
    mask: ControlMask,
    steps: usize,
    values: Vec<f64>,
}

impl ControlSignal {
    pub fn zeros(mask: &ControlMask, steps: usize) -> Self {
        Self {
            mask: mask.clone(),
            steps,
            values: vec![0.0; steps * mask.len()],
        }
    }

    pub fn mask(&self) -> &ControlMask {
        &self.mask
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn slice(&self, n: usize) -> &[f64] {
        let m = self.mask.len();
        &self.values[n * m..(n + 1) * m]
    }

    pub fn slice_mut(&mut self, n: usize) -> &mut [f64] {
        let m = self.mask.len();
        &mut self.values[n * m..(n + 1) * m]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

/// Everything the steppers need, assembled once from `(params, grid)`.
#[derive(Debug, Clone)]
pub struct System {
    params: ModelParams,
    grid: GridSpec,
    coeffs: Coefficients,
    op: TridiagOperator,
    prop: DiffusionPropagator,
    /// `pi1(a_i)/pi1(a_{i-1})`, with entry 0 set to 1.
    age_ratio: Vec<f64>,
    size_ratio: Vec<f64>,
    /// `beta(a_i)`.
    beta: Vec<f64>,
    /// Trapezoid renewal weights `c_i * beta(a_i) * delta`.
    renewal_w: Vec<f64>,
    mask: ControlMask,
    flags: StepFlags,
}

/// Survival ratio `((n-k)/(n-k+1))^c` between lattice nodes `k-1` and `k`;
/// exactly zero at `k = n`.
fn lattice_survival_ratios(n: usize, c: f64) -> Vec<f64> {
    let mut v = vec![1.0; n + 1];
    for (k, slot) in v.iter_mut().enumerate().skip(1) {
        let rest = (n - k) as f64;
        *slot = (rest / (rest + 1.0)).powf(c);
    }
    v
}

impl System {
    pub fn new(params: &ModelParams, grid: &GridSpec) -> Result<Self> {
        let coeffs = default_coefficients(params)?;
        if (grid.max_age - params.max_age).abs() > 1e-12 || (grid.max_size - params.max_size).abs() > 1e-12 {
            return Err(Error::Grid("grid extents disagree with model A, S".into()));
        }
        let op = assemble_operator(&coeffs, grid)?;
        let prop = op.propagator(grid.delta)?;
        let beta: Vec<f64> = (0..=grid.na).map(|i| coeffs.beta(grid.age(i))).collect();
        let renewal_w = beta
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let c = if i == 0 || i == grid.na { 0.5 } else { 1.0 };
                c * b * grid.delta
            })
            .collect();
        Ok(Self {
            params: params.clone(),
            grid: *grid,
            age_ratio: lattice_survival_ratios(grid.na, params.mu1_c),
            size_ratio: lattice_survival_ratios(grid.ns, params.mu2_c),
            beta,
            renewal_w,
            mask: ControlMask::from_region(&params.control, grid),
            coeffs,
            op,
            prop,
            flags: StepFlags::default(),
        })
    }

    pub fn with_flags(mut self, flags: StepFlags) -> Self {
        self.flags = flags;
        self
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn coefficients(&self) -> &Coefficients {
        &self.coeffs
    }

    pub fn operator(&self) -> &TridiagOperator {
        &self.op
    }

    pub fn propagator(&self) -> &DiffusionPropagator {
        &self.prop
    }

    pub fn mask(&self) -> &ControlMask {
        &self.mask
    }

    pub fn flags(&self) -> StepFlags {
        self.flags
    }

    pub fn beta_nodes(&self) -> &[f64] {
        &self.beta
    }

    pub fn renewal_weights(&self) -> &[f64] {
        &self.renewal_w
    }

    pub fn age_ratios(&self) -> &[f64] {
        &self.age_ratio
    }

    pub fn size_ratios(&self) -> &[f64] {
        &self.size_ratio
    }

    /// Inner product of `K`.
    pub fn inner(&self, f: &Field3, g: &Field3) -> f64 {
        self.op.field_inner(f, g)
    }

    pub fn norm(&self, f: &Field3) -> f64 {
        self.op.field_norm(f)
    }

    /// Inner product of the control space `U` on masked slices.
    pub fn control_inner(&self, u: &[f64], v: &[f64]) -> f64 {
        let nj = self.mask.j.len();
        let w = &self.op.inv_sigma()[self.mask.j.clone()];
        let scale = self.op.dx() * self.grid.delta * self.grid.delta;
        u.chunks_exact(nj)
            .zip(v.chunks_exact(nj))
            .map(|(a, b)| crate::weighted_grid::weighted_line_dot(w, a, b))
            .sum::<f64>()
            * scale
    }

    /// `B* f`: restriction of a field to `Q1`.
    pub fn restrict(&self, f: &Field3, out: &mut [f64]) {
        let vals = f.values();
        self.mask.for_each(&self.grid, |k, idx| out[k] = vals[idx]);
    }

    /// `j -> sum_i c_i beta(a_i) f(j,i,r) delta` (trapezoid in age).
    pub fn renewal_integral(&self, f: &Field3, r: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.grid.nx];
        for (i, &w) in self.renewal_w.iter().enumerate() {
            if w != 0.0 {
                for (o, v) in out.iter_mut().zip(f.line(i, r)) {
                    *o += w * v;
                }
            }
        }
        out
    }

    /// Multiplier applied to line `(i, r)` by the mortality substep.
    #[inline]
    pub fn mortality_factor(&self, i: usize, r: usize) -> f64 {
        self.age_ratio[i] * self.size_ratio[r]
    }

    fn zero_plane_age(&self, f: &mut Field3, i: usize) {
        for r in 0..=self.grid.ns {
            f.line_mut(i, r).fill(0.0);
        }
    }

    fn zero_plane_size(&self, f: &mut Field3, r: usize) {
        for i in 0..=self.grid.na {
            f.line_mut(i, r).fill(0.0);
        }
    }

    fn apply_mortality(&self, f: &mut Field3) {
        for i in 0..=self.grid.na {
            for r in 0..=self.grid.ns {
                let m = self.mortality_factor(i, r);
                if m != 1.0 {
                    f.line_mut(i, r).iter_mut().for_each(|v| *v *= m);
                }
            }
        }
    }

    /// Lattice offset of the `(i, r) -> (i+1, r+1)` shift.
    fn diagonal_offset(&self) -> usize {
        (self.grid.ns + 2) * self.grid.nx
    }

    /// Advances `y` one step in place and returns the newborn count of the
    /// step, `delta * int int y(x,0,s) dx ds` after renewal.
    pub fn forward_step_in_place(&self, y: &mut Field3, u: Option<&[f64]>) -> f64 {
        let g = self.grid;
        if self.flags.transport {
            let off = self.diagonal_offset();
            let len = y.values().len();
            y.values_mut().copy_within(0..len - off, off);
            self.zero_plane_age(y, 0);
            self.zero_plane_size(y, 0);
        }
        if self.flags.mortality {
            self.apply_mortality(y);
        }
        let mut newborn = 0.0;
        for r in 1..=g.ns {
            let line = if self.flags.renewal {
                let mut acc = vec![0.0; g.nx];
                for i in 1..=g.na {
                    let w = self.renewal_w[i];
                    if w != 0.0 {
                        for (o, v) in acc.iter_mut().zip(y.line(i, r)) {
                            *o += w * v;
                        }
                    }
                }
                acc
            } else {
                vec![0.0; g.nx]
            };
            newborn += line.iter().sum::<f64>();
            y.line_mut(0, r).copy_from_slice(&line);
        }
        self.zero_plane_size(y, 0);
        if self.flags.diffusion {
            self.prop.solve_field(y);
        }
        if let Some(u) = u {
            let vals = y.values_mut();
            let d = g.delta;
            self.mask.for_each(&g, |k, idx| vals[idx] += d * u[k]);
        }
        newborn * g.dx() * g.delta * g.delta
    }

    pub fn forward_step(&self, y: &Field3, u: Option<&[f64]>) -> Field3 {
        let mut out = y.clone();
        self.forward_step_in_place(&mut out, u);
        out
    }

    /// Exact `K`-transpose of [`System::forward_step_in_place`] with the
    /// control substep dropped.
    pub fn adjoint_step_in_place(&self, q: &mut Field3) {
        let g = self.grid;
        if self.flags.diffusion {
            self.prop.solve_field(q);
        }
        if self.flags.renewal {
            for r in 1..=g.ns {
                let src = q.line(0, r).to_vec();
                for i in 1..=g.na {
                    let w = self.renewal_w[i];
                    if w != 0.0 {
                        for (o, v) in q.line_mut(i, r).iter_mut().zip(&src) {
                            *o += w * v;
                        }
                    }
                }
            }
        }
        self.zero_plane_age(q, 0);
        self.zero_plane_size(q, 0);
        if self.flags.mortality {
            self.apply_mortality(q);
        }
        if self.flags.transport {
            let off = self.diagonal_offset();
            let len = q.values().len();
            q.values_mut().copy_within(off..len, 0);
            self.zero_plane_age(q, g.na);
            self.zero_plane_size(q, g.ns);
        }
    }

    pub fn adjoint_step(&self, q: &Field3) -> Field3 {
        let mut out = q.clone();
        self.adjoint_step_in_place(&mut out);
        out
    }

    /// Runs `steps` forward steps. `observer` sees every state including the
    /// initial one.
    pub fn simulate_with(
        &self,
        y0: &Field3,
        control: Option<&ControlSignal>,
        steps: usize,
        mut observer: impl FnMut(usize, &Field3),
    ) -> Result<TrajectoryStats> {
        if let Some(c) = control {
            if c.steps() < steps || c.mask() != &self.mask {
                return Err(Error::Shape("control signal does not match grid/horizon".into()));
            }
        }
        let mut y = y0.clone();
        let mut norms = Vec::with_capacity(steps + 1);
        let mut flux = Vec::with_capacity(steps);
        norms.push(self.norm(&y));
        observer(0, &y);
        for n in 0..steps {
            let u = control.map(|c| c.slice(n));
            flux.push(self.forward_step_in_place(&mut y, u));
            if !y.is_finite() {
                return Err(Error::NonFinite { step: n + 1 });
            }
            norms.push(self.norm(&y));
            observer(n + 1, &y);
        }
        Ok(TrajectoryStats {
            norms,
            final_state: y,
            newborn_flux: flux,
        })
    }

    pub fn simulate(
        &self,
        y0: &Field3,
        control: Option<&ControlSignal>,
        steps: usize,
    ) -> Result<TrajectoryStats> {
        self.simulate_with(y0, control, steps, |_, _| {})
    }
}

#[derive(Debug, Clone)]
pub struct TrajectoryStats {
    /// `||y(t_n)||_K` for `n = 0..=steps`.
    pub norms: Vec<f64>,
    pub final_state: Field3,
    /// Newborns produced in each step.
    pub newborn_flux: Vec<f64>,
}

impl TrajectoryStats {
    /// `step,t,norm` rows.
    pub fn norms_csv(&self, delta: f64) -> String {
        let mut s = String::from("step,t,norm\n");
        for (n, v) in self.norms.iter().enumerate() {
            s.push_str(&format!("{},{},{}\n", n, n as f64 * delta, v));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Fertility;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> (ModelParams, GridSpec) {
        let p = ModelParams::default();
        let g = GridSpec::new(9, 0.125, p.max_age, p.max_size).unwrap();
        (p, g)
    }

    #[test]
    fn mask_is_strict_interior_of_q1() {
        let p = ModelParams::default();
        let g = GridSpec::new(33, 1.0 / 24.0, 2.0, 1.0).unwrap();
        let m = ControlMask::from_region(&p.control, &g);
        // x_j = j/34 in (0.3, 0.7) -> j = 11..=23 -> zero-based 10..23
        assert_eq!(m.j, 10..23);
        // a_i = i/24 in (0.2, 1.5) -> i = 5..=35
        assert_eq!(m.i, 5..36);
        // s_r in (0.1, 0.9) -> r = 3..=21
        assert_eq!(m.r, 3..22);
    }

    #[test]
    fn survival_ratios_end_at_zero() {
        let r = lattice_survival_ratios(8, 0.7);
        assert_eq!(r[8], 0.0);
        assert_eq!(r[0], 1.0);
        assert!(r[1..8].iter().all(|&v| v > 0.0 && v < 1.0));
        // telescoping product equals the closed-form survival
        let prod: f64 = r[1..=5].iter().product();
        assert!((prod - (3.0f64 / 8.0).powf(0.7)).abs() < 1e-14);
    }

    #[test]
    fn pure_shift_moves_point_mass_diagonally() {
        let (p, g) = small();
        let sys = System::new(&p.with_zero_fertility(), &g).unwrap().with_flags(StepFlags {
            mortality: false,
            diffusion: false,
            ..StepFlags::default()
        });
        let mut y = Field3::zeros(&g);
        y.set(4, 3, 2, 1.0);
        let y1 = sys.forward_step(&y, None);
        assert_eq!(y1.get(4, 4, 3), 1.0);
        assert_eq!(y1.values().iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn last_age_row_dies() {
        let (p, g) = small();
        let sys = System::new(&p.with_zero_fertility(), &g).unwrap();
        let mut y = Field3::zeros(&g);
        for r in 0..=g.ns {
            y.line_mut(g.na, r).fill(1.0);
            y.line_mut(g.na - 1, r).fill(1.0);
        }
        let y1 = sys.forward_step(&y, None);
        assert_eq!(y1.max_abs(), 0.0);
    }

    #[test]
    fn renewal_integral_cases() {
        let (p, g) = small();
        let zero = System::new(&p.clone().with_zero_fertility(), &g).unwrap();
        let ones = Field3::from_fn(&g, |_, _, _| 1.0);
        assert!(zero.renewal_integral(&ones, 3).iter().all(|&v| v == 0.0));

        let sys = System::new(&p, &g).unwrap();
        let mut f = Field3::zeros(&g);
        let i = 14; // a = 1.75, the bump maximum
        f.line_mut(i, 3).fill(1.0);
        let n = sys.renewal_integral(&f, 3);
        let expect = sys.coefficients().beta(g.age(i)) * g.delta;
        assert!(n.iter().all(|&v| (v - expect).abs() < 1e-15));

        // indicator fertility: integral of B0 over (a_hat, A) with trapezoid
        let b0 = 1.3;
        let step = System::new(
            &p.with_fertility(Fertility::Step {
                amplitude: b0,
                onset: 1.5,
            }),
            &g,
        )
        .unwrap();
        let n = step.renewal_integral(&ones, 2);
        let exact = b0 * (2.0 - 1.5);
        assert!(n.iter().all(|&v| (v - exact).abs() <= 2.0 * b0 * g.delta));
    }

    #[test]
    fn dissipation_without_fertility() {
        let (p, g) = small();
        let sys = System::new(&p.with_zero_fertility(), &g).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y0 = Field3::random_uniform(&g, &mut rng, -1.0, 1.0);
        let stats = sys.simulate(&y0, None, 20).unwrap();
        for w in stats.norms.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-14));
        }
    }

    #[test]
    fn zero_data_stays_zero() {
        let (p, g) = small();
        let sys = System::new(&p, &g).unwrap();
        let u = ControlSignal::zeros(sys.mask(), 6);
        let stats = sys.simulate(&Field3::zeros(&g), Some(&u), 6).unwrap();
        assert_eq!(stats.final_state.max_abs(), 0.0);
    }

    #[test]
    fn non_finite_state_aborts_with_step() {
        let (p, g) = small();
        let sys = System::new(&p, &g).unwrap();
        let mut y0 = Field3::zeros(&g);
        y0.set(3, 2, 2, f64::NAN);
        match sys.simulate(&y0, None, 3) {
            Err(Error::NonFinite { step }) => assert_eq!(step, 1),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn population_dies_out_after_max_size() {
        let (p, g) = small();
        let sys = System::new(&p, &g).unwrap();
        let y0 = Field3::from_fn(&g, |_, _, _| 1.0);
        let stats = sys.simulate(&y0, None, g.ns).unwrap();
        assert_eq!(stats.final_state.max_abs(), 0.0);
        assert!(stats.norms[g.ns - 1] > 0.0);
    }
}
