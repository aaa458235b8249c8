//! Tensor grid, 3-D density fields, and the flux-form discretization of the
//! degenerate operator in the `1/sigma`-weighted inner product.
//!
//! One common step `delta` is used for time, age and size, so transport along
//! `da/dt = ds/dt = 1` is an exact lattice shift. Space uses `nx` interior
//! nodes `x_j = j/(nx+1)`, `j = 1..=nx`; the Dirichlet endpoints are
//! eliminated and never stored.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::Coefficients;

/// Grid description. Ages are `a_i = i*delta`, `i = 0..=na`; sizes
/// `s_r = r*delta`, `r = 0..=ns`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub nx: usize,
    pub delta: f64,
    pub na: usize,
    pub ns: usize,
    pub max_age: f64,
    pub max_size: f64,
}

const COMMENSURABLE_TOL: f64 = 1e-12;

impl GridSpec {
    /// Rejects a step that does not divide `A` and `S`.
    pub fn new(nx: usize, delta: f64, max_age: f64, max_size: f64) -> Result<Self> {
        if nx < 3 {
            return Err(Error::Grid(format!("nx = {nx} < 3")));
        }
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::Grid(format!("delta = {delta} must be positive")));
        }
        let na = divide(max_age, delta, "A")?;
        let ns = divide(max_size, delta, "S")?;
        if na < 2 || ns < 2 {
            return Err(Error::Grid(format!("na = {na}, ns = {ns}; both must be >= 2")));
        }
        Ok(Self {
            nx,
            delta,
            na,
            ns,
            max_age,
            max_size,
        })
    }

    pub fn dx(&self) -> f64 {
        1.0 / (self.nx + 1) as f64
    }

    /// Position of the zero-based interior node `jj` (node `j = jj + 1`).
    pub fn x(&self, jj: usize) -> f64 {
        (jj + 1) as f64 / (self.nx + 1) as f64
    }

    /// Age of node `i`; node `na` is exactly `A`.
    pub fn age(&self, i: usize) -> f64 {
        self.max_age * i as f64 / self.na as f64
    }

    pub fn size(&self, r: usize) -> f64 {
        self.max_size * r as f64 / self.ns as f64
    }

    /// Time of step `n`.
    pub fn time(&self, n: usize) -> f64 {
        n as f64 * self.delta
    }

    /// Number of steps for horizon `t`: `round(t/delta)`. Horizons that are
    /// not multiples of `delta` are snapped to the nearest lattice time.
    pub fn steps_for(&self, t: f64) -> Result<usize> {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::Grid(format!("horizon {t} must be positive")));
        }
        let nt = (t / self.delta).round() as usize;
        if nt == 0 {
            return Err(Error::Grid(format!(
                "horizon {t} shorter than half a step ({})",
                self.delta
            )));
        }
        Ok(nt)
    }

    /// Number of stored values in a field.
    pub fn len(&self) -> usize {
        self.nx * (self.na + 1) * (self.ns + 1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, jj: usize, i: usize, r: usize) -> usize {
        (i * (self.ns + 1) + r) * self.nx + jj
    }

    #[inline]
    pub fn line_start(&self, i: usize, r: usize) -> usize {
        (i * (self.ns + 1) + r) * self.nx
    }
}

fn divide(len: f64, delta: f64, what: &str) -> Result<usize> {
    let q = len / delta;
    let n = q.round();
    if (q - n).abs() > COMMENSURABLE_TOL * q.max(1.0) {
        return Err(Error::Grid(format!(
            "delta = {delta} does not divide {what} = {len}"
        )));
    }
    Ok(n as usize)
}

/// Density values on the full `(x, a, s)` lattice. Spatial lines for a fixed
/// `(i, r)` are contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct Field3 {
    grid: GridSpec,
    values: Vec<f64>,
}

impl Field3 {
    pub fn zeros(grid: &GridSpec) -> Self {
        Self {
            grid: *grid,
            values: vec![0.0; grid.len()],
        }
    }

    pub fn from_values(grid: &GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Shape(format!(
                "{} values for a grid of {}",
                values.len(),
                grid.len()
            )));
        }
        Ok(Self {
            grid: *grid,
            values,
        })
    }

    /// Samples `f(x, a, s)` at every node.
    pub fn from_fn(grid: &GridSpec, f: impl Fn(f64, f64, f64) -> f64) -> Self {
        let mut out = Self::zeros(grid);
        for i in 0..=grid.na {
            for r in 0..=grid.ns {
                for jj in 0..grid.nx {
                    let k = grid.index(jj, i, r);
                    out.values[k] = f(grid.x(jj), grid.age(i), grid.size(r));
                }
            }
        }
        out
    }

    pub fn random_uniform<R: Rng + ?Sized>(grid: &GridSpec, rng: &mut R, lo: f64, hi: f64) -> Self {
        let values = (0..grid.len())
            .map(|_| lo + (hi - lo) * rng.random::<f64>())
            .collect();
        Self {
            grid: *grid,
            values,
        }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    #[inline]
    pub fn get(&self, jj: usize, i: usize, r: usize) -> f64 {
        self.values[self.grid.index(jj, i, r)]
    }

    #[inline]
    pub fn set(&mut self, jj: usize, i: usize, r: usize, v: f64) {
        let k = self.grid.index(jj, i, r);
        self.values[k] = v;
    }

    pub fn line(&self, i: usize, r: usize) -> &[f64] {
        let s = self.grid.line_start(i, r);
        &self.values[s..s + self.grid.nx]
    }

    pub fn line_mut(&mut self, i: usize, r: usize) -> &mut [f64] {
        let s = self.grid.line_start(i, r);
        let nx = self.grid.nx;
        &mut self.values[s..s + nx]
    }

    pub fn scale(&mut self, c: f64) {
        self.values.iter_mut().for_each(|v| *v *= c);
    }

    /// `self += c * other`.
    pub fn axpy(&mut self, c: f64, other: &Field3) {
        debug_assert_eq!(self.grid, other.grid);
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += c * b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Writes `<path>` as `j,i,r,value` rows (1-based `j`) and a sidecar
    /// `<path>.header` with the grid. Values use the shortest round-trip
    /// decimal representation, so reading back is bit-exact.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let g = &self.grid;
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["j", "i", "r", "value"])?;
        for i in 0..=g.na {
            for r in 0..=g.ns {
                for jj in 0..g.nx {
                    w.write_record([
                        (jj + 1).to_string(),
                        i.to_string(),
                        r.to_string(),
                        self.get(jj, i, r).to_string(),
                    ])?;
                }
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        fs::write(header_path(path), grid_header(g)).map_err(|e| Error::io(header_path(path), e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let hp = header_path(path);
        let text = fs::read_to_string(&hp).map_err(|e| Error::io(&hp, e))?;
        let grid = parse_grid_header(&text)?;
        let mut field = Field3::zeros(&grid);
        let mut seen = 0usize;
        let mut rdr = csv::Reader::from_path(path)?;
        for rec in rdr.records() {
            let rec = rec?;
            let parse_idx = |k: usize| -> Result<usize> {
                rec.get(k)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Shape(format!("bad index in row {rec:?}")))
            };
            let (j, i, r) = (parse_idx(0)?, parse_idx(1)?, parse_idx(2)?);
            let value: f64 = rec
                .get(3)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Shape(format!("bad value in row {rec:?}")))?;
            if j == 0 || j > grid.nx || i > grid.na || r > grid.ns {
                return Err(Error::Shape(format!("index ({j},{i},{r}) outside grid")));
            }
            field.set(j - 1, i, r, value);
            seen += 1;
        }
        if seen != grid.len() {
            return Err(Error::Shape(format!("{seen} rows, expected {}", grid.len())));
        }
        Ok(field)
    }
}

fn header_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".header");
    PathBuf::from(s)
}

pub(crate) fn grid_header(g: &GridSpec) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "nx={}", g.nx);
    let _ = writeln!(s, "na={}", g.na);
    let _ = writeln!(s, "ns={}", g.ns);
    let _ = writeln!(s, "delta={}", g.delta);
    let _ = writeln!(s, "A={}", g.max_age);
    let _ = writeln!(s, "S={}", g.max_size);
    s
}

fn parse_grid_header(text: &str) -> Result<GridSpec> {
    let mut nx = None;
    let mut delta = None;
    let mut a = None;
    let mut s = None;
    let (mut na, mut ns) = (None, None);
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Shape(format!("bad header line `{line}`")))?;
        let bad = || Error::Shape(format!("bad header value `{line}`"));
        match k.trim() {
            "nx" => nx = Some(v.trim().parse::<usize>().map_err(|_| bad())?),
            "na" => na = Some(v.trim().parse::<usize>().map_err(|_| bad())?),
            "ns" => ns = Some(v.trim().parse::<usize>().map_err(|_| bad())?),
            "delta" => delta = Some(v.trim().parse::<f64>().map_err(|_| bad())?),
            "A" => a = Some(v.trim().parse::<f64>().map_err(|_| bad())?),
            "S" => s = Some(v.trim().parse::<f64>().map_err(|_| bad())?),
            _ => return Err(Error::Shape(format!("unknown header key `{k}`"))),
        }
    }
    let missing = |k: &str| Error::Shape(format!("header missing `{k}`"));
    let grid = GridSpec::new(
        nx.ok_or_else(|| missing("nx"))?,
        delta.ok_or_else(|| missing("delta"))?,
        a.ok_or_else(|| missing("A"))?,
        s.ok_or_else(|| missing("S"))?,
    )?;
    if na != Some(grid.na) || ns != Some(grid.ns) {
        return Err(Error::Shape("header na/ns disagree with delta".into()));
    }
    Ok(grid)
}

/// `(L u)_j = sigma_j [gamma_{j+1/2}(u_{j+1}-u_j) - gamma_{j-1/2}(u_j-u_{j-1})] / dx^2`
/// with homogeneous Dirichlet rows eliminated.
#[derive(Debug, Clone)]
pub struct TridiagOperator {
    pub lower: Vec<f64>,
    pub diag: Vec<f64>,
    pub upper: Vec<f64>,
    /// `sigma(x_j)` at interior nodes.
    pub sigma_w: Vec<f64>,
    /// `gamma(x_{j+1/2})` for `j = 0..=nx` (half-points between all `nx+2` nodes).
    pub gamma_half: Vec<f64>,
    inv_sigma: Vec<f64>,
    dx: f64,
    delta: f64,
}

/// Assembles the divergence-form operator. `gamma` at half-points is the
/// geometric mean of its nodal values.
pub fn assemble_operator(coeffs: &Coefficients, grid: &GridSpec) -> Result<TridiagOperator> {
    let nx = grid.nx;
    let dx = grid.dx();
    let mut gamma_nodes = Vec::with_capacity(nx + 2);
    for j in 0..nx + 2 {
        gamma_nodes.push(coeffs.gamma_weight(j as f64 * dx)?);
    }
    let gamma_half: Vec<f64> = gamma_nodes.windows(2).map(|w| (w[0] * w[1]).sqrt()).collect();
    let sigma_w: Vec<f64> = (1..=nx)
        .map(|j| coeffs.k(j as f64 * dx) / gamma_nodes[j])
        .collect();
    if let Some(jj) = sigma_w.iter().position(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::Grid(format!("sigma not positive at interior node {}", jj + 1)));
    }
    Ok(TridiagOperator::from_weights(sigma_w, gamma_half, dx, grid.delta))
}

impl TridiagOperator {
    fn from_weights(sigma_w: Vec<f64>, gamma_half: Vec<f64>, dx: f64, delta: f64) -> Self {
        let nx = sigma_w.len();
        let h2 = dx * dx;
        let mut lower = vec![0.0; nx];
        let mut diag = vec![0.0; nx];
        let mut upper = vec![0.0; nx];
        for jj in 0..nx {
            let west = sigma_w[jj] * gamma_half[jj] / h2;
            let east = sigma_w[jj] * gamma_half[jj + 1] / h2;
            diag[jj] = -(west + east);
            if jj > 0 {
                lower[jj] = west;
            }
            if jj + 1 < nx {
                upper[jj] = east;
            }
        }
        let inv_sigma = sigma_w.iter().map(|s| 1.0 / s).collect();
        Self {
            lower,
            diag,
            upper,
            sigma_w,
            gamma_half,
            inv_sigma,
            dx,
            delta,
        }
    }

    pub fn nx(&self) -> usize {
        self.diag.len()
    }

    /// Dense copy of the stencil matrix.
    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let n = self.nx();
        nalgebra::DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                self.diag[i]
            } else if j + 1 == i {
                self.lower[i]
            } else if i + 1 == j {
                self.upper[i]
            } else {
                0.0
            }
        })
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn inv_sigma(&self) -> &[f64] {
        &self.inv_sigma
    }

    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        let n = self.nx();
        (0..n)
            .map(|j| {
                let mut v = self.diag[j] * u[j];
                if j > 0 {
                    v += self.lower[j] * u[j - 1];
                }
                if j + 1 < n {
                    v += self.upper[j] * u[j + 1];
                }
                v
            })
            .collect()
    }

    /// `sum_j u_j v_j / sigma_j * dx` over interior nodes.
    pub fn weighted_inner(&self, u: &[f64], v: &[f64]) -> f64 {
        weighted_line_dot(&self.inv_sigma, u, v) * self.dx
    }

    /// Inner product of the state space `K`:
    /// `sum f g / sigma_j * dx * delta^2` over all nodes.
    pub fn field_inner(&self, f: &Field3, g: &Field3) -> f64 {
        debug_assert_eq!(f.grid(), g.grid());
        let nx = self.nx();
        let w = self.dx * self.delta * self.delta;
        f.values()
            .chunks_exact(nx)
            .zip(g.values().chunks_exact(nx))
            .map(|(a, b)| weighted_line_dot(&self.inv_sigma, a, b))
            .sum::<f64>()
            * w
    }

    pub fn field_norm(&self, f: &Field3) -> f64 {
        self.field_inner(f, f).sqrt()
    }

    pub fn propagator(&self, dt: f64) -> Result<DiffusionPropagator> {
        DiffusionPropagator::new(self, dt)
    }
}

#[inline]
pub(crate) fn weighted_line_dot(inv_sigma: &[f64], u: &[f64], v: &[f64]) -> f64 {
    inv_sigma
        .iter()
        .zip(u)
        .zip(v)
        .map(|((w, a), b)| w * a * b)
        .sum()
}

/// Prefactored Thomas solver for `(I - dt L) w = v`.
#[derive(Debug, Clone)]
pub struct DiffusionPropagator {
    dt: f64,
    sub: Vec<f64>,
    c_prime: Vec<f64>,
    inv_denom: Vec<f64>,
}

impl DiffusionPropagator {
    pub fn new(op: &TridiagOperator, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::param("dt", "diffusion step must be positive"));
        }
        let n = op.nx();
        let sub: Vec<f64> = op.lower.iter().map(|l| -dt * l).collect();
        let mut c_prime = vec![0.0; n];
        let mut inv_denom = vec![0.0; n];
        for j in 0..n {
            let b = 1.0 - dt * op.diag[j];
            let denom = if j == 0 { b } else { b - sub[j] * c_prime[j - 1] };
            if !(denom > 0.0 && denom.is_finite()) {
                return Err(Error::SingularPivot { row: j });
            }
            inv_denom[j] = 1.0 / denom;
            c_prime[j] = -dt * op.upper[j] * inv_denom[j];
        }
        Ok(Self {
            dt,
            sub,
            c_prime,
            inv_denom,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Overwrites `line` with `(I - dt L)^{-1} line`.
    #[inline]
    pub fn solve_in_place(&self, line: &mut [f64]) {
        let n = line.len();
        line[0] *= self.inv_denom[0];
        for j in 1..n {
            line[j] = (line[j] - self.sub[j] * line[j - 1]) * self.inv_denom[j];
        }
        for j in (0..n - 1).rev() {
            line[j] -= self.c_prime[j] * line[j + 1];
        }
    }

    /// Applies the solve to every spatial line of a field.
    pub fn solve_field(&self, f: &mut Field3) {
        let nx = f.grid().nx;
        f.values_mut()
            .chunks_exact_mut(nx)
            .for_each(|line| self.solve_in_place(line));
    }
}

/// One backward-Euler step of `v' = L v`.
pub fn implicit_diffusion_step(op: &TridiagOperator, v: &[f64], dt: f64) -> Result<Vec<f64>> {
    let prop = op.propagator(dt)?;
    let mut w = v.to_vec();
    prop.solve_in_place(&mut w);
    debug_assert!(
        op.weighted_inner(&w, &w) <= op.weighted_inner(v, v) * (1.0 + 1e-12) + 1e-300,
        "implicit diffusion step expanded the weighted norm"
    );
    Ok(w)
}
