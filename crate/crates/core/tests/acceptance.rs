//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

use std::time::{Duration, Instant};

use popctl::adjoint::{adjoint_solve, newborn_discrepancy, vanishing_region_check, DuhamelRule, StateStorage};
use popctl::forward::{ControlSignal, System};
use popctl::hum::{
    gramian_apply, propo1_bound_check, synthesize_control, threshold_scan, HumProblem,
    HumSettings, ScanStatus, SolveStatus,
};
use popctl::model::{default_coefficients, thresholds, Diffusion, ModelParams};
use popctl::weighted_grid::{assemble_operator, Field3, GridSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const NX: usize = 33;
const DELTA: f64 = 1.0 / 24.0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn default_system() -> System {
    let p = ModelParams::default();
    let g = GridSpec::new(NX, DELTA, p.max_age, p.max_size).unwrap();
    System::new(&p, &g).unwrap()
}

fn random_control(sys: &System, steps: usize, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> ControlSignal {
    let mut u = ControlSignal::zeros(sys.mask(), steps);
    for v in u.values_mut() {
        *v = lo + (hi - lo) * rng.random::<f64>();
    }
    u
}

fn operator_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst_sym = 0.0f64;
    let mut max_quad = f64::NEG_INFINITY;
    let mut max_eig = f64::NEG_INFINITY;
    let mut max_im = 0.0f64;
    for alpha in [0.5, 1.0, 1.5] {
        let p = ModelParams {
            diffusion: Diffusion::Degenerate { alpha },
            ..ModelParams::default()
        };
        let c = default_coefficients(&p).unwrap();
        let g = GridSpec::new(NX, DELTA, p.max_age, p.max_size).unwrap();
        let op = assemble_operator(&c, &g).unwrap();
        let norm = |u: &[f64]| op.weighted_inner(u, u).sqrt();
        for _ in 0..100 {
            let u: Vec<f64> = (0..NX).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let v: Vec<f64> = (0..NX).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let (lu, lv) = (op.apply(&u), op.apply(&v));
            let a = op.weighted_inner(&lu, &v);
            let b = op.weighted_inner(&u, &lv);
            let scale = norm(&lu) * norm(&v) + norm(&u) * norm(&lv);
            worst_sym = worst_sym.max((a - b).abs() / scale);
            let q = op.weighted_inner(&lu, &u) / (norm(&lu) * norm(&u));
            max_quad = max_quad.max(q);
        }
        for z in op.to_dense().complex_eigenvalues().iter() {
            max_eig = max_eig.max(z.re);
            max_im = max_im.max(z.im.abs() / z.re.abs().max(1.0));
        }
    }
    Outcome {
        pass: worst_sym <= 1e-12 && max_quad <= 0.0 && max_eig <= 0.0 && max_im < 1e-8,
        detail: format!(
            "symmetry mismatch {worst_sym:.2e} (<= 1e-12), max <Lu,u>/norms {max_quad:.3e} (<= 0), \
             max eigenvalue {max_eig:.3e} (<= 0)"
        ),
    }
}

fn duality() -> Outcome {
    let sys = default_system();
    let g = *sys.grid();
    let steps = g.steps_for(1.35).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let y0 = Field3::random_uniform(&g, &mut rng, -1.0, 1.0);
        let q0 = Field3::random_uniform(&g, &mut rng, -1.0, 1.0);
        let u = random_control(&sys, steps, &mut rng, -1.0, 1.0);
        let yt = sys.simulate(&y0, Some(&u), steps).unwrap().final_state;
        let traj = adjoint_solve(&sys, &q0, steps, StateStorage::None).unwrap();
        let lhs = sys.inner(&yt, &q0);
        let mut rhs = sys.inner(&y0, traj.final_state());
        let mut scale = sys.norm(&yt) * sys.norm(&q0) + sys.norm(&y0) * sys.norm(traj.final_state());
        for n in 0..steps {
            let p = traj.observed(steps - 1 - n);
            rhs += g.delta * sys.control_inner(u.slice(n), p);
            scale += g.delta * (sys.control_inner(u.slice(n), u.slice(n)) * sys.control_inner(p, p)).sqrt();
        }
        worst = worst.max((lhs - rhs).abs() / scale);
    }
    Outcome {
        pass: worst <= 1e-10,
        detail: format!("max relative pairing mismatch {worst:.2e} over 20 triples (<= 1e-10)"),
    }
}

fn characteristics_refinement() -> Outcome {
    let p = ModelParams::smoke();
    let horizon = 1.5;
    let mut errs = Vec::new();
    for delta in [1.0 / 8.0, 1.0 / 16.0, 1.0 / 32.0] {
        let g = GridSpec::new(15, delta, p.max_age, p.max_size).unwrap();
        let sys = System::new(&p, &g).unwrap();
        let q0 = Field3::from_fn(&g, |x, a, s| {
            (std::f64::consts::PI * x).sin() * (1.0 + a * (1.0 - a)) * (1.0 + 0.5 * (s * std::f64::consts::PI).cos())
        });
        let steps = g.steps_for(horizon).unwrap();
        let traj = adjoint_solve(&sys, &q0, steps, StateStorage::None).unwrap();
        errs.push(newborn_discrepancy(&sys, &q0, &traj, DuhamelRule::Trapezoid).unwrap());
    }
    let r1 = errs[0] / errs[1];
    let r2 = errs[1] / errs[2];
    Outcome {
        pass: r1 >= 1.7 && r2 >= 1.7,
        detail: format!(
            "discrepancies {:.3e}, {:.3e}, {:.3e}; ratios {r1:.3}, {r2:.3} (>= 1.7)",
            errs[0], errs[1], errs[2]
        ),
    }
}

fn vanishing_region() -> Outcome {
    let sys = default_system();
    let g = *sys.grid();
    let steps = g.steps_for(1.35).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut sup = 0.0f64;
    let mut points = 0;
    for _ in 0..5 {
        let q0 = Field3::random_uniform(&g, &mut rng, -1.0, 1.0);
        let traj = adjoint_solve(&sys, &q0, steps, StateStorage::None).unwrap();
        let rep = vanishing_region_check(&sys, &traj, 1e-8);
        sup = sup.max(rep.region.sup);
        points = rep.region.points;
    }
    Outcome {
        pass: sup <= 1e-8 && points > 0,
        detail: format!("sup |q(x,0,s,t)| = {sup:.3e} over {points} (s,t) lattice points (<= 1e-8)"),
    }
}

fn gramian_checks() -> Outcome {
    let sys = default_system();
    let g = *sys.grid();
    let steps = g.steps_for(1.35).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let (mut sym, mut energy, mut min_quad) = (0.0f64, 0.0f64, f64::INFINITY);
    for _ in 0..4 {
        let p = Field3::random_uniform(&g, &mut rng, -1.0, 1.0);
        let q = Field3::random_uniform(&g, &mut rng, -1.0, 1.0);
        let lp = gramian_apply(&sys, &p, steps).unwrap();
        let lq = gramian_apply(&sys, &q, steps).unwrap();
        let a = sys.inner(&lp.image, &q);
        let b = sys.inner(&p, &lq.image);
        let scale = sys.norm(&lp.image) * sys.norm(&q) + sys.norm(&p) * sys.norm(&lq.image);
        sym = sym.max((a - b).abs() / scale);
        for (v, out) in [(&p, &lp), (&q, &lq)] {
            let e = sys.inner(&out.image, v);
            min_quad = min_quad.min(e / (sys.norm(&out.image) * sys.norm(v)));
            energy = energy.max((e - out.control_energy).abs() / out.control_energy);
        }
    }
    Outcome {
        pass: sym <= 1e-10 && min_quad >= 0.0 && energy <= 1e-12,
        detail: format!(
            "symmetry {sym:.2e} (<= 1e-10), min <Lq,q>/norms {min_quad:.3e} (>= 0), \
             energy mismatch {energy:.2e} (<= 1e-12)"
        ),
    }
}

struct HumRun {
    steps: usize,
    final_norm: f64,
    uncontrolled: f64,
    identity: f64,
    apps: usize,
    converged: bool,
}

fn hum_run(t: f64, epsilon: f64, seed: u64) -> HumRun {
    let sys = default_system();
    let g = *sys.grid();
    let steps = g.steps_for(t).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y0 = Field3::random_uniform(&g, &mut rng, 0.0, 1.0);
    let res = synthesize_control(&HumProblem {
        system: &sys,
        y0,
        steps,
        settings: HumSettings {
            epsilon,
            ..HumSettings::default()
        },
    })
    .unwrap();
    HumRun {
        steps,
        final_norm: res.final_norm,
        uncontrolled: res.uncontrolled_norm,
        identity: res.identity_mismatch(),
        apps: res.gramian_applications,
        converged: res.status == SolveStatus::Converged,
    }
}

fn null_control() -> Outcome {
    let tol = HumSettings::default().cg_tol;
    let r = hum_run(1.35, 1e-4, 606);
    Outcome {
        pass: r.converged && r.final_norm <= 0.1 * r.uncontrolled && r.identity <= 10.0 * tol && r.apps <= 200,
        detail: format!(
            "T = {:.4} ({} steps): ||y(T)|| {:.3e} vs uncontrolled {:.3e}; identity mismatch {:.2e} (<= {:.0e}); \
             {} Gramian applications (<= 200)",
            r.steps as f64 * DELTA,
            r.steps,
            r.final_norm,
            r.uncontrolled,
            r.identity,
            10.0 * tol,
            r.apps
        ),
    }
}

/// Penalization limit inside `(T*, S)`, where the free evolution has not yet
/// died out on this geometry: `||y(T)||` decreases with `epsilon`, every
/// solve satisfies the identity, and the smallest penalty reduces the final
/// state tenfold.
fn null_control_nontrivial() -> Outcome {
    let tol = HumSettings::default().cg_tol;
    let runs: Vec<(f64, HumRun)> = [1e-2, 1e-3, 1e-4, 1e-5]
        .into_iter()
        .map(|e| (e, hum_run(23.0 * DELTA, e, 607)))
        .collect();
    let monotone = runs.windows(2).all(|w| w[1].1.final_norm <= w[0].1.final_norm * (1.0 + 10.0 * tol));
    let ok = runs
        .iter()
        .all(|(_, r)| r.converged && r.identity <= 10.0 * tol && r.apps <= 200 && r.uncontrolled > 0.0);
    let last = &runs.last().unwrap().1;
    let detail = runs
        .iter()
        .map(|(e, r)| format!("eps {e:.0e}: ratio {:.3e}, {} apps", r.final_norm / r.uncontrolled, r.apps))
        .collect::<Vec<_>>()
        .join("; ");
    Outcome {
        pass: monotone && ok && last.final_norm <= 0.1 * last.uncontrolled,
        detail: format!("T = {:.4}: {detail}", last.steps as f64 * DELTA),
    }
}

fn threshold() -> Outcome {
    let sys = default_system();
    let ts = thresholds(sys.params()).t_star;
    let t_list: Vec<f64> = [0.5, 0.9, 1.1, 1.5, 2.0].iter().map(|f| f * ts).collect();
    let scan = threshold_scan(&sys, &t_list, 8, 8, 707).unwrap();
    let lo = scan.rows[0].cost;
    let hi = scan.rows[4].cost;
    let statuses: Vec<&str> = scan.rows.iter().map(|r| r.status.as_str()).collect();
    let pass = scan.rows.len() == 5 && lo >= 10.0 * hi && scan.rows.iter().all(|r| r.cost.is_finite() || r.status == ScanStatus::BlowsUp);
    Outcome {
        pass,
        detail: format!(
            "costs {} ; status {:?}; cost(0.45) = {lo:.3e} >= 10 x cost(1.8) = {hi:.3e}",
            scan.rows.iter().map(|r| format!("{:.3e}", r.cost)).collect::<Vec<_>>().join(", "),
            statuses
        ),
    }
}

fn source_bound_on(sys: &System, t: f64, eta: f64, seed: u64) -> popctl::hum::SourceBoundReport {
    let g = *sys.grid();
    let steps = g.steps_for(t).unwrap();
    let eta_step = (eta / g.delta).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q0 = Field3::random_uniform(&g, &mut rng, 0.0, 1.0);
    propo1_bound_check(sys, &q0, steps, eta_step).unwrap()
}

fn source_bound() -> Outcome {
    let sys = default_system();
    let th = thresholds(sys.params());
    let t = 1.35;
    let rep = source_bound_on(&sys, t, 0.5 * (th.t1 + t), 808);
    Outcome {
        pass: rep.pass && rep.split_error < 1e-12,
        detail: format!(
            "eta = {:.4}: lhs {:.3e} <= C rhs = {:.3e} x {:.3e}; q = v1 + v2 to {:.1e}",
            rep.eta, rep.lhs, rep.constant, rep.rhs, rep.split_error
        ),
    }
}

/// Source bound with an active newborn source: eta = 0 on the default
/// geometry and on the smoke geometry.
fn source_bound_active() -> Outcome {
    let sys = default_system();
    let a = source_bound_on(&sys, 1.35, 0.0, 809);
    let p = ModelParams::smoke();
    let g = GridSpec::new(15, 1.0 / 16.0, p.max_age, p.max_size).unwrap();
    let smoke = System::new(&p, &g).unwrap();
    let b = source_bound_on(&smoke, 1.5, 0.25, 810);
    Outcome {
        pass: a.pass && b.pass && a.lhs > 0.0 && b.lhs > 0.0,
        detail: format!(
            "default eta=0: ratio {:.3e} <= C = {:.3e}; smoke eta=0.25: ratio {:.3e} <= C = {:.3e}",
            a.ratio(),
            a.constant,
            b.ratio(),
            b.constant
        ),
    }
}

fn dissipation_positivity() -> Outcome {
    let p = ModelParams::default();
    let g = GridSpec::new(NX, DELTA, p.max_age, p.max_size).unwrap();
    let steps = g.steps_for(1.35).unwrap();
    let zero = System::new(&p.clone().with_zero_fertility(), &g).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let y0 = Field3::random_uniform(&g, &mut rng, -1.0, 1.0);
    let norms = zero.simulate(&y0, None, steps).unwrap().norms;
    let worst_growth = norms
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::NEG_INFINITY, f64::max);

    let sys = System::new(&p, &g).unwrap();
    let y0 = Field3::random_uniform(&g, &mut rng, 0.0, 1.0);
    let u = random_control(&sys, steps, &mut rng, 0.0, 1.0);
    let mut min = f64::INFINITY;
    sys.simulate_with(&y0, Some(&u), steps, |_, y| min = min.min(y.min()))
        .unwrap();
    Outcome {
        pass: worst_growth <= 0.0 && min >= -1e-14,
        detail: format!(
            "max norm increment {worst_growth:.3e} over {steps} steps (<= 0); min value {min:.3e} (>= -1e-14)"
        ),
    }
}

fn main() {
    type Criterion = (&'static str, fn() -> Outcome, Duration);
    let criteria: [Criterion; 11] = [
        ("1 operator correctness", operator_correctness, Duration::from_secs(1)),
        ("2 duality", duality, Duration::from_secs(60)),
        ("3 characteristics vs stepper", characteristics_refinement, Duration::from_secs(300)),
        ("4 vanishing region", vanishing_region, Duration::from_secs(60)),
        ("5 gramian", gramian_checks, Duration::from_secs(120)),
        ("6 null control", null_control, Duration::from_secs(900)),
        ("6b null control with nonzero drift", null_control_nontrivial, Duration::from_secs(900)),
        ("7 threshold scan", threshold, Duration::from_secs(1800)),
        ("8 newborn-source bound", source_bound, Duration::from_secs(120)),
        ("8b newborn-source bound, active source", source_bound_active, Duration::from_secs(120)),
        ("9 dissipation and positivity", dissipation_positivity, Duration::from_secs(60)),
    ];
    let mut failed = 0;
    for (name, run, limit) in criteria {
        let start = Instant::now();
        let out = run();
        let took = start.elapsed();
        let pass = out.pass && took <= limit;
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {name}: {} ({}; {:.2}s, limit {}s)",
            if pass { "PASS" } else { "FAIL" },
            out.detail,
            took.as_secs_f64(),
            limit.as_secs()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
