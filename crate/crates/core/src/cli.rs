//! Command dispatch and artifact emission.
//!
//! Every command writes into `<output_dir>/<command>/` and finishes with a
//! `manifest.txt` of `key=value` lines. CSV artifacts depend only on the
//! configuration and the seed.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::adjoint::{
    adjoint_solve, newborn_discrepancy, region_csv, vanishing_region_check, DuhamelRule, StateStorage,
};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::forward::System;
use crate::hum::{
    control_csv, observability_cost, propo1_bound_check, synthesize_control, threshold_scan, write_text,
    HumProblem, SolveStatus,
};
use crate::model::{thresholds, validate_assumptions};
use crate::weighted_grid::Field3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Validate,
    Simulate,
    Adjoint,
    CharCheck,
    VanishCheck,
    Hum,
    ObsScan,
    ThresholdScan,
    Propo1Check,
}

impl Command {
    pub const ALL: [Command; 9] = [
        Command::Validate,
        Command::Simulate,
        Command::Adjoint,
        Command::CharCheck,
        Command::VanishCheck,
        Command::Hum,
        Command::ObsScan,
        Command::ThresholdScan,
        Command::Propo1Check,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Validate => "validate",
            Command::Simulate => "simulate",
            Command::Adjoint => "adjoint",
            Command::CharCheck => "char-check",
            Command::VanishCheck => "vanish-check",
            Command::Hum => "hum",
            Command::ObsScan => "obs-scan",
            Command::ThresholdScan => "threshold-scan",
            Command::Propo1Check => "propo1-check",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads; `None` uses all cores.
    pub jobs: Option<usize>,
    /// Overrides the config seed.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    /// Whether the command's own check passed (always true for commands
    /// that only produce data).
    pub pass: bool,
    pub summary: String,
    pub output_dir: PathBuf,
    pub artifacts: Vec<PathBuf>,
}

struct Artifacts {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Artifacts {
    fn new(dir: PathBuf) -> Result<Self> {
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { dir, files: Vec::new() })
    }

    fn text(&mut self, name: &str, text: &str) -> Result<()> {
        let p = self.dir.join(name);
        write_text(&p, text)?;
        self.files.push(p);
        Ok(())
    }

    fn field(&mut self, name: &str, f: &Field3) -> Result<()> {
        let p = self.dir.join(name);
        f.write_csv(&p)?;
        self.files.push(p);
        Ok(())
    }
}

pub fn config_hash(cfg: &RunConfig) -> String {
    let digest = Sha256::digest(cfg.source.as_bytes());
    digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn random_seed_field(sys: &System, seed: u64, stream: u64) -> Field3 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    Field3::random_uniform(sys.grid(), &mut rng, 0.0, 1.0)
}

/// Runs `cmd` and writes its artifacts and manifest.
pub fn run_command(cmd: Command, cfg: &RunConfig, opts: &RunOptions) -> Result<RunOutcome> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = opts.jobs {
        builder = builder.num_threads(j.max(1));
    }
    let pool = builder
        .build()
        .map_err(|e| Error::ConfigInvalid(format!("thread pool: {e}")))?;
    pool.install(|| run_in_pool(cmd, cfg, opts))
}

fn run_in_pool(cmd: Command, cfg: &RunConfig, opts: &RunOptions) -> Result<RunOutcome> {
    let start = Instant::now();
    let seed = opts.seed.unwrap_or(cfg.seed);
    let mut art = Artifacts::new(cfg.io.output_dir.join(cmd.name()))?;
    let sys = System::new(&cfg.params, &cfg.grid)?;
    let g = *sys.grid();
    let steps = g.steps_for(cfg.horizon)?;
    let th = thresholds(&cfg.params);

    let (pass, summary) = match cmd {
        Command::Validate => {
            let rep = validate_assumptions(&cfg.params, 16);
            art.text("assumptions.csv", &rep.to_csv())?;
            art.text(
                "thresholds.csv",
                &format!("T0,T1,T_star\n{},{},{}\n", th.t0, th.t1, th.t_star),
            )?;
            let failed: Vec<&str> = rep.checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
            (
                rep.pass(),
                if failed.is_empty() {
                    format!("all {} assumption checks pass; T* = {}", rep.checks.len(), th.t_star)
                } else {
                    format!("failed checks: {}", failed.join(", "))
                },
            )
        }
        Command::Simulate => {
            let y0 = random_seed_field(&sys, seed, 0);
            let every = cfg.io.snapshot_every;
            let mut snaps = Vec::new();
            let stats = sys.simulate_with(&y0, None, steps, |n, y| {
                if every > 0 && n % every == 0 {
                    snaps.push((n, y.clone()));
                }
            })?;
            let mut csv = String::from("step,t,norm,newborn\n");
            for (n, v) in stats.norms.iter().enumerate() {
                let nb = if n == 0 { 0.0 } else { stats.newborn_flux[n - 1] };
                let _ = writeln!(csv, "{},{},{},{}", n, g.time(n), v, nb);
            }
            art.text("norms.csv", &csv)?;
            art.field("initial_state.csv", &y0)?;
            art.field("final_state.csv", &stats.final_state)?;
            for (n, y) in &snaps {
                art.field(&format!("state_{n:05}.csv"), y)?;
            }
            (
                true,
                format!(
                    "{steps} steps; ||y(0)|| = {:.6e}, ||y(T)|| = {:.6e}",
                    stats.norms[0],
                    stats.norms[steps]
                ),
            )
        }
        Command::Adjoint => {
            let q0 = random_seed_field(&sys, seed, 1);
            let traj = adjoint_solve(&sys, &q0, steps, StateStorage::None)?;
            let mut csv = String::from("step,t,norm\n");
            for (k, v) in traj.norms().iter().enumerate() {
                let _ = writeln!(csv, "{},{},{}", k, g.time(k), v);
            }
            art.text("adjoint_norms.csv", &csv)?;
            art.text("newborn.csv", &traj.newborn_csv())?;
            art.text("regions.csv", &region_csv(&g, steps))?;
            art.field("seed_state.csv", &q0)?;
            art.field("final_state.csv", traj.final_state())?;
            (
                true,
                format!("{steps} adjoint steps; ||q(T)|| = {:.6e}", traj.norms()[steps]),
            )
        }
        Command::CharCheck => {
            let q0 = random_seed_field(&sys, seed, 1);
            let traj = adjoint_solve(&sys, &q0, steps, StateStorage::None)?;
            let left = newborn_discrepancy(&sys, &q0, &traj, DuhamelRule::LeftRectangle)?;
            let trap = newborn_discrepancy(&sys, &q0, &traj, DuhamelRule::Trapezoid)?;
            art.text(
                "char_check.csv",
                &format!("rule,max_discrepancy\nleft_rectangle,{left}\ntrapezoid,{trap}\n"),
            )?;
            (
                true,
                format!("newborn-plane discrepancy: left rectangle {left:.3e}, trapezoid {trap:.3e}"),
            )
        }
        Command::VanishCheck => {
            let q0 = random_seed_field(&sys, seed, 1);
            let traj = adjoint_solve(&sys, &q0, steps, StateStorage::None)?;
            let rep = vanishing_region_check(&sys, &traj, 1e-8);
            art.text("vanishing.csv", &rep.to_csv())?;
            (
                rep.pass,
                format!(
                    "sup over ({}, {}) x ({}, {}] = {:.3e} (tol {:.0e})",
                    rep.region.s_lo, rep.region.s_hi, rep.region.t_lo, rep.region.t_hi, rep.region.sup, rep.tol
                ),
            )
        }
        Command::Hum => {
            let y0 = random_seed_field(&sys, seed, 0);
            let res = synthesize_control(&HumProblem {
                system: &sys,
                y0,
                steps,
                settings: cfg.hum,
            })?;
            art.text("hum_metrics.csv", &res.metrics_csv())?;
            art.text("hum_residuals.csv", &res.residuals_csv())?;
            art.text("control.csv", &control_csv(&sys, &res.control))?;
            art.field("q0_opt.csv", &res.q0_opt)?;
            art.field("final_state.csv", &res.final_state)?;
            (
                res.status == SolveStatus::Converged,
                format!(
                    "final_norm = {:.6e} (uncontrolled {:.6e}), {} Gramian applications, {}",
                    res.final_norm,
                    res.uncontrolled_norm,
                    res.gramian_applications,
                    res.status.as_str()
                ),
            )
        }
        Command::ObsScan => {
            let est = observability_cost(&sys, steps, cfg.scan.n_samples, cfg.scan.power_iters, seed)?;
            art.text(
                "obs_cost.csv",
                &format!(
                    "T,cost,sample_cost,iterations,sentinel\n{},{},{},{},{}\n",
                    cfg.horizon, est.cost, est.sample_cost, est.iterations, est.sentinel
                ),
            )?;
            (true, format!("cost estimate at T = {}: {:.6e}", cfg.horizon, est.cost))
        }
        Command::ThresholdScan => {
            let scan = threshold_scan(&sys, &cfg.scan.t_list, cfg.scan.n_samples, cfg.scan.power_iters, seed)?;
            art.text("scan.csv", &scan.to_csv())?;
            (true, format!("{} horizons scanned around T* = {}", scan.rows.len(), th.t_star))
        }
        Command::Propo1Check => {
            let q0 = random_seed_field(&sys, seed, 1);
            let eta_step = ((0.5 * (th.t1 + g.time(steps))) / g.delta).round() as usize;
            let rep = propo1_bound_check(&sys, &q0, steps, eta_step.min(steps))?;
            art.text("propo1.csv", &rep.to_csv())?;
            (
                rep.pass,
                format!(
                    "lhs {:.3e} <= C * rhs = {:.3e} * {:.3e}: {}",
                    rep.lhs, rep.constant, rep.rhs, rep.pass
                ),
            )
        }
    };

    let mut manifest = String::new();
    let _ = writeln!(manifest, "command={}", cmd.name());
    let _ = writeln!(manifest, "config_hash=sha256:{}", config_hash(cfg));
    let _ = writeln!(manifest, "seed={seed}");
    let _ = writeln!(manifest, "popctl_version={}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(manifest, "threads={}", rayon::current_num_threads());
    let _ = writeln!(manifest, "nx={}", g.nx);
    let _ = writeln!(manifest, "delta={}", g.delta);
    let _ = writeln!(manifest, "horizon={}", cfg.horizon);
    let _ = writeln!(manifest, "steps={steps}");
    let _ = writeln!(manifest, "pass={pass}");
    let names: Vec<String> = art
        .files
        .iter()
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect();
    let _ = writeln!(manifest, "artifacts={}", names.join(","));
    let _ = writeln!(manifest, "wall_time_s={:.3}", start.elapsed().as_secs_f64());
    art.text("manifest.txt", &manifest)?;
    write_text(&art.dir.join("config.toml"), &cfg.source)?;
    art.files.push(art.dir.join("config.toml"));

    Ok(RunOutcome {
        pass,
        summary,
        output_dir: art.dir.clone(),
        artifacts: art.files,
    })
}

/// Reads back a `key=value` manifest.
pub fn read_manifest(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect())
}
