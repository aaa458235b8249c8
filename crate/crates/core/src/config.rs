//! Run configuration in TOML.
//!
//! ```toml
//! T = 1.35          # horizon, default 1.5 * T*
//! seed = 7          # default 0
//!
//! [model]           # required: A, S, a_hat
//! A = 2.0
//! S = 1.0
//! a_hat = 1.5
//! mu1_c = 0.5       # default 0.5
//! mu2_c = 0.5       # default 0.5
//! k_alpha = 1.0     # default 1.0
//! b_amp = 1.0       # default 1.0
//! beta_kind = "bump" # "bump" (default) or "step"
//! beta_amp = 2.0    # default 2.0
//! beta_onset = 1.5  # default a_hat
//!
//! [control]         # all keys required
//! l1 = 0.3
//! l2 = 0.7
//! a1 = 0.2
//! a2 = 1.5
//! s1 = 0.1
//! s2 = 0.9
//!
//! [grid]            # all keys required
//! nx = 33
//! delta = 0.041666666666666664
//!
//! [hum]             # optional
//! epsilon = 1e-4
//! cg_tol = 1e-6
//! cg_max_iters = 200
//!
//! [scan]            # optional
//! T_list = [0.45, 0.81, 0.99, 1.35, 1.8]  # default {0.5,0.9,1.1,1.5,2} * T*
//! n_samples = 8
//! power_iters = 8
//!
//! [io]              # optional
//! output_dir = "out"
//! snapshot_every = 0  # 0 disables state snapshots
//! ```
//!
//! Unknown keys and duplicate keys are parse errors.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::hum::HumSettings;
use crate::model::{thresholds, ControlRegion, Diffusion, Fertility, ModelParams};
use crate::weighted_grid::GridSpec;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(rename = "T")]
    horizon: Option<f64>,
    seed: Option<u64>,
    model: RawModel,
    control: RawControl,
    grid: RawGrid,
    hum: Option<RawHum>,
    scan: Option<RawScan>,
    io: Option<RawIo>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    #[serde(rename = "A")]
    max_age: f64,
    #[serde(rename = "S")]
    max_size: f64,
    a_hat: f64,
    mu1_c: Option<f64>,
    mu2_c: Option<f64>,
    k_alpha: Option<f64>,
    b_amp: Option<f64>,
    beta_kind: Option<String>,
    beta_amp: Option<f64>,
    beta_onset: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawControl {
    l1: f64,
    l2: f64,
    a1: f64,
    a2: f64,
    s1: f64,
    s2: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrid {
    nx: usize,
    delta: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHum {
    epsilon: Option<f64>,
    cg_tol: Option<f64>,
    cg_max_iters: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScan {
    #[serde(rename = "T_list")]
    t_list: Option<Vec<f64>>,
    n_samples: Option<usize>,
    power_iters: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawIo {
    output_dir: Option<PathBuf>,
    snapshot_every: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanSettings {
    pub t_list: Vec<f64>,
    pub n_samples: usize,
    pub power_iters: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IoSettings {
    /// Relative paths are taken from the working directory.
    pub output_dir: PathBuf,
    pub snapshot_every: usize,
}

/// Validated configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub params: ModelParams,
    pub grid: GridSpec,
    pub horizon: f64,
    pub seed: u64,
    pub hum: HumSettings,
    pub scan: ScanSettings,
    pub io: IoSettings,
    /// Original file contents, hashed into the run manifest.
    pub source: String,
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::ConfigMissing(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    parse_config_str(&text)
}

fn invalid(e: Error) -> Error {
    match e {
        Error::ConfigInvalid(_) => e,
        other => Error::ConfigInvalid(other.to_string()),
    }
}

pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
    let m = &raw.model;
    let onset = m.beta_onset.unwrap_or(m.a_hat);
    let amplitude = m.beta_amp.unwrap_or(2.0);
    let fertility = match m.beta_kind.as_deref().unwrap_or("bump") {
        "bump" => Fertility::Bump { amplitude, onset },
        "step" => Fertility::Step { amplitude, onset },
        other => {
            return Err(Error::ConfigInvalid(format!(
                "model.beta_kind = `{other}`; expected \"bump\" or \"step\""
            )))
        }
    };
    let c = &raw.control;
    let params = ModelParams {
        max_age: m.max_age,
        max_size: m.max_size,
        a_hat: m.a_hat,
        fertility,
        mu1_c: m.mu1_c.unwrap_or(0.5),
        mu2_c: m.mu2_c.unwrap_or(0.5),
        diffusion: Diffusion::Degenerate {
            alpha: m.k_alpha.unwrap_or(1.0),
        },
        b_amp: m.b_amp.unwrap_or(1.0),
        control: ControlRegion {
            l1: c.l1,
            l2: c.l2,
            a1: c.a1,
            a2: c.a2,
            s1: c.s1,
            s2: c.s2,
        },
    };
    params.validate().map_err(invalid)?;
    let grid = GridSpec::new(raw.grid.nx, raw.grid.delta, params.max_age, params.max_size).map_err(invalid)?;
    let t_star = thresholds(&params).t_star;

    let horizon = raw.horizon.unwrap_or(1.5 * t_star);
    grid.steps_for(horizon).map_err(invalid)?;

    let hum = raw
        .hum
        .map(|h| {
            let d = HumSettings::default();
            HumSettings {
                epsilon: h.epsilon.unwrap_or(d.epsilon),
                cg_tol: h.cg_tol.unwrap_or(d.cg_tol),
                cg_max_iters: h.cg_max_iters.unwrap_or(d.cg_max_iters),
            }
        })
        .unwrap_or_default();
    hum.validate().map_err(invalid)?;

    let default_list: Vec<f64> = [0.5, 0.9, 1.1, 1.5, 2.0].iter().map(|f| f * t_star).collect();
    let scan = match raw.scan {
        Some(s) => ScanSettings {
            t_list: s.t_list.unwrap_or(default_list),
            n_samples: s.n_samples.unwrap_or(8),
            power_iters: s.power_iters.unwrap_or(8),
        },
        None => ScanSettings {
            t_list: default_list,
            n_samples: 8,
            power_iters: 8,
        },
    };
    if scan.t_list.is_empty() || scan.t_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::ConfigInvalid("scan.T_list must be non-empty and strictly increasing".into()));
    }
    for &t in &scan.t_list {
        grid.steps_for(t).map_err(invalid)?;
    }
    if scan.n_samples == 0 {
        return Err(Error::ConfigInvalid("scan.n_samples must be >= 1".into()));
    }

    let io = IoSettings {
        output_dir: raw
            .io
            .as_ref()
            .and_then(|i| i.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out")),
        snapshot_every: raw.io.as_ref().and_then(|i| i.snapshot_every).unwrap_or(0),
    };

    Ok(RunConfig {
        params,
        grid,
        horizon,
        seed: raw.seed.unwrap_or(0),
        hum,
        scan,
        io,
        source: text.to_string(),
    })
}
