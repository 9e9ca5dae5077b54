//! Experiment configuration: a flat TOML file with an explicit schema version.

use std::fmt;
use std::path::{Path, PathBuf};

use lorentz_core::billiard::LatticeScaling;
use lorentz_core::limit_chain::Resampling;
use lorentz_core::stats::MIN_RATIO_REPLICAS;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::streams::MAX_REPLICAS;

pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable that relocates relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "LORENTZ_OUTPUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Billiard,
    Limit,
    Distances,
    SteinCheck,
    Rates,
    Renewal,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::Billiard,
        Mode::Limit,
        Mode::Distances,
        Mode::SteinCheck,
        Mode::Rates,
        Mode::Renewal,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Mode::Billiard => "billiard",
            Mode::Limit => "limit",
            Mode::Distances => "distances",
            Mode::SteinCheck => "stein-check",
            Mode::Rates => "rates",
            Mode::Renewal => "renewal",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendChoice {
    SurrogateIid,
    /// A table harvested from a billiard run with the configured `r`.
    Empirical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub mode: Mode,
    #[serde(default = "default_d")]
    pub d: usize,
    /// Scatterer radius. Billiard mode and empirical tables only.
    #[serde(default)]
    pub r: Option<f64>,
    #[serde(default = "default_scaling")]
    pub scaling: LatticeScaling,
    #[serde(default = "default_backend")]
    pub backend: BackendChoice,
    #[serde(default = "default_resampling")]
    pub resampling: Resampling,
    /// Billiard flights harvested for an empirical table.
    #[serde(default = "default_table_flights")]
    pub table_flights: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub n_grid: Vec<usize>,
    #[serde(default)]
    pub t_grid: Vec<f64>,
    /// Flights per billiard trajectory.
    #[serde(default = "default_flights")]
    pub flights: usize,
    pub replicas: usize,
    pub seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    pub output_dir: PathBuf,
    #[serde(default = "default_n_proj")]
    pub n_proj: usize,
    #[serde(default = "default_bins")]
    pub bins: usize,
    /// Points per axis of the orthant grid on `[-3, 3]`.
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    #[serde(default = "default_max_lag")]
    pub max_lag: usize,
    /// Free-path draws for the truncated moment suite; 0 skips it.
    #[serde(default)]
    pub moment_draws: usize,
    #[serde(default = "default_battery_seed")]
    pub battery_seed: u64,
}

fn default_d() -> usize {
    2
}
fn default_scaling() -> LatticeScaling {
    LatticeScaling::BoltzmannGrad
}
fn default_backend() -> BackendChoice {
    BackendChoice::SurrogateIid
}
fn default_resampling() -> Resampling {
    Resampling::Paired
}
fn default_table_flights() -> usize {
    200_000
}
fn default_gamma() -> f64 {
    0.5
}
fn default_flights() -> usize {
    100_000
}
fn default_workers() -> usize {
    1
}
fn default_n_proj() -> usize {
    32
}
fn default_bins() -> usize {
    32
}
fn default_grid_points() -> usize {
    21
}
fn default_max_lag() -> usize {
    8
}
fn default_battery_seed() -> u64 {
    2024
}

impl ExperimentConfig {
    /// Minimal valid configuration for `mode`; grids are left for the caller.
    pub fn new(mode: Mode, replicas: usize, seed: u64, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            mode,
            d: default_d(),
            r: None,
            scaling: default_scaling(),
            backend: default_backend(),
            resampling: default_resampling(),
            table_flights: default_table_flights(),
            gamma: default_gamma(),
            n_grid: Vec::new(),
            t_grid: Vec::new(),
            flights: default_flights(),
            replicas,
            seed,
            workers: default_workers(),
            output_dir: output_dir.into(),
            n_proj: default_n_proj(),
            bins: default_bins(),
            grid_points: default_grid_points(),
            max_lag: default_max_lag(),
            moment_draws: 0,
            battery_seed: default_battery_seed(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| HarnessError::config(e.to_string()))?;
        Self::from_table(table)
    }

    pub fn from_table(table: toml::Table) -> Result<Self> {
        let config: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| HarnessError::config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<toml::Table> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        text.parse()
            .map_err(|e: toml::de::Error| HarnessError::config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Output directory after applying [`OUTPUT_ROOT_ENV`] to relative paths.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => PathBuf::from(root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }

    /// All field problems at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut bad = |field: &str, msg: String| errs.push(format!("{field}: {msg}"));
        if self.schema_version != SCHEMA_VERSION {
            bad(
                "schema_version",
                format!("{} unsupported, expected {SCHEMA_VERSION}", self.schema_version),
            );
        }
        if self.d < 2 {
            bad("d", format!("{} < 2", self.d));
        }
        if self.replicas == 0 {
            bad("replicas", "must be positive".into());
        } else if self.replicas as u64 >= MAX_REPLICAS {
            bad("replicas", format!("must be below {MAX_REPLICAS}"));
        }
        if self.workers == 0 {
            bad("workers", "must be positive".into());
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            bad("gamma", format!("{} outside (0, 1)", self.gamma));
        }
        for (field, v) in [
            ("n_proj", self.n_proj),
            ("bins", self.bins),
            ("flights", self.flights),
            ("table_flights", self.table_flights),
            ("max_lag", self.max_lag),
        ] {
            if v == 0 {
                bad(field, "must be positive".into());
            }
        }
        if self.grid_points < 2 {
            bad("grid_points", format!("{} < 2", self.grid_points));
        }
        if let Some(r) = self.r {
            if !(r > 0.0 && r < 0.5) {
                bad("r", format!("{r} outside (0, 0.5)"));
            }
        }
        let needs_r = self.mode == Mode::Billiard || self.backend == BackendChoice::Empirical;
        if needs_r && self.r.is_none() {
            bad(
                "r",
                format!("required for mode {} with backend {:?}", self.mode, self.backend),
            );
        }
        if self.mode == Mode::SteinCheck && self.backend != BackendChoice::SurrogateIid {
            bad("backend", "stein-check streams surrogate pairs only".into());
        }
        let wants_n = matches!(
            self.mode,
            Mode::Limit | Mode::Distances | Mode::Rates | Mode::SteinCheck
        );
        if wants_n {
            if self.n_grid.is_empty() {
                bad("n_grid", format!("required for mode {}", self.mode));
            }
            if self.n_grid.iter().any(|&n| n < 2) {
                bad("n_grid", "entries must be at least 2".into());
            }
            if self.n_grid.windows(2).any(|w| w[0] >= w[1]) {
                bad("n_grid", "must be sorted strictly ascending".into());
            }
        }
        if self.mode == Mode::Limit && self.replicas < MIN_RATIO_REPLICAS {
            bad("replicas", format!("limit mode needs at least {MIN_RATIO_REPLICAS}"));
        }
        if self.mode == Mode::Rates && self.n_grid.len() < 3 {
            bad("n_grid", "rate fits need at least 3 horizons".into());
        }
        if self.mode == Mode::Renewal {
            if self.t_grid.is_empty() {
                bad("t_grid", "required for mode renewal".into());
            }
            if self.t_grid.iter().any(|&t| !(t.is_finite() && t > 1.0)) {
                bad("t_grid", "entries must be finite and above 1".into());
            }
            if self.t_grid.windows(2).any(|w| w[0] >= w[1]) {
                bad("t_grid", "must be sorted strictly ascending".into());
            }
        }
        if self.output_dir.as_os_str().is_empty() {
            bad("output_dir", "must not be empty".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(HarnessError::Config(errs))
        }
    }
}
