use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lorentz_harness::config::{ExperimentConfig, Mode, SCHEMA_VERSION};
use lorentz_harness::{run, HarnessError};

#[derive(Parser)]
#[command(name = "lorentz", version, about = "Reproducible Lorentz-gas experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run whatever mode the config file names.
    Run(Overrides),
    /// Billiard flights: mean free path and tail.
    Billiard(Overrides),
    /// Limit-chain displacements and truncated moments.
    Limit(Overrides),
    /// Distances of the normalised displacement to the normal.
    Distances(Overrides),
    /// Stein solutions, bounds and exchangeable-pair checks.
    SteinCheck(Overrides),
    /// Distances plus rate-model fits.
    Rates(Overrides),
    /// Renewal counter and continuous-time comparison.
    Renewal(Overrides),
}

/// Flags override the keys of the config file.
#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    r: Option<f64>,
    #[arg(long)]
    scaling: Option<String>,
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    resampling: Option<String>,
    #[arg(long)]
    table_flights: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    n_grid: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    t_grid: Option<Vec<f64>>,
    #[arg(long)]
    flights: Option<usize>,
    #[arg(long)]
    replicas: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    n_proj: Option<usize>,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    grid_points: Option<usize>,
    #[arg(long)]
    max_lag: Option<usize>,
    #[arg(long)]
    moment_draws: Option<usize>,
    #[arg(long)]
    battery_seed: Option<u64>,
}

fn int(v: impl TryInto<i64>) -> Result<toml::Value, HarnessError> {
    v.try_into()
        .map(toml::Value::Integer)
        .map_err(|_| HarnessError::config("integer flag out of range"))
}

impl Overrides {
    fn into_table(self, mode: Option<Mode>) -> Result<toml::Table, HarnessError> {
        let mut t = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => toml::Table::new(),
        };
        t.entry("schema_version")
            .or_insert(toml::Value::Integer(SCHEMA_VERSION.into()));
        if let Some(m) = mode {
            t.insert("mode".into(), m.name().into());
        }
        let mut set = |k: &str, v: Option<toml::Value>| {
            if let Some(v) = v {
                t.insert(k.into(), v);
            }
        };
        set("d", self.d.map(int).transpose()?);
        set("r", self.r.map(toml::Value::Float));
        set("scaling", self.scaling.map(toml::Value::String));
        set("backend", self.backend.map(toml::Value::String));
        set("resampling", self.resampling.map(toml::Value::String));
        set("table_flights", self.table_flights.map(int).transpose()?);
        set("gamma", self.gamma.map(toml::Value::Float));
        if let Some(g) = self.n_grid {
            set(
                "n_grid",
                Some(toml::Value::Array(g.into_iter().map(int).collect::<Result<_, _>>()?)),
            );
        }
        if let Some(g) = self.t_grid {
            set(
                "t_grid",
                Some(toml::Value::Array(g.into_iter().map(toml::Value::Float).collect())),
            );
        }
        set("flights", self.flights.map(int).transpose()?);
        set("replicas", self.replicas.map(int).transpose()?);
        set("seed", self.seed.map(int).transpose()?);
        set("workers", self.workers.map(int).transpose()?);
        set(
            "output_dir",
            self.output_dir.map(|p| p.to_string_lossy().into_owned().into()),
        );
        set("n_proj", self.n_proj.map(int).transpose()?);
        set("bins", self.bins.map(int).transpose()?);
        set("grid_points", self.grid_points.map(int).transpose()?);
        set("max_lag", self.max_lag.map(int).transpose()?);
        set("moment_draws", self.moment_draws.map(int).transpose()?);
        set("battery_seed", self.battery_seed.map(int).transpose()?);
        if !t.contains_key("output_dir") {
            if let Some(toml::Value::String(m)) = t.get("mode") {
                let dir = format!("runs/{m}");
                t.insert("output_dir".into(), dir.into());
            }
        }
        Ok(t)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (mode, overrides) = match cli.command {
        Command::Run(o) => (None, o),
        Command::Billiard(o) => (Some(Mode::Billiard), o),
        Command::Limit(o) => (Some(Mode::Limit), o),
        Command::Distances(o) => (Some(Mode::Distances), o),
        Command::SteinCheck(o) => (Some(Mode::SteinCheck), o),
        Command::Rates(o) => (Some(Mode::Rates), o),
        Command::Renewal(o) => (Some(Mode::Renewal), o),
    };
    let result = overrides
        .into_table(mode)
        .and_then(ExperimentConfig::from_table)
        .and_then(|config| run(&config));
    match result {
        Ok(manifest) => {
            println!(
                "{} finished in {:.2} s",
                manifest.config.mode, manifest.wall_clock_seconds
            );
            for f in &manifest.files {
                println!("  {}/{}  {}", manifest.output_dir.display(), f.path, &f.sha256[..16]);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
