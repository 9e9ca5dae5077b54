//! Run orchestration: worker pool, ledger, summary and manifest.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use lorentz_core::{make_constants, ModelConstants};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::output::{FileEntry, OutputSet};
use crate::pipelines;

pub const LEDGER_FILE: &str = "ledger.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const TRAJECTORIES_FILE: &str = "trajectories.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

pub const BUILD_ID: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub metric: String,
    pub backend: String,
    pub d: usize,
    pub gamma: f64,
    pub n_or_t: f64,
    pub value: f64,
    pub stderr: Option<f64>,
    pub seed: u64,
}

pub const LEDGER_HEADER: &str = "metric,backend,d,gamma,n_or_t,value,stderr,seed";

pub fn ledger_csv(rows: &[LedgerRow]) -> String {
    let mut s = String::from(LEDGER_HEADER);
    s.push('\n');
    for r in rows {
        let stderr = r.stderr.map(|e| e.to_string()).unwrap_or_default();
        writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.metric, r.backend, r.d, r.gamma, r.n_or_t, r.value, stderr, r.seed
        )
        .unwrap();
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

/// Everything a mode produces, before it touches the disk.
#[derive(Debug, Clone, Default)]
pub struct ModeOutput {
    pub ledger: Vec<LedgerRow>,
    pub summary: serde_json::Map<String, serde_json::Value>,
    pub trajectories: String,
    /// Further files as `(relative path, bytes)`.
    pub extra: Vec<(String, Vec<u8>)>,
    pub stages: Vec<StageTiming>,
}

impl ModeOutput {
    pub fn rows<'a>(&'a self, metric: &'a str) -> impl Iterator<Item = &'a LedgerRow> {
        self.ledger.iter().filter(move |r| r.metric == metric)
    }

    pub fn row(&self, metric: &str, n_or_t: f64) -> Option<&LedgerRow> {
        self.ledger.iter().find(|r| r.metric == metric && r.n_or_t == n_or_t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub constants: ModelConstants,
    pub build: String,
    pub started_unix: u64,
    pub wall_clock_seconds: f64,
    pub stages: Vec<StageTiming>,
    pub output_dir: PathBuf,
    pub files: Vec<FileEntry>,
}

/// Shared state of one run.
pub struct Context {
    pub config: ExperimentConfig,
    pub constants: ModelConstants,
    pool: rayon::ThreadPool,
    stages: Vec<StageTiming>,
}

impl Context {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let pool = rayon::ThreadPoolBuilder::new().num_threads(config.workers).build()?;
        Ok(Self {
            config: config.clone(),
            constants: make_constants(config.d)?,
            pool,
            stages: Vec::new(),
        })
    }

    /// `f(0), ..., f(count - 1)` on the pool, returned in index order.
    pub fn par_map<T, F>(&self, count: usize, f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(u64) -> Result<T> + Sync,
    {
        self.pool
            .install(|| (0..count as u64).into_par_iter().map(&f).collect::<Result<Vec<T>>>())
    }

    pub fn timed<T>(&mut self, stage: impl Into<String>, f: impl FnOnce(&Self) -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f(self)?;
        self.stages.push(StageTiming {
            stage: stage.into(),
            seconds: start.elapsed().as_secs_f64(),
        });
        Ok(out)
    }

    pub fn row(
        &self,
        metric: impl Into<String>,
        backend: &str,
        n_or_t: f64,
        value: f64,
        stderr: Option<f64>,
    ) -> LedgerRow {
        LedgerRow {
            metric: metric.into(),
            backend: backend.to_string(),
            d: self.config.d,
            gamma: self.config.gamma,
            n_or_t,
            value,
            stderr,
            seed: self.config.seed,
        }
    }

    pub fn take_stages(&mut self) -> Vec<StageTiming> {
        std::mem::take(&mut self.stages)
    }
}

/// Run the configured pipeline in memory.
pub fn execute(config: &ExperimentConfig) -> Result<ModeOutput> {
    let mut ctx = Context::new(config)?;
    let mut out = pipelines::dispatch(&mut ctx)?;
    out.summary.insert("mode".into(), config.mode.name().into());
    out.summary.insert("d".into(), config.d.into());
    out.summary.insert("seed".into(), config.seed.into());
    out.summary
        .insert("constants".into(), serde_json::to_value(ctx.constants)?);
    out.stages = ctx.take_stages();
    Ok(out)
}

/// Run the pipeline and write ledger, summary, trajectories, extras and the
/// manifest under the resolved output directory. Everything except the
/// manifest is a pure function of the configuration.
pub fn run(config: &ExperimentConfig) -> Result<RunManifest> {
    let started = Instant::now();
    let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let out = execute(config)?;
    let dir = config.resolved_output_dir();
    let mut files = OutputSet::new(&dir);
    let write_start = Instant::now();
    files.write(LEDGER_FILE, ledger_csv(&out.ledger).as_bytes())?;
    files.write_json(SUMMARY_FILE, &out.summary)?;
    files.write(TRAJECTORIES_FILE, out.trajectories.as_bytes())?;
    for (rel, bytes) in &out.extra {
        files.write(rel, bytes)?;
    }
    let mut stages = out.stages;
    stages.push(StageTiming {
        stage: "write".into(),
        seconds: write_start.elapsed().as_secs_f64(),
    });
    let manifest = RunManifest {
        config: config.clone(),
        constants: make_constants(config.d)?,
        build: BUILD_ID.to_string(),
        started_unix,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        stages,
        output_dir: dir,
        files: files.files().to_vec(),
    };
    files.write_json(MANIFEST_FILE, &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Mode;

    #[test]
    fn ledger_leaves_missing_errors_blank() {
        let ctx = Context::new(&{
            let mut c = ExperimentConfig::new(Mode::Limit, 100, 3, "x");
            c.n_grid = vec![10];
            c
        })
        .unwrap();
        let csv = ledger_csv(&[
            ctx.row("a", "surrogate_iid", 10.0, 0.5, None),
            ctx.row("b", "surrogate_iid", 10.0, 1.0, Some(0.1)),
        ]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], LEDGER_HEADER);
        assert_eq!(lines[1], "a,surrogate_iid,2,0.5,10,0.5,,3");
        assert_eq!(lines[2], "b,surrogate_iid,2,0.5,10,1,0.1,3");
    }

    #[test]
    fn par_map_keeps_index_order() {
        let mut c = ExperimentConfig::new(Mode::Limit, 100, 3, "x");
        c.n_grid = vec![10];
        c.workers = 4;
        let ctx = Context::new(&c).unwrap();
        let v = ctx.par_map(1000, |i| Ok(i * 2)).unwrap();
        assert!(v.iter().enumerate().all(|(i, &x)| x == 2 * i as u64));
    }
}
