//! Command-line front end for `int8flow`: quantization-error sweeps, kernel
//! counter audits, training sweeps and a self-test.
//!
//! Every subcommand reads an optional versioned JSON config, applies the
//! command-line overrides, validates the result and only then computes.
//! Tabular output is CSV with fixed headers and contains no timings; wall
//! clock measurements go to `manifest.json` next to the CSV files.

pub mod bench;
pub mod config;
pub mod quant_error;
pub mod selftest;
pub mod train;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use int8flow::qgemm::ExecMode;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use config::{BenchConfig, QuantErrorConfig, SelftestConfig, TrainSweepConfig, CONFIG_VERSION};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Subcommand {
    QuantError,
    Bench,
    Train,
    Selftest,
}

/// Everything one invocation needs.
#[derive(Clone, Debug)]
pub struct RunSpec {
    pub subcommand: Subcommand,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub mode: Option<ExecMode>,
    /// Raw scheme name; checked against the subcommand's config.
    pub scheme: Option<String>,
    pub block_size: Option<usize>,
    pub allow_divergence: bool,
    pub resume: bool,
    /// Stop every training run after this step (a checkpoint is written).
    pub stop_after: Option<usize>,
}

impl RunSpec {
    pub fn new(subcommand: Subcommand, out: impl Into<PathBuf>) -> Self {
        Self {
            subcommand,
            config: None,
            out: out.into(),
            seed: None,
            threads: None,
            mode: None,
            scheme: None,
            block_size: None,
            allow_divergence: false,
            resume: false,
            stop_after: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("{count} run(s) diverged: {runs}")]
    Diverged { count: usize, runs: String },

    #[error("self-test failed: {0}")]
    SelftestFailed(String),

    #[error("check failed: {0}")]
    Check(String),

    #[error(transparent)]
    Core(#[from] int8flow::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Diverged { .. } => 3,
            CliError::SelftestFailed(_) => 4,
            _ => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// What a subcommand produced.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    /// Human-readable lines for stdout.
    pub report: Vec<String>,
}

/// Validates the spec, runs the subcommand inside a pool of the requested
/// size and writes `manifest.json`.
pub fn run(spec: &RunSpec) -> CliResult<Outcome> {
    let prepared = Prepared::load(spec)?;
    prepare_out_dir(&spec.out)?;
    let pool = {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(n) = spec.threads {
            b = b.num_threads(n);
        }
        b.build().map_err(|e| CliError::Config(format!("thread pool: {e}")))?
    };
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let clock = Instant::now();
    let mut timings = Vec::new();
    let result = pool.install(|| match &prepared {
        Prepared::QuantError(c) => quant_error::cmd_quant_error(c, &spec.out),
        Prepared::Bench(c) => bench::cmd_bench(c, &spec.out, &mut timings),
        Prepared::Train(c) => train::cmd_train(c, spec, &mut timings),
        Prepared::Selftest(c) => selftest::cmd_selftest(c, &spec.out, &mut timings),
    });

    let config_json = prepared.to_json()?;
    let manifest = Manifest {
        tool: "int8flow",
        tool_version: env!("CARGO_PKG_VERSION"),
        subcommand: spec.subcommand,
        config_sha256: hex_digest(config_json.to_string().as_bytes()),
        config: config_json,
        code_version: prepared.code_version(),
        seed: spec.seed,
        threads: pool.current_num_threads(),
        started_unix: started,
        elapsed_s: clock.elapsed().as_secs_f64(),
        status: match &result {
            Ok(_) => "ok".to_string(),
            Err(e) => e.to_string(),
        },
        timings,
    };
    fs::write(spec.out.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    result
}

enum Prepared {
    QuantError(QuantErrorConfig),
    Bench(BenchConfig),
    Train(TrainSweepConfig),
    Selftest(SelftestConfig),
}

impl Prepared {
    fn load(spec: &RunSpec) -> CliResult<Self> {
        let text = match &spec.config {
            Some(p) => Some(
                fs::read_to_string(p).map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?,
            ),
            None => None,
        };
        let text = text.as_deref();
        if spec.threads == Some(0) {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        Ok(match spec.subcommand {
            Subcommand::QuantError => Prepared::QuantError(QuantErrorConfig::resolve(text, spec)?),
            Subcommand::Bench => Prepared::Bench(BenchConfig::resolve(text, spec)?),
            Subcommand::Train => Prepared::Train(TrainSweepConfig::resolve(text, spec)?),
            Subcommand::Selftest => Prepared::Selftest(SelftestConfig::resolve(text, spec)?),
        })
    }

    fn to_json(&self) -> CliResult<serde_json::Value> {
        Ok(match self {
            Prepared::QuantError(c) => serde_json::to_value(c)?,
            Prepared::Bench(c) => serde_json::to_value(c)?,
            Prepared::Train(c) => serde_json::to_value(c)?,
            Prepared::Selftest(c) => serde_json::to_value(c)?,
        })
    }

    fn code_version(&self) -> Option<String> {
        match self {
            Prepared::QuantError(c) => c.code_version.clone(),
            Prepared::Bench(c) => c.code_version.clone(),
            Prepared::Train(c) => c.code_version.clone(),
            Prepared::Selftest(c) => c.code_version.clone(),
        }
    }
}

/// One wall-clock measurement recorded in the manifest.
#[derive(Clone, Debug, Serialize)]
pub struct Timing {
    pub name: String,
    pub seconds: f64,
}

#[derive(Serialize)]
struct Manifest {
    tool: &'static str,
    tool_version: &'static str,
    subcommand: Subcommand,
    config: serde_json::Value,
    config_sha256: String,
    code_version: Option<String>,
    seed: Option<u64>,
    threads: usize,
    started_unix: u64,
    elapsed_s: f64,
    status: String,
    timings: Vec<Timing>,
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn prepare_out_dir(out: &Path) -> CliResult<()> {
    fs::create_dir_all(out).map_err(|e| CliError::Config(format!("cannot create {}: {e}", out.display())))?;
    let probe = out.join(".int8flow-write-probe");
    fs::write(&probe, b"").map_err(|e| CliError::Config(format!("{} is not writable: {e}", out.display())))?;
    fs::remove_file(probe)?;
    Ok(())
}

/// Serializes `rows` to `path` with a header line, even when `rows` is empty.
pub(crate) fn write_csv<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> CliResult<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
