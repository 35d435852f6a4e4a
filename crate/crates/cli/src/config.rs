//! Versioned JSON configs for every subcommand.
//!
//! A config file must be a JSON object whose `version` equals
//! [`CONFIG_VERSION`]; every other field is optional and unknown fields are
//! rejected. Without a file the built-in defaults are used.

use std::collections::HashSet;
use std::path::PathBuf;

use int8flow::qgemm::{ExecMode, TileConfig};
use int8flow::trainer::{SchemeKind, ToyTask, TrainConfig};
use int8flow::QuantScheme;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::{CliError, CliResult, RunSpec};

pub const CONFIG_VERSION: u32 = 1;

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn parse_versioned<T: DeserializeOwned + Default>(text: Option<&str>) -> CliResult<T> {
    let Some(text) = text else {
        return Ok(T::default());
    };
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| config_err(format!("invalid JSON: {e}")))?;
    match value.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == CONFIG_VERSION as u64 => {}
        Some(v) => return Err(config_err(format!("unsupported config version {v} (expected {CONFIG_VERSION})"))),
        None => return Err(config_err("config must be an object with a numeric \"version\" field")),
    }
    serde_json::from_value(value).map_err(|e| config_err(e.to_string()))
}

fn reject(present: bool, flag: &str, subcommand: &str) -> CliResult<()> {
    if present {
        return Err(config_err(format!("{flag} does not apply to {subcommand}")));
    }
    Ok(())
}

fn core_to_config(e: int8flow::Error) -> CliError {
    config_err(e.to_string())
}

/// Sweep behind the quantization-error table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantErrorConfig {
    pub version: u32,
    pub code_version: Option<String>,
    /// `[rows, cols]` pairs.
    pub sizes: Vec<[usize; 2]>,
    pub outlier_factors: Vec<f32>,
    /// Fraction of channels multiplied by the outlier factor.
    pub outlier_fraction: f64,
    /// Random matrices per (size, factor).
    pub matrices: usize,
    /// Scheme names; `per-block` uses `block`.
    pub schemes: Vec<String>,
    pub block: usize,
    pub seed: u64,
}

impl Default for QuantErrorConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            code_version: None,
            sizes: vec![[1024, 1024]],
            outlier_factors: vec![1.0, 30.0],
            outlier_fraction: 0.01,
            matrices: 4,
            schemes: ["per-tensor", "per-token", "per-channel", "per-block"].map(String::from).to_vec(),
            block: 32,
            seed: 0,
        }
    }
}

impl QuantErrorConfig {
    pub fn resolve(text: Option<&str>, spec: &RunSpec) -> CliResult<Self> {
        let mut c: Self = parse_versioned(text)?;
        reject(spec.mode.is_some(), "--mode", "quant-error")?;
        reject(spec.resume, "--resume", "quant-error")?;
        if let Some(s) = spec.seed {
            c.seed = s;
        }
        if let Some(b) = spec.block_size {
            c.block = b;
        }
        if let Some(s) = &spec.scheme {
            c.schemes = vec![s.clone()];
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> CliResult<()> {
        let schemes = self.quant_schemes()?;
        if schemes.is_empty() || self.sizes.is_empty() || self.outlier_factors.is_empty() {
            return Err(config_err("schemes, sizes and outlier_factors must be non-empty"));
        }
        if self.matrices == 0 {
            return Err(config_err("matrices must be positive"));
        }
        if !(0.0..=1.0).contains(&self.outlier_fraction) {
            return Err(config_err(format!("outlier_fraction {} outside [0, 1]", self.outlier_fraction)));
        }
        if let Some(f) = self.outlier_factors.iter().find(|f| !(f.is_finite() && **f > 0.0)) {
            return Err(config_err(format!("outlier factor {f} must be positive and finite")));
        }
        for &[r, c] in &self.sizes {
            if r == 0 || c == 0 {
                return Err(config_err(format!("size {r}x{c} is empty")));
            }
            for s in &schemes {
                if let QuantScheme::PerBlock(b) = s {
                    if r % b != 0 || c % b != 0 {
                        return Err(config_err(format!("size {r}x{c} is not a multiple of B = {b}")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn quant_schemes(&self) -> CliResult<Vec<QuantScheme>> {
        if self.block == 0 {
            return Err(config_err("block must be positive"));
        }
        self.schemes
            .iter()
            .map(|s| match s.as_str() {
                "per-block" => Ok(QuantScheme::PerBlock(self.block)),
                other => other.parse::<QuantScheme>().map_err(|_| config_err(format!("invalid scheme name {other:?}"))),
            })
            .collect()
    }
}

/// GEMM and element-wise operator audit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub version: u32,
    pub code_version: Option<String>,
    /// `[N, C, D]` for `Y = X W^T` with `X: N x C`, `W: D x C`.
    pub gemm_sizes: Vec<[usize; 3]>,
    /// `[rows, cols]` for GELU, dropout and add.
    pub elementwise_sizes: Vec<[usize; 2]>,
    pub modes: Vec<ExecMode>,
    pub block: usize,
    pub tile: Option<TileConfig>,
    pub dropout: f32,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            code_version: None,
            gemm_sizes: vec![[128, 128, 128], [256, 64, 256], [160, 96, 224], [256, 256, 256], [512, 128, 64]],
            elementwise_sizes: vec![[256, 256], [512, 128]],
            modes: vec![ExecMode::Int8DataFlow, ExecMode::QcdEmulation],
            block: 32,
            tile: None,
            dropout: 0.1,
            repeats: 3,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn resolve(text: Option<&str>, spec: &RunSpec) -> CliResult<Self> {
        let mut c: Self = parse_versioned(text)?;
        reject(spec.scheme.is_some(), "--scheme", "bench")?;
        reject(spec.resume, "--resume", "bench")?;
        if let Some(s) = spec.seed {
            c.seed = s;
        }
        if let Some(m) = spec.mode {
            c.modes = vec![m];
        }
        if let Some(b) = spec.block_size {
            c.block = b;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn tile_config(&self) -> TileConfig {
        self.tile.unwrap_or_else(|| TileConfig::with_block(self.block))
    }

    pub fn validate(&self) -> CliResult<()> {
        let tile = self.tile_config();
        tile.validate().map_err(core_to_config)?;
        if tile.block != self.block {
            return Err(config_err(format!("tile block {} differs from block {}", tile.block, self.block)));
        }
        if self.modes.is_empty() {
            return Err(config_err("modes must be non-empty"));
        }
        if self.repeats == 0 {
            return Err(config_err("repeats must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config_err(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        let b = self.block;
        for dims in self.gemm_sizes.iter().map(|s| &s[..]).chain(self.elementwise_sizes.iter().map(|s| &s[..])) {
            if dims.iter().any(|&d| d == 0 || d % b != 0) {
                return Err(config_err(format!("size {dims:?} is not a multiple of B = {b}")));
            }
        }
        Ok(())
    }
}

/// Training sweep: every scheme for every seed on one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSweepConfig {
    pub version: u32,
    pub code_version: Option<String>,
    pub task: ToyTask,
    /// Shared settings; `scheme` and `seed` are replaced per run.
    pub base: TrainConfig,
    pub schemes: Vec<SchemeKind>,
    pub seeds: Vec<u64>,
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainSweepConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            code_version: None,
            task: ToyTask::CopySequence { vocab: 16, length: 8, noise: 0.1 },
            base: TrainConfig::default(),
            schemes: vec![SchemeKind::Fp32, SchemeKind::PerBlock],
            seeds: vec![0],
            checkpoint_every: None,
        }
    }
}

impl TrainSweepConfig {
    pub fn resolve(text: Option<&str>, spec: &RunSpec) -> CliResult<Self> {
        let mut c: Self = parse_versioned(text)?;
        if let Some(s) = spec.seed {
            c.seeds = vec![s];
        }
        if let Some(s) = &spec.scheme {
            c.schemes = vec![s.parse().map_err(|_| config_err(format!("invalid scheme name {s:?}")))?];
        }
        if let Some(m) = spec.mode {
            c.base.mode = m;
        }
        if let Some(b) = spec.block_size {
            c.base.block = b;
        }
        if spec.stop_after == Some(0) {
            return Err(config_err("--stop-after must be positive"));
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.task.validate().map_err(core_to_config)?;
        if let ToyTask::CharLm { corpus, .. } = &self.task {
            if !corpus.is_file() {
                return Err(config_err(format!("corpus {} does not exist", corpus.display())));
            }
        }
        if self.schemes.is_empty() || self.seeds.is_empty() {
            return Err(config_err("schemes and seeds must be non-empty"));
        }
        if self.checkpoint_every == Some(0) {
            return Err(config_err("checkpoint_every must be positive"));
        }
        let mut seen = HashSet::new();
        for (label, cfg) in self.runs() {
            if !seen.insert(label.clone()) {
                return Err(config_err(format!("run {label} is listed twice")));
            }
            cfg.validate().map_err(core_to_config)?;
        }
        Ok(())
    }

    /// `(label, config)` for every run, seeds outermost.
    pub fn runs(&self) -> Vec<(String, TrainConfig)> {
        self.seeds
            .iter()
            .flat_map(|&seed| {
                self.schemes.iter().map(move |&scheme| {
                    let cfg = TrainConfig { scheme, seed, ..self.base.clone() };
                    (format!("{scheme}-seed{seed}"), cfg)
                })
            })
            .collect()
    }
}

/// Self-test options.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelftestConfig {
    pub version: u32,
    pub code_version: Option<String>,
    /// Serialized tensor checked instead of the built-in fixture.
    pub fixture: Option<PathBuf>,
    pub seed: u64,
}

impl Default for SelftestConfig {
    fn default() -> Self {
        Self { version: CONFIG_VERSION, code_version: None, fixture: None, seed: 0 }
    }
}

impl SelftestConfig {
    pub fn resolve(text: Option<&str>, spec: &RunSpec) -> CliResult<Self> {
        let mut c: Self = parse_versioned(text)?;
        reject(spec.scheme.is_some(), "--scheme", "selftest")?;
        reject(spec.mode.is_some(), "--mode", "selftest")?;
        reject(spec.block_size.is_some(), "--block-size", "selftest")?;
        reject(spec.resume, "--resume", "selftest")?;
        if let Some(s) = spec.seed {
            c.seed = s;
        }
        if let Some(f) = &c.fixture {
            if !f.is_file() {
                return Err(config_err(format!("fixture {} does not exist", f.display())));
            }
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Subcommand;

    fn spec(sub: Subcommand) -> RunSpec {
        RunSpec::new(sub, "/tmp/unused")
    }

    #[test]
    fn missing_or_wrong_version_is_rejected() {
        let s = spec(Subcommand::QuantError);
        assert!(matches!(QuantErrorConfig::resolve(Some("{}"), &s), Err(CliError::Config(_))));
        assert!(matches!(QuantErrorConfig::resolve(Some(r#"{"version":2}"#), &s), Err(CliError::Config(_))));
        assert!(matches!(QuantErrorConfig::resolve(Some("[1]"), &s), Err(CliError::Config(_))));
        assert_eq!(QuantErrorConfig::resolve(Some(r#"{"version":1}"#), &s).unwrap(), QuantErrorConfig::default());
    }

    #[test]
    fn unknown_fields_and_bad_values_are_rejected() {
        let s = spec(Subcommand::Bench);
        assert!(BenchConfig::resolve(Some(r#"{"version":1,"repeat":2}"#), &s).is_err());
        let e = BenchConfig::resolve(Some(r#"{"version":1,"gemm_sizes":[[48,32,32]]}"#), &s).unwrap_err();
        assert!(e.to_string().contains("multiple of B"), "{e}");
        let t = spec(Subcommand::Train);
        assert!(TrainSweepConfig::resolve(Some(r#"{"version":1,"base":{"hidden":48}}"#), &t).is_err());
        assert!(TrainSweepConfig::resolve(Some(r#"{"version":1,"base":{"lr":0.1,"bogus":1}}"#), &t).is_err());
    }

    #[test]
    fn invalid_scheme_names() {
        let mut s = spec(Subcommand::QuantError);
        s.scheme = Some("per-row".into());
        assert!(matches!(QuantErrorConfig::resolve(None, &s), Err(CliError::Config(_))));
        s.scheme = Some("fp32".into());
        assert!(matches!(QuantErrorConfig::resolve(None, &s), Err(CliError::Config(_))));
        let mut t = spec(Subcommand::Train);
        t.scheme = Some("per-block-32".into());
        assert!(matches!(TrainSweepConfig::resolve(None, &t), Err(CliError::Config(_))));
        t.scheme = Some("fp32".into());
        assert_eq!(TrainSweepConfig::resolve(None, &t).unwrap().schemes, vec![SchemeKind::Fp32]);
    }

    #[test]
    fn overrides_apply() {
        let mut s = spec(Subcommand::QuantError);
        s.block_size = Some(64);
        s.scheme = Some("per-block".into());
        s.seed = Some(9);
        let c = QuantErrorConfig::resolve(None, &s).unwrap();
        assert_eq!(c.quant_schemes().unwrap(), vec![QuantScheme::PerBlock(64)]);
        assert_eq!(c.seed, 9);

        let mut t = spec(Subcommand::Train);
        t.seed = Some(4);
        t.mode = Some(ExecMode::QcdEmulation);
        let c = TrainSweepConfig::resolve(None, &t).unwrap();
        let runs = c.runs();
        assert_eq!(runs.len(), 2);
        assert_eq!(runs[0].0, "fp32-seed4");
        assert_eq!(runs[1].1.mode, ExecMode::QcdEmulation);
        assert_eq!(runs[1].1.seed, 4);
    }

    #[test]
    fn flags_that_do_not_apply_are_rejected() {
        let mut s = spec(Subcommand::Bench);
        s.scheme = Some("per-token".into());
        assert!(BenchConfig::resolve(None, &s).is_err());
        let mut q = spec(Subcommand::Selftest);
        q.mode = Some(ExecMode::Int8DataFlow);
        assert!(SelftestConfig::resolve(None, &q).is_err());
    }

    #[test]
    fn duplicate_runs_are_rejected() {
        let t = spec(Subcommand::Train);
        let e = TrainSweepConfig::resolve(Some(r#"{"version":1,"schemes":["fp32","fp32"]}"#), &t).unwrap_err();
        assert!(e.to_string().contains("twice"));
    }
}
