//! Training sweeps: one run per (seed, scheme), paired-run summaries and
//! checkpoint/resume.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use int8flow::trainer::{compare_runs, SchemeKind, TrainConfig, TrainRecord, Trainer};
use serde::{Deserialize, Serialize};

use crate::config::TrainSweepConfig;
use crate::{write_csv, CliError, CliResult, Outcome, RunSpec, Timing};

pub const RECORD_HEADER: [&str; 7] = ["run", "step", "train_loss", "val_loss", "grad_norm", "scheme", "diverged"];
pub const SUMMARY_HEADER: [&str; 10] = [
    "seed",
    "run",
    "scheme",
    "reference",
    "final_step",
    "final_val_loss",
    "best_val_loss",
    "final_train_loss",
    "rel_gap",
    "diverged",
];

/// One line of `records.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordRow {
    pub run: String,
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub grad_norm: f64,
    pub scheme: SchemeKind,
    pub diverged: bool,
}

impl RecordRow {
    fn new(run: &str, r: &TrainRecord) -> Self {
        Self {
            run: run.to_string(),
            step: r.step,
            train_loss: r.train_loss,
            val_loss: r.val_loss,
            grad_norm: r.grad_norm,
            scheme: r.scheme,
            diverged: r.diverged,
        }
    }

    fn record(&self) -> TrainRecord {
        TrainRecord {
            step: self.step,
            train_loss: self.train_loss,
            val_loss: self.val_loss,
            grad_norm: self.grad_norm,
            scheme: self.scheme,
            wallclock: 0.0,
            diverged: self.diverged,
        }
    }
}

/// One line of `summary.csv`; gaps are relative to the first scheme of the
/// same seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub seed: u64,
    pub run: String,
    pub scheme: SchemeKind,
    pub reference: String,
    pub final_step: usize,
    pub final_val_loss: f64,
    pub best_val_loss: f64,
    pub final_train_loss: f64,
    pub rel_gap: f64,
    pub diverged: bool,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub label: String,
    pub config: TrainConfig,
    pub records: Vec<TrainRecord>,
    pub diverged_at: Option<usize>,
}

pub fn checkpoint_dir(out: &Path, label: &str) -> PathBuf {
    out.join("checkpoints").join(label)
}

fn read_records(path: &Path) -> CliResult<Vec<TrainRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize::<RecordRow>().map(|row| Ok(row?.record())).collect()
}

fn save_state(trainer: &mut Trainer, dir: &Path, label: &str, records: &[TrainRecord]) -> CliResult<()> {
    trainer.save_checkpoint(dir)?;
    let rows: Vec<RecordRow> = records.iter().map(|r| RecordRow::new(label, r)).collect();
    write_csv(&dir.join("records.csv"), &RECORD_HEADER, &rows)
}

/// Trains (or resumes) one run up to `spec.stop_after` or its last step.
pub fn train_one(
    sweep: &TrainSweepConfig,
    label: &str,
    cfg: &TrainConfig,
    spec: &RunSpec,
) -> CliResult<RunResult> {
    let dir = checkpoint_dir(&spec.out, label);
    let (mut trainer, mut records) = if spec.resume && dir.join("checkpoint.json").is_file() {
        let t = Trainer::load_checkpoint(&dir)?;
        if t.config() != cfg {
            return Err(CliError::Config(format!("checkpoint of {label} was written with a different config")));
        }
        (t, read_records(&dir.join("records.csv"))?)
    } else {
        (Trainer::new(cfg, &sweep.task)?, Vec::new())
    };
    let target = spec.stop_after.map_or(cfg.steps, |s| s.min(cfg.steps));
    let keep_state = sweep.checkpoint_every.is_some() || spec.stop_after.is_some();
    let mut diverged_at = records.iter().find(|r| r.diverged).map(|r| r.step);
    while diverged_at.is_none() && trainer.step() < target {
        let next = match sweep.checkpoint_every {
            Some(k) => ((trainer.step() / k + 1) * k).min(target),
            None => target,
        };
        let o = trainer.run_until(next)?;
        records.extend(o.records);
        diverged_at = o.diverged_at;
        if diverged_at.is_none() && keep_state {
            save_state(&mut trainer, &dir, label, &records)?;
        }
    }
    Ok(RunResult { label: label.to_string(), config: cfg.clone(), records, diverged_at })
}

/// Summaries per seed, each against the first non-diverged run of that seed.
pub fn summarize(runs: &[RunResult]) -> CliResult<Vec<SummaryRow>> {
    let mut seeds: Vec<u64> = runs.iter().map(|r| r.config.seed).collect();
    seeds.dedup();
    let mut out = Vec::new();
    for seed in seeds {
        let group: Vec<&RunResult> = runs.iter().filter(|r| r.config.seed == seed).collect();
        let healthy: Vec<(String, Vec<TrainRecord>)> = group
            .iter()
            .filter(|r| r.diverged_at.is_none() && !r.records.is_empty())
            .map(|r| (r.label.clone(), r.records.clone()))
            .collect();
        let summaries = if healthy.is_empty() { Vec::new() } else { compare_runs(&healthy)? };
        let reference = healthy.first().map(|h| h.0.clone()).unwrap_or_default();
        for r in group {
            let row = match summaries.iter().find(|s| s.label == r.label) {
                Some(s) => SummaryRow {
                    seed,
                    run: r.label.clone(),
                    scheme: r.config.scheme,
                    reference: reference.clone(),
                    final_step: s.final_step,
                    final_val_loss: s.final_val_loss,
                    best_val_loss: s.best_val_loss,
                    final_train_loss: s.final_train_loss,
                    rel_gap: s.rel_gap,
                    diverged: false,
                },
                None => SummaryRow {
                    seed,
                    run: r.label.clone(),
                    scheme: r.config.scheme,
                    reference: reference.clone(),
                    final_step: r.diverged_at.unwrap_or(0),
                    final_val_loss: f64::NAN,
                    best_val_loss: f64::NAN,
                    final_train_loss: f64::NAN,
                    rel_gap: f64::NAN,
                    diverged: r.diverged_at.is_some(),
                },
            };
            out.push(row);
        }
    }
    Ok(out)
}

pub fn cmd_train(sweep: &TrainSweepConfig, spec: &RunSpec, timings: &mut Vec<Timing>) -> CliResult<Outcome> {
    let mut runs = Vec::new();
    for (label, cfg) in sweep.runs() {
        let start = Instant::now();
        runs.push(train_one(sweep, &label, &cfg, spec)?);
        timings.push(Timing { name: label, seconds: start.elapsed().as_secs_f64() });
    }
    let rows: Vec<RecordRow> =
        runs.iter().flat_map(|r| r.records.iter().map(|rec| RecordRow::new(&r.label, rec))).collect();
    let summary = summarize(&runs)?;
    let records_path = spec.out.join("records.csv");
    let summary_path = spec.out.join("summary.csv");
    write_csv(&records_path, &RECORD_HEADER, &rows)?;
    write_csv(&summary_path, &SUMMARY_HEADER, &summary)?;
    fs::write(spec.out.join("runs.json"), serde_json::to_vec_pretty(&sweep.runs())?)?;

    let report = summary
        .iter()
        .map(|s| {
            if s.diverged {
                format!("{:<22} diverged at step {}", s.run, s.final_step)
            } else {
                format!(
                    "{:<22} step {:>5}  val {:.5}  gap vs {} {:+.3}%",
                    s.run,
                    s.final_step,
                    s.final_val_loss,
                    s.reference,
                    100.0 * s.rel_gap
                )
            }
        })
        .collect();
    let diverged: Vec<&str> = runs.iter().filter(|r| r.diverged_at.is_some()).map(|r| r.label.as_str()).collect();
    if !diverged.is_empty() && !spec.allow_divergence {
        return Err(CliError::Diverged { count: diverged.len(), runs: diverged.join(", ") });
    }
    Ok(Outcome { files: vec![records_path, summary_path], report })
}
