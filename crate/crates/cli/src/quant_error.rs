//! Quantization-error sweep over schemes, outlier intensities and sizes.

use std::path::Path;

use int8flow::qlayers::derive_seed;
use int8flow::qtensor::{channel_outlier_matrix, quantization_error};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::QuantErrorConfig;
use crate::{write_csv, CliResult, Outcome};

pub const ERROR_HEADER: [&str; 8] =
    ["scheme", "rows", "cols", "outlier_factor", "outlier_fraction", "matrix", "mse", "mean_abs"];
pub const SUMMARY_HEADER: [&str; 9] = [
    "scheme",
    "rows",
    "cols",
    "outlier_factor",
    "outlier_fraction",
    "matrices",
    "mean_mse",
    "max_mse",
    "mean_abs",
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ErrorRow {
    pub scheme: String,
    pub rows: usize,
    pub cols: usize,
    pub outlier_factor: f32,
    pub outlier_fraction: f64,
    pub matrix: usize,
    pub mse: f64,
    pub mean_abs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub scheme: String,
    pub rows: usize,
    pub cols: usize,
    pub outlier_factor: f32,
    pub outlier_fraction: f64,
    pub matrices: usize,
    pub mean_mse: f64,
    pub max_mse: f64,
    pub mean_abs: f64,
}

/// Matrix `i` of a sweep with base seed `seed`; every scheme sees the same
/// matrices.
pub fn matrix_seed(seed: u64, size_idx: usize, factor_idx: usize, i: usize) -> u64 {
    derive_seed(derive_seed(derive_seed(seed, size_idx as u64), factor_idx as u64), i as u64)
}

pub fn sweep(cfg: &QuantErrorConfig) -> CliResult<Vec<ErrorRow>> {
    let schemes = cfg.quant_schemes()?;
    let mut jobs = Vec::new();
    for (si, &[rows, cols]) in cfg.sizes.iter().enumerate() {
        for (fi, &factor) in cfg.outlier_factors.iter().enumerate() {
            for i in 0..cfg.matrices {
                jobs.push((si, fi, rows, cols, factor, i));
            }
        }
    }
    let per_job: Vec<CliResult<Vec<ErrorRow>>> = jobs
        .into_par_iter()
        .map(|(si, fi, rows, cols, factor, i)| {
            let seed = matrix_seed(cfg.seed, si, fi, i);
            let (x, _) = channel_outlier_matrix(rows, cols, cfg.outlier_fraction, factor, seed)?;
            schemes
                .iter()
                .map(|&s| {
                    let e = quantization_error(&x, s)?;
                    Ok(ErrorRow {
                        scheme: s.to_string(),
                        rows,
                        cols,
                        outlier_factor: factor,
                        outlier_fraction: cfg.outlier_fraction,
                        matrix: i,
                        mse: e.mse,
                        mean_abs: e.mean_abs,
                    })
                })
                .collect()
        })
        .collect();
    let mut rows = Vec::new();
    for r in per_job {
        rows.extend(r?);
    }
    Ok(rows)
}

/// Averages over matrices, keeping the sweep order.
pub fn summarize(rows: &[ErrorRow]) -> Vec<SummaryRow> {
    let mut out: Vec<SummaryRow> = Vec::new();
    for r in rows {
        let existing = out.iter_mut().find(|s| {
            s.scheme == r.scheme && s.rows == r.rows && s.cols == r.cols && s.outlier_factor == r.outlier_factor
        });
        match existing {
            Some(s) => {
                s.matrices += 1;
                s.mean_mse += r.mse;
                s.max_mse = s.max_mse.max(r.mse);
                s.mean_abs += r.mean_abs;
            }
            None => out.push(SummaryRow {
                scheme: r.scheme.clone(),
                rows: r.rows,
                cols: r.cols,
                outlier_factor: r.outlier_factor,
                outlier_fraction: r.outlier_fraction,
                matrices: 1,
                mean_mse: r.mse,
                max_mse: r.mse,
                mean_abs: r.mean_abs,
            }),
        }
    }
    for s in &mut out {
        s.mean_mse /= s.matrices as f64;
        s.mean_abs /= s.matrices as f64;
    }
    out
}

pub fn cmd_quant_error(cfg: &QuantErrorConfig, out: &Path) -> CliResult<Outcome> {
    let rows = sweep(cfg)?;
    let summary = summarize(&rows);
    let errors_path = out.join("quant_error.csv");
    let summary_path = out.join("quant_error_summary.csv");
    write_csv(&errors_path, &ERROR_HEADER, &rows)?;
    write_csv(&summary_path, &SUMMARY_HEADER, &summary)?;
    let report = summary
        .iter()
        .map(|s| {
            format!(
                "{:<14} {}x{} factor {:>5}: mse {:.4e}  mean_abs {:.4e}",
                s.scheme, s.rows, s.cols, s.outlier_factor, s.mean_mse, s.mean_abs
            )
        })
        .collect();
    Ok(Outcome { files: vec![errors_path, summary_path], report })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> QuantErrorConfig {
        QuantErrorConfig { sizes: vec![[256, 1024]], matrices: 2, ..Default::default() }
    }

    #[test]
    fn sweep_covers_the_grid_in_order() {
        let rows = sweep(&small()).unwrap();
        assert_eq!(rows.len(), 2 * 2 * 4);
        assert_eq!(rows[0].scheme, "per-tensor");
        assert_eq!(rows[3].scheme, "per-block-32");
        assert_eq!((rows[4].matrix, rows[8].outlier_factor), (1, 30.0));
        assert_eq!(summarize(&rows).len(), 8);
    }

    #[test]
    fn outliers_separate_per_token_from_per_block() {
        let s = summarize(&sweep(&small()).unwrap());
        let get = |scheme: &str, f: f32| s.iter().find(|r| r.scheme == scheme && r.outlier_factor == f).unwrap().mean_mse;
        // without outliers every scheme sees the same Gaussian statistics
        let plain: Vec<f64> = ["per-token", "per-channel", "per-block-32"].iter().map(|n| get(n, 1.0)).collect();
        let (lo, hi) = plain.iter().fold((f64::MAX, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
        assert!(hi / lo < 1.6, "{plain:?}");
        assert!(get("per-token", 30.0) > 1.5 * get("per-block-32", 30.0), "{s:?}");
    }
}
