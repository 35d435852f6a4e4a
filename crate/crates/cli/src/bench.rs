//! Counter audit and timing of the GEMMs and the memory-bound operators.

use std::path::Path;
use std::time::Instant;

use int8flow::qgemm::{
    analytic_counters, block_mm_forward, block_mm_grad_input, block_mm_grad_weight, AccessCounters, CounterRow,
    ExecMode, GemmResult,
};
use int8flow::qlayers::derive_seed;
use int8flow::qnonlinear::{
    add_forward_fp16, add_fused, dropout_counters, dropout_forward, dropout_forward_fp16, gelu_backward_fp16,
    gelu_backward_with, gelu_forward_fp16, gelu_forward_with, DropoutState, NlTile,
};
use int8flow::qtensor::{quantize_per_block, DenseTensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::config::BenchConfig;
use crate::{write_csv, CliError, CliResult, Outcome, Timing};

pub const COUNTER_HEADER: [&str; 12] =
    ["op_name", "N", "C", "D", "B", "mode", "int8_ls", "fp16_ls", "int_mac", "dequant", "quant", "bytes"];
pub const TRAFFIC_HEADER: [&str; 7] = ["op_name", "N", "C", "D", "int8_bytes", "qcd_bytes", "ratio"];

/// A [`CounterRow`] plus its byte total, flat for CSV.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub op_name: String,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "C")]
    pub c: usize,
    #[serde(rename = "D")]
    pub d: usize,
    #[serde(rename = "B")]
    pub b: usize,
    pub mode: ExecMode,
    pub int8_ls: u64,
    pub fp16_ls: u64,
    pub int_mac: u64,
    pub dequant: u64,
    pub quant: u64,
    pub bytes: u64,
}

impl BenchRow {
    fn new(r: CounterRow, bytes: u64) -> Self {
        Self {
            op_name: r.op_name,
            n: r.n,
            c: r.c,
            d: r.d,
            b: r.b,
            mode: r.mode,
            int8_ls: r.int8_ls,
            fp16_ls: r.fp16_ls,
            int_mac: r.int_mac,
            dequant: r.dequant,
            quant: r.quant,
            bytes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrafficRow {
    pub op_name: String,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "C")]
    pub c: usize,
    #[serde(rename = "D")]
    pub d: usize,
    pub int8_bytes: u64,
    pub qcd_bytes: u64,
    pub ratio: f64,
}

fn gaussian(rows: usize, cols: usize, seed: u64) -> CliResult<DenseTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(DenseTensor::from_fn(rows, cols, |_, _| {
        let v: f32 = StandardNormal.sample(&mut rng);
        v
    })?)
}

fn timed<T>(repeats: usize, mut f: impl FnMut() -> CliResult<T>) -> CliResult<(T, f64)> {
    let start = Instant::now();
    let mut last = f()?;
    for _ in 1..repeats {
        last = f()?;
    }
    Ok((last, start.elapsed().as_secs_f64() / repeats as f64))
}

/// Counter rows (sorted by size, operator, mode), traffic ratios and
/// timings. GEMM counters are checked against the closed forms.
pub fn run_bench(cfg: &BenchConfig, timings: &mut Vec<Timing>) -> CliResult<(Vec<BenchRow>, Vec<TrafficRow>)> {
    let tile = cfg.tile_config();
    let b = cfg.block;
    let mut rows = Vec::new();
    let mut traffic = Vec::new();
    let push = |rows: &mut Vec<BenchRow>, name: &str, dims: (usize, usize, usize), mode: ExecMode, k: &AccessCounters| {
        rows.push(BenchRow::new(CounterRow::new(name, dims, b, mode, k), k.bytes()));
    };
    let mut pair = |name: &str, (n, c, d): (usize, usize, usize), int8: &AccessCounters, qcd: &AccessCounters| {
        traffic.push(TrafficRow {
            op_name: name.to_string(),
            n,
            c,
            d,
            int8_bytes: int8.bytes(),
            qcd_bytes: qcd.bytes(),
            ratio: int8.bytes() as f64 / qcd.bytes() as f64,
        });
    };

    for (si, &[n, c, d]) in cfg.gemm_sizes.iter().enumerate() {
        let seed = derive_seed(cfg.seed, si as u64);
        let xq = quantize_per_block(&gaussian(n, c, derive_seed(seed, 1))?, b)?;
        let wq = quantize_per_block(&gaussian(d, c, derive_seed(seed, 2))?, b)?;
        let dyq = quantize_per_block(&gaussian(n, d, derive_seed(seed, 3))?, b)?;
        type Mm<'a> = Box<dyn Fn(ExecMode) -> int8flow::Result<GemmResult> + 'a>;
        // (name, product dims as output rows x inner x output cols, kernel)
        let ops: [(&str, (usize, usize, usize), Mm); 3] = [
            ("forward", (n, c, d), Box::new(|m| block_mm_forward(&xq, &wq, &tile, m))),
            ("grad_input", (n, d, c), Box::new(|m| block_mm_grad_input(&dyq, &wq, &tile, m))),
            ("grad_weight", (d, n, c), Box::new(|m| block_mm_grad_weight(&dyq, &xq, &tile, m))),
        ];
        for (name, dims, f) in &ops {
            let mut by_mode = Vec::new();
            for &mode in &cfg.modes {
                let (res, secs) = timed(cfg.repeats, || Ok(f(mode)?))?;
                let want = analytic_counters(dims.0, dims.1, dims.2, &tile, mode);
                let got = res.counters;
                if got != want {
                    return Err(CliError::Check(format!(
                        "{name} {dims:?} {mode}: measured {got:?} but closed form gives {want:?}"
                    )));
                }
                push(&mut rows, name, *dims, mode, &got);
                timings.push(Timing { name: format!("{name} {}x{}x{} {mode}", dims.0, dims.1, dims.2), seconds: secs });
                by_mode.push((mode, got));
            }
            if let [(ExecMode::Int8DataFlow, a), (ExecMode::QcdEmulation, q)] = by_mode[..] {
                pair(name, *dims, &a, &q);
            }
        }
    }

    let nl = NlTile::default();
    for (si, &[n, c]) in cfg.elementwise_sizes.iter().enumerate() {
        let seed = derive_seed(cfg.seed ^ 0xe1e, si as u64);
        let x = gaussian(n, c, derive_seed(seed, 1))?;
        let x2 = gaussian(n, c, derive_seed(seed, 2))?;
        let dy = gaussian(n, c, derive_seed(seed, 3))?;
        let (xq, x2q, dyq) = (quantize_per_block(&x, b)?, quantize_per_block(&x2, b)?, quantize_per_block(&dy, b)?);
        let drop = DropoutState::new(cfg.dropout, derive_seed(seed, 4), n, c)?;
        let dims = (n, c, 0);
        type Op<'a> = Box<dyn Fn() -> CliResult<AccessCounters> + 'a>;
        let ops: [(&str, Op, Op); 4] = [
            (
                "gelu_forward",
                Box::new(|| Ok(gelu_forward_with(&xq, nl)?.counters)),
                Box::new(|| Ok(gelu_forward_fp16(&x)?.1)),
            ),
            (
                "gelu_backward",
                Box::new(|| Ok(gelu_backward_with(&xq, &dyq, nl)?.counters)),
                Box::new(|| Ok(gelu_backward_fp16(&x, &dy)?.1)),
            ),
            (
                "dropout_forward",
                Box::new(|| {
                    dropout_forward(&xq, &drop)?;
                    Ok(dropout_counters(n, c))
                }),
                Box::new(|| Ok(dropout_forward_fp16(&x, &drop)?.1)),
            ),
            (
                "add_forward",
                Box::new(|| Ok(add_fused(&xq, &x2q, nl, false)?.counters)),
                Box::new(|| Ok(add_forward_fp16(&x, &x2)?.1)),
            ),
        ];
        for (name, int8_op, fp16_op) in &ops {
            let mut by_mode = Vec::new();
            for &mode in &cfg.modes {
                let op = match mode {
                    ExecMode::Int8DataFlow => int8_op,
                    ExecMode::QcdEmulation => fp16_op,
                };
                let (k, secs) = timed(cfg.repeats, op)?;
                push(&mut rows, name, dims, mode, &k);
                timings.push(Timing { name: format!("{name} {n}x{c} {mode}"), seconds: secs });
                by_mode.push((mode, k));
            }
            if let [(ExecMode::Int8DataFlow, a), (ExecMode::QcdEmulation, q)] = by_mode[..] {
                pair(name, dims, &a, &q);
            }
        }
    }
    Ok((rows, traffic))
}

pub fn cmd_bench(cfg: &BenchConfig, out: &Path, timings: &mut Vec<Timing>) -> CliResult<Outcome> {
    let (rows, traffic) = run_bench(cfg, timings)?;
    let counters_path = out.join("bench_counters.csv");
    let traffic_path = out.join("bench_traffic.csv");
    write_csv(&counters_path, &COUNTER_HEADER, &rows)?;
    write_csv(&traffic_path, &TRAFFIC_HEADER, &traffic)?;
    let mut report = vec![format!("{} counter rows match their closed forms", rows.len())];
    report.extend(traffic.iter().map(|t| {
        format!("{:<16} {}x{}x{}: int8/qcd bytes = {:.4}", t.op_name, t.n, t.c, t.d, t.ratio)
    }));
    Ok(Outcome { files: vec![counters_path, traffic_path], report })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_bench_matches_closed_forms() {
        let cfg = BenchConfig {
            gemm_sizes: vec![[64, 32, 96]],
            elementwise_sizes: vec![[64, 64]],
            repeats: 1,
            ..Default::default()
        };
        let mut t = Vec::new();
        let (rows, traffic) = run_bench(&cfg, &mut t).unwrap();
        assert_eq!(rows.len(), 2 * (3 + 4));
        assert_eq!(traffic.len(), 3 + 4);
        assert_eq!(t.len(), rows.len());
        for tr in &traffic[3..] {
            assert_eq!(tr.ratio, 0.5, "{tr:?}");
        }
        let fwd = &rows[0];
        assert_eq!((fwd.op_name.as_str(), fwd.n, fwd.c, fwd.d), ("forward", 64, 32, 96));
        assert_eq!(fwd.int8_ls, ((64 + 96) * 32 + 64 * 96) as u64);
    }
}
