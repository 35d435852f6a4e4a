//! Fixed-size run of the kernel invariants.

use std::fs;
use std::path::Path;
use std::time::Instant;

use int8flow::qgemm::{
    analytic_counters, block_mm_forward, block_mm_grad_input, block_mm_grad_weight, micro_mm_16, ExecMode,
    TileConfig, MICRO,
};
use int8flow::qlayers::derive_seed;
use int8flow::qnonlinear::{gelu, gelu_forward_with, gelu_grad, layernorm_row, layernorm_row_backward, NlTile};
use int8flow::qtensor::{quantize_per_block, quantize_with_scheme, BlockQuantTensor, DenseTensor};
use int8flow::trainer::{run_training, SchemeKind, ToyTask, TrainConfig};
use int8flow::QuantScheme;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::config::SelftestConfig;
use crate::{write_csv, CliError, CliResult, Outcome, Timing};

pub const SELFTEST_HEADER: [&str; 3] = ["check", "passed", "detail"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub check: String,
    pub passed: bool,
    pub detail: String,
    #[serde(skip)]
    pub seconds: f64,
}

type Check = fn(u64, &[u8]) -> Result<String, String>;

const CHECKS: [(&str, Check); 9] = [
    ("micro_kernel_oracle", micro_kernel_oracle),
    ("gemm_oracle", gemm_oracle),
    ("tiling_transparency", tiling_transparency),
    ("roundtrip_bound", roundtrip_bound),
    ("counter_formulas", counter_formulas),
    ("gelu_gradient", gelu_gradient),
    ("layernorm_gradient", layernorm_gradient),
    ("fixture_roundtrip", fixture_roundtrip),
    ("training_determinism", training_determinism),
];

pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|c| c.0).collect()
}

/// The reference tensor behind the serialized fixture.
pub fn fixture_tensor() -> BlockQuantTensor {
    let x = DenseTensor::from_fn(64, 64, |r, c| ((r * 37 + c * 11) % 255) as f32 * 0.0625 - 7.9375)
        .expect("fixed shape");
    quantize_per_block(&x, 32).expect("finite fixture")
}

pub fn fixture_bytes() -> Vec<u8> {
    fixture_tensor().to_bytes()
}

/// Runs every check against `fixture` (serialized [`fixture_tensor`]).
pub fn run_checks(seed: u64, fixture: &[u8]) -> Vec<CheckResult> {
    CHECKS
        .iter()
        .map(|(name, f)| {
            let start = Instant::now();
            let r = f(seed, fixture);
            let seconds = start.elapsed().as_secs_f64();
            let (passed, detail) = match r {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            CheckResult { check: name.to_string(), passed, detail, seconds }
        })
        .collect()
}

pub fn cmd_selftest(cfg: &SelftestConfig, out: &Path, timings: &mut Vec<Timing>) -> CliResult<Outcome> {
    let fixture = match &cfg.fixture {
        Some(p) => fs::read(p)?,
        None => fixture_bytes(),
    };
    let fixture_path = out.join("fixture.bin");
    fs::write(&fixture_path, fixture_bytes())?;
    let results = run_checks(cfg.seed, &fixture);
    let csv_path = out.join("selftest.csv");
    write_csv(&csv_path, &SELFTEST_HEADER, &results)?;
    timings.extend(results.iter().map(|r| Timing { name: r.check.clone(), seconds: r.seconds }));
    let report: Vec<String> = results
        .iter()
        .map(|r| {
            let tag = if r.passed { "PASS" } else { "FAIL" };
            format!("{tag} {:<22} {:>9.1} ms  {}", r.check, 1e3 * r.seconds, r.detail)
        })
        .collect();
    let failed: Vec<String> =
        results.iter().filter(|r| !r.passed).map(|r| format!("{} ({})", r.check, r.detail)).collect();
    if !failed.is_empty() {
        return Err(CliError::SelftestFailed(format!("{}\n{}", failed.join("; "), report.join("\n"))));
    }
    Ok(Outcome { files: vec![csv_path, fixture_path], report })
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseTensor {
    DenseTensor::from_fn(rows, cols, |_, _| {
        let v: f32 = StandardNormal.sample(rng);
        v
    })
    .expect("positive shape")
}

fn ok_or<E: std::fmt::Display, T>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn micro_kernel_oracle(seed: u64, _: &[u8]) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let cases = 500;
    for case in 0..cases {
        let mut a = [[0i8; MICRO]; MICRO];
        let mut b = [[0i8; MICRO]; MICRO];
        for row in a.iter_mut().chain(b.iter_mut()) {
            for v in row.iter_mut() {
                *v = rng.gen_range(-127..=127);
            }
        }
        let got = micro_mm_16(&a, &b);
        for i in 0..MICRO {
            for j in 0..MICRO {
                let want: i64 = (0..MICRO).map(|k| a[i][k] as i64 * b[k][j] as i64).sum();
                if got[i][j] as i64 != want {
                    return Err(format!("case {case} ({i},{j}): {} vs {want}", got[i][j]));
                }
            }
        }
    }
    Ok(format!("{cases} cases exact"))
}

/// `a * b^T` in f64 on dequantized operands.
fn dense_nt(a: &DenseTensor, b: &DenseTensor) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.rows() * b.rows());
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            out.push(a.row(i).iter().zip(b.row(j)).map(|(&x, &y)| x as f64 * y as f64).sum());
        }
    }
    out
}

fn max_rel(got: &DenseTensor, want: &[f64]) -> f64 {
    let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    got.data().iter().zip(want).map(|(&g, w)| (g as f64 - w).abs()).fold(0.0, f64::max) / scale
}

fn gemm_oracle(seed: u64, _: &[u8]) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));
    let cfg = TileConfig::default();
    let mut worst = 0.0f64;
    for (n, c, d) in [(64, 96, 32), (32, 32, 160), (160, 64, 96)] {
        let xq = ok_or(quantize_per_block(&gaussian(n, c, &mut rng), 32))?;
        let wq = ok_or(quantize_per_block(&gaussian(d, c, &mut rng), 32))?;
        let dyq = ok_or(quantize_per_block(&gaussian(n, d, &mut rng), 32))?;
        let (x, w, dy) = (xq.dequantize(), wq.dequantize(), dyq.dequantize());
        let m = ExecMode::Int8DataFlow;
        let checks = [
            ("forward", ok_or(block_mm_forward(&xq, &wq, &cfg, m))?.accum, dense_nt(&x, &w)),
            ("grad_input", ok_or(block_mm_grad_input(&dyq, &wq, &cfg, m))?.accum, dense_nt(&dy, &w.transpose())),
            (
                "grad_weight",
                ok_or(block_mm_grad_weight(&dyq, &xq, &cfg, m))?.accum,
                dense_nt(&dy.transpose(), &x.transpose()),
            ),
        ];
        for (name, got, want) in &checks {
            let e = max_rel(got, want);
            if e > 1e-6 {
                return Err(format!("{name} {n}x{c}x{d}: relative error {e:.3e}"));
            }
            worst = worst.max(e);
        }
    }
    Ok(format!("max relative error {worst:.2e}"))
}

fn tiling_transparency(seed: u64, _: &[u8]) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 3));
    let xq = ok_or(quantize_per_block(&gaussian(160, 96, &mut rng), 32))?;
    let wq = ok_or(quantize_per_block(&gaussian(224, 96, &mut rng), 32))?;
    let tiles = [(128, 32, 128), (64, 32, 64), (32, 32, 32)];
    let mut first = None;
    for (bn, bc, bd) in tiles {
        let cfg = ok_or(TileConfig::new(bn, bc, bd, 32))?;
        let r = ok_or(block_mm_forward(&xq, &wq, &cfg, ExecMode::Int8DataFlow))?;
        let out = ok_or(r.into_int8(32))?;
        match &first {
            None => first = Some(out),
            Some(f) if *f != out => return Err(format!("tile {bn}x{bc}x{bd} changes the output")),
            Some(_) => {}
        }
    }
    let a = ok_or(gelu_forward_with(&xq, NlTile::new(64, 64)))?.output;
    let b = ok_or(gelu_forward_with(&xq, NlTile::new(32, 96)))?.output;
    if a != b {
        return Err("GELU output depends on the non-linear tile".into());
    }
    Ok(format!("{} GEMM tilings and 2 GELU tilings identical", tiles.len()))
}

fn roundtrip_bound(seed: u64, _: &[u8]) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 4));
    let schemes = [QuantScheme::PerTensor, QuantScheme::PerToken, QuantScheme::PerChannel, QuantScheme::PerBlock(32)];
    let tensors = 10;
    for t in 0..tensors {
        let mut x = gaussian(64, 96, &mut rng);
        if t % 2 == 1 {
            let col = rng.gen_range(0..96);
            x = int8flow::dense::map(&x, |_, c, v| if c == col { v * 50.0 } else { v });
        }
        for s in schemes {
            let q = ok_or(quantize_with_scheme(&x, s))?;
            let deq = q.dequantize();
            for r in 0..64 {
                for c in 0..96 {
                    let sc = q.scale_at(r, c);
                    let err = (x.get(r, c) - deq.get(r, c)).abs();
                    if err > sc / 2.0 + sc * 2f32.powi(-10) {
                        return Err(format!("{s} tensor {t} ({r},{c}): error {err} with scale {sc}"));
                    }
                    if q.values[r * 96 + c] == -128 {
                        return Err(format!("{s} stored -128"));
                    }
                }
            }
        }
    }
    Ok(format!("{tensors} tensors x {} schemes within bound", schemes.len()))
}

fn counter_formulas(seed: u64, _: &[u8]) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 5));
    let cfg = TileConfig::default();
    let mut checked = 0;
    for (n, c, d) in [(160, 64, 96), (256, 32, 128), (32, 96, 288)] {
        let xq = ok_or(quantize_per_block(&gaussian(n, c, &mut rng), 32))?;
        let wq = ok_or(quantize_per_block(&gaussian(d, c, &mut rng), 32))?;
        for mode in [ExecMode::Int8DataFlow, ExecMode::QcdEmulation] {
            let got = ok_or(block_mm_forward(&xq, &wq, &cfg, mode))?.counters;
            let want = analytic_counters(n, c, d, &cfg, mode);
            if got != want {
                return Err(format!("{n}x{c}x{d} {mode}: {got:?} vs {want:?}"));
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} configurations exact"))
}

fn gelu_gradient(seed: u64, _: &[u8]) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 6));
    let h = 1e-3f64;
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let x: f64 = rng.gen_range(-4.0..=4.0);
        let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
        let e = (gelu_grad(x as f32) as f64 - fd).abs();
        if e > 1e-4 {
            return Err(format!("x = {x}: analytic {} vs difference {fd}", gelu_grad(x as f32)));
        }
        worst = worst.max(e);
    }
    Ok(format!("200 points, max error {worst:.2e}"))
}

fn layernorm_gradient(seed: u64, _: &[u8]) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 7));
    let c = 16;
    let h = 1e-3f64;
    let eps = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let x: Vec<f64> = (0..c).map(|_| rng.gen_range(-4.0..=4.0)).collect();
        let gamma: Vec<f64> = (0..c).map(|_| rng.gen_range(0.5..=1.5)).collect();
        let beta: Vec<f64> = (0..c).map(|_| rng.gen_range(-0.5..=0.5)).collect();
        let wts: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let loss = |x: &[f64]| {
            let mut y = vec![0.0; c];
            layernorm_row(x, &gamma, &beta, eps, &mut y);
            y.iter().zip(&wts).map(|(a, b)| a * b).sum::<f64>()
        };
        let f32s = |v: &[f64]| v.iter().map(|&a| a as f32).collect::<Vec<f32>>();
        let mut dx = vec![0.0f32; c];
        layernorm_row_backward(&f32s(&x), &f32s(&gamma), &f32s(&wts), eps as f32, &mut dx);
        for i in 0..c {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += h;
            xm[i] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
            let e = (dx[i] as f64 - fd).abs();
            if e > 1e-4 {
                return Err(format!("element {i}: analytic {} vs difference {fd}", dx[i]));
            }
            worst = worst.max(e);
        }
    }
    Ok(format!("10 rows x {c}, max error {worst:.2e}"))
}

fn fixture_roundtrip(_: u64, fixture: &[u8]) -> Result<String, String> {
    let got = BlockQuantTensor::from_bytes(fixture).map_err(|e| format!("fixture does not decode: {e}"))?;
    let want = fixture_tensor();
    if got != want {
        let diff = got.values().iter().zip(want.values()).filter(|(a, b)| a != b).count();
        return Err(format!("fixture differs from the reference tensor ({diff} values)"));
    }
    Ok(format!("{} bytes decode to the reference tensor", fixture.len()))
}

fn training_determinism(seed: u64, _: &[u8]) -> Result<String, String> {
    let cfg = TrainConfig {
        layers: 1,
        hidden: 32,
        heads: 2,
        mlp_ratio: 2,
        steps: 4,
        batch_size: 2,
        lr: 1e-3,
        eval_every: 2,
        eval_sequences: 4,
        scheme: SchemeKind::PerBlock,
        seed,
        ..Default::default()
    };
    let task = ToyTask::CopySequence { vocab: 8, length: 8, noise: 0.0 };
    let a = ok_or(run_training(&cfg, &task))?;
    let b = ok_or(run_training(&cfg, &task))?;
    let key = |o: &int8flow::trainer::TrainOutcome| -> Vec<(usize, u64, u64)> {
        o.records.iter().map(|r| (r.step, r.train_loss.to_bits(), r.val_loss.to_bits())).collect()
    };
    if key(&a) != key(&b) {
        return Err("two identical runs produced different records".into());
    }
    Ok(format!("{} records identical", a.records.len()))
}
