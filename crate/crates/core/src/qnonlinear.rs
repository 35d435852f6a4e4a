//! Fused INT8 non-linear operators.
//!
//! Every operator loads INT8 blocks, dequantizes them to FP32, applies its
//! function and requantizes each `B x B` output block with its own scale.
//! Traversal is by non-linear tiles (`64 x 64` by default) which must contain
//! whole quantization blocks; since every block is requantized independently
//! the tile shape never changes the output.
//!
//! `add_forward` additionally emits per-row, per-column-segment mean and sum of
//! squares of its FP32 result ([`RowStats`]). `layernorm_forward` consumes them
//! instead of reducing over the row itself, so the LayerNorm that follows an
//! Add only needs element-wise work.

use bitvec::vec::BitVec;
use half::f16;
use num_traits::Float;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{ensure, Error, Result};
use crate::qgemm::AccessCounters;
use crate::qtensor::{quantize_window, BlockQuantTensor, DenseTensor};

pub const DEFAULT_NL_TILE: usize = 64;
pub const DEFAULT_EPS: f32 = 1e-5;

/// Scalar type usable by the generic operator formulas.
pub trait Real: Float + Send + Sync {
    fn erf(self) -> Self;
    fn from_f64(v: f64) -> Self;
}

impl Real for f32 {
    fn erf(self) -> Self {
        libm::erff(self)
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Real for f64 {
    fn erf(self) -> Self {
        libm::erf(self)
    }
    fn from_f64(v: f64) -> Self {
        v
    }
}

/// Standard normal CDF.
pub fn normal_cdf<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    half * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// Standard normal density.
pub fn normal_pdf<T: Real>(x: T) -> T {
    let inv_sqrt_2pi = T::from_f64(0.398_942_280_401_432_7);
    inv_sqrt_2pi * (-(x * x) * T::from_f64(0.5)).exp()
}

/// `x * Phi(x)` with the exact CDF.
pub fn gelu<T: Real>(x: T) -> T {
    x * normal_cdf(x)
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    x * normal_pdf(x) + normal_cdf(x)
}

/// LayerNorm of one row with its own mean and variance.
pub fn layernorm_row<T: Real>(x: &[T], gamma: &[T], beta: &[T], eps: T, out: &mut [T]) {
    let n = T::from_f64(x.len() as f64);
    let mean = x.iter().fold(T::zero(), |a, &v| a + v) / n;
    let var = x.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
    let rstd = T::one() / (var + eps).sqrt();
    for i in 0..x.len() {
        out[i] = gamma[i] * (x[i] - mean) * rstd + beta[i];
    }
}

/// Input gradient of [`layernorm_row`]:
/// `dx = rstd * (g dy - mean(g dy) - xhat * mean(g dy xhat))`.
pub fn layernorm_row_backward<T: Real>(x: &[T], gamma: &[T], dy: &[T], eps: T, dx: &mut [T]) {
    let n = T::from_f64(x.len() as f64);
    let mean = x.iter().fold(T::zero(), |a, &v| a + v) / n;
    let var = x.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
    let rstd = T::one() / (var + eps).sqrt();
    let (mut s1, mut s2) = (T::zero(), T::zero());
    for i in 0..x.len() {
        let g = gamma[i] * dy[i];
        s1 = s1 + g;
        s2 = s2 + g * (x[i] - mean) * rstd;
    }
    for i in 0..x.len() {
        let xhat = (x[i] - mean) * rstd;
        dx[i] = rstd * (gamma[i] * dy[i] - s1 / n - xhat * s2 / n);
    }
}

/// Non-linear traversal tile.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NlTile {
    pub rows: usize,
    pub cols: usize,
}

impl Default for NlTile {
    fn default() -> Self {
        Self { rows: DEFAULT_NL_TILE, cols: DEFAULT_NL_TILE }
    }
}

impl NlTile {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    fn resolve(&self, t: &BlockQuantTensor) -> Result<(usize, usize)> {
        let b = t.block();
        ensure!(
            self.rows > 0 && self.cols > 0 && self.rows.is_multiple_of(b) && self.cols.is_multiple_of(b),
            Config,
            "tile {}x{} does not hold whole {b}x{b} blocks",
            self.rows,
            self.cols
        );
        Ok((self.rows.min(t.rows()), self.cols.min(t.cols())))
    }
}

/// Result of a fused element-wise pass.
#[derive(Clone, Debug)]
pub struct MapOutput {
    pub output: BlockQuantTensor,
    /// FP32 values before quantization, when requested.
    pub fp32: Option<DenseTensor>,
    pub counters: AccessCounters,
}

fn check_same_layout(a: &BlockQuantTensor, b: &BlockQuantTensor) -> Result<()> {
    ensure!(
        a.shape() == b.shape() && a.block() == b.block(),
        ShapeMismatch,
        "{:?}/B={} vs {:?}/B={}",
        a.shape(),
        a.block(),
        b.shape(),
        b.block()
    );
    Ok(())
}

struct TileResult {
    values: Vec<i8>,
    scales: Vec<f16>,
    fp32: Vec<f32>,
}

/// Dequantize, apply `f(row, col, inputs)`, requantize per block.
fn fused_map<const K: usize, F>(inputs: [&BlockQuantTensor; K], tile: NlTile, keep_fp32: bool, f: F) -> Result<MapOutput>
where
    F: Fn(usize, usize, [f32; K]) -> f32 + Sync,
{
    let first = inputs[0];
    for t in &inputs[1..] {
        check_same_layout(first, t)?;
    }
    let (rows, cols, b) = (first.rows(), first.cols(), first.block());
    let (tr, tc) = tile.resolve(first)?;
    let tiles: Vec<(usize, usize)> = (0..rows.div_ceil(tr))
        .flat_map(|i| (0..cols.div_ceil(tc)).map(move |j| (i * tr, j * tc)))
        .collect();

    let results: Vec<TileResult> = tiles
        .par_iter()
        .map(|&(r0, c0)| {
            let (h, w) = (tr.min(rows - r0), tc.min(cols - c0));
            let mut buf = vec![0.0f32; h * w];
            for bi in 0..h / b {
                for bj in 0..w / b {
                    let scales = inputs.map(|t| t.scale((r0 / b) + bi, (c0 / b) + bj));
                    for r in bi * b..(bi + 1) * b {
                        let gr = r0 + r;
                        let off = gr * cols + c0;
                        for c in bj * b..(bj + 1) * b {
                            let mut vals = [0.0f32; K];
                            for k in 0..K {
                                vals[k] = inputs[k].values()[off + c] as f32 * scales[k];
                            }
                            buf[r * w + c] = f(gr, c0 + c, vals);
                        }
                    }
                }
            }
            let mut values = vec![0i8; h * w];
            let mut scales = Vec::with_capacity((h / b) * (w / b));
            for bi in 0..h / b {
                for bj in 0..w / b {
                    let off = bi * b * w + bj * b;
                    scales.push(quantize_window(&buf[off..], w, b, b, &mut values[off..], w)?);
                }
            }
            Ok(TileResult { values, scales, fp32: if keep_fp32 { buf } else { Vec::new() } })
        })
        .collect::<Result<_>>()?;

    let mut values = vec![0i8; rows * cols];
    let mut scales = vec![f16::ONE; (rows / b) * (cols / b)];
    let mut fp32 = if keep_fp32 { vec![0.0f32; rows * cols] } else { Vec::new() };
    for (&(r0, c0), t) in tiles.iter().zip(results) {
        let (h, w) = (tr.min(rows - r0), tc.min(cols - c0));
        for r in 0..h {
            let dst = (r0 + r) * cols + c0;
            values[dst..dst + w].copy_from_slice(&t.values[r * w..(r + 1) * w]);
            if keep_fp32 {
                fp32[dst..dst + w].copy_from_slice(&t.fp32[r * w..(r + 1) * w]);
            }
        }
        for bi in 0..h / b {
            for bj in 0..w / b {
                scales[(r0 / b + bi) * (cols / b) + c0 / b + bj] = t.scales[bi * (w / b) + bj];
            }
        }
    }
    let n = (rows * cols) as u64;
    let counters = AccessCounters {
        int8_load_store: (K as u64 + 1) * n,
        quant_ops: n,
        dequant_ops: K as u64 * n,
        ..Default::default()
    };
    Ok(MapOutput {
        output: BlockQuantTensor::from_parts_unchecked(rows, cols, b, values, scales),
        fp32: keep_fp32.then(|| DenseTensor::from_raw(rows, cols, fp32)),
        counters,
    })
}

/// FP16-in/FP16-out version of an element-wise pass, for traffic comparison.
fn fp16_map<const K: usize, F>(inputs: [&DenseTensor; K], f: F) -> Result<(DenseTensor, AccessCounters)>
where
    F: Fn(usize, usize, [f32; K]) -> f32,
{
    let (rows, cols) = inputs[0].shape();
    for t in &inputs[1..] {
        ensure!(t.shape() == (rows, cols), ShapeMismatch, "{:?} vs {:?}", t.shape(), (rows, cols));
    }
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let vals = inputs.map(|t| f16::from_f32(t.get(r, c)).to_f32());
            out.push(f16::from_f32(f(r, c, vals)).to_f32());
        }
    }
    let n = (rows * cols) as u64;
    let counters = AccessCounters { fp16_load_store: (K as u64 + 1) * n, ..Default::default() };
    Ok((DenseTensor::new(rows, cols, out)?, counters))
}

pub fn gelu_forward(xq: &BlockQuantTensor) -> Result<BlockQuantTensor> {
    Ok(gelu_forward_with(xq, NlTile::default())?.output)
}

pub fn gelu_forward_with(xq: &BlockQuantTensor, tile: NlTile) -> Result<MapOutput> {
    fused_map([xq], tile, false, |_, _, [x]| gelu(x))
}

pub fn gelu_backward(xq: &BlockQuantTensor, dyq: &BlockQuantTensor) -> Result<BlockQuantTensor> {
    Ok(gelu_backward_with(xq, dyq, NlTile::default())?.output)
}

pub fn gelu_backward_with(xq: &BlockQuantTensor, dyq: &BlockQuantTensor, tile: NlTile) -> Result<MapOutput> {
    fused_map([xq, dyq], tile, false, |_, _, [x, dy]| dy * gelu_grad(x))
}

pub fn gelu_forward_fp16(x: &DenseTensor) -> Result<(DenseTensor, AccessCounters)> {
    fp16_map([x], |_, _, [x]| gelu(x))
}

pub fn gelu_backward_fp16(x: &DenseTensor, dy: &DenseTensor) -> Result<(DenseTensor, AccessCounters)> {
    fp16_map([x, dy], |_, _, [x, dy]| dy * gelu_grad(x))
}

/// Dropout probability, seed and the keep-mask they generate.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutState {
    p: f32,
    seed: u64,
    rows: usize,
    cols: usize,
    mask: BitVec,
}

impl DropoutState {
    /// Element `(r, c)` is kept when the `(r * cols + c)`-th 64-bit word of a
    /// ChaCha8 stream keyed by `seed` is at least `p * 2^64`.
    pub fn new(p: f32, seed: u64, rows: usize, cols: usize) -> Result<Self> {
        ensure!((0.0..1.0).contains(&p), InvalidArgument, "dropout probability {p} outside [0, 1)");
        let mut mask = BitVec::repeat(true, rows * cols);
        if p > 0.0 {
            let threshold = (p as f64 * 2f64.powi(64)) as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for r in 0..rows {
                // two 32-bit words per element
                rng.set_word_pos((r * cols * 2) as u128);
                for c in 0..cols {
                    mask.set(r * cols + c, rng.next_u64() >= threshold);
                }
            }
        }
        Ok(Self { p, seed, rows, cols, mask })
    }

    pub fn p(&self) -> f32 {
        self.p
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn keep(&self, r: usize, c: usize) -> bool {
        self.mask[r * self.cols + c]
    }

    pub fn kept_fraction(&self) -> f64 {
        self.mask.count_ones() as f64 / self.mask.len().max(1) as f64
    }

    /// Mask storage in bytes (one bit per element).
    pub fn mask_bytes(&self) -> usize {
        self.mask.len().div_ceil(8)
    }

    fn apply(&self, xq: &BlockQuantTensor) -> Result<BlockQuantTensor> {
        ensure!(
            (0.0..1.0).contains(&self.p),
            InvalidArgument,
            "dropout probability {} outside [0, 1)",
            self.p
        );
        ensure!(
            xq.shape() == (self.rows, self.cols),
            ShapeMismatch,
            "mask is {:?}, tensor is {:?}",
            (self.rows, self.cols),
            xq.shape()
        );
        let mut out = xq.clone();
        if self.p == 0.0 {
            return Ok(out);
        }
        for (i, v) in out.values_mut().iter_mut().enumerate() {
            if !self.mask[i] {
                *v = 0;
            }
        }
        let gain = 1.0 / (1.0 - self.p);
        for s in out.scales_mut() {
            let scaled = f16::from_f32(s.to_f32() * gain);
            if !scaled.is_finite() {
                return Err(Error::Domain(format!("dropout scale {s} x {gain} overflows binary16")));
            }
            *s = scaled;
        }
        Ok(out)
    }
}

/// Zeroes dropped values and multiplies every block scale by `1 / (1 - p)`.
/// Stored integers are never rescaled.
pub fn dropout_forward(xq: &BlockQuantTensor, state: &DropoutState) -> Result<BlockQuantTensor> {
    state.apply(xq)
}

pub fn dropout_backward(dyq: &BlockQuantTensor, state: &DropoutState) -> Result<BlockQuantTensor> {
    state.apply(dyq)
}

pub fn dropout_counters(rows: usize, cols: usize) -> AccessCounters {
    AccessCounters { int8_load_store: 2 * (rows * cols) as u64, ..Default::default() }
}

pub fn dropout_forward_fp16(x: &DenseTensor, state: &DropoutState) -> Result<(DenseTensor, AccessCounters)> {
    let gain = 1.0 / (1.0 - state.p);
    fp16_map([x], |r, c, [v]| if state.keep(r, c) { v * gain } else { 0.0 })
}

/// Per-row statistics of an FP32 tensor over column segments of `width`.
#[derive(Clone, Debug, PartialEq)]
pub struct RowStats {
    rows: usize,
    cols: usize,
    width: usize,
    mean: Vec<f32>,
    sumsq: Vec<f32>,
}

impl RowStats {
    pub fn from_dense(y: &DenseTensor, width: usize) -> Result<Self> {
        let (rows, cols) = y.shape();
        ensure!(
            width > 0 && cols % width == 0,
            Dimension,
            "stats width {width} does not divide {cols} columns"
        );
        let segs = cols / width;
        let mut mean = Vec::with_capacity(rows * segs);
        let mut sumsq = Vec::with_capacity(rows * segs);
        for r in 0..rows {
            for seg in y.row(r).chunks_exact(width) {
                let (s, sq) = seg
                    .iter()
                    .fold((0.0f64, 0.0f64), |(s, sq), &v| (s + v as f64, sq + (v as f64) * (v as f64)));
                mean.push((s / width as f64) as f32);
                sumsq.push(sq as f32);
            }
        }
        Ok(Self { rows, cols, width, mean, sumsq })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Column-segment width (`B_C`).
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn segments(&self) -> usize {
        self.cols / self.width
    }

    pub fn mean(&self) -> &[f32] {
        &self.mean
    }

    pub fn sumsq(&self) -> &[f32] {
        &self.sumsq
    }

    /// Full-row mean and (biased) variance from the segment statistics.
    pub fn row_moments(&self, r: usize) -> (f64, f64) {
        let segs = self.segments();
        let m = &self.mean[r * segs..(r + 1) * segs];
        let sq = &self.sumsq[r * segs..(r + 1) * segs];
        let mean = m.iter().map(|&v| v as f64).sum::<f64>() / segs as f64;
        let var = sq.iter().map(|&v| v as f64).sum::<f64>() / self.cols as f64 - mean * mean;
        (mean, var.max(0.0))
    }

    /// Bytes of the side channel when stored as FP32.
    pub fn storage_bytes(&self) -> usize {
        4 * (self.mean.len() + self.sumsq.len())
    }
}

fn default_stats_width(tile: NlTile, cols: usize) -> usize {
    gcd(tile.cols, cols)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// `y = deq(x1) + deq(x2)`, requantized, plus the row statistics of the FP32 sum.
pub fn add_forward(x1: &BlockQuantTensor, x2: &BlockQuantTensor) -> Result<(BlockQuantTensor, RowStats)> {
    let tile = NlTile::default();
    add_forward_with(x1, x2, tile, default_stats_width(tile, x1.cols()))
}

pub fn add_forward_with(
    x1: &BlockQuantTensor,
    x2: &BlockQuantTensor,
    tile: NlTile,
    stats_width: usize,
) -> Result<(BlockQuantTensor, RowStats)> {
    let out = add_fused(x1, x2, tile, true)?;
    let stats = RowStats::from_dense(out.fp32.as_ref().expect("fp32 kept"), stats_width)?;
    Ok((out.output, stats))
}

/// Add without the statistics side channel (used for gradient accumulation).
pub fn add_quantized(x1: &BlockQuantTensor, x2: &BlockQuantTensor) -> Result<BlockQuantTensor> {
    Ok(add_fused(x1, x2, NlTile::default(), false)?.output)
}

pub fn add_fused(x1: &BlockQuantTensor, x2: &BlockQuantTensor, tile: NlTile, keep_fp32: bool) -> Result<MapOutput> {
    fused_map([x1, x2], tile, keep_fp32, |_, _, [a, b]| a + b)
}

pub fn add_forward_fp16(x1: &DenseTensor, x2: &DenseTensor) -> Result<(DenseTensor, AccessCounters)> {
    fp16_map([x1, x2], |_, _, [a, b]| a + b)
}

/// LayerNorm affine parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct NormParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub eps: f32,
}

impl NormParams {
    pub fn new(cols: usize) -> Self {
        Self { gamma: vec![1.0; cols], beta: vec![0.0; cols], eps: DEFAULT_EPS }
    }

    fn check(&self, cols: usize) -> Result<()> {
        ensure!(self.eps > 0.0, InvalidArgument, "eps must be positive, got {}", self.eps);
        ensure!(
            self.gamma.len() == cols && self.beta.len() == cols,
            ShapeMismatch,
            "norm parameters of length {}/{} for {cols} columns",
            self.gamma.len(),
            self.beta.len()
        );
        Ok(())
    }
}

/// What LayerNorm keeps for its backward pass: the INT8 input plus per-row
/// mean and inverse standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormContext {
    x: BlockQuantTensor,
    mean: Vec<f32>,
    rstd: Vec<f32>,
}

impl LayerNormContext {
    pub fn input(&self) -> &BlockQuantTensor {
        &self.x
    }

    pub fn mean(&self) -> &[f32] {
        &self.mean
    }

    pub fn rstd(&self) -> &[f32] {
        &self.rstd
    }

    pub fn side_bytes(&self) -> usize {
        4 * (self.mean.len() + self.rstd.len())
    }
}

pub fn layernorm_forward(
    xq: &BlockQuantTensor,
    stats: &RowStats,
    params: &NormParams,
) -> Result<(BlockQuantTensor, LayerNormContext)> {
    let (out, ctx) = layernorm_forward_with(xq, stats, params, NlTile::default(), false)?;
    Ok((out.output, ctx))
}

/// Normalizes each row of `deq(x)` with the mean and variance carried by
/// `stats`.
pub fn layernorm_forward_with(
    xq: &BlockQuantTensor,
    stats: &RowStats,
    params: &NormParams,
    tile: NlTile,
    keep_fp32: bool,
) -> Result<(MapOutput, LayerNormContext)> {
    params.check(xq.cols())?;
    ensure!(
        stats.rows() == xq.rows() && stats.cols() == xq.cols(),
        MissingContext,
        "row stats for {}x{} do not belong to a {}x{} tensor",
        stats.rows(),
        stats.cols(),
        xq.rows(),
        xq.cols()
    );
    let mut mean = Vec::with_capacity(xq.rows());
    let mut rstd = Vec::with_capacity(xq.rows());
    for r in 0..xq.rows() {
        let (m, v) = stats.row_moments(r);
        mean.push(m as f32);
        rstd.push((1.0 / (v + params.eps as f64).sqrt()) as f32);
    }
    let out = fused_map([xq], tile, keep_fp32, |r, c, [x]| {
        params.gamma[c] * (x - mean[r]) * rstd[r] + params.beta[c]
    })?;
    Ok((out, LayerNormContext { x: xq.clone(), mean, rstd }))
}

/// Gradients of a LayerNorm pass.
#[derive(Clone, Debug)]
pub struct LayerNormGrads {
    pub dx: BlockQuantTensor,
    pub dgamma: Vec<f32>,
    pub dbeta: Vec<f32>,
    pub dx_fp32: Option<DenseTensor>,
}

pub fn layernorm_backward(
    ctx: LayerNormContext,
    dyq: &BlockQuantTensor,
    params: &NormParams,
) -> Result<(BlockQuantTensor, Vec<f32>, Vec<f32>)> {
    let g = layernorm_backward_with(&ctx, dyq, params, NlTile::default(), false)?;
    Ok((g.dx, g.dgamma, g.dbeta))
}

pub fn layernorm_backward_with(
    ctx: &LayerNormContext,
    dyq: &BlockQuantTensor,
    params: &NormParams,
    tile: NlTile,
    keep_fp32: bool,
) -> Result<LayerNormGrads> {
    check_same_layout(&ctx.x, dyq).map_err(|e| Error::MissingContext(format!("stale LayerNorm context: {e}")))?;
    params.check(dyq.cols())?;
    let (rows, cols) = dyq.shape();
    let x = ctx.x.dequantize();
    let dy = dyq.dequantize();

    // per-row coefficients: mean(g dy) and mean(g dy xhat)
    let coef: Vec<(f32, f32)> = (0..rows)
        .into_par_iter()
        .map(|r| {
            let (xr, dyr) = (x.row(r), dy.row(r));
            let (mut s1, mut s2) = (0.0f32, 0.0f32);
            for c in 0..cols {
                let g = params.gamma[c] * dyr[c];
                s1 += g;
                s2 += g * (xr[c] - ctx.mean[r]) * ctx.rstd[r];
            }
            (s1 / cols as f32, s2 / cols as f32)
        })
        .collect();

    let mut dgamma = vec![0.0f32; cols];
    let mut dbeta = vec![0.0f32; cols];
    for r in 0..rows {
        let (xr, dyr) = (x.row(r), dy.row(r));
        for c in 0..cols {
            let xhat = (xr[c] - ctx.mean[r]) * ctx.rstd[r];
            dgamma[c] += dyr[c] * xhat;
            dbeta[c] += dyr[c];
        }
    }

    let out = fused_map([&ctx.x, dyq], tile, keep_fp32, |r, c, [xv, dyv]| {
        let xhat = (xv - ctx.mean[r]) * ctx.rstd[r];
        ctx.rstd[r] * (params.gamma[c] * dyv - coef[r].0 - xhat * coef[r].1)
    })?;
    Ok(LayerNormGrads { dx: out.output, dgamma, dbeta, dx_fp32: out.fp32 })
}
