//! Tiled INT8 matrix multiply over block-quantized operands.
//!
//! The traversal has three levels: output tiles of `B_N x B_D` (independent,
//! run in parallel), quantization blocks of `B x B x B` inside a tile, and the
//! exact 16x16x16 integer micro-kernel. For every step `k` along the inner axis
//! (`B_C = B`, so one quantization block per step) each `B x B` INT32 partial is
//! dequantized with the two operand block scales and added to an FP32
//! accumulator. Steps are visited in ascending order, so results do not depend
//! on tile shape or thread count. After the last step every `B x B` block of
//! the accumulator is requantized with its own local maximum.
//!
//! All three training products share the same kernel:
//! `Y = X W^T`, `dX = dY W` and `dW = dY^T X`. Transposed operands are packed
//! once per call; their scale matrices are read through swapped indices.

use std::fmt;
use std::ops::AddAssign;
use std::str::FromStr;

use half::f16;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::qtensor::{quantize_per_block, quantize_window, BlockQuantTensor, DenseTensor};

/// Edge of the integer micro-kernel.
pub const MICRO: usize = 16;

/// Compute-tile sizes plus the quantization block size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileConfig {
    pub bn: usize,
    pub bc: usize,
    pub bd: usize,
    pub block: usize,
}

impl Default for TileConfig {
    /// `128 x 32 x 128` tiles with `B = 32`.
    fn default() -> Self {
        Self { bn: 128, bc: 32, bd: 128, block: 32 }
    }
}

/// Per-call tile counts derived from a [`TileConfig`] and the problem shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TileGrid {
    pub t_n: usize,
    pub t_c: usize,
    pub t_d: usize,
    pub r_n: usize,
    pub r_c: usize,
    pub r_d: usize,
}

impl TileConfig {
    pub fn new(bn: usize, bc: usize, bd: usize, block: usize) -> Result<Self> {
        let cfg = Self { bn, bc, bd, block };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Square tiles with `B_C = B`.
    pub fn with_block(block: usize) -> Self {
        Self { bn: 128.max(block), bc: block, bd: 128.max(block), block }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.block > 0 && self.block.is_multiple_of(MICRO),
            Config,
            "quantization block {} is not a positive multiple of {MICRO}",
            self.block
        );
        ensure!(
            self.bc == self.block,
            Config,
            "B_C = {} must equal the quantization block {}",
            self.bc,
            self.block
        );
        ensure!(
            self.bn > 0 && self.bn.is_multiple_of(self.block) && self.bd > 0 && self.bd.is_multiple_of(self.block),
            Config,
            "tile {}x{} is not a multiple of block {}",
            self.bn,
            self.bd,
            self.block
        );
        Ok(())
    }

    /// Shrinks the output tile to the matrix when the matrix is smaller.
    pub fn clamped(&self, rows: usize, cols: usize) -> Self {
        Self {
            bn: self.bn.min(rows).max(self.block),
            bd: self.bd.min(cols).max(self.block),
            ..*self
        }
    }

    pub fn grid(&self, n: usize, c: usize, d: usize) -> TileGrid {
        TileGrid {
            t_n: n.div_ceil(self.bn),
            t_c: c.div_ceil(self.bc),
            t_d: d.div_ceil(self.bd),
            r_n: self.bn.div_ceil(self.block),
            r_c: self.bc.div_ceil(self.block),
            r_d: self.bd.div_ceil(self.block),
        }
    }
}

/// Element-level traffic and operation counts for one kernel call.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessCounters {
    pub int8_load_store: u64,
    pub fp16_load_store: u64,
    pub int_mac: u64,
    pub dequant_ops: u64,
    pub quant_ops: u64,
}

impl AccessCounters {
    pub fn reset(&mut self) {
        *self = Self::default();
    }

    /// Bytes moved to and from global memory.
    pub fn bytes(&self) -> u64 {
        self.int8_load_store + 2 * self.fp16_load_store
    }
}

impl AddAssign for AccessCounters {
    fn add_assign(&mut self, o: Self) {
        self.int8_load_store += o.int8_load_store;
        self.fp16_load_store += o.fp16_load_store;
        self.int_mac += o.int_mac;
        self.dequant_ops += o.dequant_ops;
        self.quant_ops += o.quant_ops;
    }
}

/// Whether a kernel reads and writes INT8 blocks or 16-bit floats.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExecMode {
    /// INT8 values plus block scales in and out of every kernel.
    #[default]
    #[serde(rename = "int8")]
    Int8DataFlow,
    /// Quantize-compute-dequantize: same integer math, 16-bit traffic and a
    /// 16-bit output.
    #[serde(rename = "qcd")]
    QcdEmulation,
}

impl fmt::Display for ExecMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExecMode::Int8DataFlow => "int8",
            ExecMode::QcdEmulation => "qcd",
        })
    }
}

impl FromStr for ExecMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "int8" => Ok(ExecMode::Int8DataFlow),
            "qcd" => Ok(ExecMode::QcdEmulation),
            other => Err(Error::InvalidArgument(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum MmOutput {
    Int8(BlockQuantTensor),
    /// Binary16-rounded output of the QCD pipeline.
    Fp16(DenseTensor),
}

#[derive(Clone, Debug)]
pub struct GemmResult {
    /// FP32 accumulator before output quantization (bias included).
    pub accum: DenseTensor,
    pub output: MmOutput,
    pub counters: AccessCounters,
}

impl GemmResult {
    /// The INT8 output; a QCD output is quantized the way the next operator
    /// in that pipeline would do it.
    pub fn into_int8(self, block: usize) -> Result<BlockQuantTensor> {
        match self.output {
            MmOutput::Int8(t) => Ok(t),
            MmOutput::Fp16(d) => quantize_per_block(&d, block),
        }
    }

    pub fn output_dense(&self) -> DenseTensor {
        match &self.output {
            MmOutput::Int8(t) => t.dequantize(),
            MmOutput::Fp16(d) => d.clone(),
        }
    }
}

/// Exact `16 x 16 x 16` integer product `A * B` with 32-bit accumulation
/// (`b` is `K x N`).
pub fn micro_mm_16(a: &[[i8; MICRO]; MICRO], b: &[[i8; MICRO]; MICRO]) -> [[i32; MICRO]; MICRO] {
    let a_flat: Vec<i16> = a.iter().flatten().map(|&v| v as i16).collect();
    let mut b_cols = vec![0i16; MICRO * MICRO];
    for k in 0..MICRO {
        for j in 0..MICRO {
            b_cols[j * MICRO + k] = b[k][j] as i16;
        }
    }
    let mut acc = [0i32; MICRO * MICRO];
    micro_acc(&a_flat, MICRO, &b_cols, MICRO, &mut acc, MICRO);
    let mut out = [[0i32; MICRO]; MICRO];
    for (i, row) in out.iter_mut().enumerate() {
        row.copy_from_slice(&acc[i * MICRO..(i + 1) * MICRO]);
    }
    out
}

/// `acc[i][j] += sum_k a[i][k] * b[j][k]` over a 16x16x16 cube. Both operands
/// are stored with the inner axis contiguous and widened to `i16`.
#[inline(always)]
fn micro_acc(a: &[i16], a_stride: usize, b: &[i16], b_stride: usize, acc: &mut [i32], acc_stride: usize) {
    for i in 0..MICRO {
        let arow: &[i16; MICRO] = a[i * a_stride..i * a_stride + MICRO].try_into().expect("16 lanes");
        let crow = &mut acc[i * acc_stride..i * acc_stride + MICRO];
        for (j, c) in crow.iter_mut().enumerate() {
            let bcol: &[i16; MICRO] = b[j * b_stride..j * b_stride + MICRO].try_into().expect("16 lanes");
            let mut s = 0i32;
            for k in 0..MICRO {
                s += arow[k] as i32 * bcol[k] as i32;
            }
            *c += s;
        }
    }
}

/// INT8 operand widened to `i16` and laid out with the inner (`K`) axis
/// contiguous: `rows x K` for the left operand, `cols x K` for the right one.
struct Operand<'a> {
    src: &'a BlockQuantTensor,
    /// Logical matrix is the transpose of `src`.
    transposed: bool,
    packed: Vec<i16>,
    rows: usize,
    cols: usize,
}

impl<'a> Operand<'a> {
    /// Logical matrix is `src` (or `src^T`); `lhs` selects the packing.
    fn new(src: &'a BlockQuantTensor, transposed: bool, lhs: bool) -> Self {
        let (r, c) = src.shape();
        let (rows, cols) = if transposed { (c, r) } else { (r, c) };
        let v = src.values();
        // the stored layout already has K contiguous for a plain lhs or a transposed rhs
        let packed = if lhs != transposed {
            v.iter().map(|&x| x as i16).collect()
        } else {
            let mut p = vec![0i16; r * c];
            for i in 0..r {
                for j in 0..c {
                    p[j * r + i] = v[i * c + j] as i16;
                }
            }
            p
        };
        Self { src, transposed, packed, rows, cols }
    }

    /// Scale of logical block `(rb, cb)`.
    #[inline]
    fn scale(&self, rb: usize, cb: usize) -> f32 {
        if self.transposed {
            self.src.scale(cb, rb)
        } else {
            self.src.scale(rb, cb)
        }
    }
}

struct TileOut {
    accum: Vec<f32>,
    values: Vec<i8>,
    scales: Vec<f16>,
    counters: AccessCounters,
}

/// `out[M x P] = a[M x K] * bt[K x P]` with per-block dequantize-accumulate.
fn tiled_mm(
    a: &Operand,
    bt: &Operand,
    bias: Option<&[f32]>,
    cfg: &TileConfig,
    mode: ExecMode,
) -> Result<GemmResult> {
    cfg.validate()?;
    let b = cfg.block;
    let (m, k, p) = (a.rows, a.cols, bt.cols);
    ensure!(
        bt.rows == k,
        ShapeMismatch,
        "inner dimensions differ: {m}x{k} times {}x{p}",
        bt.rows
    );
    ensure!(
        a.src.block() == b && bt.src.block() == b,
        Config,
        "operand blocks {} and {} differ from tile block {b}",
        a.src.block(),
        bt.src.block()
    );
    if let Some(bias) = bias {
        ensure!(bias.len() == p, ShapeMismatch, "bias of length {} for {p} outputs", bias.len());
    }
    let cfg = cfg.clamped(m, p);
    let grid = cfg.grid(m, k, p);

    let tiles: Vec<(usize, usize)> = (0..grid.t_n)
        .flat_map(|i| (0..grid.t_d).map(move |j| (i, j)))
        .collect();

    let outs: Vec<TileOut> = tiles
        .par_iter()
        .map(|&(ti, tj)| {
            let m0 = ti * cfg.bn;
            let p0 = tj * cfg.bd;
            let mlen = cfg.bn.min(m - m0);
            let plen = cfg.bd.min(p - p0);
            compute_tile(a, bt, bias, b, (m0, mlen), (p0, plen), mode)
        })
        .collect::<Result<_>>()?;

    let mut accum = vec![0.0f32; m * p];
    let mut values = vec![0i8; m * p];
    let mut scales = vec![f16::ONE; (m / b) * (p / b)];
    let mut counters = AccessCounters::default();
    for (&(ti, tj), t) in tiles.iter().zip(outs) {
        let m0 = ti * cfg.bn;
        let p0 = tj * cfg.bd;
        let mlen = cfg.bn.min(m - m0);
        let plen = cfg.bd.min(p - p0);
        for r in 0..mlen {
            let dst = (m0 + r) * p + p0;
            accum[dst..dst + plen].copy_from_slice(&t.accum[r * plen..(r + 1) * plen]);
            if mode == ExecMode::Int8DataFlow {
                values[dst..dst + plen].copy_from_slice(&t.values[r * plen..(r + 1) * plen]);
            }
        }
        if mode == ExecMode::Int8DataFlow {
            let (rb, cb) = (mlen / b, plen / b);
            for i in 0..rb {
                for j in 0..cb {
                    scales[(m0 / b + i) * (p / b) + p0 / b + j] = t.scales[i * cb + j];
                }
            }
        }
        counters += t.counters;
    }

    let output = match mode {
        ExecMode::Int8DataFlow => {
            MmOutput::Int8(BlockQuantTensor::from_parts_unchecked(m, p, b, values, scales))
        }
        ExecMode::QcdEmulation => MmOutput::Fp16(DenseTensor::from_raw(
            m,
            p,
            accum.iter().map(|&v| f16::from_f32(v).to_f32()).collect(),
        )),
    };
    Ok(GemmResult { accum: DenseTensor::from_raw(m, p, accum), output, counters })
}

/// `iblk = A[ar.., kk..] * B[br.., kk..]^T` for one `B x B x B` block, built
/// from 16x16x16 micro-kernels.
#[inline(always)]
fn block_product_body(a: &Operand, bt: &Operand, (ar, br, kk): (usize, usize, usize), b: usize, iblk: &mut [i32]) {
    let k = a.cols;
    iblk.fill(0);
    for ks in (0..b).step_by(MICRO) {
        for is in (0..b).step_by(MICRO) {
            let a_off = (ar + is) * k + kk + ks;
            for js in (0..b).step_by(MICRO) {
                let b_off = (br + js) * k + kk + ks;
                micro_acc(&a.packed[a_off..], k, &bt.packed[b_off..], k, &mut iblk[is * b + js..], b);
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
fn block_product_avx2(a: &Operand, bt: &Operand, at: (usize, usize, usize), b: usize, iblk: &mut [i32]) {
    block_product_body(a, bt, at, b, iblk)
}

fn block_product(a: &Operand, bt: &Operand, at: (usize, usize, usize), b: usize, iblk: &mut [i32]) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked just above.
        return unsafe { block_product_avx2(a, bt, at, b, iblk) };
    }
    block_product_body(a, bt, at, b, iblk)
}

fn compute_tile(
    a: &Operand,
    bt: &Operand,
    bias: Option<&[f32]>,
    b: usize,
    (m0, mlen): (usize, usize),
    (p0, plen): (usize, usize),
    mode: ExecMode,
) -> Result<TileOut> {
    let k = a.cols;
    let mut c = AccessCounters::default();
    let mut acc = vec![0.0f32; mlen * plen];
    let mut iblk = vec![0i32; b * b];
    let (rb, cb) = (mlen / b, plen / b);
    let load = ((mlen + plen) * b) as u64;

    for kb in 0..k / b {
        match mode {
            ExecMode::Int8DataFlow => c.int8_load_store += load,
            ExecMode::QcdEmulation => c.fp16_load_store += load,
        }
        for pb in 0..rb {
            let sa = a.scale(m0 / b + pb, kb);
            for qb in 0..cb {
                block_product(a, bt, (m0 + pb * b, p0 + qb * b, kb * b), b, &mut iblk);
                c.int_mac += (b * b * b) as u64;

                let sb = bt.scale(kb, p0 / b + qb);
                for r in 0..b {
                    let arow = &mut acc[(pb * b + r) * plen + qb * b..][..b];
                    for (dst, &y) in arow.iter_mut().zip(&iblk[r * b..(r + 1) * b]) {
                        *dst += sa * y as f32 * sb;
                    }
                }
                if mode == ExecMode::Int8DataFlow {
                    c.dequant_ops += (b * b) as u64;
                }
            }
        }
    }

    if let Some(bias) = bias {
        for r in 0..mlen {
            for (v, &bv) in acc[r * plen..(r + 1) * plen].iter_mut().zip(&bias[p0..p0 + plen]) {
                *v += bv;
            }
        }
    }

    let mut values = Vec::new();
    let mut scales = Vec::new();
    match mode {
        ExecMode::Int8DataFlow => {
            values = vec![0i8; mlen * plen];
            scales.reserve(rb * cb);
            for pb in 0..rb {
                for qb in 0..cb {
                    let off = pb * b * plen + qb * b;
                    scales.push(quantize_window(&acc[off..], plen, b, b, &mut values[off..], plen)?);
                }
            }
            c.quant_ops += (mlen * plen) as u64;
            c.int8_load_store += (mlen * plen) as u64;
        }
        ExecMode::QcdEmulation => {
            if let Some(v) = acc.iter().find(|v| !v.is_finite()) {
                return Err(Error::Domain(format!("non-finite accumulator value {v}")));
            }
            c.fp16_load_store += (mlen * plen) as u64;
        }
    }
    Ok(TileOut { accum: acc, values, scales, counters: c })
}

fn check_cfg_block(cfg: &TileConfig, t: &BlockQuantTensor) -> Result<()> {
    ensure!(
        cfg.block == t.block(),
        Config,
        "tile config block {} differs from tensor block {}",
        cfg.block,
        t.block()
    );
    Ok(())
}

/// `Y[N x D] = X[N x C] * W[D x C]^T`.
pub fn block_mm_forward(
    xq: &BlockQuantTensor,
    wq: &BlockQuantTensor,
    cfg: &TileConfig,
    mode: ExecMode,
) -> Result<GemmResult> {
    block_mm_forward_bias(xq, wq, None, cfg, mode)
}

/// Forward product with an optional FP32 bias added before requantization.
pub fn block_mm_forward_bias(
    xq: &BlockQuantTensor,
    wq: &BlockQuantTensor,
    bias: Option<&[f32]>,
    cfg: &TileConfig,
    mode: ExecMode,
) -> Result<GemmResult> {
    check_cfg_block(cfg, xq)?;
    ensure!(
        xq.cols() == wq.cols(),
        ShapeMismatch,
        "X is {}x{} but W is {}x{}",
        xq.rows(),
        xq.cols(),
        wq.rows(),
        wq.cols()
    );
    tiled_mm(&Operand::new(xq, false, true), &Operand::new(wq, true, false), bias, cfg, mode)
}

/// `dX[N x C] = dY[N x D] * W[D x C]`.
pub fn block_mm_grad_input(
    dyq: &BlockQuantTensor,
    wq: &BlockQuantTensor,
    cfg: &TileConfig,
    mode: ExecMode,
) -> Result<GemmResult> {
    check_cfg_block(cfg, dyq)?;
    ensure!(
        dyq.cols() == wq.rows(),
        ShapeMismatch,
        "dY is {}x{} but W is {}x{}",
        dyq.rows(),
        dyq.cols(),
        wq.rows(),
        wq.cols()
    );
    tiled_mm(&Operand::new(dyq, false, true), &Operand::new(wq, false, false), None, cfg, mode)
}

/// `dW[D x C] = dY[N x D]^T * X[N x C]`.
pub fn block_mm_grad_weight(
    dyq: &BlockQuantTensor,
    xq: &BlockQuantTensor,
    cfg: &TileConfig,
    mode: ExecMode,
) -> Result<GemmResult> {
    check_cfg_block(cfg, dyq)?;
    ensure!(
        dyq.rows() == xq.rows(),
        ShapeMismatch,
        "dY is {}x{} but X is {}x{}",
        dyq.rows(),
        dyq.cols(),
        xq.rows(),
        xq.cols()
    );
    tiled_mm(&Operand::new(dyq, true, true), &Operand::new(xq, false, false), None, cfg, mode)
}

/// Closed-form counters for an `N x C x D` product: the per-tile operation
/// counts (`(B_N + B_D) C + B_N B_D` element loads/stores, `B_N B_D T_C`
/// dequantizations, `B_N B_D` quantizations) summed over all output tiles.
/// QCD charges the same traffic as 16-bit and performs no in-kernel
/// (de)quantization.
pub fn analytic_counters(n: usize, c: usize, d: usize, cfg: &TileConfig, mode: ExecMode) -> AccessCounters {
    let cfg = cfg.clamped(n, d);
    let grid = cfg.grid(n, c, d);
    let mut out = AccessCounters::default();
    for i in 0..grid.t_n {
        let bn = cfg.bn.min(n - i * cfg.bn) as u64;
        for j in 0..grid.t_d {
            let bd = cfg.bd.min(d - j * cfg.bd) as u64;
            let traffic = (bn + bd) * c as u64 + bn * bd;
            out.int_mac += bn * bd * c as u64;
            match mode {
                ExecMode::Int8DataFlow => {
                    out.int8_load_store += traffic;
                    out.dequant_ops += bn * bd * grid.t_c as u64;
                    out.quant_ops += bn * bd;
                }
                ExecMode::QcdEmulation => out.fp16_load_store += traffic,
            }
        }
    }
    out
}

/// One row of the counter dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterRow {
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
}

impl CounterRow {
    pub fn new(op_name: &str, (n, c, d): (usize, usize, usize), b: usize, mode: ExecMode, k: &AccessCounters) -> Self {
        Self {
            op_name: op_name.to_string(),
            n,
            c,
            d,
            b,
            mode,
            int8_ls: k.int8_load_store,
            fp16_ls: k.fp16_load_store,
            int_mac: k.int_mac,
            dequant: k.dequant_ops,
            quant: k.quant_ops,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qtensor::dequantize;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_q(rows: usize, cols: usize, block: usize, rng: &mut ChaCha8Rng, unit: bool) -> BlockQuantTensor {
        let values = (0..rows * cols).map(|_| rng.gen_range(-127i8..=127)).collect();
        let scales = (0..(rows / block) * (cols / block))
            .map(|_| if unit { f16::ONE } else { f16::from_f32(rng.gen_range(0.001f32..0.1)) })
            .collect();
        BlockQuantTensor::from_parts(rows, cols, block, values, scales).unwrap()
    }

    fn identity_q(n: usize, block: usize) -> BlockQuantTensor {
        let mut values = vec![0i8; n * n];
        for i in 0..n {
            values[i * n + i] = 1;
        }
        BlockQuantTensor::from_parts(n, n, block, values, vec![f16::ONE; (n / block) * (n / block)]).unwrap()
    }

    fn i64_product(a: &BlockQuantTensor, b: &BlockQuantTensor) -> Vec<i64> {
        // a * b^T on raw integer values.
        let (n, c, d) = (a.rows(), a.cols(), b.rows());
        let mut out = vec![0i64; n * d];
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] = (0..c).map(|k| a.value(i, k) as i64 * b.value(j, k) as i64).sum();
            }
        }
        out
    }

    fn dense_f64(a: &DenseTensor, b: &DenseTensor, ta: bool, tb: bool) -> Vec<f64> {
        let get = |t: &DenseTensor, tr: bool, r: usize, c: usize| if tr { t.get(c, r) } else { t.get(r, c) } as f64;
        let (m, k) = if ta { (a.cols(), a.rows()) } else { a.shape() };
        let p = if tb { b.rows() } else { b.cols() };
        let mut out = vec![0.0; m * p];
        for i in 0..m {
            for j in 0..p {
                out[i * p + j] = (0..k).map(|kk| get(a, ta, i, kk) * get(b, tb, kk, j)).sum();
            }
        }
        out
    }

    fn rel_err(got: &DenseTensor, want: &[f64]) -> f64 {
        let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        got.data().iter().zip(want).map(|(&g, &w)| (g as f64 - w).abs()).fold(0.0, f64::max) / scale
    }

    #[test]
    fn micro_identity_returns_bt() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut a = [[0i8; 16]; 16];
        for (i, row) in a.iter_mut().enumerate() {
            row[i] = 1;
        }
        let mut bt = [[0i8; 16]; 16];
        bt.iter_mut().flatten().for_each(|v| *v = rng.gen_range(-127..=127));
        let out = micro_mm_16(&a, &bt);
        for i in 0..16 {
            for j in 0..16 {
                assert_eq!(out[i][j], bt[i][j] as i32);
            }
        }
    }

    #[test]
    fn micro_all_127() {
        let a = [[127i8; 16]; 16];
        let out = micro_mm_16(&a, &a);
        assert!(out.iter().flatten().all(|&v| v == 258_064));
    }

    #[test]
    fn forward_identity_weight_requantizes_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_q(64, 64, 32, &mut rng, false);
        let y = block_mm_forward(&x, &identity_q(64, 32), &TileConfig::default(), ExecMode::Int8DataFlow).unwrap();
        assert_eq!(y.accum, dequantize(&x));
        assert_eq!(y.into_int8(32).unwrap(), quantize_per_block(&dequantize(&x), 32).unwrap());
    }

    #[test]
    fn forward_unit_scales_match_integer_product_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_q(64, 64, 32, &mut rng, true);
        let w = random_q(64, 64, 32, &mut rng, true);
        let y = block_mm_forward(&x, &w, &TileConfig::default(), ExecMode::Int8DataFlow).unwrap();
        let want = i64_product(&x, &w);
        for (g, w) in y.accum.data().iter().zip(&want) {
            assert_eq!(*g as f64, *w as f64);
        }
    }

    #[test]
    fn single_tile_counters_follow_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = 96;
        let x = random_q(128, c, 32, &mut rng, false);
        let w = random_q(128, c, 32, &mut rng, false);
        let cfg = TileConfig::default();
        let y = block_mm_forward(&x, &w, &cfg, ExecMode::Int8DataFlow).unwrap();
        let (bn, bd, tc) = (128u64, 128u64, 3u64);
        assert_eq!(y.counters.int8_load_store, (bn + bd) * c as u64 + bn * bd);
        assert_eq!(y.counters.dequant_ops, bn * bd * tc);
        assert_eq!(y.counters.quant_ops, bn * bd);
        assert_eq!(y.counters.int_mac, bn * bd * c as u64);
        assert_eq!(y.counters.fp16_load_store, 0);
        let q = block_mm_forward(&x, &w, &cfg, ExecMode::QcdEmulation).unwrap();
        assert_eq!(q.counters.fp16_load_store, (bn + bd) * c as u64 + bn * bd);
        assert_eq!(q.counters.int8_load_store, 0);
        assert_eq!(q.accum, y.accum);
    }

    #[test]
    fn zero_gradient_gives_zero_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dy = BlockQuantTensor::zeros(64, 32, 32).unwrap();
        let w = random_q(32, 96, 32, &mut rng, false);
        let x = random_q(64, 96, 32, &mut rng, false);
        let cfg = TileConfig::default();
        let dx = block_mm_grad_input(&dy, &w, &cfg, ExecMode::Int8DataFlow).unwrap().into_int8(32).unwrap();
        assert_eq!(dx, BlockQuantTensor::zeros(64, 96, 32).unwrap());
        let dw = block_mm_grad_weight(&dy, &x, &cfg, ExecMode::Int8DataFlow).unwrap().into_int8(32).unwrap();
        assert_eq!(dw, BlockQuantTensor::zeros(32, 96, 32).unwrap());
    }

    #[test]
    fn grad_input_identity_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let dy = random_q(32, 64, 32, &mut rng, false);
        let dx = block_mm_grad_input(&dy, &identity_q(64, 32), &TileConfig::default(), ExecMode::Int8DataFlow).unwrap();
        assert_eq!(dx.accum, dequantize(&dy));
        assert_eq!(dx.into_int8(32).unwrap(), quantize_per_block(&dequantize(&dy), 32).unwrap());
    }

    #[test]
    fn grad_products_match_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = TileConfig::new(64, 32, 32, 32).unwrap();
        let (n, c, d) = (96, 64, 160);
        let x = random_q(n, c, 32, &mut rng, false);
        let w = random_q(d, c, 32, &mut rng, false);
        let dy = random_q(n, d, 32, &mut rng, false);
        let (xd, wd, dyd) = (dequantize(&x), dequantize(&w), dequantize(&dy));

        let y = block_mm_forward(&x, &w, &cfg, ExecMode::Int8DataFlow).unwrap();
        assert!(rel_err(&y.accum, &dense_f64(&xd, &wd, false, true)) < 1e-6);
        let dx = block_mm_grad_input(&dy, &w, &cfg, ExecMode::Int8DataFlow).unwrap();
        assert!(rel_err(&dx.accum, &dense_f64(&dyd, &wd, false, false)) < 1e-6);
        let dw = block_mm_grad_weight(&dy, &x, &cfg, ExecMode::Int8DataFlow).unwrap();
        assert!(rel_err(&dw.accum, &dense_f64(&dyd, &xd, true, false)) < 1e-6);
    }

    #[test]
    fn grad_weight_single_block_is_scaled_outer_product_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let dy = random_q(32, 32, 32, &mut rng, false);
        let x = random_q(32, 64, 32, &mut rng, false);
        let dw = block_mm_grad_weight(&dy, &x, &TileConfig::default(), ExecMode::Int8DataFlow).unwrap();
        for d in 0..32 {
            for c in 0..64 {
                let int: i32 = (0..32).map(|n| dy.value(n, d) as i32 * x.value(n, c) as i32).sum();
                let want = dy.scale(0, 0) * int as f32 * x.scale(0, c / 32);
                assert_eq!(dw.accum.get(d, c), want);
            }
        }
    }

    #[test]
    fn tile_shape_does_not_change_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_q(192, 128, 32, &mut rng, false);
        let w = random_q(96, 128, 32, &mut rng, false);
        let base = block_mm_forward(&x, &w, &TileConfig::default(), ExecMode::Int8DataFlow).unwrap();
        for (bn, bd) in [(64, 64), (32, 32), (96, 32)] {
            let cfg = TileConfig::new(bn, 32, bd, 32).unwrap();
            let y = block_mm_forward(&x, &w, &cfg, ExecMode::Int8DataFlow).unwrap();
            assert_eq!(y.accum, base.accum);
            assert_eq!(y.output, base.output);
        }
    }

    #[test]
    fn bias_is_added_before_quantization() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = BlockQuantTensor::zeros(32, 32, 32).unwrap();
        let w = random_q(64, 32, 32, &mut rng, false);
        let bias: Vec<f32> = (0..64).map(|i| i as f32 * 0.25).collect();
        let y = block_mm_forward_bias(&x, &w, Some(&bias), &TileConfig::default(), ExecMode::Int8DataFlow).unwrap();
        for r in 0..32 {
            assert_eq!(y.accum.row(r), bias.as_slice());
        }
    }

    #[test]
    fn config_and_shape_errors() {
        assert!(matches!(TileConfig::new(128, 64, 128, 32), Err(Error::Config(_))));
        assert!(matches!(TileConfig::new(100, 32, 128, 32), Err(Error::Config(_))));
        assert!(matches!(TileConfig::new(64, 24, 64, 24), Err(Error::Config(_))));
        let a = BlockQuantTensor::zeros(32, 64, 32).unwrap();
        let b = BlockQuantTensor::zeros(32, 32, 32).unwrap();
        let cfg = TileConfig::default();
        assert!(matches!(block_mm_forward(&a, &b, &cfg, ExecMode::Int8DataFlow), Err(Error::ShapeMismatch(_))));
        let c16 = BlockQuantTensor::zeros(32, 64, 16).unwrap();
        assert!(matches!(block_mm_forward(&c16, &a, &cfg, ExecMode::Int8DataFlow), Err(Error::Config(_))));
    }

    #[test]
    fn analytic_counters_sum_ragged_tiles() {
        let cfg = TileConfig::default();
        let k = analytic_counters(160, 64, 96, &cfg, ExecMode::Int8DataFlow);
        // tiles: (128 x 96) and (32 x 96)
        assert_eq!(k.int8_load_store, (128 + 96) * 64 + 128 * 96 + (32 + 96) * 64 + 32 * 96);
        assert_eq!(k.quant_ops, 160 * 96);
        assert_eq!(k.dequant_ops, 160 * 96 * 2);
    }
}
