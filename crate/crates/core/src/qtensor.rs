//! Block-quantized INT8 tensors.
//!
//! A [`BlockQuantTensor`] stores an `N x C` matrix as signed 8-bit values in
//! `[-127, 127]` together with one scale per `B x B` block. Scales live on the
//! binary16 grid (they are stored as `f16`) and are widened to `f32` for any
//! arithmetic. Quantization is symmetric with `s = max|x| / 127` and
//! round-half-to-even; an all-zero block gets scale `1.0`.
//!
//! The coarser schemes (per-tensor, per-token, per-channel) are provided for
//! error analysis and ablation training through [`quantize_with_scheme`].

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

pub const QMAX: f32 = 127.0;

const MAGIC: &[u8; 4] = b"JQT1";

/// Dense row-major matrix of finite `f32` values.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseTensor {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl DenseTensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        ensure!(
            data.len() == rows * cols,
            Dimension,
            "{} values supplied for a {rows}x{cols} tensor",
            data.len()
        );
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "non-finite value {} at ({}, {})",
                data[i],
                i / cols.max(1),
                i % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a tensor without the finiteness scan. Callers guarantee finite data.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_raw(rows, cols, vec![0.0; rows * cols])
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self::new(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }


    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn transpose(&self) -> Self {
        let mut out = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Self::from_raw(self.cols, self.rows, out)
    }
}

/// Rounds a scale onto the binary16 grid (nearest, ties to even).
///
/// Scales that would overflow binary16 are rejected; nonzero scales that would
/// flush to zero are raised to the smallest positive subnormal so that
/// `x / s` stays finite.
pub fn scale_from_absmax(absmax: f32) -> Result<f16> {
    ensure!(absmax.is_finite(), Domain, "non-finite block maximum {absmax}");
    if absmax == 0.0 {
        return Ok(f16::ONE);
    }
    let s = f16::from_f32(absmax / QMAX);
    ensure!(
        s.is_finite(),
        Domain,
        "block maximum {absmax} exceeds the binary16 scale range"
    );
    if s == f16::ZERO {
        return Ok(f16::from_bits(1));
    }
    Ok(s)
}

/// Round-half-to-even quantization of one value with a stored scale.
#[inline]
pub fn quantize_value(x: f32, scale: f32) -> i8 {
    // adding 1.5 * 2^23 leaves an f32 whose ulp is 1, so the default rounding
    // mode rounds the clamped quotient half-to-even
    const SHIFT: f32 = 12_582_912.0;
    (((x / scale).clamp(-QMAX, QMAX) + SHIFT) - SHIFT) as i8
}

/// Quantizes a `rows x cols` window of `src` (row stride `src_stride`) into
/// `dst` (row stride `dst_stride`) with one shared scale.
pub(crate) fn quantize_window(
    src: &[f32],
    src_stride: usize,
    rows: usize,
    cols: usize,
    dst: &mut [i8],
    dst_stride: usize,
) -> Result<f16> {
    let mut absmax = 0.0f32;
    let mut finite = true;
    for r in 0..rows {
        for &v in &src[r * src_stride..r * src_stride + cols] {
            absmax = absmax.max(v.abs());
            finite &= v.is_finite();
        }
    }
    ensure!(finite, Domain, "non-finite value in a block");
    let scale = scale_from_absmax(absmax)?;
    let s = scale.to_f32();
    for r in 0..rows {
        let s_row = &src[r * src_stride..r * src_stride + cols];
        let d_row = &mut dst[r * dst_stride..r * dst_stride + cols];
        for (d, &v) in d_row.iter_mut().zip(s_row) {
            *d = quantize_value(v, s);
        }
    }
    Ok(scale)
}

/// INT8 matrix with one binary16 scale per `B x B` block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockQuantTensor {
    rows: usize,
    cols: usize,
    block: usize,
    values: Vec<i8>,
    scales: Vec<f16>,
}

impl BlockQuantTensor {
    /// Assembles a tensor from raw parts, validating every invariant.
    pub fn from_parts(
        rows: usize,
        cols: usize,
        block: usize,
        values: Vec<i8>,
        scales: Vec<f16>,
    ) -> Result<Self> {
        check_block_dims(rows, cols, block)?;
        ensure!(
            values.len() == rows * cols,
            Dimension,
            "{} values for a {rows}x{cols} tensor",
            values.len()
        );
        let (ln, lc) = (rows / block, cols / block);
        ensure!(
            scales.len() == ln * lc,
            Dimension,
            "{} scales for a {ln}x{lc} block grid",
            scales.len()
        );
        ensure!(
            !values.contains(&i8::MIN),
            Domain,
            "value -128 is outside the symmetric range"
        );
        for (i, s) in scales.iter().enumerate() {
            ensure!(
                s.is_finite() && s.to_f32() >= 0.0,
                Domain,
                "scale {s} at block {i} is not finite and nonnegative"
            );
            if s.to_f32() == 0.0 {
                let (bi, bj) = (i / lc, i % lc);
                let nonzero = (0..block).any(|r| {
                    let row = (bi * block + r) * cols + bj * block;
                    values[row..row + block].iter().any(|&v| v != 0)
                });
                ensure!(!nonzero, Domain, "zero scale on a nonzero block ({bi}, {bj})");
            }
        }
        Ok(Self { rows, cols, block, values, scales })
    }

    pub(crate) fn from_parts_unchecked(
        rows: usize,
        cols: usize,
        block: usize,
        values: Vec<i8>,
        scales: Vec<f16>,
    ) -> Self {
        debug_assert_eq!(values.len(), rows * cols);
        debug_assert_eq!(scales.len(), (rows / block) * (cols / block));
        Self { rows, cols, block, values, scales }
    }

    pub fn zeros(rows: usize, cols: usize, block: usize) -> Result<Self> {
        check_block_dims(rows, cols, block)?;
        Ok(Self::from_parts_unchecked(
            rows,
            cols,
            block,
            vec![0; rows * cols],
            vec![f16::ONE; (rows / block) * (cols / block)],
        ))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn block(&self) -> usize {
        self.block
    }

    /// Number of quantization blocks along the row axis (`L_N`).
    pub fn block_rows(&self) -> usize {
        self.rows / self.block
    }

    /// Number of quantization blocks along the column axis (`L_C`).
    pub fn block_cols(&self) -> usize {
        self.cols / self.block
    }

    pub fn values(&self) -> &[i8] {
        &self.values
    }

    pub fn scales(&self) -> &[f16] {
        &self.scales
    }

    #[inline]
    pub fn value(&self, r: usize, c: usize) -> i8 {
        self.values[r * self.cols + c]
    }

    #[inline]
    pub fn scale(&self, bi: usize, bj: usize) -> f32 {
        self.scales[bi * self.block_cols() + bj].to_f32()
    }

    /// Scale of the block enclosing element `(r, c)`.
    #[inline]
    pub fn scale_at(&self, r: usize, c: usize) -> f32 {
        self.scale(r / self.block, c / self.block)
    }

    pub(crate) fn scales_mut(&mut self) -> &mut [f16] {
        &mut self.scales
    }

    pub(crate) fn values_mut(&mut self) -> &mut [i8] {
        &mut self.values
    }

    /// Bytes needed to hold the INT8 values plus binary16 scales.
    pub fn storage_bytes(&self) -> usize {
        self.values.len() + 2 * self.scales.len()
    }

    pub fn dequantize(&self) -> DenseTensor {
        dequantize(self)
    }

    /// Writes the `JQT1` little-endian encoding.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        for dim in [self.rows, self.cols, self.block] {
            let dim = u32::try_from(dim)
                .map_err(|_| Error::Format(format!("dimension {dim} does not fit in u32")))?;
            w.write_all(&dim.to_le_bytes())?;
        }
        let bytes: Vec<u8> = self.values.iter().map(|&v| v as u8).collect();
        w.write_all(&bytes)?;
        let mut sbytes = Vec::with_capacity(self.scales.len() * 2);
        for s in &self.scales {
            sbytes.extend_from_slice(&s.to_bits().to_le_bytes());
        }
        w.write_all(&sbytes)?;
        Ok(())
    }

    /// Reads a `JQT1` encoding and validates the tensor invariants.
    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        ensure!(&magic == MAGIC, Format, "bad magic {magic:?}");
        let mut dims = [0usize; 3];
        for d in &mut dims {
            let mut buf = [0u8; 4];
            r.read_exact(&mut buf)?;
            *d = u32::from_le_bytes(buf) as usize;
        }
        let [rows, cols, block] = dims;
        check_block_dims(rows, cols, block).map_err(|e| Error::Format(e.to_string()))?;
        let mut raw = vec![0u8; rows * cols];
        r.read_exact(&mut raw)?;
        let values = raw.into_iter().map(|b| b as i8).collect();
        let n_scales = (rows / block) * (cols / block);
        let mut sraw = vec![0u8; n_scales * 2];
        r.read_exact(&mut sraw)?;
        let scales = sraw
            .chunks_exact(2)
            .map(|c| f16::from_bits(u16::from_le_bytes([c[0], c[1]])))
            .collect();
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        ensure!(rest.is_empty(), Format, "{} trailing bytes", rest.len());
        Self::from_parts(rows, cols, block, values, scales).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.storage_bytes());
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(bytes)
    }
}

fn check_block_dims(rows: usize, cols: usize, block: usize) -> Result<()> {
    ensure!(block > 0, Dimension, "quantization block size must be positive");
    ensure!(
        rows > 0 && cols > 0 && rows.is_multiple_of(block) && cols.is_multiple_of(block),
        Dimension,
        "{rows}x{cols} is not a positive multiple of block size {block}"
    );
    Ok(())
}

/// Per-block quantization: one scale per `B x B` block, `s = max|X_block| / 127`.
pub fn quantize_per_block(x: &DenseTensor, block: usize) -> Result<BlockQuantTensor> {
    check_block_dims(x.rows, x.cols, block)?;
    ensure!(x.is_finite(), Domain, "input contains non-finite values");
    let (ln, lc) = (x.rows / block, x.cols / block);
    let mut values = vec![0i8; x.rows * x.cols];
    let mut scales = Vec::with_capacity(ln * lc);
    for bi in 0..ln {
        for bj in 0..lc {
            let off = bi * block * x.cols + bj * block;
            let s = quantize_window(&x.data[off..], x.cols, block, block, &mut values[off..], x.cols)?;
            scales.push(s);
        }
    }
    Ok(BlockQuantTensor::from_parts_unchecked(x.rows, x.cols, block, values, scales))
}

pub fn dequantize(xq: &BlockQuantTensor) -> DenseTensor {
    let mut out = vec![0.0f32; xq.rows * xq.cols];
    let b = xq.block;
    for r in 0..xq.rows {
        let row = &xq.values[r * xq.cols..(r + 1) * xq.cols];
        let orow = &mut out[r * xq.cols..(r + 1) * xq.cols];
        for bj in 0..xq.block_cols() {
            let s = xq.scale(r / b, bj);
            for c in bj * b..(bj + 1) * b {
                orow[c] = row[c] as f32 * s;
            }
        }
    }
    DenseTensor::from_raw(xq.rows, xq.cols, out)
}

/// Granularity of the scale factors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantScheme {
    PerTensor,
    PerToken,
    PerChannel,
    PerBlock(usize),
}

impl QuantScheme {
    pub fn validate(&self) -> Result<()> {
        if let QuantScheme::PerBlock(b) = self {
            ensure!(*b > 0, InvalidArgument, "per-block size must be positive");
        }
        Ok(())
    }

    pub fn name(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for QuantScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QuantScheme::PerTensor => f.write_str("per-tensor"),
            QuantScheme::PerToken => f.write_str("per-token"),
            QuantScheme::PerChannel => f.write_str("per-channel"),
            QuantScheme::PerBlock(b) => write!(f, "per-block-{b}"),
        }
    }
}

impl FromStr for QuantScheme {
    type Err = Error;

    /// Accepts `per-tensor`, `per-token`, `per-channel`, `per-block` (B = 32)
    /// and `per-block-<B>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-tensor" => Ok(QuantScheme::PerTensor),
            "per-token" => Ok(QuantScheme::PerToken),
            "per-channel" => Ok(QuantScheme::PerChannel),
            "per-block" => Ok(QuantScheme::PerBlock(32)),
            other => {
                let b = other
                    .strip_prefix("per-block-")
                    .and_then(|b| b.parse::<usize>().ok())
                    .filter(|&b| b > 0)
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown scheme {other:?}")))?;
                Ok(QuantScheme::PerBlock(b))
            }
        }
    }
}

/// Where the scales of a [`SchemeQuantized`] tensor apply.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScaleLayout {
    Tensor,
    PerRow,
    PerColumn,
    Blocks { block: usize },
}

/// INT8 values with a scheme-dependent scale layout.
#[derive(Clone, Debug, PartialEq)]
pub struct SchemeQuantized {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<i8>,
    pub scales: Vec<f16>,
    pub layout: ScaleLayout,
}

impl SchemeQuantized {
    #[inline]
    pub fn scale_at(&self, r: usize, c: usize) -> f32 {
        let idx = match self.layout {
            ScaleLayout::Tensor => 0,
            ScaleLayout::PerRow => r,
            ScaleLayout::PerColumn => c,
            ScaleLayout::Blocks { block } => (r / block) * (self.cols / block) + c / block,
        };
        self.scales[idx].to_f32()
    }

    pub fn dequantize(&self) -> DenseTensor {
        let mut out = Vec::with_capacity(self.values.len());
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.push(self.values[r * self.cols + c] as f32 * self.scale_at(r, c));
            }
        }
        DenseTensor::from_raw(self.rows, self.cols, out)
    }
}

impl From<BlockQuantTensor> for SchemeQuantized {
    fn from(t: BlockQuantTensor) -> Self {
        SchemeQuantized {
            rows: t.rows,
            cols: t.cols,
            layout: ScaleLayout::Blocks { block: t.block },
            values: t.values,
            scales: t.scales,
        }
    }
}

/// Quantizes with the requested scale granularity; `PerBlock` delegates to
/// [`quantize_per_block`].
pub fn quantize_with_scheme(x: &DenseTensor, scheme: QuantScheme) -> Result<SchemeQuantized> {
    scheme.validate()?;
    ensure!(x.rows > 0 && x.cols > 0, Dimension, "empty tensor");
    ensure!(x.is_finite(), Domain, "input contains non-finite values");
    let (rows, cols) = x.shape();
    let mut values = vec![0i8; rows * cols];
    let (scales, layout) = match scheme {
        QuantScheme::PerBlock(b) => return quantize_per_block(x, b).map(Into::into),
        QuantScheme::PerTensor => {
            let s = quantize_window(&x.data, cols, rows, cols, &mut values, cols)?;
            (vec![s], ScaleLayout::Tensor)
        }
        QuantScheme::PerToken => {
            let mut scales = Vec::with_capacity(rows);
            for r in 0..rows {
                let off = r * cols;
                scales.push(quantize_window(&x.data[off..], cols, 1, cols, &mut values[off..], cols)?);
            }
            (scales, ScaleLayout::PerRow)
        }
        QuantScheme::PerChannel => {
            let mut scales = Vec::with_capacity(cols);
            for c in 0..cols {
                let absmax = (0..rows).fold(0.0f32, |m, r| m.max(x.get(r, c).abs()));
                let s = scale_from_absmax(absmax)?;
                let sf = s.to_f32();
                for r in 0..rows {
                    values[r * cols + c] = quantize_value(x.get(r, c), sf);
                }
                scales.push(s);
            }
            (scales, ScaleLayout::PerColumn)
        }
    };
    Ok(SchemeQuantized { rows, cols, values, scales, layout })
}

/// Quantize-dequantize round trip under a scheme.
pub fn fake_quantize(x: &DenseTensor, scheme: QuantScheme) -> Result<DenseTensor> {
    Ok(quantize_with_scheme(x, scheme)?.dequantize())
}

/// Mean squared and mean absolute round-trip error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct QuantizationError {
    pub mse: f64,
    pub mean_abs: f64,
}

pub fn quantization_error(x: &DenseTensor, scheme: QuantScheme) -> Result<QuantizationError> {
    let q = quantize_with_scheme(x, scheme)?;
    let (rows, cols) = x.shape();
    let (mut sq, mut abs) = (0.0f64, 0.0f64);
    for r in 0..rows {
        for c in 0..cols {
            let deq = q.values[r * cols + c] as f32 * q.scale_at(r, c);
            let e = (x.get(r, c) - deq) as f64;
            sq += e * e;
            abs += e.abs();
        }
    }
    let n = (rows * cols) as f64;
    Ok(QuantizationError { mse: sq / n, mean_abs: abs / n })
}

/// Standard-normal `rows x cols` matrix in which `round(fraction * cols)`
/// channels (at least one when `fraction > 0`) are multiplied by `factor`.
/// Returns the matrix and the sorted outlier columns.
pub fn channel_outlier_matrix(
    rows: usize,
    cols: usize,
    fraction: f64,
    factor: f32,
    seed: u64,
) -> Result<(DenseTensor, Vec<usize>)> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    ensure!((0.0..=1.0).contains(&fraction), InvalidArgument, "outlier fraction {fraction} outside [0, 1]");
    ensure!(factor.is_finite(), InvalidArgument, "outlier factor must be finite");
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let count = if fraction > 0.0 { ((fraction * cols as f64).round() as usize).clamp(1, cols) } else { 0 };
    let mut order: Vec<usize> = (0..cols).collect();
    order.shuffle(&mut rng);
    let mut outliers = order[..count].to_vec();
    outliers.sort_unstable();
    let mut gain = vec![1.0f32; cols];
    for &c in &outliers {
        gain[c] = factor;
    }
    let x = DenseTensor::from_fn(rows, cols, |_, c| {
        let v: f32 = StandardNormal.sample(&mut rng);
        v * gain[c]
    })?;
    Ok((x, outliers))
}
