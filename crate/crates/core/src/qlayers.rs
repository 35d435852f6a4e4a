//! Quantized linear layers and a pre-norm transformer block.
//!
//! The INT8 path exchanges only [`BlockQuantTensor`]s between operators and
//! saves INT8 tensors for the backward pass. The reference path runs the same
//! wiring on FP32 tensors, optionally fake-quantizing with any
//! [`QuantScheme`] at the points where the INT8 path quantizes. It serves as
//! the FP32 baseline and the per-tensor / per-token ablations.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dense::{self, maybe_fake_quantize};
use crate::error::{ensure, Error, Result};
use crate::qgemm::{
    block_mm_forward_bias, block_mm_grad_input, block_mm_grad_weight, ExecMode, GemmResult, TileConfig,
};
use crate::qnonlinear::{
    add_forward, add_quantized, dropout_backward, dropout_forward, gelu, gelu_backward, gelu_forward, gelu_grad,
    layernorm_backward_with, layernorm_forward, DropoutState, LayerNormContext, NlTile, NormParams, RowStats,
    DEFAULT_EPS,
};
use crate::qtensor::{quantize_per_block, BlockQuantTensor, DenseTensor, QuantScheme};

/// FP32 master parameter with its gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    rows: usize,
    cols: usize,
    /// Whether weight decay applies.
    pub decay: bool,
}

impl Param {
    pub fn new(rows: usize, cols: usize, value: Vec<f32>, decay: bool) -> Result<Self> {
        ensure!(
            value.len() == rows * cols,
            Dimension,
            "{} values for a {rows}x{cols} parameter",
            value.len()
        );
        Ok(Self { grad: vec![0.0; value.len()], value, rows, cols, decay })
    }

    pub fn filled(rows: usize, cols: usize, v: f32, decay: bool) -> Self {
        Self { value: vec![v; rows * cols], grad: vec![0.0; rows * cols], rows, cols, decay }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn tensor(&self) -> Result<DenseTensor> {
        DenseTensor::new(self.rows, self.cols, self.value.clone())
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn accumulate(&mut self, g: &[f32]) {
        debug_assert_eq!(g.len(), self.grad.len());
        for (a, &b) in self.grad.iter_mut().zip(g) {
            *a += b;
        }
    }
}

/// SplitMix64 finalizer, for deriving independent seeds from one run seed.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
enum LinearSaved {
    Int8 { x: BlockQuantTensor, w: BlockQuantTensor },
    Dense { x: DenseTensor, w: DenseTensor, scheme: Option<QuantScheme> },
}

/// `Y = X W^T + b` with an FP32 master weight of shape `out x in`.
#[derive(Clone, Debug)]
pub struct QuantLinear {
    pub weight: Param,
    pub bias: Option<Param>,
    pub cfg: TileConfig,
    pub mode: ExecMode,
    saved: Option<LinearSaved>,
}

impl QuantLinear {
    pub fn new(weight: Param, bias: Option<Param>, cfg: TileConfig) -> Result<Self> {
        cfg.validate()?;
        if let Some(b) = &bias {
            ensure!(
                b.len() == weight.rows,
                ShapeMismatch,
                "bias of length {} for {} outputs",
                b.len(),
                weight.rows
            );
        }
        Ok(Self { weight, bias, cfg, mode: ExecMode::Int8DataFlow, saved: None })
    }

    pub fn in_features(&self) -> usize {
        self.weight.cols
    }

    pub fn out_features(&self) -> usize {
        self.weight.rows
    }

    /// Current master weight quantized per block.
    pub fn weight_q(&self) -> Result<BlockQuantTensor> {
        quantize_per_block(&self.weight.tensor()?, self.cfg.block)
    }

    pub fn forward(&mut self, xq: &BlockQuantTensor) -> Result<BlockQuantTensor> {
        let block = self.cfg.block;
        self.forward_result(xq)?.into_int8(block)
    }

    /// Forward pass returning the accumulator, output and counters.
    pub fn forward_result(&mut self, xq: &BlockQuantTensor) -> Result<GemmResult> {
        let wq = self.weight_q()?;
        let bias = self.bias.as_ref().map(|b| b.value.as_slice());
        let res = block_mm_forward_bias(xq, &wq, bias, &self.cfg, self.mode)?;
        self.saved = Some(LinearSaved::Int8 { x: xq.clone(), w: wq });
        Ok(res)
    }

    /// Accumulates `dW` and `dbias` into the parameters and returns `dX`.
    pub fn backward(&mut self, dyq: &BlockQuantTensor) -> Result<BlockQuantTensor> {
        let (x, w) = match self.saved.take() {
            Some(LinearSaved::Int8 { x, w }) => (x, w),
            _ => return Err(Error::MissingContext("linear backward without an INT8 forward".into())),
        };
        let dx = block_mm_grad_input(dyq, &w, &self.cfg, self.mode)?.into_int8(self.cfg.block)?;
        let dw = block_mm_grad_weight(dyq, &x, &self.cfg, self.mode)?.output_dense();
        self.weight.accumulate(dw.data());
        if let Some(b) = &mut self.bias {
            b.accumulate(&dense::column_sums(&dyq.dequantize()));
        }
        Ok(dx)
    }

    /// Reference forward; `scheme` fake-quantizes the weight and the output.
    pub fn forward_reference(&mut self, x: &DenseTensor, scheme: Option<QuantScheme>) -> Result<DenseTensor> {
        let w = maybe_fake_quantize(self.weight.tensor()?, scheme)?;
        let mut y = dense::matmul_nt(x, &w)?;
        if let Some(b) = &self.bias {
            y = dense::add_row(&y, &b.value)?;
        }
        self.saved = Some(LinearSaved::Dense { x: x.clone(), w, scheme });
        maybe_fake_quantize(y, scheme)
    }

    pub fn backward_reference(&mut self, dy: &DenseTensor) -> Result<DenseTensor> {
        let (x, w, scheme) = match self.saved.take() {
            Some(LinearSaved::Dense { x, w, scheme }) => (x, w, scheme),
            _ => return Err(Error::MissingContext("linear backward without a reference forward".into())),
        };
        let dx = maybe_fake_quantize(dense::matmul(dy, &w)?, scheme)?;
        let dw = maybe_fake_quantize(dense::matmul_tn(dy, &x)?, scheme)?;
        self.weight.accumulate(dw.data());
        if let Some(b) = &mut self.bias {
            b.accumulate(&dense::column_sums(dy));
        }
        Ok(dx)
    }

    fn saved_int8(&self) -> Option<&BlockQuantTensor> {
        match &self.saved {
            Some(LinearSaved::Int8 { x, .. }) => Some(x),
            _ => None,
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.weight];
        if let Some(b) = &mut self.bias {
            v.push(b);
        }
        v
    }
}

#[derive(Clone, Debug)]
enum NormSaved {
    Int8(LayerNormContext),
    Dense { x: DenseTensor, mean: Vec<f32>, rstd: Vec<f32>, scheme: Option<QuantScheme> },
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
    pub eps: f32,
    saved: Option<NormSaved>,
}

impl LayerNorm {
    pub fn new(cols: usize) -> Self {
        Self {
            gamma: Param::filled(1, cols, 1.0, false),
            beta: Param::filled(1, cols, 0.0, false),
            eps: DEFAULT_EPS,
            saved: None,
        }
    }

    fn norm_params(&self) -> NormParams {
        NormParams { gamma: self.gamma.value.clone(), beta: self.beta.value.clone(), eps: self.eps }
    }

    pub fn forward(&mut self, xq: &BlockQuantTensor, stats: &RowStats) -> Result<BlockQuantTensor> {
        let (y, ctx) = layernorm_forward(xq, stats, &self.norm_params())?;
        self.saved = Some(NormSaved::Int8(ctx));
        Ok(y)
    }

    pub fn backward(&mut self, dyq: &BlockQuantTensor) -> Result<BlockQuantTensor> {
        let ctx = match self.saved.take() {
            Some(NormSaved::Int8(ctx)) => ctx,
            _ => return Err(Error::MissingContext("LayerNorm backward without an INT8 forward".into())),
        };
        let g = layernorm_backward_with(&ctx, dyq, &self.norm_params(), NlTile::default(), false)?;
        self.gamma.accumulate(&g.dgamma);
        self.beta.accumulate(&g.dbeta);
        Ok(g.dx)
    }

    /// Reference forward on `x`, with row moments taken from `moments_of`
    /// (the value of `x` before fake quantization).
    pub fn forward_reference(
        &mut self,
        x: &DenseTensor,
        moments_of: &DenseTensor,
        scheme: Option<QuantScheme>,
    ) -> Result<DenseTensor> {
        ensure!(
            x.shape() == moments_of.shape() && x.cols() == self.gamma.len(),
            ShapeMismatch,
            "LayerNorm over {:?} with moments of {:?} and {} features",
            x.shape(),
            moments_of.shape(),
            self.gamma.len()
        );
        let cols = x.cols() as f64;
        let (mut mean, mut rstd) = (Vec::new(), Vec::new());
        for r in 0..x.rows() {
            let row = moments_of.row(r);
            let m = row.iter().map(|&v| v as f64).sum::<f64>() / cols;
            let var = (row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / cols - m * m).max(0.0);
            mean.push(m as f32);
            rstd.push((1.0 / (var + self.eps as f64).sqrt()) as f32);
        }
        let (g, b) = (&self.gamma.value, &self.beta.value);
        let y = dense::map(x, |r, c, v| g[c] * (v - mean[r]) * rstd[r] + b[c]);
        self.saved = Some(NormSaved::Dense { x: x.clone(), mean, rstd, scheme });
        maybe_fake_quantize(y, scheme)
    }

    pub fn backward_reference(&mut self, dy: &DenseTensor) -> Result<DenseTensor> {
        let (x, mean, rstd, scheme) = match self.saved.take() {
            Some(NormSaved::Dense { x, mean, rstd, scheme }) => (x, mean, rstd, scheme),
            _ => return Err(Error::MissingContext("LayerNorm backward without a reference forward".into())),
        };
        ensure!(dy.shape() == x.shape(), ShapeMismatch, "dY {:?} for input {:?}", dy.shape(), x.shape());
        let (rows, cols) = x.shape();
        let gamma = &self.gamma.value;
        let mut dx = vec![0.0f32; rows * cols];
        let (mut dg, mut db) = (vec![0.0f32; cols], vec![0.0f32; cols]);
        for r in 0..rows {
            let (xr, dyr) = (x.row(r), dy.row(r));
            let (mut s1, mut s2) = (0.0f32, 0.0f32);
            for c in 0..cols {
                let xhat = (xr[c] - mean[r]) * rstd[r];
                s1 += gamma[c] * dyr[c];
                s2 += gamma[c] * dyr[c] * xhat;
                dg[c] += dyr[c] * xhat;
                db[c] += dyr[c];
            }
            let (s1, s2) = (s1 / cols as f32, s2 / cols as f32);
            for c in 0..cols {
                let xhat = (xr[c] - mean[r]) * rstd[r];
                dx[r * cols + c] = rstd[r] * (gamma[c] * dyr[c] - s1 - xhat * s2);
            }
        }
        self.gamma.accumulate(&dg);
        self.beta.accumulate(&db);
        maybe_fake_quantize(DenseTensor::new(rows, cols, dx)?, scheme)
    }

    fn saved_int8(&self) -> Option<&LayerNormContext> {
        match &self.saved {
            Some(NormSaved::Int8(ctx)) => Some(ctx),
            _ => None,
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

/// Causal multi-head self-attention in FP32 over consecutive sequences of
/// `seq_len` rows. Input is the fused `[Q | K | V]` projection (`N x 3C`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionCore {
    pub heads: usize,
    pub head_dim: usize,
    pub seq_len: usize,
}

struct HeadOut {
    start: usize,
    len: usize,
    head: usize,
    data: Vec<f32>,
}

impl AttentionCore {
    pub fn new(hidden: usize, heads: usize, seq_len: usize) -> Result<Self> {
        ensure!(
            heads > 0 && hidden.is_multiple_of(heads),
            InvalidArgument,
            "{hidden} features do not split into {heads} heads"
        );
        ensure!(seq_len > 0, InvalidArgument, "sequence length must be positive");
        Ok(Self { heads, head_dim: hidden / heads, seq_len })
    }

    fn hidden(&self) -> usize {
        self.heads * self.head_dim
    }

    fn work(&self, rows: usize) -> Vec<(usize, usize, usize)> {
        (0..rows)
            .step_by(self.seq_len)
            .flat_map(|s| (0..self.heads).map(move |h| (s, h)))
            .map(|(s, h)| (s, self.seq_len.min(rows - s), h))
            .collect()
    }

    fn check(&self, qkv: &DenseTensor) -> Result<()> {
        ensure!(
            qkv.cols() == 3 * self.hidden(),
            ShapeMismatch,
            "attention expects {} columns, got {}",
            3 * self.hidden(),
            qkv.cols()
        );
        Ok(())
    }

    /// Row-wise softmax probabilities of one head, `len x len`, zero above the diagonal.
    fn probs(&self, qkv: &DenseTensor, start: usize, len: usize, head: usize) -> Vec<f32> {
        let (c, dh) = (self.hidden(), self.head_dim);
        let scale = 1.0 / (dh as f32).sqrt();
        let mut p = vec![0.0f32; len * len];
        for i in 0..len {
            let q = &qkv.row(start + i)[head * dh..(head + 1) * dh];
            let row = &mut p[i * len..(i + 1) * len];
            let mut max = f32::NEG_INFINITY;
            for (j, s) in row.iter_mut().enumerate().take(i + 1) {
                let k = &qkv.row(start + j)[c + head * dh..c + (head + 1) * dh];
                *s = q.iter().zip(k).map(|(a, b)| a * b).sum::<f32>() * scale;
                max = max.max(*s);
            }
            let mut sum = 0.0f32;
            for s in row.iter_mut().take(i + 1) {
                *s = (*s - max).exp();
                sum += *s;
            }
            for s in row.iter_mut().take(i + 1) {
                *s /= sum;
            }
        }
        p
    }

    /// Attention probabilities of one sequence and head (for inspection).
    pub fn probabilities(&self, qkv: &DenseTensor, start: usize, head: usize) -> Result<DenseTensor> {
        self.check(qkv)?;
        ensure!(start < qkv.rows() && head < self.heads, InvalidArgument, "no sequence at row {start}, head {head}");
        let len = self.seq_len.min(qkv.rows() - start);
        DenseTensor::new(len, len, self.probs(qkv, start, len, head))
    }

    pub fn forward(&self, qkv: &DenseTensor) -> Result<DenseTensor> {
        self.check(qkv)?;
        let (c, dh) = (self.hidden(), self.head_dim);
        let outs: Vec<HeadOut> = self
            .work(qkv.rows())
            .into_par_iter()
            .map(|(start, len, head)| {
                let p = self.probs(qkv, start, len, head);
                let mut o = vec![0.0f32; len * dh];
                for i in 0..len {
                    let orow = &mut o[i * dh..(i + 1) * dh];
                    for j in 0..=i {
                        let v = &qkv.row(start + j)[2 * c + head * dh..2 * c + (head + 1) * dh];
                        let pij = p[i * len + j];
                        for (a, &b) in orow.iter_mut().zip(v) {
                            *a += pij * b;
                        }
                    }
                }
                HeadOut { start, len, head, data: o }
            })
            .collect();
        let mut out = vec![0.0f32; qkv.rows() * c];
        for h in outs {
            for i in 0..h.len {
                let dst = (h.start + i) * c + h.head * dh;
                out[dst..dst + dh].copy_from_slice(&h.data[i * dh..(i + 1) * dh]);
            }
        }
        DenseTensor::new(qkv.rows(), c, out)
    }

    /// Gradient with respect to the fused projection, recomputing the
    /// probabilities from `qkv`.
    pub fn backward(&self, qkv: &DenseTensor, dout: &DenseTensor) -> Result<DenseTensor> {
        self.check(qkv)?;
        let (c, dh) = (self.hidden(), self.head_dim);
        ensure!(
            dout.shape() == (qkv.rows(), c),
            ShapeMismatch,
            "attention output gradient {:?}, expected {:?}",
            dout.shape(),
            (qkv.rows(), c)
        );
        let scale = 1.0 / (dh as f32).sqrt();
        let outs: Vec<HeadOut> = self
            .work(qkv.rows())
            .into_par_iter()
            .map(|(start, len, head)| {
                let p = self.probs(qkv, start, len, head);
                let q = |i: usize| &qkv.row(start + i)[head * dh..(head + 1) * dh];
                let k = |i: usize| &qkv.row(start + i)[c + head * dh..c + (head + 1) * dh];
                let v = |i: usize| &qkv.row(start + i)[2 * c + head * dh..2 * c + (head + 1) * dh];
                let dout_row = |i: usize| &dout.row(start + i)[head * dh..(head + 1) * dh];
                // [dQ | dK | dV] for each row
                let mut g = vec![0.0f32; len * 3 * dh];
                let mut ds = vec![0.0f32; len];
                for i in 0..len {
                    let dor = dout_row(i);
                    let mut dot = 0.0f32;
                    for j in 0..=i {
                        let dp: f32 = dor.iter().zip(v(j)).map(|(a, b)| a * b).sum();
                        ds[j] = dp;
                        dot += p[i * len + j] * dp;
                    }
                    for j in 0..=i {
                        let pij = p[i * len + j];
                        let dsij = pij * (ds[j] - dot) * scale;
                        let (qi, kj) = (q(i), k(j));
                        for d in 0..dh {
                            g[i * 3 * dh + d] += dsij * kj[d];
                            g[j * 3 * dh + dh + d] += dsij * qi[d];
                            g[j * 3 * dh + 2 * dh + d] += pij * dor[d];
                        }
                    }
                }
                HeadOut { start, len, head, data: g }
            })
            .collect();
        let mut out = vec![0.0f32; qkv.rows() * 3 * c];
        for h in outs {
            for i in 0..h.len {
                for part in 0..3 {
                    let dst = (h.start + i) * 3 * c + part * c + h.head * dh;
                    let src = i * 3 * dh + part * dh;
                    out[dst..dst + dh].copy_from_slice(&h.data[src..src + dh]);
                }
            }
        }
        DenseTensor::new(qkv.rows(), 3 * c, out)
    }
}

/// Shape and execution settings of a transformer block.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub hidden: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub seq_len: usize,
    pub dropout: f32,
    pub tile: TileConfig,
    #[serde(default)]
    pub mode: ExecMode,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        self.tile.validate()?;
        let b = self.tile.block;
        ensure!(
            self.hidden > 0 && self.hidden.is_multiple_of(b),
            InvalidArgument,
            "hidden size {} is not a multiple of block {b}",
            self.hidden
        );
        ensure!(
            self.heads > 0 && self.hidden.is_multiple_of(self.heads),
            InvalidArgument,
            "hidden size {} is not divisible by {} heads",
            self.hidden,
            self.heads
        );
        ensure!(self.mlp_ratio > 0, InvalidArgument, "mlp ratio must be positive");
        ensure!(self.seq_len > 0, InvalidArgument, "sequence length must be positive");
        ensure!(
            (0.0..1.0).contains(&self.dropout),
            InvalidArgument,
            "dropout probability {} outside [0, 1)",
            self.dropout
        );
        Ok(())
    }

    pub fn mlp_hidden(&self) -> usize {
        self.hidden * self.mlp_ratio
    }
}

/// Byte count of the activations a block keeps for its backward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct SavedBytes {
    pub elements: u64,
    /// INT8 values plus binary16 scales.
    pub int8_bytes: u64,
    pub scale_bytes: u64,
    /// The same tensors stored as FP16.
    pub fp16_baseline_bytes: u64,
    /// Dropout masks and LayerNorm row statistics, identical in both layouts.
    pub aux_bytes: u64,
}

impl SavedBytes {
    pub fn ratio(&self) -> f64 {
        self.int8_bytes as f64 / self.fp16_baseline_bytes as f64
    }

    fn add_tensor(&mut self, t: &BlockQuantTensor) {
        let n = (t.rows() * t.cols()) as u64;
        self.elements += n;
        self.int8_bytes += t.storage_bytes() as u64;
        self.scale_bytes += 2 * t.scales().len() as u64;
        self.fp16_baseline_bytes += 2 * n;
    }
}

impl std::ops::AddAssign for SavedBytes {
    fn add_assign(&mut self, o: Self) {
        self.elements += o.elements;
        self.int8_bytes += o.int8_bytes;
        self.scale_bytes += o.scale_bytes;
        self.fp16_baseline_bytes += o.fp16_baseline_bytes;
        self.aux_bytes += o.aux_bytes;
    }
}

/// Closed-form saved-activation bytes of one block over `n` rows.
pub fn analytic_saved_bytes(n: usize, hidden: usize, mlp_hidden: usize, block: usize) -> SavedBytes {
    // x0, LN1 out, QKV, attention out, x1, LN2 out, fc1 out, GELU out
    let elements = (n * (8 * hidden + 2 * mlp_hidden)) as u64;
    let scale_bytes = 2 * elements / (block * block) as u64;
    SavedBytes {
        elements,
        int8_bytes: elements + scale_bytes,
        scale_bytes,
        fp16_baseline_bytes: 2 * elements,
        aux_bytes: 0,
    }
}

#[derive(Clone, Debug)]
enum BlockSaved {
    Int8 { qkv: BlockQuantTensor, pre_gelu: BlockQuantTensor, drop1: DropoutState, drop2: DropoutState },
    Dense { qkv: DenseTensor, pre_gelu: DenseTensor, drop1: DropoutState, drop2: DropoutState, scheme: Option<QuantScheme> },
}

/// Pre-norm transformer block:
/// `x1 = x0 + Drop(Proj(Attn(QKV(LN1(x0)))))`, `x2 = x1 + Drop(FC2(GELU(FC1(LN2(x1)))))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub cfg: BlockConfig,
    pub ln1: LayerNorm,
    pub qkv: QuantLinear,
    pub proj: QuantLinear,
    pub ln2: LayerNorm,
    pub fc1: QuantLinear,
    pub fc2: QuantLinear,
    attn: AttentionCore,
    /// Dropout is active only while training.
    pub training: bool,
    saved: Option<BlockSaved>,
    trace: Vec<(&'static str, (usize, usize))>,
}

impl TransformerBlock {
    /// Weights drawn by `init(rows, cols, residual_out)`; biases start at zero.
    pub fn new(cfg: BlockConfig, mut init: impl FnMut(usize, usize, bool) -> Vec<f32>) -> Result<Self> {
        cfg.validate()?;
        let (c, m) = (cfg.hidden, cfg.mlp_hidden());
        let mut linear = |out: usize, inp: usize, residual: bool| -> Result<QuantLinear> {
            let mut l = QuantLinear::new(
                Param::new(out, inp, init(out, inp, residual), true)?,
                Some(Param::filled(1, out, 0.0, false)),
                cfg.tile,
            )?;
            l.mode = cfg.mode;
            Ok(l)
        };
        Ok(Self {
            qkv: linear(3 * c, c, false)?,
            proj: linear(c, c, true)?,
            fc1: linear(m, c, false)?,
            fc2: linear(c, m, true)?,
            ln1: LayerNorm::new(c),
            ln2: LayerNorm::new(c),
            attn: AttentionCore::new(c, cfg.heads, cfg.seq_len)?,
            cfg,
            training: true,
            saved: None,
            trace: Vec::new(),
        })
    }

    pub fn attention(&self) -> &AttentionCore {
        &self.attn
    }

    fn dropouts(&self, rows: usize, seed: u64) -> Result<(DropoutState, DropoutState)> {
        let c = self.cfg.hidden;
        let p = if self.training { self.cfg.dropout } else { 0.0 };
        Ok((
            DropoutState::new(p, derive_seed(seed, 1), rows, c)?,
            DropoutState::new(p, derive_seed(seed, 2), rows, c)?,
        ))
    }

    fn record(&mut self, op: &'static str, t: &BlockQuantTensor) {
        self.trace.push((op, t.shape()));
    }

    /// Operator outputs exchanged during the last INT8 forward, in order.
    pub fn trace(&self) -> &[(&'static str, (usize, usize))] {
        &self.trace
    }

    /// INT8 forward. `stats0` are the row statistics of `x0` before it was
    /// quantized; the returned statistics belong to the returned tensor.
    pub fn forward(&mut self, x0: &BlockQuantTensor, stats0: &RowStats, seed: u64) -> Result<(BlockQuantTensor, RowStats)> {
        ensure!(
            x0.cols() == self.cfg.hidden && x0.block() == self.cfg.tile.block,
            ShapeMismatch,
            "block input {:?}/B={} for hidden {} and B={}",
            x0.shape(),
            x0.block(),
            self.cfg.hidden,
            self.cfg.tile.block
        );
        self.trace.clear();
        let (drop1, drop2) = self.dropouts(x0.rows(), seed)?;
        let h = self.ln1.forward(x0, stats0)?;
        self.record("ln1", &h);
        let qkv = self.qkv.forward(&h)?;
        self.record("qkv", &qkv);
        let o = quantize_per_block(&self.attn.forward(&qkv.dequantize())?, self.cfg.tile.block)?;
        self.record("attention", &o);
        let a = self.proj.forward(&o)?;
        self.record("proj", &a);
        let a = dropout_forward(&a, &drop1)?;
        self.record("dropout1", &a);
        let (x1, stats1) = add_forward(x0, &a)?;
        self.record("add1", &x1);
        let h2 = self.ln2.forward(&x1, &stats1)?;
        self.record("ln2", &h2);
        let f = self.fc1.forward(&h2)?;
        self.record("fc1", &f);
        let g = gelu_forward(&f)?;
        self.record("gelu", &g);
        let m = self.fc2.forward(&g)?;
        self.record("fc2", &m);
        let m = dropout_forward(&m, &drop2)?;
        self.record("dropout2", &m);
        let (x2, stats2) = add_forward(&x1, &m)?;
        self.record("add2", &x2);
        self.saved = Some(BlockSaved::Int8 { qkv, pre_gelu: f, drop1, drop2 });
        Ok((x2, stats2))
    }

    /// INT8 backward; parameter gradients accumulate in FP32.
    pub fn backward(&mut self, dx2: &BlockQuantTensor) -> Result<BlockQuantTensor> {
        let (qkv, f, drop1, drop2) = match self.saved.take() {
            Some(BlockSaved::Int8 { qkv, pre_gelu, drop1, drop2 }) => (qkv, pre_gelu, drop1, drop2),
            _ => return Err(Error::MissingContext("block backward without an INT8 forward".into())),
        };
        let dm = dropout_backward(dx2, &drop2)?;
        let dg = self.fc2.backward(&dm)?;
        let df = gelu_backward(&f, &dg)?;
        let dh2 = self.fc1.backward(&df)?;
        let dx1_norm = self.ln2.backward(&dh2)?;
        let dx1 = add_quantized(dx2, &dx1_norm)?;
        let da = dropout_backward(&dx1, &drop1)?;
        let do_ = self.proj.backward(&da)?;
        let dqkv = self.attn.backward(&qkv.dequantize(), &do_.dequantize())?;
        let dqkv = quantize_per_block(&dqkv, self.cfg.tile.block)?;
        let dh = self.qkv.backward(&dqkv)?;
        let dx0_norm = self.ln1.backward(&dh)?;
        add_quantized(&dx1, &dx0_norm)
    }

    /// Reference forward. `x0` is the (possibly fake-quantized) input and
    /// `x0_pre` its value before quantization. Returns the output and its
    /// pre-quantization value.
    pub fn forward_reference(
        &mut self,
        x0: &DenseTensor,
        x0_pre: &DenseTensor,
        scheme: Option<QuantScheme>,
        seed: u64,
    ) -> Result<(DenseTensor, DenseTensor)> {
        ensure!(
            x0.cols() == self.cfg.hidden,
            ShapeMismatch,
            "block input {:?} for hidden {}",
            x0.shape(),
            self.cfg.hidden
        );
        let (drop1, drop2) = self.dropouts(x0.rows(), seed)?;
        let fq = |t: DenseTensor| maybe_fake_quantize(t, scheme);
        let h = self.ln1.forward_reference(x0, x0_pre, scheme)?;
        let qkv = self.qkv.forward_reference(&h, scheme)?;
        let o = fq(self.attn.forward(&qkv)?)?;
        let a = apply_dropout(&self.proj.forward_reference(&o, scheme)?, &drop1);
        let x1_pre = dense::add(x0, &a)?;
        let x1 = fq(x1_pre.clone())?;
        let h2 = self.ln2.forward_reference(&x1, &x1_pre, scheme)?;
        let f = self.fc1.forward_reference(&h2, scheme)?;
        let g = fq(dense::map(&f, |_, _, v| gelu(v)))?;
        let m = apply_dropout(&self.fc2.forward_reference(&g, scheme)?, &drop2);
        let x2_pre = dense::add(&x1, &m)?;
        let x2 = fq(x2_pre.clone())?;
        self.saved = Some(BlockSaved::Dense { qkv, pre_gelu: f, drop1, drop2, scheme });
        Ok((x2, x2_pre))
    }

    pub fn backward_reference(&mut self, dx2: &DenseTensor) -> Result<DenseTensor> {
        let (qkv, f, drop1, drop2, scheme) = match self.saved.take() {
            Some(BlockSaved::Dense { qkv, pre_gelu, drop1, drop2, scheme }) => (qkv, pre_gelu, drop1, drop2, scheme),
            _ => return Err(Error::MissingContext("block backward without a reference forward".into())),
        };
        let fq = |t: DenseTensor| maybe_fake_quantize(t, scheme);
        let dm = apply_dropout(dx2, &drop2);
        let dg = self.fc2.backward_reference(&dm)?;
        let df = fq(dense::zip_map(&f, &dg, |x, dy| dy * gelu_grad(x))?)?;
        let dh2 = self.fc1.backward_reference(&df)?;
        let dx1_norm = self.ln2.backward_reference(&dh2)?;
        let dx1 = fq(dense::add(dx2, &dx1_norm)?)?;
        let da = apply_dropout(&dx1, &drop1);
        let do_ = self.proj.backward_reference(&da)?;
        let dqkv = fq(self.attn.backward(&qkv, &do_)?)?;
        let dh = self.qkv.backward_reference(&dqkv)?;
        let dx0_norm = self.ln1.backward_reference(&dh)?;
        fq(dense::add(&dx1, &dx0_norm)?)
    }

    /// Saved-activation bytes after an INT8 forward.
    pub fn saved_bytes(&self) -> Result<SavedBytes> {
        let missing = || Error::MissingContext("no INT8 forward has been run".into());
        let (qkv, f, drop1, drop2) = match &self.saved {
            Some(BlockSaved::Int8 { qkv, pre_gelu, drop1, drop2 }) => (qkv, pre_gelu, drop1, drop2),
            _ => return Err(missing()),
        };
        let ln1 = self.ln1.saved_int8().ok_or_else(missing)?;
        let ln2 = self.ln2.saved_int8().ok_or_else(missing)?;
        let mut s = SavedBytes::default();
        s.add_tensor(ln1.input());
        s.add_tensor(self.qkv.saved_int8().ok_or_else(missing)?);
        s.add_tensor(qkv);
        s.add_tensor(self.proj.saved_int8().ok_or_else(missing)?);
        s.add_tensor(ln2.input());
        s.add_tensor(self.fc1.saved_int8().ok_or_else(missing)?);
        s.add_tensor(f);
        s.add_tensor(self.fc2.saved_int8().ok_or_else(missing)?);
        s.aux_bytes = (ln1.side_bytes() + ln2.side_bytes() + drop1.mask_bytes() + drop2.mask_bytes()) as u64;
        Ok(s)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.ln1.params_mut();
        v.extend(self.qkv.params_mut());
        v.extend(self.proj.params_mut());
        v.extend(self.ln2.params_mut());
        v.extend(self.fc1.params_mut());
        v.extend(self.fc2.params_mut());
        v
    }
}

fn apply_dropout(x: &DenseTensor, state: &DropoutState) -> DenseTensor {
    if state.p() == 0.0 {
        return x.clone();
    }
    let gain = 1.0 / (1.0 - state.p());
    dense::map(x, |r, c, v| if state.keep(r, c) { v * gain } else { 0.0 })
}

/// Appends zero rows so the row count is a multiple of `multiple`.
pub fn pad_rows(x: &DenseTensor, multiple: usize) -> DenseTensor {
    let rows = x.rows().div_ceil(multiple.max(1)) * multiple.max(1);
    if rows == x.rows() {
        return x.clone();
    }
    let mut data = x.data().to_vec();
    data.resize(rows * x.cols(), 0.0);
    DenseTensor::from_raw(rows, x.cols(), data)
}
