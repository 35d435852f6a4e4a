//! Toy-scale training harness.
//!
//! A small decoder-only transformer is trained on a synthetic copy task or a
//! character corpus with one of: FP32, the INT8 block-quantized data flow, or
//! the FP32 reference path fake-quantized per token / channel / tensor.
//! Everything is seeded per step, so a run is reproducible from its config
//! alone and can resume from a checkpoint mid-way.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dense;
use crate::error::{ensure, Error, Result};
use crate::qgemm::{ExecMode, TileConfig};
use crate::qlayers::{derive_seed, BlockConfig, LayerNorm, Param, TransformerBlock};
use crate::qnonlinear::RowStats;
use crate::qtensor::{quantize_per_block, DenseTensor, QuantScheme};

/// Which numeric path a run trains with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeKind {
    Fp32,
    /// INT8 data flow with `B x B` blocks.
    PerBlock,
    PerToken,
    PerChannel,
    PerTensor,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 5] =
        [Self::Fp32, Self::PerBlock, Self::PerToken, Self::PerChannel, Self::PerTensor];

    /// Quantizer applied by the reference path, if any.
    pub fn quant_scheme(&self, block: usize) -> Option<QuantScheme> {
        match self {
            Self::Fp32 => None,
            Self::PerBlock => Some(QuantScheme::PerBlock(block)),
            Self::PerToken => Some(QuantScheme::PerToken),
            Self::PerChannel => Some(QuantScheme::PerChannel),
            Self::PerTensor => Some(QuantScheme::PerTensor),
        }
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Fp32 => "fp32",
            Self::PerBlock => "per-block",
            Self::PerToken => "per-token",
            Self::PerChannel => "per-channel",
            Self::PerTensor => "per-tensor",
        })
    }
}

impl FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown scheme '{s}'")))
    }
}

/// Training data source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ToyTask {
    /// `[x_1..x_L, SEP, y_1..y_L]` with symbols below `vocab`; the loss covers
    /// the second half. Each `y_i` equals `x_i`, except that with probability
    /// `noise` it is redrawn uniformly, which puts a floor under the loss.
    CopySequence {
        vocab: usize,
        length: usize,
        #[serde(default)]
        noise: f32,
    },
    /// Next-character prediction over windows of `context` bytes.
    CharLm { corpus: PathBuf, context: usize },
}

impl ToyTask {
    pub fn seq_len(&self) -> usize {
        match self {
            Self::CopySequence { length, .. } => 2 * length,
            Self::CharLm { context, .. } => *context,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::CopySequence { vocab, length, noise } => {
                ensure!(*vocab >= 2 && *length >= 1, InvalidArgument, "copy task needs vocab >= 2 and length >= 1");
                ensure!((0.0..=1.0).contains(noise), InvalidArgument, "copy noise {noise} outside [0, 1]");
            }
            Self::CharLm { context, .. } => {
                ensure!(*context >= 1, InvalidArgument, "context must be positive");
            }
        }
        Ok(())
    }
}

/// One batch of sequences flattened to rows.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Batch {
    pub tokens: Vec<u32>,
    pub targets: Vec<u32>,
    /// Rows that contribute to the loss.
    pub mask: Vec<bool>,
    pub seq_len: usize,
}

impl Batch {
    pub fn rows(&self) -> usize {
        self.tokens.len()
    }

    pub fn loss_rows(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(9 * self.rows());
        for i in 0..self.rows() {
            out.extend_from_slice(&self.tokens[i].to_le_bytes());
            out.extend_from_slice(&self.targets[i].to_le_bytes());
            out.push(self.mask[i] as u8);
        }
        out
    }
}

/// A loaded task that can produce batches.
#[derive(Clone, Debug)]
pub struct TaskSource {
    task: ToyTask,
    /// CharLM corpus mapped to vocabulary indices, with the train/val cut.
    text: Vec<u32>,
    split: usize,
    vocab: usize,
}

/// Train and validation batches are drawn from disjoint material.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl TaskSource {
    pub fn load(task: &ToyTask) -> Result<Self> {
        task.validate()?;
        match task {
            ToyTask::CopySequence { vocab, .. } => {
                Ok(Self { task: task.clone(), text: Vec::new(), split: 0, vocab: vocab + 1 })
            }
            ToyTask::CharLm { corpus, context } => {
                let bytes = fs::read(corpus)
                    .map_err(|e| Error::InvalidArgument(format!("cannot read corpus {}: {e}", corpus.display())))?;
                let alphabet: BTreeSet<u8> = bytes.iter().copied().collect();
                let index: Vec<u32> = {
                    let mut t = vec![0u32; 256];
                    for (i, &b) in alphabet.iter().enumerate() {
                        t[b as usize] = i as u32;
                    }
                    t
                };
                let text: Vec<u32> = bytes.iter().map(|&b| index[b as usize]).collect();
                let split = text.len() * 9 / 10;
                ensure!(
                    split > *context && text.len() - split > *context,
                    InvalidArgument,
                    "corpus of {} bytes too short for context {context}",
                    text.len()
                );
                Ok(Self { task: task.clone(), text, split, vocab: alphabet.len() })
            }
        }
    }

    pub fn task(&self) -> &ToyTask {
        &self.task
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    pub fn seq_len(&self) -> usize {
        self.task.seq_len()
    }

    /// `sequences` sequences drawn deterministically from `seed`.
    pub fn batch(&self, split: Split, sequences: usize, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = self.seq_len();
        let mut b = Batch {
            tokens: Vec::with_capacity(sequences * t),
            targets: Vec::with_capacity(sequences * t),
            mask: Vec::with_capacity(sequences * t),
            seq_len: t,
        };
        for _ in 0..sequences {
            match &self.task {
                ToyTask::CopySequence { vocab, length, noise } => {
                    let sep = *vocab as u32;
                    let data = loop {
                        let d: Vec<u32> = (0..*length).map(|_| rng.gen_range(0..*vocab as u32)).collect();
                        if is_val_sequence(&d) == (split == Split::Val) {
                            break d;
                        }
                    };
                    let mut full = data.clone();
                    full.push(sep);
                    for &x in &data {
                        let keep = *noise == 0.0 || rng.gen::<f32>() >= *noise;
                        full.push(if keep { x } else { rng.gen_range(0..*vocab as u32) });
                    }
                    for i in 0..t {
                        b.tokens.push(full[i]);
                        b.targets.push(full[i + 1]);
                        b.mask.push(i >= *length);
                    }
                }
                ToyTask::CharLm { context, .. } => {
                    let (lo, hi) = match split {
                        Split::Train => (0, self.split),
                        Split::Val => (self.split, self.text.len()),
                    };
                    let start = rng.gen_range(lo..hi - context);
                    for i in 0..t {
                        b.tokens.push(self.text[start + i]);
                        b.targets.push(self.text[start + i + 1]);
                        b.mask.push(true);
                    }
                }
            }
        }
        b
    }
}

/// Entropy in nats of one noisy copy target: the loss floor of the copy task.
pub fn copy_loss_floor(vocab: usize, noise: f32) -> f64 {
    let (v, e) = (vocab as f64, noise as f64);
    let hit = 1.0 - e + e / v;
    let miss = e / v;
    let term = |p: f64| if p > 0.0 { -p * p.ln() } else { 0.0 };
    term(hit) + (v - 1.0) * term(miss)
}

/// One in eight copy sequences (by content hash) is reserved for validation.
fn is_val_sequence(d: &[u32]) -> bool {
    let h = d.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &x| (h ^ x as u64).wrapping_mul(0x100_0000_01b3));
    derive_seed(h, 0).is_multiple_of(8)
}

/// `count` training batches of `sequences` sequences, the `i`-th seeded by
/// `(seed, i)`.
pub fn generate_task_data(task: &ToyTask, seed: u64, count: usize, sequences: usize) -> Result<Vec<Batch>> {
    let src = TaskSource::load(task)?;
    Ok((0..count).map(|i| src.batch(Split::Train, sequences, derive_seed(seed, i as u64))).collect())
}

/// Learning-rate schedule.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Cosine decay to 10% of the peak after warmup.
    Cosine,
}

/// Run configuration; omitted JSON fields take their [`Default`] values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub steps: usize,
    /// Sequences per step.
    pub batch_size: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub warmup_steps: usize,
    pub schedule: LrSchedule,
    pub beta2: f32,
    pub grad_clip: Option<f32>,
    pub dropout: f32,
    /// Quantization block size `B`.
    pub block: usize,
    pub scheme: SchemeKind,
    pub seed: u64,
    pub eval_every: usize,
    pub eval_sequences: usize,
    /// Gain applied to 1% of the channels after the embedding.
    pub outlier_gain: Option<f32>,
    pub tile: Option<TileConfig>,
    pub mode: ExecMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden: 64,
            heads: 4,
            mlp_ratio: 4,
            steps: 2000,
            batch_size: 16,
            lr: 1.5e-4,
            weight_decay: 0.1,
            warmup_steps: 0,
            schedule: LrSchedule::Constant,
            beta2: 0.95,
            grad_clip: None,
            dropout: 0.0,
            block: 32,
            scheme: SchemeKind::PerBlock,
            seed: 0,
            eval_every: 100,
            eval_sequences: 256,
            outlier_gain: None,
            tile: None,
            mode: ExecMode::Int8DataFlow,
        }
    }
}

impl TrainConfig {
    pub fn tile_config(&self) -> TileConfig {
        self.tile.unwrap_or_else(|| TileConfig::with_block(self.block))
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.layers >= 1, InvalidArgument, "at least one layer is required");
        ensure!(self.steps >= 1 && self.batch_size >= 1, InvalidArgument, "steps and batch_size must be positive");
        ensure!(self.eval_every >= 1 && self.eval_sequences >= 1, InvalidArgument, "eval_every and eval_sequences must be positive");
        ensure!(self.lr > 0.0 && self.lr.is_finite(), InvalidArgument, "learning rate must be positive");
        ensure!(self.weight_decay >= 0.0, InvalidArgument, "weight decay must be non-negative");
        ensure!((0.0..1.0).contains(&self.beta2), InvalidArgument, "beta2 must be in [0, 1)");
        if let Some(c) = self.grad_clip {
            ensure!(c > 0.0, InvalidArgument, "grad_clip must be positive");
        }
        if let Some(g) = self.outlier_gain {
            ensure!(g > 0.0 && g.is_finite(), InvalidArgument, "outlier gain must be positive");
        }
        let tile = self.tile_config();
        ensure!(tile.block == self.block, Config, "tile block {} differs from block {}", tile.block, self.block);
        ensure!(
            self.hidden.is_multiple_of(self.block) && self.hidden.is_multiple_of(self.heads.max(1)) && self.heads > 0,
            InvalidArgument,
            "hidden size {} must be a multiple of block {} and of {} heads",
            self.hidden,
            self.block,
            self.heads
        );
        self.block_config(1).validate()
    }

    fn block_config(&self, seq_len: usize) -> BlockConfig {
        BlockConfig {
            hidden: self.hidden,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            seq_len,
            dropout: self.dropout,
            tile: self.tile_config(),
            mode: self.mode,
        }
    }

    fn lr_at(&self, step: usize) -> f32 {
        if step <= self.warmup_steps {
            return self.lr * step as f32 / self.warmup_steps.max(1) as f32;
        }
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let span = (self.steps - self.warmup_steps).max(1) as f32;
                let t = (step - self.warmup_steps) as f32 / span;
                self.lr * (0.1 + 0.45 * (1.0 + (std::f32::consts::PI * t).cos()))
            }
        }
    }
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(weight_decay: f32, beta2: f32) -> Self {
        Self { beta1: 0.9, beta2, eps: 1e-8, weight_decay, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut Param], lr: f32) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - (self.beta1 as f64).powi(self.step as i32);
        let bc2 = 1.0 - (self.beta2 as f64).powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let decay = if p.decay { lr * self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.value.len() {
                let g = p.grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mhat = (m[j] as f64 / bc1) as f32;
                let vhat = (v[j] as f64 / bc2) as f32;
                p.value[j] -= decay * p.value[j];
                p.value[j] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Decoder-only transformer over a token vocabulary.
#[derive(Clone, Debug)]
pub struct Model {
    scheme: SchemeKind,
    block: usize,
    seq_len: usize,
    vocab: usize,
    pub tok_emb: Param,
    pub pos_emb: Param,
    /// Frozen per-channel gain after the embedding.
    gain: Vec<f32>,
    pub blocks: Vec<TransformerBlock>,
    pub ln_f: LayerNorm,
    pub head: Param,
    pub head_bias: Param,
    saved: Option<HeadSaved>,
}

#[derive(Clone, Debug)]
struct HeadSaved {
    batch_rows: usize,
    tokens: Vec<u32>,
    h: DenseTensor,
    dlogits: DenseTensor,
}

/// Channels that receive the outlier gain: 1% of `hidden`, at least one,
/// chosen by a fixed seed.
pub fn outlier_channels(hidden: usize) -> Vec<usize> {
    let count = ((hidden as f64 * 0.01).round() as usize).max(1);
    let mut idx: Vec<usize> = (0..hidden).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(0x0071_1e55));
    let mut chosen = idx[..count].to_vec();
    chosen.sort_unstable();
    chosen
}

impl Model {
    pub fn new(cfg: &TrainConfig, vocab: usize, seq_len: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x1417));
        let std = 0.02f32;
        let normal = Normal::new(0.0f32, std).expect("valid std");
        let residual = Normal::new(0.0f32, std / (2.0 * cfg.layers as f32).sqrt()).expect("valid std");
        let c = cfg.hidden;
        let mut draw = |n: usize, d: &Normal<f32>| -> Vec<f32> { (0..n).map(|_| d.sample(&mut rng)).collect() };
        let tok_emb = Param::new(vocab, c, draw(vocab * c, &normal), false)?;
        let pos_emb = Param::new(seq_len, c, draw(seq_len * c, &normal), false)?;
        let mut blocks = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            blocks.push(TransformerBlock::new(cfg.block_config(seq_len), |r, k, res| {
                draw(r * k, if res { &residual } else { &normal })
            })?);
        }
        let head = Param::new(vocab, c, draw(vocab * c, &normal), true)?;
        let mut gain = vec![1.0f32; c];
        if let Some(g) = cfg.outlier_gain {
            for ch in outlier_channels(c) {
                gain[ch] = g;
            }
        }
        Ok(Self {
            scheme: cfg.scheme,
            block: cfg.block,
            seq_len,
            vocab,
            tok_emb,
            pos_emb,
            gain,
            blocks,
            ln_f: LayerNorm::new(c),
            head,
            head_bias: Param::filled(1, vocab, 0.0, false),
            saved: None,
        })
    }

    pub fn scheme(&self) -> SchemeKind {
        self.scheme
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            v.extend(b.params_mut());
        }
        v.extend(self.ln_f.params_mut());
        v.push(&mut self.head);
        v.push(&mut self.head_bias);
        v
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn set_training(&mut self, training: bool) {
        for b in &mut self.blocks {
            b.training = training;
        }
    }

    fn embed(&self, batch: &Batch, rows: usize) -> Result<DenseTensor> {
        let c = self.tok_emb.shape().1;
        let mut x = vec![0.0f32; rows * c];
        for (i, &tok) in batch.tokens.iter().enumerate() {
            ensure!((tok as usize) < self.vocab, InvalidArgument, "token {tok} outside vocabulary {}", self.vocab);
            let pos = i % batch.seq_len;
            let (te, pe) = (&self.tok_emb.value[tok as usize * c..][..c], &self.pos_emb.value[pos * c..][..c]);
            for j in 0..c {
                x[i * c + j] = (te[j] + pe[j]) * self.gain[j];
            }
        }
        DenseTensor::new(rows, c, x)
    }

    /// Mean cross-entropy over masked rows; keeps what the backward pass needs.
    pub fn forward(&mut self, batch: &Batch, seed: u64) -> Result<f64> {
        ensure!(
            batch.seq_len == self.seq_len,
            ShapeMismatch,
            "batch sequence length {} for a model built for {}",
            batch.seq_len,
            self.seq_len
        );
        ensure!(batch.loss_rows() > 0, InvalidArgument, "batch has no loss rows");
        let rows = batch.rows().div_ceil(self.block) * self.block;
        let x = self.embed(batch, rows)?;
        let quant = self.scheme.quant_scheme(self.block);
        let xl = if self.scheme == SchemeKind::PerBlock {
            let mut stats = RowStats::from_dense(&x, stats_width(x.cols()))?;
            let mut xq = quantize_per_block(&x, self.block)?;
            for (i, b) in self.blocks.iter_mut().enumerate() {
                (xq, stats) = b.forward(&xq, &stats, derive_seed(seed, i as u64))?;
            }
            xq.dequantize()
        } else {
            let mut pre = x;
            let mut cur = dense::maybe_fake_quantize(pre.clone(), quant)?;
            for (i, b) in self.blocks.iter_mut().enumerate() {
                (cur, pre) = b.forward_reference(&cur, &pre, quant, derive_seed(seed, i as u64))?;
            }
            cur
        };
        let h = self.ln_f.forward_reference(&xl, &xl, None)?;
        let logits = dense::add_row(&dense::matmul_nt(&h, &self.head.tensor()?)?, &self.head_bias.value)?;

        let count = batch.loss_rows() as f64;
        let mut loss = 0.0f64;
        let mut dlogits = vec![0.0f32; rows * self.vocab];
        for i in 0..batch.rows() {
            if !batch.mask[i] {
                continue;
            }
            let row = logits.row(i);
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let sum: f64 = row.iter().map(|&v| ((v - max) as f64).exp()).sum();
            let t = batch.targets[i] as usize;
            loss += sum.ln() - (row[t] - max) as f64;
            let d = &mut dlogits[i * self.vocab..(i + 1) * self.vocab];
            for (j, dv) in d.iter_mut().enumerate() {
                let p = ((row[j] - max) as f64).exp() / sum;
                *dv = ((p - (j == t) as u8 as f64) / count) as f32;
            }
        }
        self.saved = Some(HeadSaved {
            batch_rows: batch.rows(),
            tokens: batch.tokens.clone(),
            h,
            dlogits: DenseTensor::from_raw(rows, self.vocab, dlogits),
        });
        Ok(loss / count)
    }

    /// Accumulates gradients for the last forward pass.
    pub fn backward(&mut self) -> Result<()> {
        let s = self.saved.take().ok_or_else(|| Error::MissingContext("model backward without forward".into()))?;
        self.head.accumulate(dense::matmul_tn(&s.dlogits, &s.h)?.data());
        self.head_bias.accumulate(&dense::column_sums(&s.dlogits));
        let dh = dense::matmul(&s.dlogits, &self.head.tensor()?)?;
        let dxl = self.ln_f.backward_reference(&dh)?;
        let dx = if self.scheme == SchemeKind::PerBlock {
            let mut g = quantize_per_block(&dxl, self.block)?;
            for b in self.blocks.iter_mut().rev() {
                g = b.backward(&g)?;
            }
            g.dequantize()
        } else {
            let mut g = dense::maybe_fake_quantize(dxl, self.scheme.quant_scheme(self.block))?;
            for b in self.blocks.iter_mut().rev() {
                g = b.backward_reference(&g)?;
            }
            g
        };
        let c = dx.cols();
        for i in 0..s.batch_rows {
            let (tok, pos) = (s.tokens[i] as usize, i % self.seq_len);
            let row = dx.row(i);
            for j in 0..c {
                let g = row[j] * self.gain[j];
                self.tok_emb.grad[tok * c + j] += g;
                self.pos_emb.grad[pos * c + j] += g;
            }
        }
        Ok(())
    }

    /// Mean loss over `batches` with dropout disabled.
    pub fn evaluate(&mut self, batches: &[Batch]) -> Result<f64> {
        self.set_training(false);
        let mut total = 0.0;
        let mut n = 0usize;
        let res = batches.iter().try_for_each(|b| {
            total += self.forward(b, 0)? * b.loss_rows() as f64;
            n += b.loss_rows();
            Ok(())
        });
        self.saved = None;
        self.set_training(true);
        res.map(|()| total / n as f64)
    }

    fn param_tensors(&mut self) -> Vec<(Vec<f32>, (usize, usize))> {
        self.params_mut().into_iter().map(|p| (p.value.clone(), p.shape())).collect()
    }
}

fn stats_width(cols: usize) -> usize {
    let mut w = crate::qnonlinear::DEFAULT_NL_TILE.min(cols);
    while !cols.is_multiple_of(w) {
        w -= 1;
    }
    w
}

/// One logged point of a run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainRecord {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub grad_norm: f64,
    pub scheme: SchemeKind,
    /// Seconds since the run (or resume) started; not part of the CSV.
    #[serde(skip)]
    pub wallclock: f64,
    pub diverged: bool,
}

/// Records of a run plus the step at which it diverged, if it did.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub records: Vec<TrainRecord>,
    pub diverged_at: Option<usize>,
}

impl TrainOutcome {
    pub fn final_val_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.val_loss)
    }
}

/// A training run that can be advanced, checkpointed and resumed.
pub struct Trainer {
    cfg: TrainConfig,
    source: TaskSource,
    model: Model,
    opt: AdamW,
    step: usize,
    val: Vec<Batch>,
    loss_acc: (f64, usize),
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, task: &ToyTask) -> Result<Self> {
        cfg.validate()?;
        let source = TaskSource::load(task)?;
        let model = Model::new(cfg, source.vocab_size(), source.seq_len())?;
        let val_seed = derive_seed(cfg.seed, 0x7a1);
        let per = cfg.batch_size;
        let val = (0..cfg.eval_sequences.div_ceil(per))
            .map(|i| {
                let n = per.min(cfg.eval_sequences - i * per);
                source.batch(Split::Val, n, derive_seed(val_seed, i as u64))
            })
            .collect();
        Ok(Self {
            opt: AdamW::new(cfg.weight_decay, cfg.beta2),
            cfg: cfg.clone(),
            source,
            model,
            step: 0,
            val,
            loss_acc: (0.0, 0),
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model_mut(&mut self) -> &mut Model {
        &mut self.model
    }

    /// Trains up to `until` (inclusive), returning records logged on the way.
    pub fn run_until(&mut self, until: usize) -> Result<TrainOutcome> {
        let start = Instant::now();
        let mut records = Vec::new();
        let until = until.min(self.cfg.steps);
        while self.step < until {
            let step = self.step + 1;
            let batch = self.source.batch(Split::Train, self.cfg.batch_size, derive_seed(self.cfg.seed, step as u64));
            self.model.zero_grad();
            let loss = self.model.forward(&batch, derive_seed(self.cfg.seed ^ 0xd20f, step as u64));
            let loss = match loss {
                Ok(l) if l.is_finite() => l,
                Ok(_) | Err(Error::Domain(_)) => return Ok(self.diverged(step, records, start)),
                Err(e) => return Err(e),
            };
            match self.model.backward() {
                Ok(()) => {}
                Err(Error::Domain(_)) => return Ok(self.diverged(step, records, start)),
                Err(e) => return Err(e),
            }
            let mut params = self.model.params_mut();
            let norm = params
                .iter()
                .flat_map(|p| p.grad.iter())
                .map(|&g| g as f64 * g as f64)
                .sum::<f64>()
                .sqrt();
            if !norm.is_finite() {
                return Ok(self.diverged(step, records, start));
            }
            if let Some(clip) = self.cfg.grad_clip {
                if norm > clip as f64 {
                    let k = (clip as f64 / norm) as f32;
                    params.iter_mut().for_each(|p| p.grad.iter_mut().for_each(|g| *g *= k));
                }
            }
            self.opt.step(&mut params, self.cfg.lr_at(step));
            self.step = step;
            self.loss_acc.0 += loss;
            self.loss_acc.1 += 1;

            if step.is_multiple_of(self.cfg.eval_every) || step == self.cfg.steps {
                let val_loss = match self.model.evaluate(&self.val.clone()) {
                    Ok(v) if v.is_finite() => v,
                    Ok(_) | Err(Error::Domain(_)) => return Ok(self.diverged(step, records, start)),
                    Err(e) => return Err(e),
                };
                records.push(TrainRecord {
                    step,
                    train_loss: self.loss_acc.0 / self.loss_acc.1 as f64,
                    val_loss,
                    grad_norm: norm,
                    scheme: self.cfg.scheme,
                    wallclock: start.elapsed().as_secs_f64(),
                    diverged: false,
                });
                self.loss_acc = (0.0, 0);
            }
        }
        Ok(TrainOutcome { records, diverged_at: None })
    }

    fn diverged(&mut self, step: usize, mut records: Vec<TrainRecord>, start: Instant) -> TrainOutcome {
        records.push(TrainRecord {
            step,
            train_loss: f64::NAN,
            val_loss: f64::NAN,
            grad_norm: f64::NAN,
            scheme: self.cfg.scheme,
            wallclock: start.elapsed().as_secs_f64(),
            diverged: true,
        });
        TrainOutcome { records, diverged_at: Some(step) }
    }

    /// Writes `<dir>/checkpoint.bin` and `<dir>/checkpoint.json`.
    pub fn save_checkpoint(&mut self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let tensors = self.model.param_tensors();
        let mut buf = Vec::new();
        buf.extend_from_slice(CKPT_MAGIC);
        buf.extend_from_slice(&(self.step as u64).to_le_bytes());
        buf.extend_from_slice(&self.opt.step.to_le_bytes());
        buf.extend_from_slice(&self.loss_acc.0.to_le_bytes());
        buf.extend_from_slice(&(self.loss_acc.1 as u64).to_le_bytes());
        let empty = Vec::new();
        for (i, (v, _)) in tensors.iter().enumerate() {
            for part in [v, self.opt.m.get(i).unwrap_or(&empty), self.opt.v.get(i).unwrap_or(&empty)] {
                buf.extend_from_slice(&(part.len() as u64).to_le_bytes());
                for x in part {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        fs::File::create(dir.join("checkpoint.bin"))?.write_all(&buf)?;
        let manifest = CheckpointManifest {
            format: 1,
            step: self.step,
            config: self.cfg.clone(),
            task: self.source.task().clone(),
            shapes: tensors.iter().map(|t| t.1).collect(),
        };
        fs::write(dir.join("checkpoint.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    /// Restores a run saved by [`Trainer::save_checkpoint`].
    pub fn load_checkpoint(dir: &Path) -> Result<Self> {
        let manifest: CheckpointManifest = serde_json::from_slice(&fs::read(dir.join("checkpoint.json"))?)?;
        ensure!(manifest.format == 1, Format, "unsupported checkpoint format {}", manifest.format);
        let mut t = Trainer::new(&manifest.config, &manifest.task)?;
        let mut bytes = Vec::new();
        fs::File::open(dir.join("checkpoint.bin"))?.read_to_end(&mut bytes)?;
        let mut r = ByteReader { bytes: &bytes, pos: 0 };
        ensure!(r.take(4)? == CKPT_MAGIC, Format, "bad checkpoint magic");
        t.step = r.u64()? as usize;
        t.opt.step = r.u64()?;
        t.loss_acc = (f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")), r.u64()? as usize);
        ensure!(t.step == manifest.step, Format, "manifest step {} differs from payload {}", manifest.step, t.step);
        let (mut ms, mut vs) = (Vec::new(), Vec::new());
        {
            let params = t.model.params_mut();
            ensure!(params.len() == manifest.shapes.len(), Format, "parameter count differs from manifest");
            for (p, &shape) in params.into_iter().zip(&manifest.shapes) {
                ensure!(p.shape() == shape, Format, "parameter shape {:?} vs manifest {:?}", p.shape(), shape);
                let value = r.f32s()?;
                ensure!(value.len() == p.len(), Format, "parameter payload of {} values for {}", value.len(), p.len());
                p.value = value;
                ms.push(r.f32s()?);
                vs.push(r.f32s()?);
            }
        }
        ensure!(r.pos == bytes.len(), Format, "{} trailing bytes in checkpoint", bytes.len() - r.pos);
        if t.opt.step > 0 {
            t.opt.m = ms;
            t.opt.v = vs;
        }
        Ok(t)
    }
}

const CKPT_MAGIC: &[u8; 4] = b"I8CK";

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    format: u32,
    step: usize,
    config: TrainConfig,
    task: ToyTask,
    shapes: Vec<(usize, usize)>,
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl ByteReader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        ensure!(self.pos + n <= self.bytes.len(), Format, "truncated checkpoint");
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self) -> Result<Vec<f32>> {
        let n = self.u64()? as usize;
        ensure!(n <= self.bytes.len() / 4, Format, "implausible tensor length {n}");
        Ok(self.take(4 * n)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}

/// Trains a fresh run to completion.
pub fn run_training(cfg: &TrainConfig, task: &ToyTask) -> Result<TrainOutcome> {
    Trainer::new(cfg, task)?.run_until(cfg.steps)
}

/// Final and best losses of one run, with its gap to the reference run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub label: String,
    pub final_step: usize,
    pub final_val_loss: f64,
    pub best_val_loss: f64,
    pub final_train_loss: f64,
    /// `(final - reference final) / reference final`.
    pub rel_gap: f64,
}

/// Linear interpolation of `f(record)` at `step`.
fn interpolate(records: &[TrainRecord], step: usize, f: impl Fn(&TrainRecord) -> f64) -> f64 {
    match records.iter().position(|r| r.step >= step) {
        Some(0) => f(&records[0]),
        Some(i) => {
            let (a, b) = (&records[i - 1], &records[i]);
            let t = (step - a.step) as f64 / (b.step - a.step) as f64;
            f(a) + t * (f(b) - f(a))
        }
        None => f(records.last().expect("non-empty")),
    }
}

/// Aligns runs on a common step grid and summarizes them against the first.
///
/// When grids differ, every run is resampled onto the steps of the first run
/// that lie within the range all runs cover.
pub fn compare_runs(runs: &[(String, Vec<TrainRecord>)]) -> Result<Vec<RunSummary>> {
    ensure!(!runs.is_empty(), InvalidArgument, "no runs to compare");
    for (label, r) in runs {
        ensure!(!r.is_empty(), InvalidArgument, "run '{label}' has no records");
    }
    let last = runs.iter().map(|(_, r)| r.last().expect("non-empty").step).min().expect("non-empty");
    let first = runs.iter().map(|(_, r)| r[0].step).max().expect("non-empty");
    let grid: Vec<usize> = runs[0].1.iter().map(|r| r.step).filter(|&s| s >= first && s <= last).collect();
    let grid = if grid.is_empty() { vec![last] } else { grid };
    let final_step = *grid.last().expect("non-empty");

    let reference = interpolate(&runs[0].1, final_step, |r| r.val_loss);
    Ok(runs
        .iter()
        .map(|(label, recs)| {
            let vals: Vec<f64> = grid.iter().map(|&s| interpolate(recs, s, |r| r.val_loss)).collect();
            let final_val = *vals.last().expect("non-empty");
            RunSummary {
                label: label.clone(),
                final_step,
                final_val_loss: final_val,
                best_val_loss: vals.iter().copied().fold(f64::INFINITY, f64::min),
                final_train_loss: interpolate(recs, final_step, |r| r.train_loss),
                rel_gap: (final_val - reference) / reference,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn copy_task() -> ToyTask {
        ToyTask::CopySequence { vocab: 8, length: 8, noise: 0.0 }
    }

    fn small_cfg(scheme: SchemeKind) -> TrainConfig {
        TrainConfig {
            layers: 1,
            hidden: 32,
            heads: 2,
            mlp_ratio: 2,
            steps: 20,
            batch_size: 4,
            lr: 3e-3,
            eval_every: 10,
            eval_sequences: 8,
            scheme,
            ..Default::default()
        }
    }

    #[test]
    fn copy_batches_are_deterministic_and_well_formed() {
        let src = TaskSource::load(&copy_task()).unwrap();
        let a = src.batch(Split::Train, 4, 9);
        assert_eq!(a.to_bytes(), src.batch(Split::Train, 4, 9).to_bytes());
        assert_ne!(a, src.batch(Split::Train, 4, 10));
        assert_eq!(a.rows(), 64);
        for s in 0..4 {
            let t = &a.tokens[s * 16..(s + 1) * 16];
            let y = &a.targets[s * 16..(s + 1) * 16];
            assert_eq!(t[8], 8);
            assert_eq!(&t[9..], &t[..7]);
            assert_eq!(&y[8..], &t[..8]);
            assert!(t.iter().all(|&v| v <= 8));
            assert_eq!(a.mask[s * 16..(s + 1) * 16].iter().filter(|&&m| m).count(), 8);
        }
    }

    #[test]
    fn noisy_copy_targets_and_floor() {
        let src = TaskSource::load(&ToyTask::CopySequence { vocab: 16, length: 8, noise: 0.25 }).unwrap();
        let b = src.batch(Split::Train, 2000, 1);
        let (mut same, mut total) = (0usize, 0usize);
        for s in 0..2000 {
            let t = &b.tokens[s * 16..(s + 1) * 16];
            let y = &b.targets[s * 16..(s + 1) * 16];
            assert_eq!(&y[..7], &t[1..8]);
            for i in 0..8 {
                same += (y[8 + i] == t[i]) as usize;
                total += 1;
            }
        }
        let hit = same as f64 / total as f64;
        assert!((hit - (0.75 + 0.25 / 16.0)).abs() < 0.01, "{hit}");
        assert_eq!(copy_loss_floor(16, 0.0), 0.0);
        assert!((copy_loss_floor(16, 1.0) - (16f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn copy_splits_are_disjoint() {
        let src = TaskSource::load(&ToyTask::CopySequence { vocab: 2, length: 4, noise: 0.0 }).unwrap();
        let seqs = |split| -> BTreeSet<Vec<u32>> {
            let b = src.batch(split, 200, 3);
            b.tokens.chunks(8).map(|c| c[..4].to_vec()).collect()
        };
        assert!(seqs(Split::Train).is_disjoint(&seqs(Split::Val)));
    }

    #[test]
    fn adamw_first_step_matches_closed_form() {
        // f(p) = 0.5 * a * p^2, gradient a * p
        let mut p = Param::new(1, 3, vec![1.0, -2.0, 0.5], true).unwrap();
        let a = [2.0f32, 0.5, 4.0];
        p.grad = p.value.iter().zip(a).map(|(x, a)| a * x).collect();
        let before = p.value.clone();
        let (lr, wd) = (0.01f32, 0.1f32);
        let mut opt = AdamW::new(wd, 0.999);
        opt.step(&mut [&mut p], lr);
        for i in 0..3 {
            let g = a[i] as f64 * before[i] as f64;
            let want = before[i] as f64 * (1.0 - (lr * wd) as f64) - lr as f64 * g / (g.abs() + 1e-8);
            assert!((p.value[i] as f64 - want).abs() < 1e-6, "{i}");
        }
    }

    #[test]
    fn learning_rate_schedule() {
        let cfg = TrainConfig { warmup_steps: 10, steps: 110, lr: 1.0, schedule: LrSchedule::Cosine, ..Default::default() };
        assert_eq!(cfg.lr_at(5), 0.5);
        assert_eq!(cfg.lr_at(10), 1.0);
        assert!((cfg.lr_at(110) - 0.1).abs() < 1e-6);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { hidden: 48, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { heads: 3, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { dropout: 1.0, ..Default::default() }.validate().is_err());
        let json = r#"{"layers":1,"hidden":32,"heads":2,"steps":5,"batch_size":2,"lr":0.001,"weight_decay":0.1,"block":32,"scheme":"per-token","seed":3}"#;
        let cfg: TrainConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.scheme, SchemeKind::PerToken);
        assert!(serde_json::from_str::<TrainConfig>(&json.replace("\"seed\"", "\"sed\"")).is_err());
    }

    #[test]
    fn scheme_names_round_trip() {
        for k in SchemeKind::ALL {
            assert_eq!(k.to_string().parse::<SchemeKind>().unwrap(), k);
        }
        assert!("per-row".parse::<SchemeKind>().is_err());
    }

    #[test]
    fn initial_loss_is_near_uniform() {
        for scheme in [SchemeKind::Fp32, SchemeKind::PerBlock] {
            let mut t = Trainer::new(&small_cfg(scheme), &copy_task()).unwrap();
            let src = TaskSource::load(&copy_task()).unwrap();
            let loss = t.model_mut().forward(&src.batch(Split::Train, 4, 1), 0).unwrap();
            assert!((loss / (9f64).ln() - 1.0).abs() < 0.05, "{scheme}: {loss}");
        }
    }

    #[test]
    fn fp32_model_gradient_matches_finite_differences() {
        let cfg = TrainConfig { scheme: SchemeKind::Fp32, ..small_cfg(SchemeKind::Fp32) };
        let src = TaskSource::load(&copy_task()).unwrap();
        let batch = src.batch(Split::Train, 2, 5);
        let mut m = Model::new(&cfg, src.vocab_size(), src.seq_len()).unwrap();
        m.zero_grad();
        m.forward(&batch, 0).unwrap();
        m.backward().unwrap();
        let h = 1e-3f32;
        // spot-check one entry of several parameters
        for (pi, idx) in [(0usize, 3usize), (1, 5), (4, 17), (6, 33), (8, 20), (10, 100), (12, 7), (14, 3), (16, 2), (17, 1)] {
            let g = m.params_mut()[pi].grad[idx] as f64;
            let probe = |d: f32| {
                let mut mm = m.clone();
                mm.params_mut()[pi].value[idx] += d;
                mm.forward(&batch, 0).unwrap()
            };
            let fd = (probe(h) - probe(-h)) / (2.0 * h as f64);
            assert!((g - fd).abs() < 5e-4 + 1e-2 * fd.abs(), "param {pi}[{idx}]: {g} vs {fd}");
        }
    }

    #[test]
    fn training_reduces_loss_for_every_scheme() {
        for scheme in SchemeKind::ALL {
            let cfg = TrainConfig { steps: 50, eval_every: 50, ..small_cfg(scheme) };
            let out = run_training(&cfg, &copy_task()).unwrap();
            assert!(out.diverged_at.is_none());
            let first = TaskSource::load(&copy_task()).map(|_| (9f64).ln()).unwrap();
            assert!(out.records[0].val_loss < first, "{scheme}: {:?}", out.records);
        }
    }

    #[test]
    fn runs_are_deterministic_and_resumable() {
        let cfg = small_cfg(SchemeKind::PerBlock);
        let a = run_training(&cfg, &copy_task()).unwrap();
        let b = run_training(&cfg, &copy_task()).unwrap();
        let strip = |o: &TrainOutcome| o.records.iter().map(|r| (r.step, r.train_loss.to_bits(), r.val_loss.to_bits())).collect::<Vec<_>>();
        assert_eq!(strip(&a), strip(&b));

        let dir = std::env::temp_dir().join(format!("int8flow-ckpt-{}", std::process::id()));
        let mut t = Trainer::new(&cfg, &copy_task()).unwrap();
        let head = t.run_until(10).unwrap();
        t.save_checkpoint(&dir).unwrap();
        let mut resumed = Trainer::load_checkpoint(&dir).unwrap();
        assert_eq!(resumed.step(), 10);
        let tail = resumed.run_until(cfg.steps).unwrap();
        let mut joined = head.records.clone();
        joined.extend(tail.records);
        assert_eq!(strip(&TrainOutcome { records: joined, diverged_at: None }), strip(&a));
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn compare_runs_aligns_grids() {
        let rec = |step, val| TrainRecord {
            step,
            train_loss: val,
            val_loss: val,
            grad_norm: 0.0,
            scheme: SchemeKind::Fp32,
            wallclock: 0.0,
            diverged: false,
        };
        let a = vec![rec(10, 2.0), rec(20, 1.0), rec(30, 0.5)];
        let same = compare_runs(&[("a".into(), a.clone()), ("b".into(), a.clone())]).unwrap();
        assert_eq!(same[1].rel_gap, 0.0);
        let b = vec![rec(5, 3.0), rec(15, 1.5), rec(25, 1.0)];
        let s = compare_runs(&[("a".into(), a), ("b".into(), b)]).unwrap();
        assert_eq!(s[0].final_step, 20);
        assert_eq!(s[1].final_val_loss, 1.25);
        assert_eq!(s[1].rel_gap, 0.25);
        assert_eq!(s[0].best_val_loss, 1.0);
    }

    #[test]
    fn outlier_channels_are_fixed() {
        assert_eq!(outlier_channels(64).len(), 1);
        assert_eq!(outlier_channels(512).len(), 5);
        assert_eq!(outlier_channels(64), outlier_channels(64));
    }

    #[test]
    fn charlm_needs_a_corpus() {
        let task = ToyTask::CharLm { corpus: "/nonexistent/corpus.txt".into(), context: 16 };
        assert!(matches!(TaskSource::load(&task), Err(Error::InvalidArgument(_))));
    }
}
