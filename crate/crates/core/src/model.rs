//! End-to-end forecaster: token embedding, stacked attention and memory blocks,
//! partial freezing, per-node regression head, loss, optimizer and checkpoints.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;
use std::sync::Arc;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Scaler, TimeMark};
use crate::error::{shape_err, Result, StlinkError};
use crate::mrffn::{dense_ffn_block, mrffn_block, DenseFfnParams, KeyUpdate, MemoryBank, MrffnConfig, MrffnHooks, MrffnParams};
use crate::numerics::{seeded_rng, Differentiable, ParamId, ParamKind, ParamStore, Precision, Rng, Tape, Tensor, Var};
use crate::se_attention::{se_attention_forward, AttentionConfig, AttentionHooks, AttentionLayout, AttentionVariant, SeAttentionParams, TokenGrid};

pub const CHECKPOINT_MAGIC: &str = "stlink-ckpt/1";

/// Structural switches for the ablation variants.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    /// Plain multi-head attention: no rotary projection, no RevIN.
    pub no_se_attention: bool,
    /// Rotary projection built from the temporal rotation only.
    pub standard_rope: bool,
    /// Zero vectors in place of the retrieved embedding and attention summary.
    pub no_memory: bool,
    /// Single dense `d -> 4d -> d` feed-forward block instead of the memory block.
    pub standard_ffn: bool,
}

impl Ablation {
    pub fn validate(&self) -> Result<()> {
        if self.standard_ffn && self.no_memory {
            return Err(StlinkError::ContradictoryAblation("standard_ffn has no memory to disable (no_memory)".into()));
        }
        if self.no_se_attention && self.standard_rope {
            return Err(StlinkError::ContradictoryAblation("no_se_attention removes the rotary projection that standard_rope modifies".into()));
        }
        Ok(())
    }

    pub fn attention_variant(&self) -> AttentionVariant {
        if self.no_se_attention {
            AttentionVariant::Plain
        } else if self.standard_rope {
            AttentionVariant::TemporalRope
        } else {
            AttentionVariant::SpatiallyEnhanced
        }
    }

    pub fn label(&self) -> String {
        let names: Vec<&str> = [
            (self.no_se_attention, "no_se_attention"),
            (self.standard_rope, "standard_rope"),
            (self.no_memory, "no_memory"),
            (self.standard_ffn, "standard_ffn"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        if names.is_empty() {
            "full".into()
        } else {
            names.join("+")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    /// Number of top layers that train fully; the rest keep only LayerNorm trainable.
    pub n_trainable_upper: usize,
    pub heads: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub n_nodes: usize,
    pub f_in: usize,
    pub f_out: usize,
    pub dropout: f64,
    pub slots: usize,
    pub top_k_mem: usize,
    pub experts: usize,
    pub top_k_exp: usize,
    /// Hidden width of each expert.
    pub d_ff: usize,
    /// Key EMA momentum.
    pub alpha: f64,
    /// Time-of-day table rows.
    pub steps_per_day: usize,
    pub seed: u64,
    pub precision: Precision,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 3,
            n_trainable_upper: 1,
            heads: 4,
            t_in: 12,
            t_out: 12,
            n_nodes: 8,
            f_in: 1,
            f_out: 1,
            dropout: 0.1,
            slots: 16,
            top_k_mem: 4,
            experts: 4,
            top_k_exp: 2,
            d_ff: 256,
            alpha: 0.1,
            steps_per_day: 288,
            seed: 0,
            precision: Precision::F32,
            ablation: Ablation::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(StlinkError::InvalidConfig(m));
        if self.n_trainable_upper > self.n_layers {
            return bad(format!("n_trainable_upper {} exceeds n_layers {}", self.n_trainable_upper, self.n_layers));
        }
        if self.t_in == 0 || self.t_out == 0 {
            return bad("t_in and t_out must be at least 1".into());
        }
        if self.n_nodes == 0 || self.f_in == 0 || self.f_out == 0 || self.f_out > self.f_in {
            return bad(format!("need n_nodes >= 1 and 1 <= f_out <= f_in (got {}, {}, {})", self.n_nodes, self.f_out, self.f_in));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.steps_per_day == 0 || self.d_ff == 0 {
            return bad("steps_per_day and d_ff must be positive".into());
        }
        self.ablation.validate()?;
        self.attention().validate()?;
        self.mrffn().validate()
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig { d_model: self.d_model, heads: self.heads, dropout: self.dropout, variant: self.ablation.attention_variant() }
    }

    pub fn mrffn(&self) -> MrffnConfig {
        MrffnConfig {
            d_model: self.d_model,
            slots: self.slots,
            top_k_mem: self.top_k_mem,
            experts: self.experts,
            top_k_exp: self.top_k_exp,
            d_ff: self.d_ff,
            alpha: self.alpha,
            dropout: self.dropout,
            use_memory: !self.ablation.no_memory,
        }
    }

    /// First layer index that trains fully.
    pub fn first_trainable_layer(&self) -> usize {
        self.n_layers - self.n_trainable_upper
    }

    pub fn tokens(&self) -> usize {
        self.t_in * self.n_nodes
    }
}

#[derive(Debug, Clone)]
pub struct EmbeddingParams {
    /// Pointwise convolution `F_in -> d_model`.
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub time_of_day: ParamId,
    pub day_of_week: ParamId,
    pub node: ParamId,
}

#[derive(Debug, Clone)]
pub enum FeedForward {
    Memory(MrffnParams),
    Dense(DenseFfnParams),
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub attn: SeAttentionParams,
    pub ffn: FeedForward,
}

#[derive(Debug, Clone)]
pub struct HeadParams {
    /// `T_in * d_model x T_out * F_out`.
    pub w: ParamId,
    pub b: ParamId,
}

/// One batch of input windows. `x` is `B x T_in x N x F_in`, `marks` is `B x T_in`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub size: usize,
    pub x: Vec<f64>,
    pub marks: Vec<TimeMark>,
}

/// Per-parameter trainable flags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreezeMask {
    pub trainable: Vec<bool>,
}

impl FreezeMask {
    pub fn apply(&self, store: &mut ParamStore) {
        for ((_, p), &on) in store.iter_mut().zip(&self.trainable) {
            p.tensor.set_requires_grad(on);
        }
    }
}

/// Flags for `n_layers` layers with the top `n_trainable_upper` fully trainable.
/// Below that, only LayerNorm parameters train. Embeddings and head always train.
pub fn apply_freeze_policy(store: &ParamStore, n_layers: usize, n_trainable_upper: usize) -> Result<FreezeMask> {
    if n_trainable_upper > n_layers {
        return Err(StlinkError::InvalidConfig(format!("n_trainable_upper {n_trainable_upper} exceeds n_layers {n_layers}")));
    }
    let first = n_layers - n_trainable_upper;
    let trainable = store
        .iter()
        .map(|(_, p)| match p.layer {
            Some(l) if l < first => p.kind == ParamKind::LayerNorm,
            _ => true,
        })
        .collect();
    Ok(FreezeMask { trainable })
}

fn gaussian(shape: Vec<usize>, std: f64, rng: &mut Rng) -> Tensor {
    let normal = Normal::new(0.0, std).unwrap();
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub embedding: EmbeddingParams,
    pub layers: Vec<LayerParams>,
    /// Memory keys per layer; `None` for dense feed-forward layers.
    pub memory: Vec<Option<MemoryBank>>,
    pub head: HeadParams,
    /// Input scaling of the training data; outputs are mapped back with its first `f_out` features.
    pub scaler: Scaler,
    layout: Arc<AttentionLayout>,
}

impl Model {
    /// Builds the variant selected by `config.ablation`, initialized from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(config.seed);
        let c = &config;
        let d = c.d_model;
        let mut store = ParamStore::new();
        let emb = ParamKind::Embedding;
        let embedding = EmbeddingParams {
            conv_w: store.add("embed.conv.w", emb, None, gaussian(vec![c.f_in, d], 1.0 / (c.f_in as f64).sqrt(), &mut rng)),
            conv_b: store.add("embed.conv.b", emb, None, Tensor::zeros(vec![1, d])),
            time_of_day: store.add("embed.time_of_day", emb, None, gaussian(vec![c.steps_per_day, d], 0.1, &mut rng)),
            // zero rows: a weekday never seen in training contributes nothing
            day_of_week: store.add("embed.day_of_week", emb, None, Tensor::zeros(vec![7, d])),
            node: store.add("embed.node", emb, None, gaussian(vec![c.n_nodes, d], 0.1, &mut rng)),
        };
        let attn_cfg = c.attention();
        let mcfg = c.mrffn();
        let mut layers = Vec::with_capacity(c.n_layers);
        let mut memory = Vec::with_capacity(c.n_layers);
        for l in 0..c.n_layers {
            let attn = SeAttentionParams::init(&mut store, l, &attn_cfg, c.n_nodes, &mut rng);
            let ffn = if c.ablation.standard_ffn {
                memory.push(None);
                FeedForward::Dense(DenseFfnParams::init(&mut store, l, d, 4 * d, &mut rng))
            } else {
                let (p, bank) = MrffnParams::init(&mut store, l, &mcfg, &mut rng);
                memory.push(Some(bank));
                FeedForward::Memory(p)
            };
            layers.push(LayerParams { attn, ffn });
        }
        let fan_in = c.t_in * d;
        let head = HeadParams {
            w: store.add("head.w", ParamKind::Head, None, gaussian(vec![fan_in, c.t_out * c.f_out], 1.0 / (fan_in as f64).sqrt(), &mut rng)),
            b: store.add("head.b", ParamKind::Head, None, Tensor::zeros(vec![1, c.t_out * c.f_out])),
        };
        apply_freeze_policy(&store, c.n_layers, c.n_trainable_upper)?.apply(&mut store);
        store.round_to(c.precision);
        for bank in memory.iter_mut().flatten() {
            c.precision.round_slice(&mut bank.keys);
        }
        let layout = Arc::new(AttentionLayout::new(TokenGrid::time_major(c.t_in, c.n_nodes), attn_cfg.head_dim())?);
        let scaler = Scaler::identity(c.f_in);
        Ok(Self { config, store, embedding, layers, memory, head, scaler, layout })
    }

    pub fn layout(&self) -> &AttentionLayout {
        &self.layout
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let c = &self.config;
        let per = c.t_in * c.n_nodes * c.f_in;
        if batch.size == 0 || batch.x.len() != batch.size * per {
            return Err(shape_err("input batch (B*T_in*N*F_in)", format!("{} x {per}", batch.size), batch.x.len()));
        }
        if batch.marks.len() != batch.size * c.t_in {
            return Err(shape_err("time marks (B*T_in)", batch.size * c.t_in, batch.marks.len()));
        }
        Ok(())
    }

    /// Token embeddings `(B * T_in * N) x d_model`, time-major within each sample.
    pub fn embed_input(&self, tape: &mut Tape, batch: &Batch) -> Result<Var> {
        self.check_batch(batch)?;
        let c = &self.config;
        let rows = batch.size * c.tokens();
        let mut slots = Vec::with_capacity(rows);
        let mut dows = Vec::with_capacity(rows);
        let mut nodes = Vec::with_capacity(rows);
        for mark in &batch.marks {
            if mark.slot >= c.steps_per_day {
                return Err(StlinkError::IndexOutOfRange { what: "time-of-day slot".into(), index: mark.slot, limit: c.steps_per_day });
            }
            if mark.dow >= 7 {
                return Err(StlinkError::IndexOutOfRange { what: "day of week".into(), index: mark.dow, limit: 7 });
            }
            for n in 0..c.n_nodes {
                slots.push(mark.slot);
                dows.push(mark.dow);
                nodes.push(n);
            }
        }
        let e = &self.embedding;
        let x = tape.constant(rows, c.f_in, batch.x.clone());
        let w = tape.param(&self.store, e.conv_w);
        let b = tape.param(&self.store, e.conv_b);
        let conv = tape.matmul(x, w);
        let mut h = tape.add_row(conv, b);
        for (table, idx) in [(e.time_of_day, &slots), (e.day_of_week, &dows), (e.node, &nodes)] {
            let t = tape.param(&self.store, table);
            let rowsv = tape.gather_rows(t, idx);
            h = tape.add(h, rowsv);
        }
        Ok(h)
    }

    /// Head output in scaled units, `B x (T_out * N * F_out)` laid out `[t][node][f]`.
    /// With `stage`, memory lookups are recorded per layer for the key update.
    pub fn forward_tape(&self, tape: &mut Tape, batch: &Batch, train: bool, rng: &mut Rng, mut stage: Option<&mut [Option<KeyUpdate>]>) -> Result<Var> {
        let c = &self.config;
        let d = c.d_model;
        let tokens = c.tokens();
        let attn_cfg = c.attention();
        let mcfg = c.mrffn();
        let mut h = self.embed_input(tape, batch)?;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut outs = Vec::with_capacity(batch.size);
            for s in 0..batch.size {
                let hs = if batch.size == 1 { h } else { tape.slice_rows(h, s * tokens, tokens) };
                outs.push(se_attention_forward(tape, &self.store, &layer.attn, &attn_cfg, &self.layout, hs, train, rng, AttentionHooks::default(), None)?);
            }
            h = if outs.len() == 1 { outs[0] } else { tape.concat_rows(&outs) };
            h = match (&layer.ffn, &self.memory[l]) {
                (FeedForward::Memory(p), Some(bank)) => {
                    let st = stage.as_deref_mut().and_then(|s| s.get_mut(l)).and_then(Option::as_mut);
                    mrffn_block(tape, &self.store, p, &mcfg, bank, h, train, rng, st, MrffnHooks::default())?
                }
                (FeedForward::Dense(p), _) => dense_ffn_block(tape, &self.store, p, c.dropout, h, train, rng),
                (FeedForward::Memory(_), None) => unreachable!("memory layer without a key bank"),
            };
            if !tape.value(h).iter().all(|v| v.is_finite()) {
                return Err(StlinkError::NonFinite(format!("layer {l} output")));
            }
        }
        let (n, t_in, t_out, f_out) = (c.n_nodes, c.t_in, c.t_out, c.f_out);
        let b = batch.size;
        let map: Arc<[usize]> = (0..b * n)
            .flat_map(|r| {
                let (s, node) = (r / n, r % n);
                (0..t_in).flat_map(move |t| (0..d).map(move |j| (s * tokens + t * n + node) * d + j))
            })
            .collect();
        let per_node = tape.gather(h, map, b * n, t_in * d);
        let w = tape.param(&self.store, self.head.w);
        let hb = tape.param(&self.store, self.head.b);
        let out = tape.matmul(per_node, w);
        let out = tape.add_row(out, hb);
        let width = t_out * n * f_out;
        let order: Arc<[usize]> = (0..b * width)
            .map(|i| {
                let (s, rest) = (i / width, i % width);
                let (t, rest) = (rest / (n * f_out), rest % (n * f_out));
                let (node, f) = (rest / f_out, rest % f_out);
                (s * n + node) * (t_out * f_out) + t * f_out + f
            })
            .collect();
        Ok(tape.gather(out, order, b, width))
    }

    /// Maps scaled head output back to data units with the stored scaler.
    pub fn unscale_tape(&self, tape: &mut Tape, pred: Var) -> Var {
        let (rows, cols) = tape.dims(pred);
        let f_out = self.config.f_out;
        let std: Vec<f64> = (0..rows * cols).map(|i| self.scaler.std[i % f_out]).collect();
        let mean: Vec<f64> = (0..rows * cols).map(|i| self.scaler.mean[i % f_out]).collect();
        let scaled = tape.mul_const(pred, std);
        let m = tape.constant(rows, cols, mean);
        tape.add(scaled, m)
    }

    /// Eval-mode head output in scaled units.
    pub fn model_forward(&self, batch: &Batch) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let out = self.forward_tape(&mut tape, batch, false, &mut seeded_rng(0), None)?;
        Ok(tape.value(out).to_vec())
    }

    /// Eval-mode forecast in data units, `B x T_out x N x F_out`.
    pub fn predict(&self, batch: &Batch) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let out = self.forward_tape(&mut tape, batch, false, &mut seeded_rng(0), None)?;
        let out = self.unscale_tape(&mut tape, out);
        Ok(tape.value(out).to_vec())
    }

    /// Empty key-update accumulators for every layer whose keys move during training.
    pub fn key_updates(&self) -> Vec<Option<KeyUpdate>> {
        let first = self.config.first_trainable_layer();
        self.memory
            .iter()
            .enumerate()
            .map(|(l, bank)| match bank {
                Some(b) if l >= first && !self.config.ablation.no_memory => Some(KeyUpdate::new(b.slots, b.d)),
                _ => None,
            })
            .collect()
    }

    pub fn apply_key_updates(&mut self, updates: &[Option<KeyUpdate>]) {
        let alpha = self.config.alpha;
        let precision = self.config.precision;
        for (bank, up) in self.memory.iter_mut().zip(updates) {
            if let (Some(bank), Some(up)) = (bank, up) {
                up.apply(&mut bank.keys, alpha);
                precision.round_slice(&mut bank.keys);
            }
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }
}

/// Masked mean absolute error; entries whose truth equals `null_value` are skipped
/// and an all-masked input gives 0.
pub fn loss_mae(pred: &[f64], truth: &[f64], null_value: Option<f64>) -> f64 {
    assert_eq!(pred.len(), truth.len());
    let mut s = 0.0;
    let mut n = 0usize;
    for (p, t) in pred.iter().zip(truth) {
        if null_value.is_some_and(|nv| *t == nv) {
            continue;
        }
        s += (p - t).abs();
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn loss_mae_tape(tape: &mut Tape, pred: Var, truth: &[f64], null_value: Option<f64>) -> Var {
    let mask = truth.iter().map(|t| null_value.is_none_or(|nv| *t != nv)).collect();
    tape.mae(pred, Arc::from(truth), mask)
}

/// Adaptive-moment optimizer. Frozen parameters are never touched.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, precision: Precision) {
        if self.m.is_empty() {
            self.m = store.iter().map(|(_, p)| vec![0.0; p.tensor.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (_, p)) in store.iter_mut().enumerate() {
            if !p.trainable() {
                continue;
            }
            let g = p.tensor.grad().expect("trainable parameter has a gradient buffer").to_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, x) in p.tensor.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let update = self.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                *x = precision.round(*x - update);
            }
        }
    }
}

/// Model plus a fixed batch, exposing the training loss for gradient checks.
pub struct ModelObjective<'a> {
    pub model: Model,
    pub batch: &'a Batch,
    pub truth: &'a [f64],
}

impl Differentiable for ModelObjective<'_> {
    fn params(&self) -> &ParamStore {
        &self.model.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.model.store
    }

    fn objective(&self, tape: &mut Tape) -> Result<Var> {
        let out = self.model.forward_tape(tape, self.batch, false, &mut seeded_rng(0), None)?;
        let out = self.model.unscale_tape(tape, out);
        Ok(loss_mae_tape(tape, out, self.truth, None))
    }
}

#[derive(Serialize, Deserialize)]
struct ParamHeader {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct MemoryHeader {
    layer: usize,
    slots: usize,
    d: usize,
    offset: usize,
    len: usize,
}

fn dtype_width(p: Precision) -> usize {
    match p {
        Precision::F32 => 4,
        Precision::F64 => 8,
    }
}

fn ckpt_err(m: impl Into<String>) -> StlinkError {
    StlinkError::Checkpoint(m.into())
}

impl Model {
    /// Text header (magic, config, scaler, parameter and memory tables) followed
    /// by little-endian payloads in header order.
    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let precision = self.config.precision;
        let mut header = String::new();
        let mut payload = Vec::new();
        let push = |payload: &mut Vec<u8>, xs: &[f64]| {
            for &x in xs {
                match precision {
                    Precision::F32 => payload.extend_from_slice(&(x as f32).to_le_bytes()),
                    Precision::F64 => payload.extend_from_slice(&x.to_le_bytes()),
                }
            }
        };
        let json = |e: serde_json::Error| ckpt_err(e.to_string());
        let _ = writeln!(header, "{CHECKPOINT_MAGIC}");
        let _ = writeln!(header, "dtype {}", precision.as_str());
        let _ = writeln!(header, "config {}", serde_json::to_string(&self.config).map_err(json)?);
        let _ = writeln!(header, "scaler {}", serde_json::to_string(&self.scaler).map_err(json)?);
        let _ = writeln!(header, "params {}", self.store.len());
        for (_, p) in self.store.iter() {
            let h = ParamHeader { name: p.name.clone(), shape: p.tensor.shape().to_vec(), offset: payload.len(), len: p.tensor.len(), trainable: p.trainable() };
            let _ = writeln!(header, "param {}", serde_json::to_string(&h).map_err(json)?);
            push(&mut payload, p.tensor.data());
        }
        let banks: Vec<(usize, &MemoryBank)> = self.memory.iter().enumerate().filter_map(|(l, b)| b.as_ref().map(|b| (l, b))).collect();
        let _ = writeln!(header, "memory {}", banks.len());
        for (layer, bank) in banks {
            let h = MemoryHeader { layer, slots: bank.slots, d: bank.d, offset: payload.len(), len: bank.keys.len() };
            let _ = writeln!(header, "keys {}", serde_json::to_string(&h).map_err(json)?);
            push(&mut payload, &bank.keys);
        }
        let _ = writeln!(header, "payload {}", payload.len());
        let mut out = header.into_bytes();
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_checkpoint_reader(reader: impl Read) -> Result<Self> {
        let mut r = BufReader::new(reader);
        let mut line = String::new();
        let next = |r: &mut BufReader<_>, line: &mut String| -> Result<String> {
            line.clear();
            if r.read_line(line)? == 0 {
                return Err(ckpt_err("truncated header"));
            }
            Ok(line.trim_end().to_string())
        };
        let field = |l: &str, key: &str| -> Result<String> {
            l.strip_prefix(key).and_then(|s| s.strip_prefix(' ')).map(str::to_string).ok_or_else(|| ckpt_err(format!("expected '{key}' line, got '{l}'")))
        };
        let json = |e: serde_json::Error| ckpt_err(e.to_string());
        let magic = next(&mut r, &mut line)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(ckpt_err(format!("unsupported checkpoint version '{magic}'")));
        }
        let dtype = field(&next(&mut r, &mut line)?, "dtype")?;
        let precision = Precision::parse(&dtype).ok_or_else(|| ckpt_err(format!("unknown dtype '{dtype}'")))?;
        let config: ModelConfig = serde_json::from_str(&field(&next(&mut r, &mut line)?, "config")?).map_err(json)?;
        if config.precision != precision {
            return Err(ckpt_err("dtype disagrees with config precision"));
        }
        let scaler: Scaler = serde_json::from_str(&field(&next(&mut r, &mut line)?, "scaler")?).map_err(json)?;
        let count: usize = field(&next(&mut r, &mut line)?, "params")?.parse().map_err(|_| ckpt_err("bad parameter count"))?;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            params.push(serde_json::from_str::<ParamHeader>(&field(&next(&mut r, &mut line)?, "param")?).map_err(json)?);
        }
        let banks: usize = field(&next(&mut r, &mut line)?, "memory")?.parse().map_err(|_| ckpt_err("bad memory count"))?;
        let mut mems = Vec::with_capacity(banks);
        for _ in 0..banks {
            mems.push(serde_json::from_str::<MemoryHeader>(&field(&next(&mut r, &mut line)?, "keys")?).map_err(json)?);
        }
        let size: usize = field(&next(&mut r, &mut line)?, "payload")?.parse().map_err(|_| ckpt_err("bad payload size"))?;
        let mut payload = vec![0u8; size];
        r.read_exact(&mut payload).map_err(|_| ckpt_err("truncated payload"))?;

        let width = dtype_width(precision);
        let read = |offset: usize, len: usize| -> Result<Vec<f64>> {
            let bytes = payload.get(offset..offset + len * width).ok_or_else(|| ckpt_err("payload range out of bounds"))?;
            Ok(bytes
                .chunks_exact(width)
                .map(|b| match precision {
                    Precision::F32 => f32::from_le_bytes(b.try_into().unwrap()) as f64,
                    Precision::F64 => f64::from_le_bytes(b.try_into().unwrap()),
                })
                .collect())
        };
        let mut model = Model::new(config)?;
        if params.len() != model.store.len() {
            return Err(ckpt_err(format!("checkpoint has {} parameters, model has {}", params.len(), model.store.len())));
        }
        for (h, (_, p)) in params.iter().zip(model.store.iter_mut()) {
            if h.name != p.name || h.shape != p.tensor.shape() {
                return Err(ckpt_err(format!("parameter '{}' {:?} does not match '{}' {:?}", h.name, h.shape, p.name, p.tensor.shape())));
            }
            p.tensor.data_mut().copy_from_slice(&read(h.offset, h.len)?);
            p.tensor.set_requires_grad(h.trainable);
        }
        for h in &mems {
            let bank = model.memory.get_mut(h.layer).and_then(Option::as_mut).ok_or_else(|| ckpt_err(format!("layer {} has no memory", h.layer)))?;
            if (h.slots, h.d) != (bank.slots, bank.d) {
                return Err(ckpt_err(format!("memory of layer {} is {}x{}, expected {}x{}", h.layer, h.slots, h.d, bank.slots, bank.d)));
            }
            bank.keys = read(h.offset, h.len)?;
        }
        if scaler.mean.len() != model.config.f_in {
            return Err(ckpt_err("scaler width differs from f_in"));
        }
        model.scaler = scaler;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(std::fs::write(path, self.to_checkpoint_bytes()?)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint_reader(std::fs::File::open(path)?)
    }
}
