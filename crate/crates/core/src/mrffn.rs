//! Memory-retrieval feed-forward block.
//!
//! Each token reads a key-value memory twice: a top-k retrieval whose softmax
//! runs over the selected slots only, and a dense scaled read over every slot
//! (the attention summary). Both feed a softmax gate over all experts; the
//! output is the gate-weighted sum of the top-k experts, without renormalizing
//! the selected gate weights. Keys are not trained by gradient: they follow a
//! momentum EMA toward the weighted mean of the tokens that selected them,
//! applied once per training batch.

use std::sync::Arc;

use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Result, StlinkError};
use crate::numerics::{dot, gelu, softmax, softmax_in_place, top_k_indices, ParamId, ParamKind, ParamStore, Rng, Tape, Tensor, Var};
use crate::se_attention::LAYER_NORM_EPS;

/// Key-value store read by [`memory_retrieve`] and [`attention_summary`].
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryState {
    pub d: usize,
    /// `M x d`, row-major.
    pub keys: Vec<f64>,
    /// `M x d`, row-major.
    pub values: Vec<f64>,
    pub alpha: f64,
    pub top_k: usize,
}

impl MemoryState {
    pub fn new(d: usize, keys: Vec<f64>, values: Vec<f64>, alpha: f64, top_k: usize) -> Result<Self> {
        if d == 0 || !keys.len().is_multiple_of(d) || keys.len() != values.len() {
            return Err(shape_err("memory keys/values", format!("M x {d} each"), format!("{} / {}", keys.len(), values.len())));
        }
        let m = keys.len() / d;
        if top_k == 0 || top_k > m {
            return Err(StlinkError::InvalidConfig(format!("memory top_k {top_k} outside 1..={m}")));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(StlinkError::InvalidConfig(format!("memory alpha {alpha} outside [0, 1]")));
        }
        Ok(Self { d, keys, values, alpha, top_k })
    }

    pub fn slots(&self) -> usize {
        self.keys.len() / self.d
    }

    pub fn key(&self, m: usize) -> &[f64] {
        &self.keys[m * self.d..(m + 1) * self.d]
    }

    pub fn value(&self, m: usize) -> &[f64] {
        &self.values[m * self.d..(m + 1) * self.d]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Retrieval {
    pub z_r: Vec<f64>,
    pub weights: Vec<f64>,
    pub indices: Vec<usize>,
}

/// Top-k read with raw dot-product similarity; the softmax normalizes over the
/// selected slots only.
pub fn memory_retrieve(x: &[f64], mem: &MemoryState) -> Result<Retrieval> {
    if x.len() != mem.d {
        return Err(shape_err("memory query", mem.d, x.len()));
    }
    let sims: Vec<f64> = (0..mem.slots()).map(|m| dot(x, mem.key(m))).collect();
    let indices = top_k_indices(&sims, mem.top_k);
    let selected: Vec<f64> = indices.iter().map(|&i| sims[i]).collect();
    let weights = softmax(&selected)?;
    let mut z_r = vec![0.0; mem.d];
    for (&m, w) in indices.iter().zip(&weights) {
        for (z, v) in z_r.iter_mut().zip(mem.value(m)) {
            *z += w * v;
        }
    }
    Ok(Retrieval { z_r, weights, indices })
}

/// Per-slot accumulator for one batch of EMA key updates.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyUpdate {
    d: usize,
    weighted_sum: Vec<f64>,
    weight_total: Vec<f64>,
    hits: Vec<u64>,
}

impl KeyUpdate {
    pub fn new(slots: usize, d: usize) -> Self {
        Self { d, weighted_sum: vec![0.0; slots * d], weight_total: vec![0.0; slots], hits: vec![0; slots] }
    }

    pub fn stage(&mut self, x: &[f64], weights: &[f64], indices: &[usize]) {
        for (&m, &w) in indices.iter().zip(weights) {
            for (a, xv) in self.weighted_sum[m * self.d..(m + 1) * self.d].iter_mut().zip(x) {
                *a += w * xv;
            }
            self.weight_total[m] += w;
            self.hits[m] += 1;
        }
    }

    /// Number of times each slot was selected.
    pub fn hits(&self) -> &[u64] {
        &self.hits
    }

    pub fn is_empty(&self) -> bool {
        self.hits.iter().all(|&h| h == 0)
    }

    /// `k_m <- (1 - alpha) k_m + alpha A_m` for every selected slot, where `A_m` is
    /// the selection-weighted mean of the staged tokens.
    pub fn apply(&self, keys: &mut [f64], alpha: f64) {
        for (m, &total) in self.weight_total.iter().enumerate() {
            if self.hits[m] == 0 || total <= 0.0 {
                continue;
            }
            let acc = &self.weighted_sum[m * self.d..(m + 1) * self.d];
            for (k, a) in keys[m * self.d..(m + 1) * self.d].iter_mut().zip(acc) {
                *k = (1.0 - alpha) * *k + alpha * (a / total);
            }
        }
    }
}

/// Applies one EMA refresh from the retrievals of a batch of tokens.
pub fn memory_update_keys(mem: &mut MemoryState, batch: &[(Vec<f64>, Retrieval)]) {
    let mut up = KeyUpdate::new(mem.slots(), mem.d);
    for (x, r) in batch {
        up.stage(x, &r.weights, &r.indices);
    }
    up.apply(&mut mem.keys, mem.alpha);
}

/// Dense read weights over all slots, `softmax(x . K^T / sqrt(d))`, or without the
/// temperature when `scaled` is false.
pub fn attention_summary_weights(x: &[f64], mem: &MemoryState, scaled: bool) -> Vec<f64> {
    let t = if scaled { 1.0 / (mem.d as f64).sqrt() } else { 1.0 };
    let mut w: Vec<f64> = (0..mem.slots()).map(|m| dot(x, mem.key(m)) * t).collect();
    softmax_in_place(&mut w);
    w
}

pub fn attention_summary(x: &[f64], mem: &MemoryState) -> Result<Vec<f64>> {
    if x.len() != mem.d {
        return Err(shape_err("summary query", mem.d, x.len()));
    }
    let w = attention_summary_weights(x, mem, true);
    let mut out = vec![0.0; mem.d];
    for (m, wm) in w.iter().enumerate() {
        for (o, v) in out.iter_mut().zip(mem.value(m)) {
            *o += wm * v;
        }
    }
    Ok(out)
}

/// `d -> d_ff -> d` feed-forward network with GELU.
#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    pub d: usize,
    pub d_ff: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Expert {
    pub fn forward(&self, h: &[f64]) -> Vec<f64> {
        let hidden: Vec<f64> = (0..self.d_ff)
            .map(|j| gelu(self.b1[j] + (0..self.d).map(|i| h[i] * self.w1[i * self.d_ff + j]).sum::<f64>()))
            .collect();
        (0..self.d).map(|j| self.b2[j] + (0..self.d_ff).map(|i| hidden[i] * self.w2[i * self.d + j]).sum::<f64>()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeParams {
    pub experts: Vec<Expert>,
    /// `3d x E`, row-major.
    pub w_g: Vec<f64>,
    pub top_k: usize,
}

impl MoeParams {
    /// Softmax gate over all experts.
    pub fn gate(&self, h: &[f64], z_r: &[f64], a_bar: &[f64]) -> Vec<f64> {
        let e = self.experts.len();
        let input: Vec<f64> = h.iter().chain(z_r).chain(a_bar).copied().collect();
        let mut logits = vec![0.0; e];
        for (i, x) in input.iter().enumerate() {
            for (j, l) in logits.iter_mut().enumerate() {
                *l += x * self.w_g[i * e + j];
            }
        }
        softmax_in_place(&mut logits);
        logits
    }
}

/// `sum over top-k experts of g_e * Expert_e(h)` with `g` the softmax over all experts.
pub fn moe_forward(h: &[f64], z_r: &[f64], a_bar: &[f64], moe: &MoeParams) -> Result<Vec<f64>> {
    let d = h.len();
    let e = moe.experts.len();
    if e == 0 || moe.top_k == 0 || moe.top_k > e {
        return Err(StlinkError::InvalidConfig(format!("expert top_k {} outside 1..={e}", moe.top_k)));
    }
    if z_r.len() != d || a_bar.len() != d || moe.w_g.len() != 3 * d * e {
        return Err(shape_err("moe inputs", format!("d = {d}, gate 3d x E"), format!("{}, {}, {}", z_r.len(), a_bar.len(), moe.w_g.len())));
    }
    let g = moe.gate(h, z_r, a_bar);
    let mut out = vec![0.0; d];
    for idx in top_k_indices(&g, moe.top_k) {
        for (o, y) in out.iter_mut().zip(moe.experts[idx].forward(h)) {
            *o += g[idx] * y;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct MrffnConfig {
    pub d_model: usize,
    pub slots: usize,
    pub top_k_mem: usize,
    pub experts: usize,
    pub top_k_exp: usize,
    pub d_ff: usize,
    pub alpha: f64,
    pub dropout: f64,
    /// When false the retrieved embedding and attention summary are zero vectors.
    pub use_memory: bool,
}

impl MrffnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.slots == 0 || self.top_k_mem == 0 || self.top_k_mem > self.slots {
            return Err(StlinkError::InvalidConfig(format!("top_k_mem {} outside 1..={}", self.top_k_mem, self.slots)));
        }
        if self.experts == 0 || self.top_k_exp == 0 || self.top_k_exp > self.experts {
            return Err(StlinkError::InvalidConfig(format!("top_k_exp {} outside 1..={}", self.top_k_exp, self.experts)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(StlinkError::InvalidConfig(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ExpertParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Parameter handles of one memory-retrieval block. Keys live outside the
/// parameter store in [`MemoryBank`].
#[derive(Debug, Clone)]
pub struct MrffnParams {
    pub values: ParamId,
    pub w_g: ParamId,
    pub experts: Vec<ExpertParams>,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
}

/// EMA-maintained memory keys of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    pub slots: usize,
    pub d: usize,
    pub keys: Vec<f64>,
}

fn gaussian(shape: Vec<usize>, std: f64, rng: &mut Rng) -> Tensor {
    let normal = Normal::new(0.0, std).unwrap();
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

impl MemoryBank {
    /// Random unit-norm keys.
    pub fn init(slots: usize, d: usize, rng: &mut Rng) -> Self {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut keys = Vec::with_capacity(slots * d);
        for _ in 0..slots {
            let k: Vec<f64> = (0..d).map(|_| normal.sample(rng)).collect();
            let n = k.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            keys.extend(k.iter().map(|x| x / n));
        }
        Self { slots, d, keys }
    }
}

fn expert_params(store: &mut ParamStore, prefix: &str, layer: usize, kind: ParamKind, d: usize, d_ff: usize, rng: &mut Rng) -> ExpertParams {
    let l = Some(layer);
    ExpertParams {
        w1: store.add(format!("{prefix}.w1"), kind, l, gaussian(vec![d, d_ff], 1.0 / (d as f64).sqrt(), rng)),
        b1: store.add(format!("{prefix}.b1"), kind, l, Tensor::zeros(vec![1, d_ff])),
        w2: store.add(format!("{prefix}.w2"), kind, l, gaussian(vec![d_ff, d], 1.0 / (d_ff as f64).sqrt(), rng)),
        b2: store.add(format!("{prefix}.b2"), kind, l, Tensor::zeros(vec![1, d])),
    }
}

fn layer_norm_params(store: &mut ParamStore, prefix: &str, layer: usize, d: usize) -> (ParamId, ParamId) {
    let g = store.add(format!("{prefix}.ln.gamma"), ParamKind::LayerNorm, Some(layer), Tensor::from_fn(vec![1, d], |_| 1.0));
    let b = store.add(format!("{prefix}.ln.beta"), ParamKind::LayerNorm, Some(layer), Tensor::zeros(vec![1, d]));
    (g, b)
}

impl MrffnParams {
    pub fn init(store: &mut ParamStore, layer: usize, cfg: &MrffnConfig, rng: &mut Rng) -> (Self, MemoryBank) {
        let d = cfg.d_model;
        let prefix = format!("layers.{layer}.mrffn");
        let bank = MemoryBank::init(cfg.slots, d, rng);
        let values = store.add(format!("{prefix}.values"), ParamKind::Memory, Some(layer), gaussian(vec![cfg.slots, d], 0.02, rng));
        let w_g = store.add(format!("{prefix}.w_g"), ParamKind::Gate, Some(layer), gaussian(vec![3 * d, cfg.experts], 1.0 / (3.0 * d as f64).sqrt(), rng));
        let experts = (0..cfg.experts)
            .map(|e| expert_params(store, &format!("{prefix}.experts.{e}"), layer, ParamKind::Expert, d, cfg.d_ff, rng))
            .collect();
        let (ln_gamma, ln_beta) = layer_norm_params(store, &prefix, layer, d);
        (Self { values, w_g, experts, ln_gamma, ln_beta }, bank)
    }
}

/// Test switch: drop the `1/sqrt(d)` temperature from the dense summary read.
#[derive(Debug, Clone, Copy, Default)]
pub struct MrffnHooks {
    pub unscaled_summary: bool,
}

fn expert_tape(tape: &mut Tape, store: &ParamStore, p: &ExpertParams, x: Var) -> Var {
    let w1 = tape.param(store, p.w1);
    let b1 = tape.param(store, p.b1);
    let w2 = tape.param(store, p.w2);
    let b2 = tape.param(store, p.b2);
    let a = tape.matmul(x, w1);
    let a = tape.add_row(a, b1);
    let a = tape.gelu(a);
    let o = tape.matmul(a, w2);
    tape.add_row(o, b2)
}

/// Runs the block over every token row of `h`. In train mode with `stage` given,
/// each token's retrieval is recorded for the batch-level key update; eval mode
/// never stages.
#[allow(clippy::too_many_arguments)]
pub fn mrffn_block(
    tape: &mut Tape,
    store: &ParamStore,
    params: &MrffnParams,
    cfg: &MrffnConfig,
    bank: &MemoryBank,
    h: Var,
    train: bool,
    rng: &mut Rng,
    stage: Option<&mut KeyUpdate>,
    hooks: MrffnHooks,
) -> Result<Var> {
    let (rows, d) = tape.dims(h);
    if d != cfg.d_model {
        return Err(shape_err("mrffn d_model", cfg.d_model, d));
    }
    let (z_r, a_bar) = if cfg.use_memory {
        let keys = tape.constant(bank.slots, d, bank.keys.clone());
        let values = tape.param(store, params.values);
        let sims = tape.matmul_t(h, keys);
        let w = tape.topk_softmax_rows(sims, cfg.top_k_mem);
        if let Some(stage) = stage.filter(|_| train) {
            let hv = tape.value(h);
            let sv = tape.value(sims);
            let wv = tape.value(w);
            for r in 0..rows {
                let idx = top_k_indices(&sv[r * bank.slots..(r + 1) * bank.slots], cfg.top_k_mem);
                let weights: Vec<f64> = idx.iter().map(|&m| wv[r * bank.slots + m]).collect();
                stage.stage(&hv[r * d..(r + 1) * d], &weights, &idx);
            }
        }
        let z_r = tape.matmul(w, values);
        let t = if hooks.unscaled_summary { 1.0 } else { 1.0 / (d as f64).sqrt() };
        let scaled = tape.scale(sims, t);
        let dense = tape.softmax_rows(scaled);
        let a_bar = tape.matmul(dense, values);
        (z_r, a_bar)
    } else {
        (tape.constant(rows, d, vec![0.0; rows * d]), tape.constant(rows, d, vec![0.0; rows * d]))
    };
    let gate_in = tape.concat_cols(&[h, z_r, a_bar]);
    let w_g = tape.param(store, params.w_g);
    let logits = tape.matmul(gate_in, w_g);
    let g = tape.softmax_rows(logits);
    let gm = tape.topk_mask_rows(g, cfg.top_k_exp);

    let e = params.experts.len();
    let selected: Vec<Vec<usize>> = {
        let gv = tape.value(gm);
        (0..e).map(|ex| (0..rows).filter(|&r| gv[r * e + ex] != 0.0).collect()).collect()
    };
    let mut out: Option<Var> = None;
    for (ex, rows_e) in selected.iter().enumerate() {
        if rows_e.is_empty() {
            continue;
        }
        let x = tape.gather_rows(h, rows_e);
        let y = expert_tape(tape, store, &params.experts[ex], x);
        let gmap: Arc<[usize]> = rows_e.iter().map(|&r| r * e + ex).collect();
        let ge = tape.gather(gm, gmap, rows_e.len(), 1);
        let weighted = tape.scale_by_col(y, ge, 0);
        let placed = tape.scatter_rows(weighted, rows_e.as_slice().into(), rows);
        out = Some(match out {
            Some(acc) => tape.add(acc, placed),
            None => placed,
        });
    }
    let out = out.expect("every token selects at least one expert");
    let dropped = if train { tape.dropout(out, cfg.dropout, rng) } else { out };
    let res = tape.add(dropped, h);
    let lg = tape.param(store, params.ln_gamma);
    let lb = tape.param(store, params.ln_beta);
    Ok(tape.layer_norm_rows(res, lg, lb, LAYER_NORM_EPS))
}

/// Single dense `d -> d_ff -> d` block used when the memory block is ablated.
#[derive(Debug, Clone)]
pub struct DenseFfnParams {
    pub ffn: ExpertParams,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
}

impl DenseFfnParams {
    pub fn init(store: &mut ParamStore, layer: usize, d: usize, d_ff: usize, rng: &mut Rng) -> Self {
        let prefix = format!("layers.{layer}.ffn");
        let ffn = expert_params(store, &prefix, layer, ParamKind::Ffn, d, d_ff, rng);
        let (ln_gamma, ln_beta) = layer_norm_params(store, &prefix, layer, d);
        Self { ffn, ln_gamma, ln_beta }
    }
}

pub fn dense_ffn_block(tape: &mut Tape, store: &ParamStore, params: &DenseFfnParams, dropout: f64, h: Var, train: bool, rng: &mut Rng) -> Var {
    let y = expert_tape(tape, store, &params.ffn, h);
    let y = if train { tape.dropout(y, dropout, rng) } else { y };
    let res = tape.add(y, h);
    let lg = tape.param(store, params.ln_gamma);
    let lb = tape.param(store, params.ln_beta);
    tape.layer_norm_rows(res, lg, lb, LAYER_NORM_EPS)
}
