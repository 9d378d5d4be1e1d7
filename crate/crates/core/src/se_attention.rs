//! Spatially-enhanced attention block.
//!
//! Hidden states of one sample form a token grid of `T_in * N` rows (time-major,
//! token `t * N + node`). The block computes
//! `LayerNorm(H + Dropout(Denorm(Attn(Phi(Q), Phi(K), V))))` where `Q, K, V`
//! are projections of the per-node RevIN-normalized input.

use std::sync::Arc;

use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Result, StlinkError};
use crate::numerics::{ParamId, ParamKind, ParamStore, Rng, Tape, Tensor, Var};
use crate::revin::{revin_denormalize_tape, revin_normalize_tape, DEFAULT_EPS};
use crate::rope::{phi_tape, rope_frequencies, stacked_half_identity, PhiLayout, PhiMode, RopeFrequencies};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Flattened `(time, node)` token positions.
#[derive(Debug, Clone)]
pub struct TokenGrid {
    pub t_in: usize,
    pub n_nodes: usize,
    pub row_time: Vec<usize>,
    pub row_node: Arc<[usize]>,
}

impl TokenGrid {
    /// Time-major layout: token `t * n_nodes + node`.
    pub fn time_major(t_in: usize, n_nodes: usize) -> Self {
        let row_time = (0..t_in).flat_map(|t| std::iter::repeat_n(t, n_nodes)).collect();
        let row_node = (0..t_in).flat_map(|_| 0..n_nodes).collect();
        Self { t_in, n_nodes, row_time, row_node }
    }

    pub fn len(&self) -> usize {
        self.row_time.len()
    }

    pub fn is_empty(&self) -> bool {
        self.row_time.is_empty()
    }

    pub fn token(&self, t: usize, node: usize) -> usize {
        t * self.n_nodes + node
    }

    /// Same nodes, every time index shifted by `s`.
    pub fn shifted(&self, s: usize) -> Self {
        Self { row_time: self.row_time.iter().map(|t| t + s).collect(), ..self.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionVariant {
    /// Spatio-temporal rotary projection inside a RevIN wrap.
    SpatiallyEnhanced,
    /// Temporal rotation duplicated into both halves of the projection.
    TemporalRope,
    /// Plain multi-head attention: no rotary projection, no RevIN.
    Plain,
}

#[derive(Debug, Clone)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub heads: usize,
    pub dropout: f64,
    pub variant: AttentionVariant,
}

impl AttentionConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(StlinkError::InvalidConfig(format!("d_model {} not divisible by heads {}", self.d_model, self.heads)));
        }
        if !self.head_dim().is_multiple_of(4) {
            return Err(StlinkError::SpatialDimNotDivisibleBy4(self.head_dim()));
        }
        Ok(())
    }
}

/// Parameter handles for one attention block.
#[derive(Debug, Clone)]
pub struct SeAttentionParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    /// Per head `2 d_h x d_h`; empty for [`AttentionVariant::Plain`].
    pub phi_q: Vec<ParamId>,
    pub phi_k: Vec<ParamId>,
    /// `N x 1`, shared across heads; only for the spatially-enhanced variant.
    pub spatial_scale: Option<ParamId>,
    /// `N x 1` RevIN affine; absent for [`AttentionVariant::Plain`].
    pub revin: Option<(ParamId, ParamId)>,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
}

fn gaussian(shape: Vec<usize>, std: f64, rng: &mut Rng) -> Tensor {
    let normal = Normal::new(0.0, std).unwrap();
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

impl SeAttentionParams {
    pub fn init(store: &mut ParamStore, layer: usize, cfg: &AttentionConfig, n_nodes: usize, rng: &mut Rng) -> Self {
        let d = cfg.d_model;
        let dh = cfg.head_dim();
        let l = Some(layer);
        let name = |s: &str| format!("layers.{layer}.attn.{s}");
        let proj_std = 1.0 / (d as f64).sqrt();
        let w_q = store.add(name("w_q"), ParamKind::Attention, l, gaussian(vec![d, d], proj_std, rng));
        let w_k = store.add(name("w_k"), ParamKind::Attention, l, gaussian(vec![d, d], proj_std, rng));
        let w_v = store.add(name("w_v"), ParamKind::Attention, l, gaussian(vec![d, d], proj_std, rng));
        let w_o = store.add(name("w_o"), ParamKind::Attention, l, gaussian(vec![d, d], proj_std, rng));
        let (mut phi_q, mut phi_k) = (Vec::new(), Vec::new());
        if cfg.variant != AttentionVariant::Plain {
            for h in 0..cfg.heads {
                for (side, out) in [("phi_q", &mut phi_q), ("phi_k", &mut phi_k)] {
                    let mut w = gaussian(vec![2 * dh, dh], 0.02, rng);
                    for (x, base) in w.data_mut().iter_mut().zip(stacked_half_identity(dh)) {
                        *x += base;
                    }
                    out.push(store.add(name(&format!("{side}.{h}")), ParamKind::Attention, l, w));
                }
            }
        }
        let spatial_scale = (cfg.variant == AttentionVariant::SpatiallyEnhanced).then(|| {
            let t = Tensor::from_fn(vec![n_nodes, 1], |i| i as f64);
            store.add(name("spatial_scale"), ParamKind::Attention, l, t)
        });
        let revin = (cfg.variant != AttentionVariant::Plain).then(|| {
            let g = store.add(name("revin.gamma"), ParamKind::Revin, l, Tensor::from_fn(vec![n_nodes, 1], |_| 1.0));
            let b = store.add(name("revin.beta"), ParamKind::Revin, l, Tensor::zeros(vec![n_nodes, 1]));
            (g, b)
        });
        let ln_gamma = store.add(name("ln.gamma"), ParamKind::LayerNorm, l, Tensor::from_fn(vec![1, d], |_| 1.0));
        let ln_beta = store.add(name("ln.beta"), ParamKind::LayerNorm, l, Tensor::zeros(vec![1, d]));
        Self { w_q, w_k, w_v, w_o, phi_q, phi_k, spatial_scale, revin, ln_gamma, ln_beta }
    }
}

/// Per-grid inputs reused across layers and samples.
#[derive(Debug, Clone)]
pub struct AttentionLayout {
    pub grid: TokenGrid,
    pub freqs: RopeFrequencies,
    pub phi: PhiLayout,
}

impl AttentionLayout {
    pub fn new(grid: TokenGrid, head_dim: usize) -> Result<Self> {
        let freqs = rope_frequencies(head_dim)?;
        let phi = PhiLayout::new(&grid.row_time, grid.row_node.clone(), &freqs);
        Ok(Self { grid, freqs, phi })
    }
}

/// Test and diagnostic switches.
#[derive(Debug, Clone, Copy, Default)]
pub struct AttentionHooks {
    /// Replace the attention sub-computation with the identity on the normalized input.
    pub identity_attention: bool,
}

/// Pre-softmax logits and weights of every head, row-major `L x L`.
#[derive(Debug, Clone, Default)]
pub struct AttentionTrace {
    pub logits: Vec<Vec<f64>>,
    pub weights: Vec<Vec<f64>>,
}

#[allow(clippy::too_many_arguments)]
pub fn se_attention_forward(
    tape: &mut Tape,
    store: &ParamStore,
    params: &SeAttentionParams,
    cfg: &AttentionConfig,
    layout: &AttentionLayout,
    h: Var,
    train: bool,
    rng: &mut Rng,
    hooks: AttentionHooks,
    mut trace: Option<&mut AttentionTrace>,
) -> Result<Var> {
    let (rows, cols) = tape.dims(h);
    if rows != layout.grid.len() {
        return Err(shape_err("attention tokens (T_in*N)", layout.grid.len(), rows));
    }
    if cols != cfg.d_model {
        return Err(shape_err("attention d_model", cfg.d_model, cols));
    }
    let n_nodes = layout.grid.n_nodes;
    let row_node = &layout.grid.row_node;

    let (input, stats) = match params.revin {
        Some((g, b)) => {
            let gv = tape.param(store, g);
            let bv = tape.param(store, b);
            let (hn, stats) = revin_normalize_tape(tape, h, gv, bv, row_node, n_nodes, DEFAULT_EPS);
            (hn, Some((stats, gv, bv)))
        }
        None => (h, None),
    };

    let attended = if hooks.identity_attention {
        input
    } else {
        let dh = cfg.head_dim();
        let wq = tape.param(store, params.w_q);
        let wk = tape.param(store, params.w_k);
        let wv = tape.param(store, params.w_v);
        let q = tape.matmul(input, wq);
        let k = tape.matmul(input, wk);
        let v = tape.matmul(input, wv);
        let scale = params.spatial_scale.map(|s| tape.param(store, s));
        let mode = match cfg.variant {
            AttentionVariant::SpatiallyEnhanced => Some(PhiMode::SpatioTemporal),
            AttentionVariant::TemporalRope => Some(PhiMode::TemporalOnly),
            AttentionVariant::Plain => None,
        };
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(cfg.heads);
        for head in 0..cfg.heads {
            let qh = tape.slice_cols(q, head * dh, dh);
            let kh = tape.slice_cols(k, head * dh, dh);
            let vh = tape.slice_cols(v, head * dh, dh);
            let (pq, pk) = match mode {
                Some(mode) => {
                    let wpq = tape.param(store, params.phi_q[head]);
                    let wpk = tape.param(store, params.phi_k[head]);
                    (phi_tape(tape, qh, &layout.phi, scale, wpq, mode), phi_tape(tape, kh, &layout.phi, scale, wpk, mode))
                }
                None => (qh, kh),
            };
            let raw = tape.matmul_t(pq, pk);
            let logits = tape.scale(raw, inv_sqrt);
            let weights = tape.softmax_rows(logits);
            if let Some(tr) = trace.as_deref_mut() {
                tr.logits.push(tape.value(logits).to_vec());
                tr.weights.push(tape.value(weights).to_vec());
            }
            heads.push(tape.matmul(weights, vh));
        }
        let cat = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads) };
        let wo = tape.param(store, params.w_o);
        tape.matmul(cat, wo)
    };

    let restored = match &stats {
        Some((stats, g, b)) => revin_denormalize_tape(tape, attended, stats, *g, *b, row_node),
        None => attended,
    };
    let dropped = if train { tape.dropout(restored, cfg.dropout, rng) } else { restored };
    let res = tape.add(h, dropped);
    let g = tape.param(store, params.ln_gamma);
    let b = tape.param(store, params.ln_beta);
    Ok(tape.layer_norm_rows(res, g, b, LAYER_NORM_EPS))
}

/// Attention weights for one sample as `heads` row-major `L x L` matrices.
pub fn attention_weights(
    store: &ParamStore,
    params: &SeAttentionParams,
    cfg: &AttentionConfig,
    layout: &AttentionLayout,
    h: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let hv = tape.constant(layout.grid.len(), cfg.d_model, h.to_vec());
    let mut trace = AttentionTrace::default();
    let mut rng = crate::numerics::seeded_rng(0);
    se_attention_forward(&mut tape, store, params, cfg, layout, hv, false, &mut rng, AttentionHooks::default(), Some(&mut trace))?;
    Ok(trace.weights)
}
