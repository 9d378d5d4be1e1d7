//! Temporal rotary embedding, its per-node spatial variant, and the combined
//! projection that folds both back to head width.

use std::str::FromStr;
use std::sync::Arc;

use crate::error::{shape_err, Result, StlinkError};
use crate::numerics::{Tape, Var};

const ROPE_BASE: f64 = 10000.0;

/// Base frequencies `omega_i = 10000^(-2i/d)` for `i < d/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct RopeFrequencies {
    pub omega: Vec<f64>,
}

impl RopeFrequencies {
    pub fn dim(&self) -> usize {
        2 * self.omega.len()
    }

    /// The `d/4` frequencies used by the spatial rotation (the lowest indices).
    pub fn spatial(&self) -> &[f64] {
        &self.omega[..self.omega.len() / 2]
    }
}

pub fn rope_frequencies(d: usize) -> Result<RopeFrequencies> {
    if d < 2 || !d.is_multiple_of(2) {
        return Err(StlinkError::OddHeadDim(d));
    }
    let omega = (0..d / 2).map(|i| ROPE_BASE.powf(-(2.0 * i as f64) / d as f64)).collect();
    Ok(RopeFrequencies { omega })
}

/// Learnable per-node multiplier on the base frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialScale {
    pub n_in: Vec<f64>,
}

impl SpatialScale {
    /// Node `i` starts at `i as f64`, a plain rotation over node order.
    pub fn by_node_index(n: usize) -> Self {
        Self { n_in: (0..n).map(|i| i as f64).collect() }
    }
}

fn rotate_pair(a: f64, b: f64, theta: f64) -> (f64, f64) {
    let (s, c) = theta.sin_cos();
    (c * a - s * b, s * a + c * b)
}

/// Rotates interleaved pair `(x[2i], x[2i+1])` by `t * omega_i`.
pub fn rope_temporal(x: &[f64], t: usize, freqs: &RopeFrequencies) -> Result<Vec<f64>> {
    if x.len() != freqs.dim() {
        return Err(shape_err("rope_temporal input", freqs.dim(), x.len()));
    }
    let mut out = x.to_vec();
    for (i, w) in freqs.omega.iter().enumerate() {
        let (a, b) = rotate_pair(x[2 * i], x[2 * i + 1], t as f64 * w);
        out[2 * i] = a;
        out[2 * i + 1] = b;
    }
    Ok(out)
}

/// Rotates the `d/4` pairs of the first half by `n_in[node] * omega_p`; the second
/// half is returned untouched.
pub fn rope_spatial(x: &[f64], node: usize, scale: &SpatialScale, freqs: &RopeFrequencies) -> Result<Vec<f64>> {
    let d = x.len();
    if !d.is_multiple_of(4) {
        return Err(StlinkError::SpatialDimNotDivisibleBy4(d));
    }
    if d != freqs.dim() {
        return Err(shape_err("rope_spatial input", freqs.dim(), d));
    }
    let Some(&n_in) = scale.n_in.get(node) else {
        return Err(StlinkError::IndexOutOfRange { what: "node".into(), index: node, limit: scale.n_in.len() });
    };
    let mut out = x.to_vec();
    for (p, w) in freqs.spatial().iter().enumerate() {
        let (a, b) = rotate_pair(x[2 * p], x[2 * p + 1], n_in * w);
        out[2 * p] = a;
        out[2 * p + 1] = b;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Query,
    Key,
}

impl FromStr for Side {
    type Err = StlinkError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "query" | "q" => Ok(Side::Query),
            "key" | "k" => Ok(Side::Key),
            other => Err(StlinkError::InvalidConfig(format!("projection side must be query or key, got {other:?}"))),
        }
    }
}

/// `2d x d` projections folding `[temporal; spatial]` back to width `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiProjection {
    pub d: usize,
    pub w_q: Vec<f64>,
    pub w_k: Vec<f64>,
}

impl PhiProjection {
    pub fn new(d: usize, w_q: Vec<f64>, w_k: Vec<f64>) -> Result<Self> {
        for w in [&w_q, &w_k] {
            if w.len() != 2 * d * d {
                return Err(shape_err("phi projection", format!("{}x{}", 2 * d, d), w.len()));
            }
        }
        Ok(Self { d, w_q, w_k })
    }

    /// Stacked halves `[I; I] / 2`: averages the temporal and spatial rotations.
    pub fn averaging(d: usize) -> Self {
        let w = stacked_half_identity(d);
        Self { d, w_q: w.clone(), w_k: w }
    }

    pub fn weight(&self, side: Side) -> &[f64] {
        match side {
            Side::Query => &self.w_q,
            Side::Key => &self.w_k,
        }
    }
}

/// Row-major `2d x d` matrix `[I; I] / 2`.
pub fn stacked_half_identity(d: usize) -> Vec<f64> {
    let mut w = vec![0.0; 2 * d * d];
    for i in 0..d {
        w[i * d + i] = 0.5;
        w[(d + i) * d + i] = 0.5;
    }
    w
}

/// `concat(rope_temporal(x, t), rope_spatial(x, node)) . W` for the chosen side.
pub fn phi_project(
    x: &[f64],
    t: usize,
    node: usize,
    proj: &PhiProjection,
    scale: &SpatialScale,
    freqs: &RopeFrequencies,
    side: Side,
) -> Result<Vec<f64>> {
    let d = proj.d;
    if x.len() != d {
        return Err(shape_err("phi_project input", d, x.len()));
    }
    let mut cat = rope_temporal(x, t, freqs)?;
    cat.extend(rope_spatial(x, node, scale, freqs)?);
    let w = proj.weight(side);
    let mut out = vec![0.0; d];
    for (r, c) in cat.iter().enumerate() {
        for j in 0..d {
            out[j] += c * w[r * d + j];
        }
    }
    Ok(out)
}

/// Per-row cosines and sines of `t_r * omega_i` for the temporal rotation on a tape.
pub fn temporal_tables(row_time: &[usize], freqs: &RopeFrequencies) -> (Arc<[f64]>, Arc<[f64]>) {
    let pairs = freqs.omega.len();
    let mut cos = Vec::with_capacity(row_time.len() * pairs);
    let mut sin = Vec::with_capacity(row_time.len() * pairs);
    for &t in row_time {
        for w in &freqs.omega {
            let (s, c) = (t as f64 * w).sin_cos();
            cos.push(c);
            sin.push(s);
        }
    }
    (cos.into(), sin.into())
}

/// Which rotations feed the `2d` concatenation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhiMode {
    /// `[RoPE_T; RoPE_S]`
    SpatioTemporal,
    /// `[RoPE_T; RoPE_T]`
    TemporalOnly,
}

/// Inputs for the tape-level projection that stay fixed across a forward pass.
#[derive(Debug, Clone)]
pub struct PhiLayout {
    pub cos: Arc<[f64]>,
    pub sin: Arc<[f64]>,
    pub row_node: Arc<[usize]>,
    pub spatial_freqs: Arc<[f64]>,
}

impl PhiLayout {
    pub fn new(row_time: &[usize], row_node: Arc<[usize]>, freqs: &RopeFrequencies) -> Self {
        let (cos, sin) = temporal_tables(row_time, freqs);
        Self { cos, sin, row_node, spatial_freqs: freqs.spatial().into() }
    }
}

/// Tape version of [`phi_project`] over all rows of `x` (`rows x d`). `scale` is the
/// `n x 1` spatial column; it is ignored in [`PhiMode::TemporalOnly`].
pub fn phi_tape(tape: &mut Tape, x: Var, layout: &PhiLayout, scale: Option<Var>, w: Var, mode: PhiMode) -> Var {
    let d = tape.dims(x).1;
    let rt = tape.rotate_pairs(x, layout.cos.clone(), layout.sin.clone(), d / 2);
    let second = match (mode, scale) {
        (PhiMode::SpatioTemporal, Some(s)) => tape.rotate_pairs_scaled(x, s, layout.row_node.clone(), layout.spatial_freqs.clone()),
        (PhiMode::SpatioTemporal, None) => panic!("spatio-temporal projection needs a spatial scale"),
        (PhiMode::TemporalOnly, _) => rt,
    };
    let cat = tape.concat_cols(&[rt, second]);
    tape.matmul(cat, w)
}
