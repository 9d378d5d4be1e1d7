//! Reversible per-node instance normalization.
//!
//! Each node's series is standardized by its own mean and population variance
//! and passed through a learnable per-node affine map. The statistics are kept
//! so the exact inverse can be applied after the wrapped computation.

use std::sync::Arc;

use num_traits::Float;

use crate::error::{shape_err, Result, StlinkError};
use crate::numerics::{Tape, Var};

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct RevinParams<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub eps: T,
}

impl<T: Float> RevinParams<T> {
    /// Identity affine for `k` nodes.
    pub fn identity(k: usize) -> Self {
        Self { gamma: vec![T::one(); k], beta: vec![T::zero(); k], eps: T::from(DEFAULT_EPS).unwrap() }
    }

    fn check(&self, k: usize) -> Result<()> {
        if self.gamma.len() != k || self.beta.len() != k {
            return Err(shape_err("revin affine length", k, self.gamma.len().max(self.beta.len())));
        }
        if !(self.eps > T::zero()) {
            return Err(StlinkError::InvalidConfig("revin eps must be positive".into()));
        }
        Ok(())
    }
}

/// Per-node statistics of one input window.
#[derive(Debug, Clone, PartialEq)]
pub struct RevinStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Normalizes a `k x t` row-major window. Reductions accumulate in `f64`.
pub fn revin_normalize<T: Float>(x: &[T], k: usize, t: usize, params: &RevinParams<T>) -> Result<(Vec<T>, RevinStats<T>)> {
    if t == 0 {
        return Err(StlinkError::EmptyInput);
    }
    if x.len() != k * t {
        return Err(shape_err("revin window", k * t, x.len()));
    }
    params.check(k)?;
    let eps = params.eps.to_f64().unwrap();
    let mut out = Vec::with_capacity(x.len());
    let mut mean = Vec::with_capacity(k);
    let mut var = Vec::with_capacity(k);
    for (node, row) in x.chunks(t).enumerate() {
        let m = row.iter().map(|v| v.to_f64().unwrap()).sum::<f64>() / t as f64;
        let v = row.iter().map(|v| (v.to_f64().unwrap() - m).powi(2)).sum::<f64>() / t as f64;
        let sd = (v + eps).sqrt();
        let g = params.gamma[node].to_f64().unwrap();
        let b = params.beta[node].to_f64().unwrap();
        out.extend(row.iter().map(|e| T::from(g * (e.to_f64().unwrap() - m) / sd + b).unwrap()));
        mean.push(T::from(m).unwrap());
        var.push(T::from(v).unwrap());
    }
    Ok((out, RevinStats { mean, var }))
}

/// Exact algebraic inverse of [`revin_normalize`] given its statistics.
pub fn revin_denormalize<T: Float>(y: &[T], k: usize, t: usize, stats: &RevinStats<T>, params: &RevinParams<T>) -> Result<Vec<T>> {
    if y.len() != k * t {
        return Err(shape_err("revin window", k * t, y.len()));
    }
    params.check(k)?;
    if stats.mean.len() != k || stats.var.len() != k {
        return Err(shape_err("revin stats length", k, stats.mean.len()));
    }
    if let Some(index) = params.gamma.iter().position(|g| g.is_zero()) {
        return Err(StlinkError::NonInvertibleAffine { index });
    }
    let eps = params.eps.to_f64().unwrap();
    let mut out = Vec::with_capacity(y.len());
    for (node, row) in y.chunks(t.max(1)).enumerate() {
        let sd = (stats.var[node].to_f64().unwrap() + eps).sqrt();
        let g = params.gamma[node].to_f64().unwrap();
        let b = params.beta[node].to_f64().unwrap();
        let m = stats.mean[node].to_f64().unwrap();
        out.extend(row.iter().map(|e| T::from((e.to_f64().unwrap() - b) / g * sd + m).unwrap()));
    }
    Ok(out)
}

/// Statistics recorded on a tape; gradients flow through both.
#[derive(Debug, Clone)]
pub struct TapeStats {
    /// `k x 1` per-node means.
    pub mean: Var,
    /// `k x 1` per-node `sqrt(var + eps)`.
    pub std: Var,
}

/// Maps a `k x 1` per-node column onto every entry of an `rows x cols` matrix
/// according to each row's node.
pub(crate) fn broadcast_map(row_node: &[usize], cols: usize) -> Arc<[usize]> {
    row_node.iter().flat_map(|&n| std::iter::repeat_n(n, cols)).collect()
}

/// Normalizes hidden states `h` (`rows x cols`) per node, where node `n`'s
/// instance is every entry of the rows with `row_node[r] == n`. `gamma` and
/// `beta` are `k x 1` columns.
pub fn revin_normalize_tape(
    tape: &mut Tape,
    h: Var,
    gamma: Var,
    beta: Var,
    row_node: &Arc<[usize]>,
    k: usize,
    eps: f64,
) -> (Var, TapeStats) {
    let (rows, cols) = tape.dims(h);
    let bmap = broadcast_map(row_node, cols);
    let mean = tape.segment_mean(h, row_node.clone(), k);
    let mean_b = tape.gather(mean, bmap.clone(), rows, cols);
    let centered = tape.sub(h, mean_b);
    let sq = tape.mul(centered, centered);
    let var = tape.segment_mean(sq, row_node.clone(), k);
    let var = tape.add_scalar(var, eps);
    let std = tape.sqrt(var);
    let std_b = tape.gather(std, bmap.clone(), rows, cols);
    let xhat = tape.div(centered, std_b);
    let g_b = tape.gather(gamma, bmap.clone(), rows, cols);
    let b_b = tape.gather(beta, bmap, rows, cols);
    let scaled = tape.mul(xhat, g_b);
    (tape.add(scaled, b_b), TapeStats { mean, std })
}

pub fn revin_denormalize_tape(
    tape: &mut Tape,
    y: Var,
    stats: &TapeStats,
    gamma: Var,
    beta: Var,
    row_node: &Arc<[usize]>,
) -> Var {
    let (rows, cols) = tape.dims(y);
    let bmap = broadcast_map(row_node, cols);
    let b_b = tape.gather(beta, bmap.clone(), rows, cols);
    let g_b = tape.gather(gamma, bmap.clone(), rows, cols);
    let std_b = tape.gather(stats.std, bmap.clone(), rows, cols);
    let mean_b = tape.gather(stats.mean, bmap, rows, cols);
    let shifted = tape.sub(y, b_b);
    let unscaled = tape.div(shifted, g_b);
    let spread = tape.mul(unscaled, std_b);
    tape.add(spread, mean_b)
}
