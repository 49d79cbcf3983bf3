//! Score and weighted-sum kernels that read the KV cache in place.
//!
//! The sliced kernel touches only the leading `d` columns of each key row; the
//! gathered kernels visit selected rows directly. None of them materialize a
//! dense copy of the slice or the gathered rows.
//!
//! Work is split along the sequence dimension in `tile_n`-row tiles, so the
//! single-query case (m = 1) still parallelizes. Lengths need not be powers of
//! two; the last tile is simply shorter.

use crate::parallel;
use crate::tensor::{IndexList, Matrix};
use crate::{LokiError, Result};

/// Output tiling. `tile_m` splits the query/row dimension, `tile_n` the
/// sequence/column dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileSpec {
    pub tile_m: usize,
    pub tile_n: usize,
    /// Ignored when built without the `parallel` feature.
    pub parallel: bool,
}

impl TileSpec {
    pub const DEFAULT_TILE_M: usize = 32;
    pub const DEFAULT_TILE_N: usize = 256;

    pub fn new(tile_m: usize, tile_n: usize, parallel: bool) -> Self {
        Self {
            tile_m: tile_m.max(1),
            tile_n: tile_n.max(1),
            parallel,
        }
    }

    pub fn sequential() -> Self {
        Self {
            parallel: false,
            ..Self::default()
        }
    }
}

impl Default for TileSpec {
    fn default() -> Self {
        Self::new(Self::DEFAULT_TILE_M, Self::DEFAULT_TILE_N, true)
    }
}

const LANES: usize = 8;

/// Dot product with a fixed 8-lane accumulation order.
#[inline(always)]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    let s0 = (acc[0] + acc[4]) + (acc[1] + acc[5]);
    let s1 = (acc[2] + acc[6]) + (acc[3] + acc[7]);
    (s0 + s1) + tail
}

#[inline]
fn axpy(out: &mut [f32], w: f32, row: &[f32]) {
    for (o, &v) in out.iter_mut().zip(row) {
        *o += w * v;
    }
}

fn check_query(q_hat: &[f32], keys: &Matrix) -> Result<()> {
    if q_hat.len() != keys.cols() {
        return Err(LokiError::shape(format!(
            "query of length {} against keys with {} columns",
            q_hat.len(),
            keys.cols()
        )));
    }
    Ok(())
}

/// `scores[i] = q̂[..d] · K̂[i][..d]` for every cached row.
pub fn sliced_score_kernel(q_hat: &[f32], keys: &Matrix, d: usize, tile: &TileSpec) -> Result<Vec<f32>> {
    check_query(q_hat, keys)?;
    if d == 0 || d > keys.cols() {
        return Err(LokiError::budget(format!(
            "reduced dimension {d} outside 1..={}",
            keys.cols()
        )));
    }
    let q = &q_hat[..d];
    let cols = keys.cols();
    let mut out = vec![0.0f32; keys.rows()];
    let tn = tile.tile_n;
    parallel::for_each_chunk_mut(&mut out, tn, tile.parallel, |t, chunk| {
        let rows = &keys.data()[t * tn * cols..(t * tn + chunk.len()) * cols];
        for (s, row) in chunk.iter_mut().zip(rows.chunks_exact(cols)) {
            *s = dot(q, &row[..d]);
        }
    });
    Ok(out)
}

/// `scores[j] = q̂ · K̂[indices[j]]`.
pub fn gathered_score_kernel(
    q_hat: &[f32],
    keys: &Matrix,
    indices: &IndexList,
    tile: &TileSpec,
) -> Result<Vec<f32>> {
    check_query(q_hat, keys)?;
    indices.check_bounds(keys.rows())?;
    let idx = indices.as_slice();
    let mut out = vec![0.0f32; idx.len()];
    let tn = tile.tile_n;
    parallel::for_each_chunk_mut(&mut out, tn, tile.parallel, |t, chunk| {
        let base = t * tn;
        for (j, s) in chunk.iter_mut().enumerate() {
            *s = dot(q_hat, keys.row(idx[base + j]));
        }
    });
    Ok(out)
}

/// `Σ_j weights[j] · V[indices[j]]`.
///
/// Each tile of `tile_n` indices produces a partial sum; partials are folded
/// in tile order, so the result depends on the tile size but not on threads.
pub fn gathered_weighted_sum_kernel(
    weights: &[f32],
    values: &Matrix,
    indices: &IndexList,
    tile: &TileSpec,
) -> Result<Vec<f32>> {
    if weights.len() != indices.len() {
        return Err(LokiError::shape(format!(
            "{} weights for {} indices",
            weights.len(),
            indices.len()
        )));
    }
    indices.check_bounds(values.rows())?;
    let idx = indices.as_slice();
    Ok(tiled_weighted_sum(weights, values, tile, |j| idx[j]))
}

/// `Σ_i weights[i] · V[i]` over every row.
pub fn weighted_sum_kernel(weights: &[f32], values: &Matrix, tile: &TileSpec) -> Result<Vec<f32>> {
    if weights.len() != values.rows() {
        return Err(LokiError::shape(format!(
            "{} weights for {} value rows",
            weights.len(),
            values.rows()
        )));
    }
    Ok(tiled_weighted_sum(weights, values, tile, |j| j))
}

fn tiled_weighted_sum(
    weights: &[f32],
    values: &Matrix,
    tile: &TileSpec,
    row_of: impl Fn(usize) -> usize + Sync + Send,
) -> Vec<f32> {
    let dim = values.cols();
    let n = weights.len();
    let tn = tile.tile_n;
    let tiles = n.div_ceil(tn);
    if tiles <= 1 {
        let mut out = vec![0.0f32; dim];
        for (j, &w) in weights.iter().enumerate() {
            axpy(&mut out, w, values.row(row_of(j)));
        }
        return out;
    }
    let partials = parallel::map_range(tiles, tile.parallel, |t| {
        let mut acc = vec![0.0f32; dim];
        let lo = t * tn;
        for (j, &w) in weights[lo..((t + 1) * tn).min(n)].iter().enumerate() {
            axpy(&mut acc, w, values.row(row_of(lo + j)));
        }
        acc
    });
    let mut parts = partials.into_iter();
    let mut out = parts.next().unwrap_or_else(|| vec![0.0; dim]);
    for p in parts {
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
    out
}
