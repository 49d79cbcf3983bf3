//! Single-query attention variants over a per-head KV cache.
//!
//! All variants scale logits by `1/√D` with `D` the full head dimension.
//! Top-k variants return their selection in ascending index order and compute
//! the softmax over the selected logits only.

use serde::Serialize;

use crate::calibration::ProjectionSet;
use crate::kernels::{self, TileSpec};
use crate::rope::{rope_apply_in_place, RopeParams};
use crate::tensor::{softmax_in_place, topk_indices, IndexList, Matrix};
use crate::{LokiError, Result};

/// `clamp(round(fraction · total), 1, total)`.
pub fn resolve_budget(fraction: f64, total: usize) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(LokiError::budget(format!("fraction {fraction} outside (0, 1]")));
    }
    if total == 0 {
        return Err(LokiError::budget("budget over an empty axis"));
    }
    Ok(((fraction * total as f64).round() as usize).clamp(1, total))
}

/// Key budget `k_f` and dimensionality budget `d_f`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LokiConfig {
    pub key_fraction: f64,
    pub dim_fraction: f64,
}

impl LokiConfig {
    pub fn new(key_fraction: f64, dim_fraction: f64) -> Result<Self> {
        for (name, f) in [("k_f", key_fraction), ("d_f", dim_fraction)] {
            if !(f > 0.0 && f <= 1.0) {
                return Err(LokiError::budget(format!("{name} = {f} outside (0, 1]")));
            }
        }
        Ok(Self {
            key_fraction,
            dim_fraction,
        })
    }

    pub fn full() -> Self {
        Self {
            key_fraction: 1.0,
            dim_fraction: 1.0,
        }
    }

    /// `(k, d)` for a cache of `seq_len` tokens and head dimension `head_dim`.
    pub fn resolve(&self, seq_len: usize, head_dim: usize) -> Result<(usize, usize)> {
        Ok((
            resolve_budget(self.key_fraction, seq_len)?,
            resolve_budget(self.dim_fraction, head_dim)?,
        ))
    }
}

/// Cache of PCA-transformed keys `K̂ = K·P` and raw values. Append-only.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    keys: Matrix,
    values: Matrix,
}

impl KvCache {
    pub fn new(head_dim: usize) -> Self {
        Self {
            keys: Matrix::empty(head_dim),
            values: Matrix::empty(head_dim),
        }
    }

    pub fn from_parts(keys: Matrix, values: Matrix) -> Result<Self> {
        if keys.rows() != values.rows() || keys.cols() != values.cols() {
            return Err(LokiError::shape(format!(
                "keys {:?} and values {:?} differ in shape",
                keys.shape(),
                values.shape()
            )));
        }
        Ok(Self { keys, values })
    }

    pub fn append(&mut self, key_hat: &[f32], value: &[f32]) -> Result<()> {
        let d = self.head_dim();
        if key_hat.len() != d || value.len() != d {
            return Err(LokiError::shape(format!(
                "append of key length {} / value length {} to cache with head dimension {d}",
                key_hat.len(),
                value.len()
            )));
        }
        self.keys.push_row(key_hat)?;
        self.values.push_row(value)
    }

    pub fn len(&self) -> usize {
        self.keys.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn head_dim(&self) -> usize {
        self.keys.cols()
    }

    pub fn keys(&self) -> &Matrix {
        &self.keys
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }
}

/// How a pre-rotary projection is combined with the rotary embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Composition {
    /// `rope(x, pos)·P`. Preserves dot products exactly.
    #[default]
    RotateThenProject,
    /// `rope(x·P, pos)`. Rotates in the projected basis; not an isometry of
    /// the original scores.
    ProjectThenRotate,
}

/// Maps raw query/key vectors into the space the cache is scored in.
#[derive(Debug, Clone)]
pub struct KeyTransform<'a> {
    pub projection: &'a ProjectionSet,
    /// `None` when inputs are already post-rotary.
    pub rope: Option<RopeParams>,
    pub composition: Composition,
}

impl<'a> KeyTransform<'a> {
    pub fn projection_only(projection: &'a ProjectionSet) -> Self {
        Self {
            projection,
            rope: None,
            composition: Composition::default(),
        }
    }

    pub fn apply(&self, x: &[f32], position: u64) -> Result<Vec<f32>> {
        match (&self.rope, self.composition) {
            (None, _) => self.projection.project(x),
            (Some(rope), Composition::RotateThenProject) => {
                let mut r = x.to_vec();
                rope_apply_in_place(&mut r, position, rope)?;
                self.projection.project(&r)
            }
            (Some(rope), Composition::ProjectThenRotate) => {
                let mut r = self.projection.project(x)?;
                rope_apply_in_place(&mut r, position, rope)?;
                Ok(r)
            }
        }
    }

    pub fn apply_rows(&self, m: &Matrix, first_position: u64) -> Result<Matrix> {
        let mut out = Matrix::empty(m.cols());
        for (r, row) in m.row_iter().enumerate() {
            out.push_row(&self.apply(row, first_position + r as u64)?)?;
        }
        Ok(out)
    }
}

/// Dense attention result.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub output: Vec<f32>,
    /// Softmax weights over every attended row.
    pub weights: Vec<f32>,
}

/// Top-k attention result.
#[derive(Debug, Clone, PartialEq)]
pub struct TopkOutput {
    pub output: Vec<f32>,
    pub selected: IndexList,
    /// Softmax weights over `selected`, in the same order.
    pub weights: Vec<f32>,
    /// Scores used for ranking: reduced-dimension scores for Loki, exact
    /// logits for exact top-k.
    pub ranking_scores: Vec<f32>,
}

fn check_kv(q: &[f32], keys: &Matrix, values: &Matrix) -> Result<()> {
    if keys.rows() != values.rows() {
        return Err(LokiError::shape(format!(
            "{} keys but {} values",
            keys.rows(),
            values.rows()
        )));
    }
    if keys.rows() == 0 {
        return Err(LokiError::shape("attention over an empty cache"));
    }
    if q.len() != keys.cols() {
        return Err(LokiError::shape(format!(
            "query of length {} against keys with {} columns",
            q.len(),
            keys.cols()
        )));
    }
    Ok(())
}

fn scale_for(head_dim: usize) -> f32 {
    1.0 / (head_dim as f32).sqrt()
}

/// `softmax(q·Kᵀ/√D)·V`.
pub fn vanilla_attention(q: &[f32], keys: &Matrix, values: &Matrix, tile: &TileSpec) -> Result<AttentionOutput> {
    check_kv(q, keys, values)?;
    let mut weights = kernels::sliced_score_kernel(q, keys, keys.cols(), tile)?;
    let scale = scale_for(keys.cols());
    weights.iter_mut().for_each(|s| *s *= scale);
    softmax_in_place(&mut weights)?;
    let output = kernels::weighted_sum_kernel(&weights, values, tile)?;
    Ok(AttentionOutput { output, weights })
}

/// Softmax over the gathered exact logits, then the gathered weighted sum.
fn attend_selected(q: &[f32], keys: &Matrix, values: &Matrix, selected: &IndexList, tile: &TileSpec) -> Result<(Vec<f32>, Vec<f32>)> {
    let mut weights = kernels::gathered_score_kernel(q, keys, selected, tile)?;
    let scale = scale_for(keys.cols());
    weights.iter_mut().for_each(|s| *s *= scale);
    softmax_in_place(&mut weights)?;
    let output = kernels::gathered_weighted_sum_kernel(&weights, values, selected, tile)?;
    Ok((output, weights))
}

/// Ranks by exact logits `q·Kᵀ`, then attends over the top `k`.
pub fn exact_topk_attention(q: &[f32], keys: &Matrix, values: &Matrix, k: usize, tile: &TileSpec) -> Result<TopkOutput> {
    check_kv(q, keys, values)?;
    let logits = kernels::sliced_score_kernel(q, keys, keys.cols(), tile)?;
    let selected = topk_indices(&logits, k)?;
    let (output, weights) = attend_selected(q, keys, values, &selected, tile)?;
    Ok(TopkOutput {
        output,
        selected,
        weights,
        ranking_scores: logits,
    })
}

/// Loki attention for an already transformed query `q̂` over a cache that
/// already holds the current token.
///
/// Tokens are ranked by `q̂[..d]·K̂[:, ..d]ᵀ` (unscaled), the top `k` are
/// kept, and the softmax is taken over their full-dimension scores.
pub fn loki_attention_projected(q_hat: &[f32], cache: &KvCache, cfg: &LokiConfig, tile: &TileSpec) -> Result<TopkOutput> {
    check_kv(q_hat, cache.keys(), cache.values())?;
    let (k, d) = cfg.resolve(cache.len(), cache.head_dim())?;
    loki_attention_resolved(q_hat, cache, k, d, tile)
}

/// As [`loki_attention_projected`] with explicit integer budgets.
pub fn loki_attention_resolved(q_hat: &[f32], cache: &KvCache, k: usize, d: usize, tile: &TileSpec) -> Result<TopkOutput> {
    check_kv(q_hat, cache.keys(), cache.values())?;
    if k == 0 || k > cache.len() {
        return Err(LokiError::budget(format!("k = {k} outside 1..={}", cache.len())));
    }
    let approx = kernels::sliced_score_kernel(q_hat, cache.keys(), d, tile)?;
    let selected = topk_indices(&approx, k)?;
    let (output, weights) = attend_selected(q_hat, cache.keys(), cache.values(), &selected, tile)?;
    Ok(TopkOutput {
        output,
        selected,
        weights,
        ranking_scores: approx,
    })
}

/// Loki attention for a raw query: `q̂ = q·P` is recomputed every call.
pub fn loki_attention(q: &[f32], cache: &KvCache, projection: &ProjectionSet, cfg: &LokiConfig, tile: &TileSpec) -> Result<TopkOutput> {
    let q_hat = projection.project(q)?;
    loki_attention_projected(&q_hat, cache, cfg, tile)
}

/// One decode step: transform and append the current key/value, then attend.
#[allow(clippy::too_many_arguments)]
pub fn loki_step(
    q: &[f32],
    key: &[f32],
    value: &[f32],
    position: u64,
    cache: &mut KvCache,
    transform: &KeyTransform<'_>,
    cfg: &LokiConfig,
    tile: &TileSpec,
) -> Result<TopkOutput> {
    let q_hat = transform.apply(q, position)?;
    let k_hat = transform.apply(key, position)?;
    cache.append(&k_hat, value)?;
    loki_attention_projected(&q_hat, cache, cfg, tile)
}

/// Cache holding only the leading `d` principal coordinates of each key.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedKvCache {
    head_dim: usize,
    keys: Matrix,
    values: Matrix,
}

impl ReducedKvCache {
    pub fn new(head_dim: usize, reduced_dim: usize) -> Result<Self> {
        if reduced_dim == 0 || reduced_dim > head_dim {
            return Err(LokiError::budget(format!("reduced dimension {reduced_dim} outside 1..={head_dim}")));
        }
        Ok(Self {
            head_dim,
            keys: Matrix::empty(reduced_dim),
            values: Matrix::empty(head_dim),
        })
    }

    /// Projects each raw key row onto `P[:, :d]`.
    pub fn from_raw(keys: &Matrix, values: &Matrix, projection: &ProjectionSet, reduced_dim: usize) -> Result<Self> {
        if keys.shape() != values.shape() {
            return Err(LokiError::shape("keys and values differ in shape"));
        }
        let mut cache = Self::new(keys.cols(), reduced_dim)?;
        for (k, v) in keys.row_iter().zip(values.row_iter()) {
            cache.append_raw(k, v, projection)?;
        }
        Ok(cache)
    }

    pub fn append_raw(&mut self, key: &[f32], value: &[f32], projection: &ProjectionSet) -> Result<()> {
        let k = projection.project_leading(key, self.reduced_dim())?;
        self.append_reduced(&k, value)
    }

    pub fn append_reduced(&mut self, key_reduced: &[f32], value: &[f32]) -> Result<()> {
        if value.len() != self.head_dim {
            return Err(LokiError::shape("value length does not match head dimension"));
        }
        self.keys.push_row(key_reduced)?;
        self.values.push_row(value)
    }

    pub fn reduced_dim(&self) -> usize {
        self.keys.cols()
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn len(&self) -> usize {
        self.keys.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn keys(&self) -> &Matrix {
        &self.keys
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }
}

/// Attention computed entirely in the leading-`d` subspace:
/// `softmax(q̂[..d]·K̂[:, ..d]ᵀ/√D)·V` over all tokens. The scale uses the
/// full `D`, not `d`.
pub fn pca_attn(q: &[f32], cache: &ReducedKvCache, projection: &ProjectionSet, tile: &TileSpec) -> Result<AttentionOutput> {
    if cache.is_empty() {
        return Err(LokiError::shape("attention over an empty cache"));
    }
    if projection.head_dim() != cache.head_dim() {
        return Err(LokiError::shape("projection and cache head dimensions differ"));
    }
    let d = cache.reduced_dim();
    let q_hat = projection.project_leading(q, d)?;
    let mut weights = kernels::sliced_score_kernel(&q_hat, cache.keys(), d, tile)?;
    let scale = scale_for(cache.head_dim());
    weights.iter_mut().for_each(|s| *s *= scale);
    softmax_in_place(&mut weights)?;
    let output = kernels::weighted_sum_kernel(&weights, cache.values(), tile)?;
    Ok(AttentionOutput { output, weights })
}

/// Heavy-hitter eviction baseline.
///
/// After each step at most `budget` tokens remain: the `⌈budget/2⌉` most
/// recent unconditionally, the rest by accumulated attention mass (ties to
/// the earlier position). Evicted tokens are gone for good.
#[derive(Debug, Clone)]
pub struct H2oState {
    budget: usize,
    positions: Vec<usize>,
    cumulative: Vec<f64>,
    keys: Matrix,
    values: Matrix,
    next_position: usize,
}

impl H2oState {
    pub fn new(budget: usize, head_dim: usize) -> Result<Self> {
        if budget < 2 {
            return Err(LokiError::budget(format!("H2O budget must be at least 2, got {budget}")));
        }
        Ok(Self {
            budget,
            positions: Vec::new(),
            cumulative: Vec::new(),
            keys: Matrix::empty(head_dim),
            values: Matrix::empty(head_dim),
            next_position: 0,
        })
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    /// Original stream positions currently held, ascending.
    pub fn retained(&self) -> IndexList {
        IndexList::new(self.positions.clone()).expect("positions are strictly increasing")
    }

    pub fn cumulative_scores(&self) -> &[f64] {
        &self.cumulative
    }

    pub fn steps(&self) -> usize {
        self.next_position
    }

    /// Attends over retained tokens plus the new one, accumulates the
    /// weights, then evicts down to the budget.
    pub fn step(&mut self, q: &[f32], key: &[f32], value: &[f32], tile: &TileSpec) -> Result<AttentionOutput> {
        if key.len() != self.keys.cols() || value.len() != self.values.cols() {
            return Err(LokiError::shape("key/value length does not match head dimension"));
        }
        self.keys.push_row(key)?;
        self.values.push_row(value)?;
        self.positions.push(self.next_position);
        self.cumulative.push(0.0);
        self.next_position += 1;

        let out = vanilla_attention(q, &self.keys, &self.values, tile)?;
        for (c, &w) in self.cumulative.iter_mut().zip(&out.weights) {
            *c += w as f64;
        }
        self.evict()?;
        Ok(out)
    }

    fn evict(&mut self) -> Result<()> {
        let n = self.positions.len();
        if n <= self.budget {
            return Ok(());
        }
        let recent = self.budget.div_ceil(2);
        let heavy = self.budget - recent;
        let candidates = n - recent;
        let mut keep: Vec<usize> = if heavy > 0 {
            topk_indices(&self.cumulative[..candidates], heavy)?.into_vec()
        } else {
            Vec::new()
        };
        keep.extend(candidates..n);

        self.positions = keep.iter().map(|&i| self.positions[i]).collect();
        self.cumulative = keep.iter().map(|&i| self.cumulative[i]).collect();
        self.keys = self.keys.gather_rows(&keep)?;
        self.values = self.values.gather_rows(&keep)?;
        Ok(())
    }
}

/// Free-function form of [`H2oState::step`].
pub fn h2o_step(state: &mut H2oState, q: &[f32], key: &[f32], value: &[f32]) -> Result<AttentionOutput> {
    state.step(q, key, value, &TileSpec::default())
}

/// Appends a transformed key and value.
pub fn cache_append(cache: &mut KvCache, key_hat: &[f32], value: &[f32]) -> Result<()> {
    cache.append(key_hat, value)
}
