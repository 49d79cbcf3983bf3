//! Rotary position embeddings with half-split pairing: element `i` is rotated
//! together with element `i + D/2`.

use crate::tensor::Matrix;
use crate::{LokiError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RopeParams {
    head_dim: usize,
    base: f64,
}

impl RopeParams {
    pub const DEFAULT_BASE: f64 = 10_000.0;

    pub fn new(head_dim: usize, base: f64) -> Result<Self> {
        if head_dim == 0 || !head_dim.is_multiple_of(2) {
            return Err(LokiError::shape(format!(
                "rotary head dimension must be even and positive, got {head_dim}"
            )));
        }
        if !(base > 1.0) || !base.is_finite() {
            return Err(LokiError::domain(format!("rotary base must be > 1, got {base}")));
        }
        Ok(Self { head_dim, base })
    }

    pub fn with_default_base(head_dim: usize) -> Result<Self> {
        Self::new(head_dim, Self::DEFAULT_BASE)
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    /// Rotation angle of pair `i` at `position`: `position · base^(−2i/D)`.
    pub fn angle(&self, pair: usize, position: u64) -> f64 {
        let exponent = -2.0 * pair as f64 / self.head_dim as f64;
        position as f64 * self.base.powf(exponent)
    }
}

/// Rotates `v` as the embedding of a token at `position`.
pub fn rope_apply(v: &[f32], position: u64, params: &RopeParams) -> Result<Vec<f32>> {
    let mut out = v.to_vec();
    rope_apply_in_place(&mut out, position, params)?;
    Ok(out)
}

pub fn rope_apply_in_place(v: &mut [f32], position: u64, params: &RopeParams) -> Result<()> {
    if v.len() != params.head_dim {
        return Err(LokiError::shape(format!(
            "vector of length {} for rotary head dimension {}",
            v.len(),
            params.head_dim
        )));
    }
    let half = params.head_dim / 2;
    for i in 0..half {
        let (sin, cos) = params.angle(i, position).sin_cos();
        let a = v[i] as f64;
        let b = v[i + half] as f64;
        v[i] = (a * cos - b * sin) as f32;
        v[i + half] = (a * sin + b * cos) as f32;
    }
    Ok(())
}

/// Applies the embedding to each row, row `r` at position `first_position + r`.
pub fn rope_apply_rows(m: &Matrix, first_position: u64, params: &RopeParams) -> Result<Matrix> {
    let mut out = m.clone();
    for r in 0..out.rows() {
        rope_apply_in_place(out.row_mut(r), first_position + r as u64, params)?;
    }
    Ok(out)
}
