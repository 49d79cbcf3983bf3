//! Minimal dense linear algebra over row-major matrices.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, Sub};

use crate::kernels::TileSpec;
use crate::parallel;
use crate::{LokiError, Result};

/// Floating-point element type. `f32` on production paths, `f64` for
/// calibration and reference checks.
pub trait Scalar:
    Copy
    + Debug
    + Default
    + PartialOrd
    + Send
    + Sync
    + Add<Output = Self>
    + AddAssign
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn is_finite(self) -> bool;
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

pub type Matrix64 = Matrix<f64>;

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LokiError::shape(format!(
                "data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::ZERO; rows * cols],
        }
    }

    /// An empty matrix with `cols` columns, ready for [`Matrix::push_row`].
    pub fn empty(cols: usize) -> Self {
        Self::zeros(0, cols)
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::ONE;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(LokiError::shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// A 1×n matrix.
    pub fn row_vector(v: &[T]) -> Self {
        Self {
            rows: 1,
            cols: v.len(),
            data: v.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[T]> {
        // chunks_exact panics on zero; a zero-column matrix has no data anyway
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn push_row(&mut self, row: &[T]) -> Result<()> {
        if row.len() != self.cols {
            return Err(LokiError::shape(format!(
                "row of length {} pushed onto matrix with {} columns",
                row.len(),
                self.cols
            )));
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Copies of columns `start..end`.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.cols {
            return Err(LokiError::shape(format!(
                "column range {start}..{end} invalid for {} columns",
                self.cols
            )));
        }
        let width = end - start;
        let mut data = Vec::with_capacity(self.rows * width);
        for r in self.row_iter() {
            data.extend_from_slice(&r[start..end]);
        }
        Ok(Self {
            rows: self.rows,
            cols: width,
            data,
        })
    }

    /// Dense copy of rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.rows {
            return Err(LokiError::shape(format!(
                "row range {start}..{end} invalid for {} rows",
                self.rows
            )));
        }
        Ok(Self {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        })
    }

    /// Dense copy of the listed rows, in list order.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(LokiError::Index {
                    index: i,
                    len: self.rows,
                });
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        })
    }

    /// Position of the first non-finite entry, if any.
    pub fn find_non_finite(&self) -> Option<(usize, usize)> {
        let cols = self.cols.max(1);
        self.data
            .iter()
            .position(|v| !v.is_finite())
            .map(|p| (p / cols, p % cols))
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn to_f64(&self) -> Matrix64 {
        self.map(Scalar::to_f64)
    }

    pub fn to_f32(&self) -> Matrix<f32> {
        self.map(|v| v.to_f64() as f32)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| {
                let x = v.to_f64();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .map(|v| v.to_f64().abs())
            .fold(0.0, f64::max)
    }
}

/// `a × b` with the default tiling.
pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    matmul_with(a, b, &TileSpec::default())
}

/// `a × b` over 2D output tiles.
///
/// Each output element is owned by one tile and reduced sequentially over the
/// inner dimension, `t = 0..k`, so results do not depend on thread count.
pub fn matmul_with<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, tile: &TileSpec) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(LokiError::shape(format!(
            "matmul inner dimensions differ: {}x{} × {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(m, n);
    if m == 0 || n == 0 {
        return Ok(out);
    }
    let tm = tile.tile_m.max(1);
    let tn = tile.tile_n.max(1);
    let tiles_m = m.div_ceil(tm);
    let tiles_n = n.div_ceil(tn);

    let tiles = parallel::map_range(tiles_m * tiles_n, tile.parallel, |t| {
        let (bi, bj) = (t / tiles_n, t % tiles_n);
        let r0 = bi * tm;
        let r1 = (r0 + tm).min(m);
        let c0 = bj * tn;
        let c1 = (c0 + tn).min(n);
        let w = c1 - c0;
        let mut buf = vec![T::ZERO; (r1 - r0) * w];
        for i in r0..r1 {
            let acc = &mut buf[(i - r0) * w..(i - r0 + 1) * w];
            let a_row = a.row(i);
            for (t, &av) in a_row.iter().enumerate().take(k) {
                let b_row = &b.row(t)[c0..c1];
                for (c, &bv) in acc.iter_mut().zip(b_row) {
                    *c += av * bv;
                }
            }
        }
        buf
    });

    for (t, buf) in tiles.into_iter().enumerate() {
        let (bi, bj) = (t / tiles_n, t % tiles_n);
        let r0 = bi * tm;
        let c0 = bj * tn;
        let w = (c0 + tn).min(n) - c0;
        for (ri, chunk) in buf.chunks_exact(w).enumerate() {
            out.row_mut(r0 + ri)[c0..c0 + w].copy_from_slice(chunk);
        }
    }
    Ok(out)
}

/// `v × m` for a row vector `v`.
pub fn vecmat<T: Scalar>(v: &[T], m: &Matrix<T>) -> Result<Vec<T>> {
    if v.len() != m.rows {
        return Err(LokiError::shape(format!(
            "vector of length {} times {}x{} matrix",
            v.len(),
            m.rows,
            m.cols
        )));
    }
    let mut out = vec![T::ZERO; m.cols];
    for (t, &x) in v.iter().enumerate() {
        for (o, &y) in out.iter_mut().zip(m.row(t)) {
            *o += x * y;
        }
    }
    Ok(out)
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax_row<T: Scalar>(scores: &[T]) -> Result<Vec<T>> {
    let mut out = scores.to_vec();
    softmax_in_place(&mut out)?;
    Ok(out)
}

pub fn softmax_in_place<T: Scalar>(scores: &mut [T]) -> Result<()> {
    let Some(&first) = scores.first() else {
        return Err(LokiError::shape("softmax of an empty vector"));
    };
    let max = scores
        .iter()
        .fold(first, |m, &v| if v > m { v } else { m });
    let mut sum = T::ZERO;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s = *s / sum;
    }
    Ok(())
}

/// Canonical (strictly ascending, duplicate-free) list of row positions.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct IndexList(Vec<usize>);

impl IndexList {
    /// Sorts and validates. Duplicates are rejected.
    pub fn new(mut indices: Vec<usize>) -> Result<Self> {
        indices.sort_unstable();
        if let Some(w) = indices.windows(2).find(|w| w[0] == w[1]) {
            return Err(LokiError::domain(format!("duplicate index {}", w[0])));
        }
        Ok(Self(indices))
    }

    /// `0..n`.
    pub fn full(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.0.binary_search(&i).is_ok()
    }

    /// Checks every index is `< len`.
    pub fn check_bounds(&self, len: usize) -> Result<()> {
        match self.0.last() {
            Some(&i) if i >= len => Err(LokiError::Index { index: i, len }),
            _ => Ok(()),
        }
    }

    pub fn into_vec(self) -> Vec<usize> {
        self.0
    }
}

/// Indices of the `k` largest scores, ascending. Ties go to the lower index.
pub fn topk_indices<T: Scalar>(scores: &[T], k: usize) -> Result<IndexList> {
    let n = scores.len();
    if k == 0 {
        return Err(LokiError::budget("top-k with k = 0"));
    }
    if k > n {
        return Err(LokiError::budget(format!("top-k with k = {k} > {n} scores")));
    }
    if k == n {
        return Ok(IndexList::full(n));
    }
    // NaN ranks below everything and -0.0 ties with +0.0, so total_cmp
    // agrees with the numeric order on the keys
    let key: Vec<f64> = scores
        .iter()
        .map(|s| {
            let v = s.to_f64();
            if v.is_nan() {
                f64::NEG_INFINITY
            } else {
                v + 0.0
            }
        })
        .collect();
    let mut scratch = key.clone();
    let (_, &mut threshold, _) = scratch.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
    // everything above the k-th value is in; ties at it go to the lowest indices
    let above = key.iter().filter(|&&v| v > threshold).count();
    let mut ties = k - above;
    let mut idx = Vec::with_capacity(k);
    for (i, &v) in key.iter().enumerate() {
        if v > threshold {
            idx.push(i);
        } else if v == threshold && ties > 0 {
            idx.push(i);
            ties -= 1;
        }
    }
    debug_assert_eq!(idx.len(), k);
    Ok(IndexList(idx))
}
