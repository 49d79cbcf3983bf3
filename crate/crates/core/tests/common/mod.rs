//! Independent f64 reference implementations for integration tests.
//!
//! Nothing here calls into the kernels or attention code under test.
#![allow(dead_code)]

use loki_core::data_io::{gen_gaussian, gen_synthetic_keys, SyntheticSpec};
use loki_core::tensor::Matrix;

pub fn to64(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect()
}

pub fn vec64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

pub fn naive_matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = b.first().map_or(0, |r| r.len());
    a.iter()
        .map(|row| {
            (0..n)
                .map(|j| row.iter().zip(b).map(|(x, brow)| x * brow[j]).sum())
                .collect()
        })
        .collect()
}

pub fn dot64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn softmax64(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Exact logits `q·kᵢ` in f64.
pub fn logits64(q: &[f32], keys: &Matrix) -> Vec<f64> {
    let q = vec64(q);
    keys.row_iter().map(|k| dot64(&q, &vec64(k))).collect()
}

/// `softmax(q·K_Sᵀ/√D)·V_S` over the listed rows, in f64.
pub fn attention64(q: &[f32], keys: &Matrix, values: &Matrix, rows: &[usize]) -> Vec<f64> {
    let d = keys.cols() as f64;
    let q = vec64(q);
    let logits: Vec<f64> = rows.iter().map(|&i| dot64(&q, &vec64(keys.row(i))) / d.sqrt()).collect();
    let w = softmax64(&logits);
    let mut out = vec![0.0; values.cols()];
    for (wi, &i) in w.iter().zip(rows) {
        for (o, &v) in out.iter_mut().zip(values.row(i)) {
            *o += wi * v as f64;
        }
    }
    out
}

/// Top-k by full sort: descending score, ascending index; returned ascending.
pub fn topk_by_sort(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut top = idx[..k].to_vec();
    top.sort_unstable();
    top
}

pub fn max_abs_diff(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - y).abs()).fold(0.0, f64::max)
}

/// `max|a − b| / max|b|` (or the absolute error when `b` is all zeros).
pub fn rel_err(a: &[f32], b: &[f64]) -> f64 {
    let scale = b.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let err = max_abs_diff(a, b);
    if scale > 0.0 {
        err / scale
    } else {
        err
    }
}

pub fn planted(seq_len: usize, head_dim: usize, rank: usize, noise: f64, seed: u64) -> Matrix {
    gen_synthetic_keys(&SyntheticSpec {
        seq_len,
        head_dim,
        rank,
        noise_sigma: noise,
        seed,
    })
    .unwrap()
}

pub fn gaussian(rows: usize, cols: usize, std: f64, seed: u64) -> Matrix {
    gen_gaussian(rows, cols, std, seed)
}
