//! Selection agreement, score error and the analytic cost model.

use crate::attention::{resolve_budget, KvCache};
use crate::calibration::ProjectionSet;
use crate::kernels::{self, TileSpec};
use crate::parallel;
use crate::tensor::{topk_indices, IndexList, Matrix};
use crate::{LokiError, Result};

/// `|a ∩ b| / |a ∪ b|`; two empty sets agree perfectly.
pub fn jaccard_topk(a: &IndexList, b: &IndexList) -> f64 {
    let (a, b) = (a.as_slice(), b.as_slice());
    let (mut i, mut j, mut shared) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                shared += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - shared;
    if union == 0 {
        1.0
    } else {
        shared as f64 / union as f64
    }
}

/// `1 / (d_f/2 + k_f)`, the large-`S` limit of [`exact_speedup`].
pub fn theoretical_speedup(dim_fraction: f64, key_fraction: f64) -> Result<f64> {
    for (name, f) in [("d_f", dim_fraction), ("k_f", key_fraction)] {
        if !(f > 0.0 && f <= 1.0) {
            return Err(LokiError::domain(format!("{name} = {f} outside (0, 1]")));
        }
    }
    Ok(1.0 / (dim_fraction / 2.0 + key_fraction))
}

/// `2DS / (dS + 2Dk + 2D²)`: vanilla cost over Loki cost, ignoring top-k.
pub fn exact_speedup(head_dim: usize, seq_len: usize, d: usize, k: usize) -> Result<f64> {
    if head_dim == 0 || seq_len == 0 || d == 0 || k == 0 {
        return Err(LokiError::domain("speedup inputs must be positive"));
    }
    if d > head_dim || k > seq_len {
        return Err(LokiError::domain(format!(
            "d = {d} must be ≤ D = {head_dim} and k = {k} ≤ S = {seq_len}"
        )));
    }
    let (dd, s, d, k) = (head_dim as f64, seq_len as f64, d as f64, k as f64);
    Ok(2.0 * dd * s / (d * s + 2.0 * dd * k + 2.0 * dd * dd))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreError {
    pub max_abs: f64,
    /// `‖exact − approx‖₂ / ‖exact‖₂`; 0 when both are zero, ∞ when only
    /// `exact` is.
    pub relative_l2: f64,
}

pub fn score_error(exact: &[f32], approx: &[f32]) -> Result<ScoreError> {
    if exact.len() != approx.len() {
        return Err(LokiError::shape(format!(
            "score vectors of length {} and {}",
            exact.len(),
            approx.len()
        )));
    }
    let mut max_abs = 0.0f64;
    let (mut diff2, mut norm2) = (0.0f64, 0.0f64);
    for (&e, &a) in exact.iter().zip(approx) {
        let d = e as f64 - a as f64;
        max_abs = max_abs.max(d.abs());
        diff2 += d * d;
        norm2 += (e as f64) * (e as f64);
    }
    let relative_l2 = if norm2 > 0.0 {
        (diff2 / norm2).sqrt()
    } else if diff2 == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(ScoreError { max_abs, relative_l2 })
}

/// Agreement for one `(k_f, d_f)` cell.
#[derive(Debug, Clone, PartialEq)]
pub struct AgreementCell {
    pub key_fraction: f64,
    pub dim_fraction: f64,
    pub k: usize,
    pub d: usize,
    /// One Jaccard value per query.
    pub per_query: Vec<f64>,
}

impl AgreementCell {
    pub fn mean(&self) -> f64 {
        self.per_query.iter().sum::<f64>() / self.per_query.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.per_query.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgreementStats {
    /// Row-major over the `k_f` grid, then the `d_f` grid.
    pub cells: Vec<AgreementCell>,
}

impl AgreementStats {
    pub fn cell(&self, key_fraction: f64, dim_fraction: f64) -> Option<&AgreementCell> {
        self.cells
            .iter()
            .find(|c| c.key_fraction == key_fraction && c.dim_fraction == dim_fraction)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("k_f\td_f\tmean_jaccard\tmin_jaccard\n");
        for c in &self.cells {
            s.push_str(&format!(
                "{}\t{}\t{:.6}\t{:.6}\n",
                c.key_fraction,
                c.dim_fraction,
                c.mean(),
                c.min()
            ));
        }
        s
    }
}

/// Jaccard agreement between Loki's selection and the exact top-k selection
/// for every query and every `(k_f, d_f)` pair.
///
/// Both rankings are computed from the transformed cache `K̂ = K·P`: the
/// reference uses all `D` coordinates (equal to `q·Kᵀ` for orthogonal `P`),
/// Loki uses the leading `d`. At `d = D` the two are therefore bit-identical.
pub fn agreement_sweep(
    keys: &Matrix,
    queries: &Matrix,
    projection: &ProjectionSet,
    key_fractions: &[f64],
    dim_fractions: &[f64],
    tile: &TileSpec,
) -> Result<AgreementStats> {
    if queries.rows() == 0 {
        return Err(LokiError::domain("agreement sweep needs at least one query"));
    }
    if key_fractions.is_empty() || dim_fractions.is_empty() {
        return Err(LokiError::domain("agreement sweep needs nonempty grids"));
    }
    if keys.cols() != projection.head_dim() || queries.cols() != keys.cols() {
        return Err(LokiError::shape("keys, queries and projection disagree on head dimension"));
    }
    let (s, dim) = keys.shape();
    let ks = key_fractions
        .iter()
        .map(|&f| resolve_budget(f, s))
        .collect::<Result<Vec<_>>>()?;
    let ds = dim_fractions
        .iter()
        .map(|&f| resolve_budget(f, dim))
        .collect::<Result<Vec<_>>>()?;
    let cache = KvCache::from_parts(projection.project_rows(keys)?, Matrix::zeros(s, dim))?;
    // cells run in parallel below; keep each kernel call sequential
    let inner = TileSpec {
        parallel: false,
        ..*tile
    };

    let nq = queries.rows();
    let per_query = parallel::map_range(nq, tile.parallel, |qi| -> Result<Vec<f64>> {
        let q_hat = projection.project(queries.row(qi))?;
        let exact = kernels::sliced_score_kernel(&q_hat, cache.keys(), dim, &inner)?;
        let mut row = Vec::with_capacity(ks.len() * ds.len());
        for &k in &ks {
            let reference = topk_indices(&exact, k)?;
            for &d in &ds {
                let approx = if d == dim {
                    exact.clone()
                } else {
                    kernels::sliced_score_kernel(&q_hat, cache.keys(), d, &inner)?
                };
                row.push(jaccard_topk(&topk_indices(&approx, k)?, &reference));
            }
        }
        Ok(row)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let mut cells = Vec::with_capacity(ks.len() * ds.len());
    for (ki, (&kf, &k)) in key_fractions.iter().zip(&ks).enumerate() {
        for (di, (&df, &d)) in dim_fractions.iter().zip(&ds).enumerate() {
            let idx = ki * ds.len() + di;
            cells.push(AgreementCell {
                key_fraction: kf,
                dim_fraction: df,
                k,
                d,
                per_query: per_query.iter().map(|r| r[idx]).collect(),
            });
        }
    }
    Ok(AgreementStats { cells })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::RotaryStage;

    fn il(v: &[usize]) -> IndexList {
        IndexList::new(v.to_vec()).unwrap()
    }

    #[test]
    fn jaccard_examples() {
        assert_eq!(jaccard_topk(&il(&[1, 4, 9]), &il(&[1, 4, 9])), 1.0);
        assert_eq!(jaccard_topk(&il(&[1, 2]), &il(&[3, 4])), 0.0);
        assert_eq!(jaccard_topk(&il(&[1, 2, 3]), &il(&[2, 3, 4])), 0.5);
        assert_eq!(jaccard_topk(&il(&[]), &il(&[])), 1.0);
        assert_eq!(jaccard_topk(&il(&[]), &il(&[0])), 0.0);
    }

    #[test]
    fn speedup_examples() {
        assert!((theoretical_speedup(0.25, 0.25).unwrap() - 8.0 / 3.0).abs() < 1e-12);
        assert!((theoretical_speedup(1.0, 1.0).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        let e = exact_speedup(128, 4096, 32, 1024).unwrap();
        assert!((e - 1_048_576.0 / 425_984.0).abs() < 1e-12);
        assert!(theoretical_speedup(0.0, 0.5).is_err());
        assert!(exact_speedup(128, 4096, 129, 1).is_err());
        assert!(exact_speedup(0, 4096, 1, 1).is_err());
    }

    #[test]
    fn score_error_examples() {
        let e = score_error(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!((e.max_abs, e.relative_l2), (0.0, 0.0));
        let e = score_error(&[1.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!((e.max_abs, e.relative_l2), (1.0, 1.0));
        assert!(score_error(&[1.0], &[1.0, 2.0]).is_err());
        assert_eq!(score_error(&[0.0], &[1.0]).unwrap().relative_l2, f64::INFINITY);
    }

    #[test]
    fn sweep_edges_are_perfect() {
        let keys = Matrix::from_fn(40, 8, |i, j| (((i * 13 + j * 7) % 23) as f32 - 11.0) / 4.0);
        let queries = Matrix::from_fn(5, 8, |i, j| (((i * 5 + j * 3) % 7) as f32 - 3.0) / 2.0);
        let p = ProjectionSet::identity(8, 0, 0, RotaryStage::Post);
        let stats = agreement_sweep(&keys, &queries, &p, &[0.25, 1.0], &[0.25, 1.0], &TileSpec::default()).unwrap();
        assert_eq!(stats.cells.len(), 4);
        assert_eq!(stats.cell(0.25, 1.0).unwrap().mean(), 1.0);
        assert_eq!(stats.cell(1.0, 0.25).unwrap().mean(), 1.0);
        let tsv = stats.to_tsv();
        assert!(tsv.starts_with("k_f\td_f\tmean_jaccard\tmin_jaccard\n"));
        assert_eq!(tsv.lines().count(), 5);
    }

    #[test]
    fn sweep_rejects_empty_inputs() {
        let keys = Matrix::<f32>::zeros(4, 2);
        let p = ProjectionSet::identity(2, 0, 0, RotaryStage::Post);
        assert!(agreement_sweep(&keys, &Matrix::empty(2), &p, &[0.5], &[0.5], &TileSpec::default()).is_err());
        let q = Matrix::<f32>::zeros(1, 2);
        assert!(agreement_sweep(&keys, &q, &p, &[], &[0.5], &TileSpec::default()).is_err());
        assert!(matches!(
            agreement_sweep(&keys, &q, &p, &[1.5], &[0.5], &TileSpec::default()),
            Err(LokiError::Budget(_))
        ));
    }
}
