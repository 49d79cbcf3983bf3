//! Offline PCA of attention keys.
//!
//! Covariance is computed on mean-centered keys, but the projection applied at
//! inference is the bare rotation `x ↦ x·P`. Subtracting the mean there would
//! break the identity `q·Kᵀ = (q·P)(K·P)ᵀ`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::parallel;
use crate::tensor::{matmul, vecmat, Matrix, Matrix64, Scalar};
use crate::{LokiError, Result};

/// Whether keys were captured before or after the rotary embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RotaryStage {
    Pre,
    Post,
}

impl RotaryStage {
    pub fn code(self) -> u8 {
        match self {
            RotaryStage::Pre => 0,
            RotaryStage::Post => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(RotaryStage::Pre),
            1 => Some(RotaryStage::Post),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RotaryStage::Pre => "pre",
            RotaryStage::Post => "post",
        }
    }
}

impl fmt::Display for RotaryStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RotaryStage {
    type Err = LokiError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre" => Ok(RotaryStage::Pre),
            "post" => Ok(RotaryStage::Post),
            other => Err(LokiError::domain(format!("unknown rotary stage `{other}`"))),
        }
    }
}

/// Orthogonality tolerance on ‖PᵀP − I‖_F for freshly built projections.
pub const ORTHOGONALITY_TOL: f64 = 1e-4;
/// Looser tolerance applied when re-validating a projection read from disk.
pub const STORED_ORTHOGONALITY_TOL: f64 = 1e-3;

const JACOBI_MAX_SWEEPS: usize = 100;
const JACOBI_OFF_TOL: f64 = 1e-10;
const SYMMETRY_TOL: f64 = 1e-5;
const NORMALIZATION_TOL: f64 = 1e-6;
// slack for cumulative sums that land a few ulps under the target
const CUMSUM_SLACK: f64 = 1e-7;

/// Per-(layer, head) principal basis of the keys.
///
/// Columns of `projection` are principal directions in descending eigenvalue
/// order; `eigenvalues` are normalized to sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet {
    pub layer: u32,
    pub head: u32,
    pub stage: RotaryStage,
    projection: Matrix,
    eigenvalues: Vec<f32>,
}

impl ProjectionSet {
    /// Validates shape and orthogonality (within [`ORTHOGONALITY_TOL`]).
    pub fn new(
        layer: u32,
        head: u32,
        stage: RotaryStage,
        projection: Matrix,
        eigenvalues: Vec<f32>,
    ) -> Result<Self> {
        Self::with_tolerance(layer, head, stage, projection, eigenvalues, ORTHOGONALITY_TOL)
    }

    pub(crate) fn with_tolerance(
        layer: u32,
        head: u32,
        stage: RotaryStage,
        projection: Matrix,
        eigenvalues: Vec<f32>,
        tol: f64,
    ) -> Result<Self> {
        let (r, c) = projection.shape();
        if r != c || r == 0 {
            return Err(LokiError::shape(format!("projection must be square and nonempty, got {r}x{c}")));
        }
        if eigenvalues.len() != r {
            return Err(LokiError::shape(format!(
                "{} eigenvalues for a {r}x{r} projection",
                eigenvalues.len()
            )));
        }
        if eigenvalues.iter().any(|l| !l.is_finite()) || eigenvalues.windows(2).any(|w| w[1] > w[0]) {
            return Err(LokiError::Integrity("eigenvalues are not finite and descending".into()));
        }
        let err = orthogonality_error(&projection);
        if !(err <= tol) {
            return Err(LokiError::Integrity(format!(
                "projection is not orthogonal: ‖PᵀP − I‖_F = {err:.3e} > {tol:.0e}"
            )));
        }
        Ok(Self {
            layer,
            head,
            stage,
            projection,
            eigenvalues,
        })
    }

    /// `P = I` with a flat spectrum.
    pub fn identity(dim: usize, layer: u32, head: u32, stage: RotaryStage) -> Self {
        Self {
            layer,
            head,
            stage,
            projection: Matrix::identity(dim),
            eigenvalues: vec![1.0 / dim as f32; dim],
        }
    }

    pub fn head_dim(&self) -> usize {
        self.projection.rows()
    }

    pub fn projection(&self) -> &Matrix {
        &self.projection
    }

    pub fn eigenvalues(&self) -> &[f32] {
        &self.eigenvalues
    }

    /// `x·P`.
    pub fn project(&self, x: &[f32]) -> Result<Vec<f32>> {
        vecmat(x, &self.projection)
    }

    /// `x·P[:, :d]`.
    pub fn project_leading(&self, x: &[f32], d: usize) -> Result<Vec<f32>> {
        let dim = self.head_dim();
        if d == 0 || d > dim {
            return Err(LokiError::budget(format!("reduced dimension {d} outside 1..={dim}")));
        }
        if x.len() != dim {
            return Err(LokiError::shape(format!("vector of length {} for head dimension {dim}", x.len())));
        }
        let mut out = vec![0.0f32; d];
        for (t, &xv) in x.iter().enumerate() {
            for (o, &p) in out.iter_mut().zip(&self.projection.row(t)[..d]) {
                *o += xv * p;
            }
        }
        Ok(out)
    }

    /// `K·P` for a whole key matrix.
    pub fn project_rows(&self, keys: &Matrix) -> Result<Matrix> {
        matmul(keys, &self.projection)
    }

    pub fn orthogonality_error(&self) -> f64 {
        orthogonality_error(&self.projection)
    }
}

/// ‖PᵀP − I‖_F, accumulated in f64.
pub fn orthogonality_error<T: Scalar>(p: &Matrix<T>) -> f64 {
    let p = p.to_f64();
    let n = p.cols();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for r in 0..p.rows() {
                s += p.get(r, i) * p.get(r, j);
            }
            let target = if i == j { 1.0 } else { 0.0 };
            acc += (s - target).powi(2);
        }
    }
    acc.sqrt()
}

/// Sample covariance `(1/(S−1))·XᵀX`, with `X = K − μ` when `center` is set.
pub fn compute_covariance(keys: &Matrix, center: bool) -> Result<Matrix64> {
    let s = keys.rows();
    if s < 2 {
        return Err(LokiError::InsufficientData(format!(
            "covariance needs at least 2 rows, got {s}"
        )));
    }
    let mut x = keys.to_f64();
    if center {
        let d = x.cols();
        let mut mean = vec![0.0f64; d];
        for r in x.row_iter() {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= s as f64);
        for i in 0..s {
            for (v, m) in x.row_mut(i).iter_mut().zip(&mean) {
                *v -= m;
            }
        }
    }
    let mut c = matmul(&x.transpose(), &x)?;
    let scale = 1.0 / (s - 1) as f64;
    let d = c.cols();
    for i in 0..d {
        for j in 0..d {
            c.set(i, j, c.get(i, j) * scale);
        }
    }
    // exact symmetry regardless of tile order
    for i in 0..d {
        for j in i + 1..d {
            let v = 0.5 * (c.get(i, j) + c.get(j, i));
            c.set(i, j, v);
            c.set(j, i, v);
        }
    }
    Ok(c)
}

/// Eigenpairs of a symmetric matrix, eigenvalues descending, eigenvectors in
/// the matching columns of `vectors`.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    pub vectors: Matrix64,
    pub sweeps: usize,
}

/// Cyclic Jacobi eigensolver.
///
/// Sweeps until the off-diagonal Frobenius norm drops below
/// `1e-10 · max(1, ‖C‖_F)` or 100 sweeps have run. Equal eigenvalues keep
/// their original diagonal order; each eigenvector is signed so its
/// largest-magnitude component is positive.
pub fn eigh_symmetric(c: &Matrix64) -> Result<SymmetricEigen> {
    let n = c.rows();
    if n != c.cols() {
        return Err(LokiError::shape(format!("eigendecomposition of a {}x{} matrix", c.rows(), c.cols())));
    }
    let scale = c.max_abs().max(1.0);
    for i in 0..n {
        for j in i + 1..n {
            if (c.get(i, j) - c.get(j, i)).abs() > SYMMETRY_TOL * scale {
                return Err(LokiError::domain(format!(
                    "matrix is not symmetric at ({i}, {j}): {} vs {}",
                    c.get(i, j),
                    c.get(j, i)
                )));
            }
        }
    }
    if let Some((i, j)) = c.find_non_finite() {
        return Err(LokiError::domain(format!("non-finite entry at ({i}, {j})")));
    }

    let mut a = c.clone();
    let mut v = Matrix64::identity(n);
    let threshold = JACOBI_OFF_TOL * c.frobenius_norm().max(1.0);
    let mut sweeps = 0;
    while sweeps < JACOBI_MAX_SWEEPS {
        if off_diagonal_norm(&a) < threshold {
            break;
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let cs = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * cs;
                rotate(&mut a, &mut v, p, q, cs, sn);
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    // stable sort keeps the original index order among equal eigenvalues
    order.sort_by(|&x, &y| a.get(y, y).partial_cmp(&a.get(x, x)).unwrap_or(std::cmp::Ordering::Equal));
    let values: Vec<f64> = order.iter().map(|&i| a.get(i, i)).collect();
    let mut vectors = Matrix64::zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        let (mut best, mut best_abs) = (0.0f64, -1.0f64);
        for r in 0..n {
            let x = v.get(r, src);
            if x.abs() > best_abs + 1e-12 {
                best = x;
                best_abs = x.abs();
            }
        }
        let sign = if best < 0.0 { -1.0 } else { 1.0 };
        for r in 0..n {
            vectors.set(r, col, sign * v.get(r, src));
        }
    }
    Ok(SymmetricEigen {
        values,
        vectors,
        sweeps,
    })
}

fn off_diagonal_norm(a: &Matrix64) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a.get(i, j).powi(2);
            }
        }
    }
    s.sqrt()
}

/// Applies the Jacobi rotation `J(p, q)` as `A ← JᵀAJ`, `V ← VJ`.
fn rotate(a: &mut Matrix64, v: &mut Matrix64, p: usize, q: usize, c: f64, s: f64) {
    let n = a.rows();
    for k in 0..n {
        let akp = a.get(k, p);
        let akq = a.get(k, q);
        a.set(k, p, c * akp - s * akq);
        a.set(k, q, s * akp + c * akq);
    }
    for k in 0..n {
        let apk = a.get(p, k);
        let aqk = a.get(q, k);
        a.set(p, k, c * apk - s * aqk);
        a.set(q, k, s * apk + c * aqk);
    }
    for k in 0..n {
        let vkp = v.get(k, p);
        let vkq = v.get(k, q);
        v.set(k, p, c * vkp - s * vkq);
        v.set(k, q, s * vkp + c * vkq);
    }
}

/// Normalized principal spectrum (f64) and basis of a key matrix.
#[derive(Debug, Clone)]
pub struct PrincipalBasis {
    pub eigenvalues: Vec<f64>,
    pub vectors: Matrix64,
}

/// Centered PCA of `keys`: eigenvalues clamped at zero and normalized to sum 1.
pub fn principal_basis(keys: &Matrix) -> Result<PrincipalBasis> {
    if let Some((r, c)) = keys.find_non_finite() {
        return Err(LokiError::domain(format!("non-finite key at row {r}, col {c}")));
    }
    if keys.rows() < keys.cols() {
        log::warn!(
            "calibrating on {} keys for head dimension {}; the basis will be rank deficient",
            keys.rows(),
            keys.cols()
        );
    }
    let cov = compute_covariance(keys, true)?;
    let eig = eigh_symmetric(&cov)?;
    let clamped: Vec<f64> = eig.values.iter().map(|&l| l.max(0.0)).collect();
    let total: f64 = clamped.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(LokiError::DegenerateCalibration(
            "key covariance has no variance".to_string(),
        ));
    }
    Ok(PrincipalBasis {
        eigenvalues: clamped.iter().map(|l| l / total).collect(),
        vectors: eig.vectors,
    })
}

/// Calibrates a projection from one (layer, head)'s keys.
pub fn build_projection(keys: &Matrix, layer: u32, head: u32, stage: RotaryStage) -> Result<ProjectionSet> {
    let basis = principal_basis(keys).map_err(|e| e.at_head(layer, head))?;
    let eigenvalues = basis.eigenvalues.iter().map(|&l| l as f32).collect();
    ProjectionSet::new(layer, head, stage, basis.vectors.to_f32(), eigenvalues).map_err(|e| e.at_head(layer, head))
}

/// Smallest `d` whose leading `d` normalized eigenvalues sum to at least `v/100`.
pub fn rank_at_v<T: Scalar>(eigenvalues: &[T], v: f64) -> Result<usize> {
    if !(v > 0.0 && v <= 100.0) {
        return Err(LokiError::domain(format!("variance percentage {v} outside (0, 100]")));
    }
    if eigenvalues.is_empty() {
        return Err(LokiError::domain("empty spectrum"));
    }
    let vals: Vec<f64> = eigenvalues.iter().map(|l| l.to_f64()).collect();
    if vals.iter().any(|l| !(*l >= 0.0)) {
        return Err(LokiError::domain("spectrum has negative or non-finite values"));
    }
    if vals.windows(2).any(|w| w[1] > w[0]) {
        return Err(LokiError::domain("spectrum is not in descending order"));
    }
    let total: f64 = vals.iter().sum();
    if (total - 1.0).abs() > NORMALIZATION_TOL {
        return Err(LokiError::domain(format!("spectrum sums to {total}, expected 1")));
    }
    let target = v / 100.0 - CUMSUM_SLACK;
    let mut cum = 0.0;
    for (i, l) in vals.iter().enumerate() {
        cum += l;
        if cum >= target {
            return Ok(i + 1);
        }
    }
    Ok(vals.len())
}

/// Keys of one (layer, head) to analyze.
#[derive(Debug, Clone)]
pub struct CalibrationInput {
    pub layer: u32,
    pub head: u32,
    pub stage: RotaryStage,
    pub keys: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadRanks {
    pub layer: u32,
    pub head: u32,
    pub stage: RotaryStage,
    pub head_dim: usize,
    /// Normalized descending spectrum.
    pub eigenvalues: Vec<f64>,
    /// `Rank@v` for each entry of the report's `v` list.
    pub ranks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerAverage {
    pub layer: u32,
    pub stage: RotaryStage,
    pub v: f64,
    pub mean_rank: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelAverage {
    pub stage: RotaryStage,
    pub v: f64,
    pub mean_rank: f64,
}

/// `Rank@v` per head, per layer (head mean) and per model (mean of heads).
#[derive(Debug, Clone, PartialEq)]
pub struct RankReport {
    pub v_list: Vec<f64>,
    pub heads: Vec<HeadRanks>,
}

impl RankReport {
    pub fn layer_averages(&self) -> Vec<LayerAverage> {
        let mut groups: BTreeMap<(RotaryStage, u32), Vec<&HeadRanks>> = BTreeMap::new();
        for h in &self.heads {
            groups.entry((h.stage, h.layer)).or_default().push(h);
        }
        let mut out = Vec::new();
        for ((stage, layer), heads) in groups {
            for (vi, &v) in self.v_list.iter().enumerate() {
                let mean = heads.iter().map(|h| h.ranks[vi] as f64).sum::<f64>() / heads.len() as f64;
                out.push(LayerAverage {
                    layer,
                    stage,
                    v,
                    mean_rank: mean,
                });
            }
        }
        out
    }

    pub fn model_averages(&self) -> Vec<ModelAverage> {
        let mut groups: BTreeMap<RotaryStage, Vec<&HeadRanks>> = BTreeMap::new();
        for h in &self.heads {
            groups.entry(h.stage).or_default().push(h);
        }
        let mut out = Vec::new();
        for (stage, heads) in groups {
            for (vi, &v) in self.v_list.iter().enumerate() {
                let mean = heads.iter().map(|h| h.ranks[vi] as f64).sum::<f64>() / heads.len() as f64;
                out.push(ModelAverage { stage, v, mean_rank: mean });
            }
        }
        out
    }

    /// Tab-separated report. Aggregate rows are prefixed `#layer-avg` and
    /// `#model-avg`, with `*` in the columns they average over.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("layer\thead\tstage\tv\trank\n");
        for h in &self.heads {
            for (v, r) in self.v_list.iter().zip(&h.ranks) {
                s.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", h.layer, h.head, h.stage, v, r));
            }
        }
        for a in self.layer_averages() {
            s.push_str(&format!(
                "#layer-avg\t{}\t*\t{}\t{}\t{:.4}\n",
                a.layer, a.stage, a.v, a.mean_rank
            ));
        }
        for a in self.model_averages() {
            s.push_str(&format!("#model-avg\t*\t*\t{}\t{}\t{:.4}\n", a.stage, a.v, a.mean_rank));
        }
        s
    }
}

/// Analyzes every input; heads are independent and run in parallel.
pub fn rank_report(inputs: &[CalibrationInput], v_list: &[f64]) -> Result<RankReport> {
    if inputs.is_empty() {
        return Err(LokiError::domain("rank report needs at least one key set"));
    }
    if v_list.is_empty() {
        return Err(LokiError::domain("rank report needs at least one variance level"));
    }
    for &v in v_list {
        if !(v > 0.0 && v <= 100.0) {
            return Err(LokiError::domain(format!("variance percentage {v} outside (0, 100]")));
        }
    }
    let heads = parallel::map_range(inputs.len(), true, |i| {
        let inp = &inputs[i];
        let tag = |e: LokiError| e.at_head(inp.layer, inp.head);
        let basis = principal_basis(&inp.keys).map_err(tag)?;
        let ranks = v_list
            .iter()
            .map(|&v| rank_at_v(&basis.eigenvalues, v))
            .collect::<Result<Vec<_>>>()
            .map_err(tag)?;
        Ok(HeadRanks {
            layer: inp.layer,
            head: inp.head,
            stage: inp.stage,
            head_dim: inp.keys.cols(),
            eigenvalues: basis.eigenvalues,
            ranks,
        })
    });
    Ok(RankReport {
        v_list: v_list.to_vec(),
        heads: heads.into_iter().collect::<Result<Vec<_>>>()?,
    })
}

/// Per-layer reduced dimensions chosen by explained variance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerDims {
    /// `(layer, d)`, ascending by layer.
    pub dims: Vec<(u32, usize)>,
    /// `Σ d_l / Σ D_l`.
    pub compression_ratio: f64,
}

/// For each layer, `d` = head-averaged `Rank@threshold`, rounded and clamped
/// to `[1, D]`. Heads of every stage present in the report are pooled.
pub fn select_d_per_layer(report: &RankReport, threshold: f64) -> Result<LayerDims> {
    if !(threshold > 0.0 && threshold <= 100.0) {
        return Err(LokiError::domain(format!("threshold {threshold} outside (0, 100]")));
    }
    if report.heads.is_empty() {
        return Err(LokiError::domain("empty rank report"));
    }
    let mut layers: BTreeMap<u32, Vec<&HeadRanks>> = BTreeMap::new();
    for h in &report.heads {
        layers.entry(h.layer).or_default().push(h);
    }
    let mut dims = Vec::with_capacity(layers.len());
    let (mut kept, mut full) = (0usize, 0usize);
    for (layer, heads) in layers {
        let mut sum = 0.0;
        for h in &heads {
            sum += rank_at_v(&h.eigenvalues, threshold).map_err(|e| e.at_head(h.layer, h.head))? as f64;
        }
        let head_dim = heads.iter().map(|h| h.head_dim).max().unwrap_or(1);
        let d = ((sum / heads.len() as f64).round() as usize).clamp(1, head_dim);
        dims.push((layer, d));
        kept += d;
        full += head_dim;
    }
    Ok(LayerDims {
        dims,
        compression_ratio: kept as f64 / full as f64,
    })
}
