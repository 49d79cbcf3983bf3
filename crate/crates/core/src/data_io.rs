//! LKD1 key dumps, LKP1 projection files and the synthetic key generator.
//!
//! LKD1 layout (little-endian, 30-byte header):
//!
//! ```text
//! offset size field
//!      0    4 magic "LKD1"
//!      4    4 version (u32, = 1)
//!      8    4 layer (u32)
//!     12    4 head (u32)
//!     16    8 seq_len S (u64)
//!     24    4 head_dim D (u32)
//!     28    1 rotary stage (0 = pre, 1 = post)
//!     29    1 dtype (0 = f32)
//!     30  4SD row-major f32 payload
//! ```
//!
//! LKP1 layout (little-endian, 21-byte header):
//!
//! ```text
//!      0    4 magic "LKP1"
//!      4    4 version (u32, = 1)
//!      8    4 layer (u32)
//!     12    4 head (u32)
//!     16    4 head_dim D (u32)
//!     20    1 rotary stage
//!     21   4D eigenvalues (f32, descending)
//!  21+4D 4D² projection P (f32, row-major, columns = principal directions)
//! ```
//!
//! Synthetic keys use ChaCha8 seeded with `seed_from_u64`, drawing standard
//! normals in the order: basis `B` (r×D), latents `Z` (S×r), then noise (S×D,
//! only when σ > 0), each row-major.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::calibration::{ProjectionSet, RotaryStage, STORED_ORTHOGONALITY_TOL};
use crate::tensor::{Matrix, Matrix64};
use crate::{FormatError, LokiError, Result};

pub const KEY_DUMP_MAGIC: [u8; 4] = *b"LKD1";
pub const PROJECTION_MAGIC: [u8; 4] = *b"LKP1";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;
pub const KEY_DUMP_HEADER_LEN: usize = 30;
pub const PROJECTION_HEADER_LEN: usize = 21;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeyDumpHeader {
    pub version: u32,
    pub layer: u32,
    pub head: u32,
    pub seq_len: u64,
    pub head_dim: u32,
    pub stage: RotaryStage,
    pub dtype: u8,
}

impl KeyDumpHeader {
    /// Header describing `keys` at the current format version.
    pub fn for_matrix(layer: u32, head: u32, stage: RotaryStage, keys: &Matrix) -> Self {
        Self {
            version: FORMAT_VERSION,
            layer,
            head,
            seq_len: keys.rows() as u64,
            head_dim: keys.cols() as u32,
            stage,
            dtype: DTYPE_F32,
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, field: &'static str) -> std::result::Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).ok_or(FormatError::Truncated { field })?;
        if end > self.buf.len() {
            return Err(FormatError::Truncated { field });
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, field: &'static str) -> std::result::Result<[u8; N], FormatError> {
        Ok(self.take(N, field)?.try_into().expect("length checked"))
    }

    fn u8(&mut self, field: &'static str) -> std::result::Result<u8, FormatError> {
        Ok(self.array::<1>(field)?[0])
    }

    fn u32(&mut self, field: &'static str) -> std::result::Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.array(field)?))
    }

    fn u64(&mut self, field: &'static str) -> std::result::Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.array(field)?))
    }

    fn f32s(&mut self, count: usize, cols: usize, field: &'static str) -> std::result::Result<Vec<f32>, FormatError> {
        let bytes = count
            .checked_mul(4)
            .ok_or(FormatError::Truncated { field })?;
        let raw = self.take(bytes, field)?;
        let mut out = Vec::with_capacity(count);
        for (i, c) in raw.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(c.try_into().expect("chunk of 4"));
            if !v.is_finite() {
                let cols = cols.max(1);
                return Err(FormatError::NonFinite {
                    field,
                    row: i / cols,
                    col: i % cols,
                });
            }
            out.push(v);
        }
        Ok(out)
    }

    fn finish(&self) -> std::result::Result<(), FormatError> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            extra => Err(FormatError::TrailingBytes { extra }),
        }
    }
}

fn check_magic(r: &mut Reader<'_>, expected: [u8; 4]) -> std::result::Result<(), FormatError> {
    let found = r.array::<4>("magic")?;
    if found != expected {
        return Err(FormatError::BadMagic { expected, found });
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    Ok(())
}

fn stage_from(code: u8) -> std::result::Result<RotaryStage, FormatError> {
    RotaryStage::from_code(code).ok_or(FormatError::InvalidRotaryStage(code))
}

fn push_f32s(out: &mut Vec<u8>, vals: &[f32]) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes a key dump. The header must describe `keys` exactly.
pub fn encode_key_dump(header: &KeyDumpHeader, keys: &Matrix) -> Result<Vec<u8>> {
    if header.seq_len != keys.rows() as u64 || header.head_dim as usize != keys.cols() {
        return Err(LokiError::shape(format!(
            "header says {}x{}, matrix is {}x{}",
            header.seq_len,
            header.head_dim,
            keys.rows(),
            keys.cols()
        )));
    }
    if header.version != FORMAT_VERSION || header.dtype != DTYPE_F32 {
        return Err(LokiError::domain("only version 1, f32 key dumps can be written"));
    }
    if let Some((r, c)) = keys.find_non_finite() {
        return Err(LokiError::domain(format!("non-finite key at row {r}, col {c}")));
    }
    let mut out = Vec::with_capacity(KEY_DUMP_HEADER_LEN + keys.data().len() * 4);
    out.extend_from_slice(&KEY_DUMP_MAGIC);
    out.extend_from_slice(&header.version.to_le_bytes());
    out.extend_from_slice(&header.layer.to_le_bytes());
    out.extend_from_slice(&header.head.to_le_bytes());
    out.extend_from_slice(&header.seq_len.to_le_bytes());
    out.extend_from_slice(&header.head_dim.to_le_bytes());
    out.push(header.stage.code());
    out.push(header.dtype);
    push_f32s(&mut out, keys.data());
    Ok(out)
}

pub fn decode_key_dump(bytes: &[u8]) -> std::result::Result<(KeyDumpHeader, Matrix), FormatError> {
    let mut r = Reader::new(bytes);
    check_magic(&mut r, KEY_DUMP_MAGIC)?;
    let layer = r.u32("layer")?;
    let head = r.u32("head")?;
    let seq_len = r.u64("seq_len")?;
    let head_dim = r.u32("head_dim")?;
    let stage = stage_from(r.u8("rotary_stage")?)?;
    let dtype = r.u8("dtype")?;
    if dtype != DTYPE_F32 {
        return Err(FormatError::UnsupportedDtype(dtype));
    }
    if head_dim == 0 {
        return Err(FormatError::ZeroDimension("head_dim"));
    }
    let rows = usize::try_from(seq_len).map_err(|_| FormatError::Truncated { field: "payload" })?;
    let count = rows
        .checked_mul(head_dim as usize)
        .ok_or(FormatError::Truncated { field: "payload" })?;
    let data = r.f32s(count, head_dim as usize, "payload")?;
    r.finish()?;
    let header = KeyDumpHeader {
        version: FORMAT_VERSION,
        layer,
        head,
        seq_len,
        head_dim,
        stage,
        dtype,
    };
    let keys = Matrix::new(rows, head_dim as usize, data).expect("length checked");
    Ok((header, keys))
}

pub fn write_key_dump(path: impl AsRef<Path>, header: &KeyDumpHeader, keys: &Matrix) -> Result<()> {
    fs::write(path, encode_key_dump(header, keys)?)?;
    Ok(())
}

pub fn read_key_dump(path: impl AsRef<Path>) -> Result<(KeyDumpHeader, Matrix)> {
    let bytes = fs::read(path)?;
    Ok(decode_key_dump(&bytes)?)
}

pub fn encode_projection(p: &ProjectionSet) -> Vec<u8> {
    let d = p.head_dim();
    let mut out = Vec::with_capacity(PROJECTION_HEADER_LEN + 4 * (d + d * d));
    out.extend_from_slice(&PROJECTION_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&p.layer.to_le_bytes());
    out.extend_from_slice(&p.head.to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.push(p.stage.code());
    push_f32s(&mut out, p.eigenvalues());
    push_f32s(&mut out, p.projection().data());
    out
}

/// Parses and re-validates orthogonality of the stored matrix within 1e-3.
pub fn decode_projection(bytes: &[u8]) -> Result<ProjectionSet> {
    let mut r = Reader::new(bytes);
    check_magic(&mut r, PROJECTION_MAGIC)?;
    let layer = r.u32("layer")?;
    let head = r.u32("head")?;
    let d = r.u32("head_dim")? as usize;
    let stage = stage_from(r.u8("rotary_stage")?)?;
    if d == 0 {
        return Err(FormatError::ZeroDimension("head_dim").into());
    }
    let eigenvalues = r.f32s(d, d, "eigenvalues")?;
    let count = d.checked_mul(d).ok_or(FormatError::Truncated { field: "projection" })?;
    let data = r.f32s(count, d, "projection")?;
    r.finish()?;
    let projection = Matrix::new(d, d, data).expect("length checked");
    ProjectionSet::with_tolerance(layer, head, stage, projection, eigenvalues, STORED_ORTHOGONALITY_TOL)
}

pub fn write_projection(path: impl AsRef<Path>, p: &ProjectionSet) -> Result<()> {
    fs::write(path, encode_projection(p))?;
    Ok(())
}

pub fn read_projection(path: impl AsRef<Path>) -> Result<ProjectionSet> {
    decode_projection(&fs::read(path)?)
}

/// Parameters of a planted low-rank key matrix `K = Z·B + ε`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub seq_len: usize,
    pub head_dim: usize,
    pub rank: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// `K = Z·B + ε` with `Z ~ N(0,1)^{S×r}`, `B` having orthonormal rows, and
/// `ε ~ N(0, σ²)`. Deterministic in `seed`.
pub fn gen_synthetic_keys(spec: &SyntheticSpec) -> Result<Matrix> {
    let SyntheticSpec {
        seq_len,
        head_dim,
        rank,
        noise_sigma,
        seed,
    } = *spec;
    if head_dim == 0 || rank == 0 {
        return Err(LokiError::domain("head dimension and rank must be positive"));
    }
    if rank > head_dim {
        return Err(LokiError::domain(format!("rank {rank} exceeds head dimension {head_dim}")));
    }
    if !(noise_sigma >= 0.0) || !noise_sigma.is_finite() {
        return Err(LokiError::domain(format!("noise sigma must be finite and ≥ 0, got {noise_sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };

    let mut basis = Matrix64::from_fn(rank, head_dim, |_, _| normal());
    orthonormalize_rows(&mut basis)?;
    let latents = Matrix64::from_fn(seq_len, rank, |_, _| normal());

    let mut keys = Matrix64::zeros(seq_len, head_dim);
    for i in 0..seq_len {
        let out = keys.row_mut(i);
        for (t, &z) in latents.row(i).iter().enumerate() {
            for (o, &b) in out.iter_mut().zip(basis.row(t)) {
                *o += z * b;
            }
        }
    }
    if noise_sigma > 0.0 {
        for i in 0..seq_len {
            for v in keys.row_mut(i) {
                *v += noise_sigma * normal();
            }
        }
    }
    Ok(keys.to_f32())
}

/// Dense `N(0, std²)` matrix from ChaCha8, row-major draw order.
pub fn gen_gaussian(rows: usize, cols: usize, std: f64, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        (std * z) as f32
    })
}

/// Modified Gram–Schmidt, applied twice for stability.
fn orthonormalize_rows(m: &mut Matrix64) -> Result<()> {
    let (r, c) = m.shape();
    for _pass in 0..2 {
        for i in 0..r {
            for j in 0..i {
                let proj: f64 = (0..c).map(|t| m.get(i, t) * m.get(j, t)).sum();
                for t in 0..c {
                    let v = m.get(i, t) - proj * m.get(j, t);
                    m.set(i, t, v);
                }
            }
            let norm = m.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > 1e-12) {
                return Err(LokiError::domain("random basis is rank deficient"));
            }
            m.row_mut(i).iter_mut().for_each(|v| *v /= norm);
        }
    }
    Ok(())
}
