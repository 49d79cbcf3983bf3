//! Phase-level timing of one attention step.
//!
//! Loki is split into projection (`q̂ = q·P`), approximate scores, top-k
//! selection, exact scores (gathered logits + softmax) and the weighted sum.
//! Vanilla attention has only exact scores and the weighted sum.

use std::fmt;
use std::hint::black_box;
use std::str::FromStr;
use std::time::Instant;

use serde::Serialize;

use crate::attention::{resolve_budget, KvCache};
use crate::calibration::{build_projection, RotaryStage};
use crate::data_io::{gen_gaussian, gen_synthetic_keys, SyntheticSpec};
use crate::kernels::{self, TileSpec};
use crate::tensor::{softmax_in_place, topk_indices, vecmat, IndexList, Matrix};
use crate::{LokiError, Result};

pub const PHASE_PROJECTION: &str = "projection";
pub const PHASE_APPROX_SCORES: &str = "approx_scores";
pub const PHASE_TOPK: &str = "topk";
pub const PHASE_EXACT_SCORES: &str = "exact_scores";
pub const PHASE_WEIGHTED_SUM: &str = "weighted_sum";

/// Report column order.
pub const PHASES: [&str; 5] = [
    PHASE_PROJECTION,
    PHASE_APPROX_SCORES,
    PHASE_TOPK,
    PHASE_EXACT_SCORES,
    PHASE_WEIGHTED_SUM,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchMethod {
    Vanilla,
    Loki,
}

impl fmt::Display for BenchMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BenchMethod::Vanilla => "vanilla",
            BenchMethod::Loki => "loki",
        })
    }
}

impl FromStr for BenchMethod {
    type Err = LokiError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(BenchMethod::Vanilla),
            "loki" => Ok(BenchMethod::Loki),
            other => Err(LokiError::domain(format!("unknown bench method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchConfig {
    pub method: BenchMethod,
    pub seq_len: usize,
    pub head_dim: usize,
    pub key_fraction: f64,
    pub dim_fraction: f64,
    pub trials: usize,
    pub warmup: usize,
    /// Queries per timed step. Defaults to 1.
    pub batch: usize,
    pub seed: u64,
    #[serde(skip)]
    pub tile: TileSpec,
}

impl BenchConfig {
    pub fn new(method: BenchMethod, seq_len: usize, head_dim: usize, key_fraction: f64, dim_fraction: f64) -> Self {
        Self {
            method,
            seq_len,
            head_dim,
            key_fraction,
            dim_fraction,
            trials: 10,
            warmup: 3,
            batch: 1,
            seed: 0,
            tile: TileSpec::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.trials < 3 {
            return Err(LokiError::budget(format!("need at least 3 trials, got {}", self.trials)));
        }
        if self.warmup < 1 {
            return Err(LokiError::budget("need at least 1 warmup iteration"));
        }
        if self.batch < 1 {
            return Err(LokiError::budget("batch must be at least 1"));
        }
        if self.seq_len == 0 || self.head_dim == 0 {
            return Err(LokiError::budget("sequence length and head dimension must be positive"));
        }
        resolve_budget(self.key_fraction, self.seq_len)?;
        resolve_budget(self.dim_fraction, self.head_dim)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseStats {
    pub name: String,
    pub mean_ns: f64,
    /// Sample standard deviation.
    pub std_ns: f64,
    pub samples_ns: Vec<u64>,
}

impl PhaseStats {
    pub fn from_samples(name: &str, samples_ns: Vec<u64>) -> Self {
        let (mean_ns, std_ns) = mean_std(&samples_ns);
        Self {
            name: name.to_string(),
            mean_ns,
            std_ns,
            samples_ns,
        }
    }

    pub fn relative_std(&self) -> f64 {
        if self.mean_ns > 0.0 {
            self.std_ns / self.mean_ns
        } else {
            0.0
        }
    }
}

fn mean_std(samples: &[u64]) -> (f64, f64) {
    let n = samples.len() as f64;
    if samples.is_empty() {
        return (0.0, 0.0);
    }
    let mean = samples.iter().map(|&s| s as f64).sum::<f64>() / n;
    if samples.len() < 2 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|&s| (s as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRecord {
    pub config: BenchConfig,
    pub k: usize,
    pub d: usize,
    pub phases: Vec<PhaseStats>,
    /// Per-trial sum of phases.
    pub total: PhaseStats,
    /// Output of the final timed step, for checking against the untimed path.
    #[serde(skip)]
    pub output: Vec<f32>,
}

impl BenchRecord {
    pub fn phase(&self, name: &str) -> Option<&PhaseStats> {
        self.phases.iter().find(|p| p.name == name)
    }

    /// Share of each phase in the summed phase means, in percent.
    pub fn percentages(&self) -> Vec<(String, f64)> {
        let sum: f64 = self.phases.iter().map(|p| p.mean_ns).sum();
        self.phases
            .iter()
            .map(|p| {
                let pct = if sum > 0.0 { 100.0 * p.mean_ns / sum } else { 0.0 };
                (p.name.clone(), pct)
            })
            .collect()
    }
}

/// Inputs shared by every trial of one configuration.
pub struct BenchFixture {
    pub query: Matrix,
    pub keys: Matrix,
    pub values: Matrix,
    pub projection: Matrix,
    pub cache: KvCache,
}

impl BenchFixture {
    /// Low-rank keys (rank `D/4`, σ = 0.05), Gaussian values and queries,
    /// and a projection calibrated on up to 2048 of the keys.
    pub fn generate(seq_len: usize, head_dim: usize, batch: usize, seed: u64) -> Result<Self> {
        let keys = gen_synthetic_keys(&SyntheticSpec {
            seq_len,
            head_dim,
            rank: (head_dim / 4).max(1),
            noise_sigma: 0.05,
            seed,
        })?;
        let values = gen_gaussian(seq_len, head_dim, 1.0, seed.wrapping_add(1));
        let query = gen_gaussian(batch, head_dim, 1.0, seed.wrapping_add(2));
        let calib_rows = seq_len.min(2048);
        let projection = if calib_rows >= 2 {
            build_projection(&keys.slice_rows(0, calib_rows)?, 0, 0, RotaryStage::Post)?
                .projection()
                .clone()
        } else {
            Matrix::identity(head_dim)
        };
        let cache = KvCache::from_parts(crate::tensor::matmul(&keys, &projection)?, values.clone())?;
        Ok(Self {
            query,
            keys,
            values,
            projection,
            cache,
        })
    }
}

fn elapsed_ns(start: Instant) -> u64 {
    start.elapsed().as_nanos() as u64
}

/// One Loki step per query; returns per-phase nanoseconds and the last output.
pub fn loki_phases(fx: &BenchFixture, k: usize, d: usize, tile: &TileSpec) -> Result<([u64; 5], Vec<f32>)> {
    let mut t = [0u64; 5];
    let mut last = Vec::new();
    let scale = 1.0 / (fx.cache.head_dim() as f32).sqrt();
    for q in fx.query.row_iter() {
        let s = Instant::now();
        let q_hat = black_box(vecmat(black_box(q), &fx.projection)?);
        t[0] += elapsed_ns(s);

        let s = Instant::now();
        let approx = black_box(kernels::sliced_score_kernel(&q_hat, fx.cache.keys(), d, tile)?);
        t[1] += elapsed_ns(s);

        let s = Instant::now();
        let selected = black_box(topk_indices(&approx, k)?);
        t[2] += elapsed_ns(s);

        let s = Instant::now();
        let mut w = kernels::gathered_score_kernel(&q_hat, fx.cache.keys(), &selected, tile)?;
        w.iter_mut().for_each(|x| *x *= scale);
        softmax_in_place(&mut w)?;
        let w = black_box(w);
        t[3] += elapsed_ns(s);

        let s = Instant::now();
        let out = black_box(kernels::gathered_weighted_sum_kernel(&w, fx.cache.values(), &selected, tile)?);
        t[4] += elapsed_ns(s);
        last = out;
    }
    Ok((t, last))
}

/// One vanilla step per query: exact scores + softmax, then the weighted sum.
pub fn vanilla_phases(fx: &BenchFixture, tile: &TileSpec) -> Result<([u64; 2], Vec<f32>)> {
    let mut t = [0u64; 2];
    let mut last = Vec::new();
    let dim = fx.keys.cols();
    let scale = 1.0 / (dim as f32).sqrt();
    for q in fx.query.row_iter() {
        let s = Instant::now();
        let mut w = kernels::sliced_score_kernel(black_box(q), &fx.keys, dim, tile)?;
        w.iter_mut().for_each(|x| *x *= scale);
        softmax_in_place(&mut w)?;
        let w = black_box(w);
        t[0] += elapsed_ns(s);

        let s = Instant::now();
        let out = black_box(kernels::weighted_sum_kernel(&w, &fx.values, tile)?);
        t[1] += elapsed_ns(s);
        last = out;
    }
    Ok((t, last))
}

/// Times one configuration: `warmup` untimed steps, then `trials` timed ones.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchRecord> {
    cfg.validate()?;
    let fx = BenchFixture::generate(cfg.seq_len, cfg.head_dim, cfg.batch, cfg.seed)?;
    run_bench_on(cfg, &fx)
}

/// As [`run_bench`] with caller-provided inputs.
pub fn run_bench_on(cfg: &BenchConfig, fx: &BenchFixture) -> Result<BenchRecord> {
    cfg.validate()?;
    let k = resolve_budget(cfg.key_fraction, cfg.seq_len)?;
    let d = resolve_budget(cfg.dim_fraction, cfg.head_dim)?;
    let names: &[&str] = match cfg.method {
        BenchMethod::Loki => &PHASES,
        BenchMethod::Vanilla => &[PHASE_EXACT_SCORES, PHASE_WEIGHTED_SUM],
    };
    let mut samples: Vec<Vec<u64>> = vec![Vec::with_capacity(cfg.trials); names.len()];
    let mut output = Vec::new();
    for trial in 0..cfg.warmup + cfg.trials {
        let (times, out): (Vec<u64>, Vec<f32>) = match cfg.method {
            BenchMethod::Loki => {
                let (t, o) = loki_phases(fx, k, d, &cfg.tile)?;
                (t.to_vec(), o)
            }
            BenchMethod::Vanilla => {
                let (t, o) = vanilla_phases(fx, &cfg.tile)?;
                (t.to_vec(), o)
            }
        };
        if trial >= cfg.warmup {
            for (s, t) in samples.iter_mut().zip(times) {
                s.push(t);
            }
        }
        output = out;
    }
    let totals: Vec<u64> = (0..cfg.trials).map(|i| samples.iter().map(|s| s[i]).sum()).collect();
    let phases = names
        .iter()
        .zip(samples)
        .map(|(n, s)| PhaseStats::from_samples(n, s))
        .collect();
    Ok(BenchRecord {
        config: *cfg,
        k,
        d,
        phases,
        total: PhaseStats::from_samples("total", totals),
        output,
    })
}

/// Tab-separated breakdown plus the (S, mean total) plot data.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub table: String,
    pub plot_data: String,
}

/// One row per record, sorted by S then method. Each phase contributes mean,
/// std. dev. and percentage columns; phases a method does not run are `-`.
pub fn bench_report(records: &[BenchRecord]) -> BenchReport {
    let mut sorted: Vec<&BenchRecord> = records.iter().collect();
    sorted.sort_by_key(|r| (r.config.seq_len, r.config.method, r.config.head_dim));

    let mut table = String::from("method\tS\tD\tk_f\td_f\tk\td\ttrials");
    for p in PHASES {
        table.push_str(&format!("\t{p}_mean_ns\t{p}_std_ns\t{p}_pct"));
    }
    table.push_str("\ttotal_mean_ns\ttotal_std_ns\n");
    for r in &sorted {
        let c = &r.config;
        table.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            c.method, c.seq_len, c.head_dim, c.key_fraction, c.dim_fraction, r.k, r.d, c.trials
        ));
        let pct = r.percentages();
        for p in PHASES {
            match r.phase(p) {
                Some(s) => {
                    let share = pct.iter().find(|(n, _)| n == p).map_or(0.0, |x| x.1);
                    table.push_str(&format!("\t{:.1}\t{:.1}\t{:.2}", s.mean_ns, s.std_ns, share));
                }
                None => table.push_str("\t-\t-\t-"),
            }
        }
        table.push_str(&format!("\t{:.1}\t{:.1}\n", r.total.mean_ns, r.total.std_ns));
    }

    let mut by_method = sorted.clone();
    by_method.sort_by_key(|r| (r.config.method, r.config.seq_len));
    let mut plot_data = String::from("method\tS\tmean_total_ns\tstd_total_ns\n");
    for r in by_method {
        plot_data.push_str(&format!(
            "{}\t{}\t{:.1}\t{:.1}\n",
            r.config.method, r.config.seq_len, r.total.mean_ns, r.total.std_ns
        ));
    }
    BenchReport { table, plot_data }
}

/// Exact-score + weighted-sum phases with in-place gathers versus explicit
/// dense copies of the selected rows.
#[derive(Debug, Clone, PartialEq)]
pub struct GatherComparison {
    pub fused: PhaseStats,
    pub copy: PhaseStats,
}

impl GatherComparison {
    /// `copy / fused` mean time.
    pub fn speedup(&self) -> f64 {
        self.copy.mean_ns / self.fused.mean_ns
    }
}

fn fused_gather_step(q: &[f32], cache: &KvCache, selected: &IndexList, tile: &TileSpec) -> Result<Vec<f32>> {
    let scale = 1.0 / (cache.head_dim() as f32).sqrt();
    let mut w = kernels::gathered_score_kernel(q, cache.keys(), selected, tile)?;
    w.iter_mut().for_each(|x| *x *= scale);
    softmax_in_place(&mut w)?;
    kernels::gathered_weighted_sum_kernel(&w, cache.values(), selected, tile)
}

fn copy_gather_step(q: &[f32], cache: &KvCache, selected: &IndexList, tile: &TileSpec) -> Result<Vec<f32>> {
    let scale = 1.0 / (cache.head_dim() as f32).sqrt();
    let keys = cache.keys().gather_rows(selected.as_slice())?;
    let values = cache.values().gather_rows(selected.as_slice())?;
    let mut w = kernels::sliced_score_kernel(q, &keys, keys.cols(), tile)?;
    w.iter_mut().for_each(|x| *x *= scale);
    softmax_in_place(&mut w)?;
    kernels::weighted_sum_kernel(&w, &values, tile)
}

pub fn run_gather_comparison(
    seq_len: usize,
    head_dim: usize,
    key_fraction: f64,
    trials: usize,
    warmup: usize,
    seed: u64,
    tile: &TileSpec,
) -> Result<GatherComparison> {
    if trials < 3 || warmup < 1 {
        return Err(LokiError::budget("need at least 3 trials and 1 warmup iteration"));
    }
    let k = resolve_budget(key_fraction, seq_len)?;
    let fx = BenchFixture::generate(seq_len, head_dim, 1, seed)?;
    let q = fx.query.row(0).to_vec();
    let ranking = kernels::sliced_score_kernel(&q, fx.cache.keys(), head_dim, tile)?;
    let selected = topk_indices(&ranking, k)?;

    let (mut fused, mut copy) = (Vec::new(), Vec::new());
    for trial in 0..warmup + trials {
        // alternate order so neither path always runs on a warm cache
        let (f, c) = if trial % 2 == 0 {
            let s = Instant::now();
            black_box(fused_gather_step(&q, &fx.cache, &selected, tile)?);
            let f = elapsed_ns(s);
            let s = Instant::now();
            black_box(copy_gather_step(&q, &fx.cache, &selected, tile)?);
            (f, elapsed_ns(s))
        } else {
            let s = Instant::now();
            black_box(copy_gather_step(&q, &fx.cache, &selected, tile)?);
            let c = elapsed_ns(s);
            let s = Instant::now();
            black_box(fused_gather_step(&q, &fx.cache, &selected, tile)?);
            (elapsed_ns(s), c)
        };
        if trial >= warmup {
            fused.push(f);
            copy.push(c);
        }
    }
    Ok(GatherComparison {
        fused: PhaseStats::from_samples("fused_gather", fused),
        copy: PhaseStats::from_samples("copy_gather", copy),
    })
}
