//! One PASS/FAIL line per acceptance criterion, run sequentially so the timing
//! checks are not competing with other tests in this binary.
//!
//! `cargo test -p loki-core --test acceptance -- --nocapture` shows the table.

mod common;

use common::*;
use loki_core::attention::{exact_topk_attention, loki_attention, pca_attn, vanilla_attention, H2oState, KvCache, LokiConfig, ReducedKvCache, TopkOutput};
use loki_core::bench::{bench_report, run_bench_on, run_gather_comparison, BenchConfig, BenchFixture, BenchMethod, PHASES};
use loki_core::calibration::{build_projection, rank_at_v, ProjectionSet, RotaryStage};
use loki_core::data_io::*;
use loki_core::kernels::{gathered_score_kernel, gathered_weighted_sum_kernel, sliced_score_kernel, TileSpec};
use loki_core::metrics::{agreement_sweep, exact_speedup, theoretical_speedup};
use loki_core::tensor::{IndexList, Matrix};
use loki_core::{FormatError, LokiError};
use std::path::PathBuf;
use std::time::{Duration, Instant};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

/// Worst deviation of Loki's weights from the exact renormalized weights,
/// over every Loki call made by this suite.
#[derive(Default)]
struct SelectionAudit {
    runs: usize,
    worst: f64,
}

impl SelectionAudit {
    fn record(&mut self, q: &[f32], keys: &Matrix, out: &TopkOutput) {
        let logits = logits64(q, keys);
        let scale = (keys.cols() as f64).sqrt();
        let sel: Vec<f64> = out.selected.iter().map(|i| logits[i] / scale).collect();
        self.worst = self.worst.max(max_abs_diff(&out.weights, &softmax64(&sel)));
        self.runs += 1;
    }
}

fn tile() -> TileSpec {
    TileSpec::default()
}

fn cache_for(keys: &Matrix, values: &Matrix, p: &ProjectionSet) -> KvCache {
    KvCache::from_parts(p.project_rows(keys).unwrap(), values.clone()).unwrap()
}

fn l2_64(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, y)| (x as f64 - y).powi(2)).sum::<f64>().sqrt()
}

fn within(limit_s: f64, t: Duration) -> bool {
    t.as_secs_f64() < limit_s
}

fn c1_projection_preserves_scores() -> Verdict {
    let calib = gaussian(2048, 64, 1.0, 1);
    let p = build_projection(&calib, 0, 0, RotaryStage::Post).unwrap();
    let mut worst = 0.0f64;
    for i in 0..100 {
        let keys = gaussian(256, 64, 1.0, 1000 + i);
        let q = gaussian(1, 64, 1.0, 5000 + i).into_data();
        let exact = logits64(&q, &keys);
        let k_hat = p.project_rows(&keys).unwrap();
        let q_hat = p.project(&q).unwrap();
        let approx = sliced_score_kernel(&q_hat, &k_hat, 64, &tile()).unwrap();
        let scale = exact.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        worst = worst.max(max_abs_diff(&approx, &exact) / scale);
    }
    verdict(worst <= 1e-4, format!("max |qKᵀ − q̂K̂ᵀ| / max|qKᵀ| = {worst:.2e} (≤ 1e-4)"))
}

fn c2_degeneration(audit: &mut SelectionAudit) -> Verdict {
    let p = build_projection(&gaussian(2048, 32, 1.0, 2), 0, 0, RotaryStage::Post).unwrap();
    let (mut worst, mut same_sets) = (0.0f64, 0);
    for i in 0..100 {
        let keys = gaussian(256, 32, 1.0, 100 + i);
        let values = gaussian(256, 32, 1.0, 300 + i);
        let q = gaussian(1, 32, 1.0, 500 + i).into_data();
        let cache = cache_for(&keys, &values, &p);
        let full = loki_attention(&q, &cache, &p, &LokiConfig::full(), &tile()).unwrap();
        let vanilla = vanilla_attention(&q, &keys, &values, &tile()).unwrap();
        worst = worst.max(max_abs_diff(&full.output, &vec64(&vanilla.output)));
        audit.record(&q, &keys, &full);

        let kf = [0.05, 0.25, 0.5][i as usize % 3];
        let loki = loki_attention(&q, &cache, &p, &LokiConfig::new(kf, 1.0).unwrap(), &tile()).unwrap();
        let k = loki.selected.len();
        let exact = exact_topk_attention(&q, &keys, &values, k, &tile()).unwrap();
        same_sets += usize::from(loki.selected == exact.selected);
        audit.record(&q, &keys, &loki);
    }
    verdict(
        worst <= 1e-5 && same_sets == 100,
        format!("full-budget max diff {worst:.2e} (≤ 1e-5); identical sets {same_sets}/100"),
    )
}

fn c4_rank_recovery() -> Verdict {
    let keys = gen_synthetic_keys(&SyntheticSpec { seq_len: 8192, head_dim: 128, rank: 16, noise_sigma: 1e-3, seed: 4 }).unwrap();
    let p = build_projection(&keys, 0, 0, RotaryStage::Post).unwrap();
    let r = rank_at_v(p.eigenvalues(), 90.0).unwrap();
    verdict((14..=20).contains(&r), format!("Rank@90 = {r} (in [14, 20])"))
}

fn c5_agreement() -> Verdict {
    let keys = gen_synthetic_keys(&SyntheticSpec { seq_len: 2048, head_dim: 128, rank: 16, noise_sigma: 1e-3, seed: 5 }).unwrap();
    let queries = gaussian(200, 128, 1.0, 6);
    let p = build_projection(&keys, 0, 0, RotaryStage::Post).unwrap();
    let df = [0.125, 0.25, 0.5, 1.0];
    let kf = [0.125, 0.25, 0.5];
    let stats = agreement_sweep(&keys, &queries, &p, &kf, &df, &tile()).unwrap();
    let a = stats.cell(0.25, 0.25).unwrap().mean();
    let b = kf.iter().all(|&k| stats.cell(k, 1.0).unwrap().mean() == 1.0);
    let c = kf.iter().all(|&k| {
        let m: Vec<f64> = df.iter().map(|&d| stats.cell(k, d).unwrap().mean()).collect();
        m.windows(2).all(|w| w[0] <= w[1])
    });
    verdict(
        a >= 0.99 && b && c,
        format!("(a) mean Jaccard d=32,k_f=0.25: {a:.4} (≥ 0.99); (b) d_f=1 column all 1.0: {b}; (c) nondecreasing in d_f: {c}"),
    )
}

fn c6_speedup_model() -> Verdict {
    let approx = theoretical_speedup(0.25, 0.25).unwrap();
    let exact = exact_speedup(128, 4096, 32, 1024).unwrap();
    let gaps: Vec<f64> = (0..6)
        .map(|i| {
            let s = 512usize << i;
            (approx - exact_speedup(128, s, 32, s / 4).unwrap()).abs()
        })
        .collect();
    let monotone = gaps.windows(2).all(|w| w[1] < w[0]);
    verdict(
        (approx - 2.6667).abs() <= 1e-4 && (exact - 2.4615).abs() <= 1e-3 && monotone,
        format!("approx {approx:.5}; exact {exact:.5}; gap S=512→16384 strictly decreasing: {monotone}"),
    )
}

/// Mean total step time per configuration, measured in interleaved rounds
/// (order reversed every other round) so host-side drift on a shared machine
/// lands on every configuration alike instead of on whichever ran last.
fn interleaved_totals(cases: &[(&BenchConfig, &BenchFixture)]) -> Vec<f64> {
    const ROUNDS: usize = 10;
    let mut sums = vec![0.0; cases.len()];
    for round in 0..ROUNDS {
        let order: Vec<usize> = if round % 2 == 0 { (0..cases.len()).collect() } else { (0..cases.len()).rev().collect() };
        for i in order {
            sums[i] += run_bench_on(cases[i].0, cases[i].1).unwrap().total.mean_ns;
        }
    }
    sums.iter().map(|t| t / ROUNDS as f64).collect()
}

fn c7_kernels() -> Verdict {
    let mut worst = 0.0f64;
    for &s in &[1usize, 1000, 2048, 3000, 4095] {
        let keys = gaussian(s, 128, 1.0, s as u64);
        let values = gaussian(s, 128, 1.0, s as u64 + 1);
        let q = gaussian(1, 128, 1.0, s as u64 + 2).into_data();
        let k = (s / 4).max(1);
        let sel = topk_by_sort(&logits64(&q, &keys), k);
        let idx = IndexList::new(sel.clone()).unwrap();
        let w: Vec<f32> = gaussian(1, k, 1.0, 9).into_data();

        let sliced = sliced_score_kernel(&q, &keys, 32, &tile()).unwrap();
        let dense = to64(&keys.slice_cols(0, 32).unwrap());
        let want: Vec<f64> = dense.iter().map(|r| dot64(&vec64(&q[..32]), r)).collect();
        worst = worst.max(rel_err(&sliced, &want));

        let gathered = gathered_score_kernel(&q, &keys, &idx, &tile()).unwrap();
        let copy = to64(&keys.gather_rows(&sel).unwrap());
        let want: Vec<f64> = copy.iter().map(|r| dot64(&vec64(&q), r)).collect();
        worst = worst.max(rel_err(&gathered, &want));

        let sum = gathered_weighted_sum_kernel(&w, &values, &idx, &tile()).unwrap();
        let copy = to64(&values.gather_rows(&sel).unwrap());
        let want = naive_matmul(&[vec64(&w)], &copy).remove(0);
        worst = worst.max(rel_err(&sum, &want));
    }

    let fx = BenchFixture::generate(4096, 128, 1, 7).unwrap();
    let loki = BenchConfig::new(BenchMethod::Loki, 4096, 128, 0.25, 0.25);
    let vanilla = BenchConfig::new(BenchMethod::Vanilla, 4096, 128, 0.25, 0.25);
    let [l, v]: [f64; 2] = interleaved_totals(&[(&loki, &fx), (&vanilla, &fx)]).try_into().unwrap();
    let gather = run_gather_comparison(4096, 128, 0.25, 10, 3, 8, &tile()).unwrap().speedup();
    verdict(
        worst <= 1e-4 && l < v && gather >= 1.2,
        format!(
            "oracle rel err {worst:.2e} (≤ 1e-4); Loki {:.1} µs vs vanilla {:.1} µs; fused/copy gather {gather:.2}× (≥ 1.2)",
            l / 1e3,
            v / 1e3
        ),
    )
}

fn c8_bench_structure() -> Verdict {
    let sizes = [1024, 2048, 3072, 4096];
    let cfgs: Vec<_> = sizes.iter().map(|&s| BenchConfig::new(BenchMethod::Loki, s, 128, 0.25, 0.25)).collect();
    let fxs: Vec<_> = cfgs.iter().map(|c| BenchFixture::generate(c.seq_len, c.head_dim, c.batch, c.seed).unwrap()).collect();
    let records: Vec<_> = cfgs.iter().zip(&fxs).map(|(c, f)| run_bench_on(c, f).unwrap()).collect();
    let report = bench_report(&records);
    let header: Vec<&str> = report.table.lines().next().unwrap().split('\t').collect();
    let phases_present = PHASES.iter().all(|p| header.contains(&format!("{p}_mean_ns").as_str()) && header.contains(&format!("{p}_std_ns").as_str()));
    let pct_ok = records.iter().all(|r| {
        let sum: f64 = r.percentages().iter().map(|x| x.1).sum();
        (sum - 100.0).abs() <= 0.5
    });
    let std_ok = records.iter().all(|r| r.phases.len() == 5 && r.phases.iter().all(|p| p.std_ns.is_finite()));
    let pairs: Vec<_> = cfgs.iter().zip(&fxs).collect();
    let totals = interleaved_totals(&pairs);
    let monotone = totals.windows(2).all(|w| w[0] <= w[1]);
    verdict(
        phases_present && pct_ok && std_ok && monotone,
        format!(
            "five phases: {phases_present}; % sums to 100±0.5: {pct_ok}; std reported: {std_ok}; totals (µs) {:?} nondecreasing: {monotone}",
            totals.iter().map(|t| (t / 1e2).round() / 10.0).collect::<Vec<_>>()
        ),
    )
}

fn c9_h2o() -> Verdict {
    let (n, d) = (512, 32);
    let keys = gaussian(n, d, 1.0, 11);
    let values = gaussian(n, d, 1.0, 12);
    let queries = gaussian(n, d, 1.0, 13);
    let mut st = H2oState::new(64, d).unwrap();
    let mut max_len = 0;
    for t in 0..n {
        st.step(queries.row(t), keys.row(t), values.row(t), &tile()).unwrap();
        max_len = max_len.max(st.retained().len());
    }
    let mut full = H2oState::new(n, d).unwrap();
    let mut worst = 0.0f64;
    for t in 0..n {
        let out = full.step(queries.row(t), keys.row(t), values.row(t), &tile()).unwrap();
        let rows: Vec<usize> = (0..=t).collect();
        worst = worst.max(max_abs_diff(&out.output, &attention64(queries.row(t), &keys, &values, &rows)));
    }
    verdict(
        max_len <= 64 && worst <= 1e-5,
        format!("max retained {max_len} (≤ budget 64); ample-budget max diff {worst:.2e} (≤ 1e-5)"),
    )
}

fn c10_pca_attn(audit: &mut SelectionAudit) -> Verdict {
    let (s, d) = (2048, 128);
    let keys = gen_synthetic_keys(&SyntheticSpec { seq_len: s, head_dim: d, rank: 16, noise_sigma: 1e-3, seed: 14 }).unwrap();
    let values = gaussian(s, d, 1.0, 15);
    // std 6 puts ~90% of the attention mass on the top quarter of tokens, the
    // concentrated regime top-k methods assume; with near-uniform attention
    // (std 1) the comparison reverses, see `flat_attention_favors_pca_attn`
    let queries = gaussian(200, d, 6.0, 16);
    let p = build_projection(&keys, 0, 0, RotaryStage::Post).unwrap();
    let all: Vec<usize> = (0..s).collect();

    let full = ReducedKvCache::from_raw(&keys, &values, &p, d).unwrap();
    let mut worst = 0.0f64;
    for qi in 0..20 {
        let q = queries.row(qi);
        let out = pca_attn(q, &full, &p, &tile()).unwrap();
        worst = worst.max(max_abs_diff(&out.output, &attention64(q, &keys, &values, &all)));
    }

    let reduced = ReducedKvCache::from_raw(&keys, &values, &p, 8).unwrap();
    let cache = cache_for(&keys, &values, &p);
    let cfg = LokiConfig::new(0.25, 0.25).unwrap();
    let (mut pca_worse, mut top_mass) = (0, 0.0);
    for qi in 0..200 {
        let q = queries.row(qi);
        let reference = attention64(q, &keys, &values, &all);
        let mut w = softmax64(&logits64(q, &keys).iter().map(|l| l / (d as f64).sqrt()).collect::<Vec<_>>());
        w.sort_by(|a, b| b.total_cmp(a));
        top_mass += w[..s / 4].iter().sum::<f64>() / 200.0;
        let pca = pca_attn(q, &reduced, &p, &tile()).unwrap();
        let loki = loki_attention(q, &cache, &p, &cfg, &tile()).unwrap();
        audit.record(q, &keys, &loki);
        pca_worse += usize::from(l2_64(&pca.output, &reference) > l2_64(&loki.output, &reference));
    }
    verdict(
        worst <= 1e-5 && pca_worse >= 180,
        format!(
            "d=D max diff {worst:.2e} (≤ 1e-5); PCAAttn(d=8) worse than Loki(d=32,k_f=0.25) on {pca_worse}/200 (≥ 180), \
             top-quarter attention mass {top_mass:.2}"
        ),
    )
}

fn c11_formats() -> Verdict {
    let keys = gaussian(64, 32, 1.0, 17);
    let header = KeyDumpHeader::for_matrix(2, 3, RotaryStage::Pre, &keys);
    let bytes = encode_key_dump(&header, &keys).unwrap();
    let (h, k) = decode_key_dump(&bytes).unwrap();
    let lkd_ok = h == header && k.data().iter().zip(keys.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    let p = build_projection(&keys, 2, 3, RotaryStage::Pre).unwrap();
    let lkp_ok = decode_projection(&encode_projection(&p)).unwrap() == p;

    let mutate = |f: &dyn Fn(&mut Vec<u8>)| {
        let mut b = bytes.clone();
        f(&mut b);
        decode_key_dump(&b).unwrap_err()
    };
    let errors = [
        mutate(&|b| b[0] = b'X'),
        mutate(&|b| b[4] = 9),
        mutate(&|b| b[29] = 1),
        mutate(&|b| b[28] = 7),
        mutate(&|b| b[24..28].copy_from_slice(&0u32.to_le_bytes())),
        mutate(&|b| {
            b.pop();
        }),
        mutate(&|b| b.push(0)),
        mutate(&|b| b[42..46].copy_from_slice(&f32::NAN.to_le_bytes())),
    ];
    let classes: std::collections::BTreeSet<_> = errors.iter().map(std::mem::discriminant).map(|d| format!("{d:?}")).collect();
    let expected_kinds = errors.iter().zip([
        matches!(errors[0], FormatError::BadMagic { .. }),
        matches!(errors[1], FormatError::UnsupportedVersion(9)),
        matches!(errors[2], FormatError::UnsupportedDtype(1)),
        matches!(errors[3], FormatError::InvalidRotaryStage(7)),
        matches!(errors[4], FormatError::ZeroDimension(_)),
        matches!(errors[5], FormatError::Truncated { .. }),
        matches!(errors[6], FormatError::TrailingBytes { extra: 1 }),
        matches!(errors[7], FormatError::NonFinite { .. }),
    ]).all(|(_, ok)| ok);
    let mut corrupt = encode_projection(&p);
    let at = 21 + 4 * 32;
    let v = f32::from_le_bytes(corrupt[at..at + 4].try_into().unwrap()) + 1.0;
    corrupt[at..at + 4].copy_from_slice(&v.to_le_bytes());
    let integrity = matches!(decode_projection(&corrupt), Err(LokiError::Integrity(_)));

    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures");
    let stable = ["hand_keys.lkd", "planted_r4.lkd", "gaussian_full.lkd"]
        .iter()
        .all(|n| read_key_dump(dir.join(n)).unwrap() == read_key_dump(dir.join(n)).unwrap())
        && read_projection(dir.join("hand_identity.lkp")).unwrap() == read_projection(dir.join("hand_identity.lkp")).unwrap();

    verdict(
        lkd_ok && lkp_ok && classes.len() == errors.len() && expected_kinds && integrity && stable,
        format!(
            "round-trips bit-exact: {}; {} malformed classes, {} distinct errors; corrupted P → integrity: {integrity}; fixtures stable: {stable}",
            lkd_ok && lkp_ok,
            errors.len(),
            classes.len()
        ),
    )
}

#[test]
fn acceptance() {
    let mut audit = SelectionAudit::default();
    let mut rows: Vec<(u32, &str, Verdict, Duration, Option<f64>)> = Vec::new();
    macro_rules! run {
        ($n:expr, $name:expr, $limit:expr, $body:expr) => {{
            let start = Instant::now();
            let v = $body;
            rows.push(($n, $name, v, start.elapsed(), $limit));
        }};
    }
    run!(1, "projected scores equal exact scores", Some(5.0), c1_projection_preserves_scores());
    run!(2, "degeneration chain", Some(5.0), c2_degeneration(&mut audit));
    run!(4, "rank recovery", Some(30.0), c4_rank_recovery());
    run!(5, "top-k agreement", Some(60.0), c5_agreement());
    run!(6, "speedup model", None, c6_speedup_model());
    run!(7, "kernel contract", Some(120.0), c7_kernels());
    run!(8, "bench structure", None, c8_bench_structure());
    run!(9, "h2o baseline", None, c9_h2o());
    run!(10, "pca-attn baseline", None, c10_pca_attn(&mut audit));
    run!(11, "formats", None, c11_formats());
    let c3 = verdict(
        audit.runs > 0 && audit.worst <= 1e-4,
        format!("{} Loki runs, worst weight deviation {:.2e} (≤ 1e-4)", audit.runs, audit.worst),
    );
    rows.insert(2, (3, "exactness on selection", c3, Duration::ZERO, None));

    let mut all = true;
    for (n, name, v, t, limit) in &rows {
        let in_time = limit.is_none_or(|l| within(l, *t));
        let pass = v.pass && in_time;
        all &= pass;
        let budget = limit.map_or(String::new(), |l| format!(" / < {l} s"));
        println!(
            "{} [{n:>2}] {name}: {} ({:.2} s{budget})",
            if pass { "PASS" } else { "FAIL" },
            v.detail,
            t.as_secs_f64()
        );
    }
    assert!(all, "at least one acceptance criterion failed");
}
