mod common;

use common::*;
use loki_core::kernels::{gathered_score_kernel, gathered_weighted_sum_kernel, sliced_score_kernel, TileSpec};
use loki_core::tensor::{matmul, matmul_with, softmax_row, topk_indices, IndexList, Matrix};
use proptest::prelude::*;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random_indices(s: usize, k: usize, seed: u64) -> IndexList {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    IndexList::new(sample(&mut rng, s, k).into_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn matmul_matches_f64_oracle(m in 1usize..=64, k in 1usize..=64, n in 1usize..=64, seed in any::<u64>()) {
        let a = gaussian(m, k, 1.0, seed);
        let b = gaussian(k, n, 1.0, seed ^ 0x5555);
        let c = matmul(&a, &b).unwrap();
        let oracle = naive_matmul(&to64(&a), &to64(&b));
        for (crow, orow) in c.row_iter().zip(&oracle) {
            for (x, y) in crow.iter().zip(orow) {
                prop_assert!((*x as f64 - y).abs() <= 1e-4 * y.abs().max(1.0));
            }
        }
    }

    #[test]
    fn matmul_is_deterministic_across_threads(m in 1usize..=40, n in 1usize..=40, seed in any::<u64>()) {
        let a = gaussian(m, 17, 1.0, seed);
        let b = gaussian(17, n, 1.0, seed + 1);
        let tile = TileSpec::new(4, 8, true);
        let seq = TileSpec::new(4, 8, false);
        prop_assert_eq!(matmul_with(&a, &b, &tile).unwrap(), matmul_with(&a, &b, &seq).unwrap());
    }

    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant(raw in prop::collection::vec(-1920i32..1920, 1..200), c in -50i32..50) {
        // multiples of 1/64 with integer shifts keep `x + c` exact in f32
        let v: Vec<f32> = raw.iter().map(|&x| x as f32 / 64.0).collect();
        let c = c as f32;
        let p = softmax_row(&v).unwrap();
        let sum: f64 = p.iter().map(|&x| x as f64).sum();
        prop_assert!((sum - 1.0).abs() <= 1e-6);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        let shifted: Vec<f32> = v.iter().map(|x| x + c).collect();
        let q = softmax_row(&shifted).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn topk_matches_full_sort(v in prop::collection::vec(-4i32..4, 1..120), kf in 0.0f64..1.0) {
        // small integer range forces plenty of ties
        let scores: Vec<f32> = v.iter().map(|&x| x as f32).collect();
        let k = ((kf * scores.len() as f64) as usize).clamp(1, scores.len());
        let got = topk_indices(&scores, k).unwrap();
        let want = topk_by_sort(&vec64(&scores), k);
        prop_assert_eq!(got.as_slice(), want.as_slice());
        prop_assert_eq!(topk_indices(&scores, scores.len()).unwrap(), IndexList::full(scores.len()));
    }

    #[test]
    fn topk_stable_under_sorting_input(v in prop::collection::vec(-3i32..3, 2..80), k in 1usize..80) {
        let scores: Vec<f32> = v.iter().map(|&x| x as f32).collect();
        let k = k.min(scores.len());
        let direct = topk_indices(&scores, k).unwrap();
        // stable sort by descending score keeps lower original index first among ties
        let mut perm: Vec<usize> = (0..scores.len()).collect();
        perm.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
        let sorted: Vec<f32> = perm.iter().map(|&i| scores[i]).collect();
        let via_sorted: Vec<usize> = topk_indices(&sorted, k).unwrap().iter().map(|j| perm[j]).collect();
        prop_assert_eq!(IndexList::new(via_sorted).unwrap(), direct);
    }
}

#[test]
fn sliced_kernel_matches_copy_oracle() {
    for (s, d_full, d) in [(1000, 128, 32), (1, 8, 3), (2, 16, 16), (2048, 64, 7), (3000, 128, 64), (4095, 128, 1)] {
        let keys = gaussian(s, d_full, 1.0, s as u64);
        let q = gaussian(1, d_full, 1.0, 7).into_data();
        let got = sliced_score_kernel(&q, &keys, d, &TileSpec::default()).unwrap();
        let sliced = keys.slice_cols(0, d).unwrap();
        let oracle: Vec<f64> = naive_matmul(&to64(&sliced), &vec64(&q[..d]).iter().map(|&x| vec![x]).collect::<Vec<_>>())
            .into_iter()
            .map(|r| r[0])
            .collect();
        assert!(rel_err(&got, &oracle) <= 1e-5, "S={s} d={d}");
    }
}

#[test]
fn gathered_score_kernel_matches_copy_oracle() {
    for (s, k) in [(3000, 750), (1, 1), (2, 1), (1000, 333), (2048, 512), (4095, 1024)] {
        let keys = gaussian(s, 128, 1.0, 100 + s as u64);
        let q = gaussian(1, 128, 1.0, 8).into_data();
        let idx = random_indices(s, k, s as u64);
        let got = gathered_score_kernel(&q, &keys, &idx, &TileSpec::default()).unwrap();
        let dense = keys.gather_rows(idx.as_slice()).unwrap();
        let oracle = logits64(&q, &dense);
        assert!(rel_err(&got, &oracle) <= 1e-5, "S={s} k={k}");
    }
}

#[test]
fn gathered_weighted_sum_matches_copy_oracle() {
    for (s, k) in [(2048, 100), (1, 1), (2, 2), (1000, 999), (3000, 750), (4095, 4095)] {
        let values = gaussian(s, 128, 1.0, 200 + s as u64);
        let idx = random_indices(s, k, 3 * s as u64);
        let w = softmax_row(&gaussian(1, k, 2.0, 9).into_data()).unwrap();
        let got = gathered_weighted_sum_kernel(&w, &values, &idx, &TileSpec::default()).unwrap();
        let dense = to64(&values.gather_rows(idx.as_slice()).unwrap());
        let mut oracle = vec![0.0f64; 128];
        for (wi, row) in w.iter().zip(&dense) {
            for (o, v) in oracle.iter_mut().zip(row) {
                *o += *wi as f64 * v;
            }
        }
        assert!(rel_err(&got, &oracle) <= 1e-5, "S={s} k={k}");
    }
}

#[test]
fn kernels_are_bit_deterministic() {
    let keys = gaussian(4095, 64, 1.0, 1);
    let q = gaussian(1, 64, 1.0, 2).into_data();
    let idx = random_indices(4095, 1000, 3);
    let w: Vec<f32> = (0..1000).map(|i| 1.0 / (1.0 + i as f32)).collect();
    let tile = TileSpec::default();
    let first = (
        sliced_score_kernel(&q, &keys, 20, &tile).unwrap(),
        gathered_score_kernel(&q, &keys, &idx, &tile).unwrap(),
        gathered_weighted_sum_kernel(&w, &keys, &idx, &tile).unwrap(),
    );
    for _ in 0..5 {
        assert_eq!(first.0, sliced_score_kernel(&q, &keys, 20, &tile).unwrap());
        assert_eq!(first.1, gathered_score_kernel(&q, &keys, &idx, &tile).unwrap());
        assert_eq!(first.2, gathered_weighted_sum_kernel(&w, &keys, &idx, &tile).unwrap());
    }
}

#[test]
fn single_query_uses_sequence_tiles() {
    // m = 1: the only available parallelism is along the sequence
    let keys = gaussian(1031, 16, 1.0, 4);
    let q = gaussian(1, 16, 1.0, 5).into_data();
    let reference = sliced_score_kernel(&q, &keys, 16, &TileSpec::new(1, usize::MAX, false)).unwrap();
    for tn in [1, 7, 256, 1030, 1031, 5000] {
        let got = sliced_score_kernel(&q, &keys, 16, &TileSpec::new(1, tn, true)).unwrap();
        assert_eq!(got, reference, "tile_n={tn}");
    }
}

#[test]
fn full_index_gather_equals_dense_rows() {
    let m = Matrix::from_fn(5, 3, |i, j| (i * 3 + j) as f32);
    let full = m.gather_rows(IndexList::full(5).as_slice()).unwrap();
    assert_eq!(full, m);
}
