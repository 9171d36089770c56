use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semidense::coarse::{correlate, dual_softmax, match_coarse, mnn_select, MatchMode, ScoreMatrix};
use semidense_tensor::counters::{self, Kernel};
use semidense_tensor::{softmax, Tensor};

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// All `(i, j)` that are simultaneously the first maximum of their row and
/// of their column, by exhaustive comparison.
fn brute_mnn(m: &Tensor<f64>, tau: f64) -> BTreeSet<(usize, usize)> {
    let (n, k) = (m.shape()[0], m.shape()[1]);
    let mut out = BTreeSet::new();
    for i in 0..n {
        for j in 0..k {
            let v = m.at(&[i, j]);
            let row_best = (0..k).all(|jj| m.at(&[i, jj]) < v || (m.at(&[i, jj]) == v && jj >= j));
            let col_best = (0..n).all(|ii| m.at(&[ii, j]) < v || (m.at(&[ii, j]) == v && ii >= i));
            if row_best && col_best && v >= tau {
                out.insert((i, j));
            }
        }
    }
    out
}

/// Rescales every cell's feature vector to unit length.
fn unit_cells(f: &Tensor<f64>) -> Tensor<f64> {
    let (c, h, w) = f.dims3().unwrap();
    let norm: Vec<f64> = (0..h * w).map(|p| (0..c).map(|k| f.at(&[k, p / w, p % w]).powi(2)).sum::<f64>().sqrt()).collect();
    Tensor::from_fn([c, h, w], |i| f.at(&i) / norm[i[1] * w + i[2]])
}

fn pairs(m: &[semidense::coarse::CoarseMatch]) -> BTreeSet<(usize, usize)> {
    m.iter().map(|c| (c.i, c.j)).collect()
}

#[test]
fn orthonormal_self_correlation_is_scaled_identity() {
    // Four cells with the standard basis as features.
    let f = Tensor::from_fn([4, 2, 2], |i| if i[0] == i[1] * 2 + i[2] { 1.0 } else { 0.0 });
    let s = correlate(&f, &f, 10.0).unwrap().s;
    assert_eq!(s, Tensor::from_fn([4, 4], |i| if i[0] == i[1] { 10.0 } else { 0.0 }));
}

#[test]
fn single_cell_correlation() {
    let a = Tensor::new([3, 1, 1], vec![1.0, 2.0, -1.0]).unwrap();
    let b = Tensor::new([3, 1, 1], vec![0.5, 0.25, 2.0]).unwrap();
    let s = correlate(&a, &b, 4.0).unwrap().s;
    assert_eq!(s.shape(), &[1, 1]);
    assert_eq!(s.data()[0], 4.0 * (0.5 + 0.5 - 2.0));
    assert!(correlate(&a, &Tensor::zeros([2, 1, 1]), 1.0).is_err());
}

#[test]
fn mnn_matches_brute_force_on_1000_instances() {
    for seed in 0..1000 {
        let m = random(&[20, 30], seed);
        let tau = if seed % 2 == 0 { f64::NEG_INFINITY } else { 0.5 };
        assert_eq!(pairs(&mnn_select(&m, tau).unwrap()), brute_mnn(&m, tau), "seed {seed}");
    }
}

#[test]
fn mnn_handles_ties_like_the_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let m = Tensor::from_fn([5, 6], |_| rng.random_range(0..3) as f64);
        assert_eq!(pairs(&mnn_select(&m, 0.0).unwrap()), brute_mnn(&m, 0.0));
    }
}

#[test]
fn diagonal_dominant_selects_the_diagonal() {
    let m = Tensor::from_fn([6, 6], |i| if i[0] == i[1] { 0.9 } else { 0.01 * (i[0] + i[1]) as f64 });
    assert_eq!(pairs(&mnn_select(&m, 0.0).unwrap()), (0..6).map(|i| (i, i)).collect());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn correlation_matches_double_loop(c in 1usize..6, ha in 1usize..4, wa in 1usize..4, hb in 1usize..4, wb in 1usize..4, t in 0.1f64..20.0, seed: u64) {
        let a = random(&[c, ha, wa], seed);
        let b = random(&[c, hb, wb], seed ^ 1);
        let s = correlate(&a, &b, t).unwrap().s;
        for i in 0..ha * wa {
            for j in 0..hb * wb {
                let d: f64 = (0..c).map(|k| a.at(&[k, i / wa, i % wa]) * b.at(&[k, j / wb, j % wb])).sum();
                prop_assert!((s.at(&[i, j]) - t * d).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn dual_softmax_bounds(n in 1usize..8, k in 1usize..8, scale in 0.1f64..30.0, seed: u64) {
        let s = random(&[n, k], seed).map(|v| v * scale);
        let rows = softmax(&s, 1).unwrap();
        let cols = softmax(&s, 0).unwrap();
        let p = dual_softmax(ScoreMatrix { s, p: None }).unwrap().p.unwrap();
        for i in 0..n {
            let rs: f64 = rows.row(i).iter().sum();
            prop_assert!((rs - 1.0).abs() < 1e-6);
            for j in 0..k {
                let v = p.at(&[i, j]);
                prop_assert!((0.0..=1.0).contains(&v));
                prop_assert!(v <= rows.at(&[i, j]).min(cols.at(&[i, j])) + 1e-15);
                prop_assert!((v - rows.at(&[i, j]) * cols.at(&[i, j])).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn mnn_invariant_under_increasing_maps(n in 1usize..10, k in 1usize..10, a in 0.1f64..5.0, b in -3.0f64..3.0, seed: u64) {
        let m = random(&[n, k], seed);
        let base = pairs(&mnn_select(&m, f64::NEG_INFINITY).unwrap());
        for f in [|v: f64| v.exp(), |v: f64| v * v * v, |v: f64| (v + 2.0).ln()] {
            prop_assert_eq!(&pairs(&mnn_select(&m.map(f), f64::NEG_INFINITY).unwrap()), &base);
        }
        prop_assert_eq!(&pairs(&mnn_select(&m.map(|v| a * v + b), f64::NEG_INFINITY).unwrap()), &base);
    }

    #[test]
    fn mnn_commutes_with_transpose(n in 1usize..10, k in 1usize..10, seed: u64) {
        let m = random(&[n, k], seed);
        let fwd = pairs(&mnn_select(&m, f64::NEG_INFINITY).unwrap());
        let back: BTreeSet<_> = pairs(&mnn_select(&m.transpose2().unwrap(), f64::NEG_INFINITY).unwrap()).into_iter().map(|(i, j)| (j, i)).collect();
        prop_assert_eq!(fwd, back);
    }

    #[test]
    fn mnn_is_injective(n in 1usize..12, k in 1usize..12, seed: u64) {
        let m = random(&[n, k], seed);
        let got = mnn_select(&m, f64::NEG_INFINITY).unwrap();
        let is: BTreeSet<_> = got.iter().map(|c| c.i).collect();
        let js: BTreeSet<_> = got.iter().map(|c| c.j).collect();
        prop_assert_eq!(is.len(), got.len());
        prop_assert_eq!(js.len(), got.len());
    }
}

#[test]
fn self_matching_gives_the_diagonal_in_both_modes() {
    let f = unit_cells(&random(&[32, 6, 5], 4));
    for mode in [MatchMode::Full, MatchMode::Optimized] {
        let got = pairs(&match_coarse(&f, &f, mode, 0.2, 10.0).unwrap());
        assert_eq!(got, (0..30).map(|i| (i, i)).collect(), "{mode}");
    }
}

#[test]
fn optimized_mode_skips_dual_softmax() {
    let a = random(&[8, 4, 4], 5);
    let b = random(&[8, 4, 4], 6);
    counters::reset();
    match_coarse(&a, &b, MatchMode::Optimized, 0.2, 10.0).unwrap();
    assert_eq!(counters::get(Kernel::DualSoftmax), 0);
    assert_eq!(counters::get(Kernel::Softmax), 0);
    match_coarse(&a, &b, MatchMode::Full, 0.2, 10.0).unwrap();
    assert_eq!(counters::get(Kernel::DualSoftmax), 1);
}

#[test]
fn optimized_confidences_are_raw_scores() {
    let a = random(&[8, 3, 3], 7);
    let b = random(&[8, 3, 3], 8);
    let s = correlate(&a, &b, 10.0).unwrap().s;
    for m in match_coarse(&a, &b, MatchMode::Optimized, 0.2, 10.0).unwrap() {
        assert_eq!(m.confidence, s.at(&[m.i, m.j]) as f32);
    }
}

/// B is a shuffled, noisy copy of A; both modes should largely agree.
#[test]
fn modes_agree_on_discriminative_features() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut inter, mut union) = (0usize, 0usize);
    for t in 0..100 {
        let c = 32;
        let a = random(&[c, 8, 8], 100 + t);
        let mut perm: Vec<usize> = (0..64).collect();
        perm.shuffle(&mut rng);
        let noise = random(&[c, 8, 8], 1000 + t);
        let b = Tensor::from_fn([c, 8, 8], |i| {
            let src = perm[i[1] * 8 + i[2]];
            a.at(&[i[0], src / 8, src % 8]) + 0.3 * noise.at(&i)
        });
        let (a, b) = (unit_cells(&a), unit_cells(&b));
        let full = pairs(&match_coarse(&a, &b, MatchMode::Full, 0.2, 10.0).unwrap());
        let opt = pairs(&match_coarse(&a, &b, MatchMode::Optimized, 0.2, 10.0).unwrap());
        inter += full.intersection(&opt).count();
        union += full.union(&opt).count();
    }
    let overlap = inter as f64 / union as f64;
    assert!(overlap >= 0.9, "overlap {overlap}");
}
