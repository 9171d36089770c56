use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semidense::coarse::CoarseMatch;
use semidense::config::ModelConfig;
use semidense::fine::{
    crop_patches, expectation_from_scores, fuse_fine_features, local_scores, patch_origin, refine, stage1_from_scores, stage1_mnn,
    stage2_expectation, FinePatchPair, WINDOW,
};
use semidense::model::init_params;
use semidense::params::Params;
use semidense_tensor::Tensor;

fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-scale..scale))
}

fn fusion_params(seed: u64) -> Params<f64> {
    let mut p = init_params(&ModelConfig::toy(), seed).cast::<f64>();
    for name in ["fine.conv_quarter.bias", "fine.conv_half.bias"] {
        let n = p.get(name).unwrap().numel();
        p.insert(name, random(&[n], seed ^ 99, 0.5));
    }
    p
}

fn pair_from(pa: Tensor<f64>, pb: Tensor<f64>) -> FinePatchPair<f64> {
    let w = pa.shape()[1];
    FinePatchPair { patch_a: pa, patch_b: pb, origin_a: (0, 0), origin_b: (0, 0), valid_a: vec![true; w * w], valid_b: vec![true; w * w], padded: false }
}

/// Mutual pairs by exhaustive search over `S_l`, then the best of them.
fn brute_stage1(pair: &FinePatchPair<f64>) -> (usize, usize) {
    let (d, w, _) = pair.patch_a.dims3().unwrap();
    let n = w * w;
    let score = |a: usize, b: usize| -> f64 {
        (0..d).map(|c| pair.patch_a.at(&[c, a / w, a % w]) * pair.patch_b.at(&[c, b / w, b % w])).sum::<f64>() / (d as f64).sqrt()
    };
    let mut best: Option<(usize, usize, f64)> = None;
    for a in 0..n {
        for b in 0..n {
            let v = score(a, b);
            let mutual = (0..n).all(|bb| score(a, bb) <= v) && (0..n).all(|aa| score(aa, b) <= v);
            if mutual && best.is_none_or(|(_, _, s)| v > s) {
                best = Some((a, b, v));
            }
        }
    }
    let (a, b, _) = best.expect("the global maximum is always mutual");
    (a, b)
}

#[test]
fn fused_map_is_eight_times_the_coarse_grid() {
    let p = fusion_params(1);
    let out = fuse_fine_features(&p, &random(&[32, 3, 5], 2, 1.0), &random(&[16, 6, 10], 3, 1.0), &random(&[8, 12, 20], 4, 1.0)).unwrap();
    assert_eq!(out.shape(), &[16, 24, 40]);
    assert!(fuse_fine_features(&p, &random(&[32, 3, 5], 2, 1.0), &random(&[16, 6, 8], 3, 1.0), &random(&[8, 12, 20], 4, 1.0)).is_err());
}

#[test]
fn zero_inputs_give_bias_only_output() {
    let p = fusion_params(5);
    let out = fuse_fine_features(&p, &Tensor::zeros([32, 4, 4]), &Tensor::zeros([16, 8, 8]), &Tensor::zeros([8, 16, 16])).unwrap();
    // The last 3x3 convolution sees zero padding at the half-resolution
    // border, which upsamples to the outer 4 pixels.
    for c in 0..16 {
        let v0 = out.at(&[c, 16, 16]);
        for y in 4..28 {
            for x in 4..28 {
                assert!((out.at(&[c, y, x]) - v0).abs() < 1e-12);
            }
        }
    }
}

/// Changing one coarse cell `c` can only move fine pixels in `[8c - 13, 8c + 20]`
/// along each axis: two 3x3 convolutions and three bilinear doublings.
#[test]
fn coarse_perturbation_stays_in_receptive_field() {
    let p = fusion_params(6);
    let coarse = random(&[32, 6, 6], 7, 1.0);
    let q = random(&[16, 12, 12], 8, 1.0);
    let h = random(&[8, 24, 24], 9, 1.0);
    let base = fuse_fine_features(&p, &coarse, &q, &h).unwrap();
    for (cy, cx) in [(2usize, 3usize), (0, 0), (5, 1)] {
        let mut pert = coarse.clone();
        for ch in 0..32 {
            pert.set(&[ch, cy, cx], pert.at(&[ch, cy, cx]) + 1.0);
        }
        let out = fuse_fine_features(&p, &pert, &q, &h).unwrap();
        let inside = |c: usize, v: usize| (v as i64) >= 8 * c as i64 - 13 && (v as i64) <= 8 * c as i64 + 20;
        let mut changed = 0;
        for ch in 0..16 {
            for y in 0..48 {
                for x in 0..48 {
                    if out.at(&[ch, y, x]) != base.at(&[ch, y, x]) {
                        changed += 1;
                        assert!(inside(cy, y) && inside(cx, x), "pixel ({x}, {y}) moved for cell ({cx}, {cy})");
                    }
                }
            }
        }
        assert!(changed > 0);
    }
}

#[test]
fn patch_origins_and_padding() {
    let fine = random(&[4, 32, 40], 10, 1.0);
    let m = |i, j| CoarseMatch { i, j, confidence: 1.0 };
    let pairs = crop_patches(&fine, &fine, &[m(0, 0), m(5 * 2 + 3, 9)], 8).unwrap();
    assert_eq!(pairs[0].origin_a, (0, 0));
    assert!(!pairs[0].padded);
    assert_eq!(pairs[1].origin_a, (8 * 3 + 4 - 4, 8 * 2 + 4 - 4));
    assert_eq!(pairs[1].origin_b, (8 * 4, 8));
    assert_eq!(patch_origin(7, 5, 8), (16, 8));
    // A wider patch at the corner reaches outside the image and is zero padded.
    let wide = crop_patches(&fine, &fine, &[m(0, 0)], 12).unwrap();
    assert_eq!(wide[0].origin_a, (-2, -2));
    assert!(wide[0].padded);
    assert!(!wide[0].valid_a[0] && wide[0].valid_a[2 * 12 + 2]);
    assert_eq!(wide[0].patch_a.at(&[1, 0, 5]), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn patches_equal_direct_slices(gh in 1usize..5, gw in 1usize..5, w in prop::sample::select(vec![2usize, 4, 8, 10]), cell in 0usize..25, seed: u64) {
        let fine = random(&[3, 8 * gh, 8 * gw], seed, 1.0);
        let i = cell % (gh * gw);
        let pairs = crop_patches(&fine, &fine, &[CoarseMatch { i, j: 0, confidence: 0.0 }], w).unwrap();
        let (ox, oy) = pairs[0].origin_a;
        for c in 0..3 {
            for py in 0..w {
                for px in 0..w {
                    let (x, y) = (ox + px as i64, oy + py as i64);
                    let want = if x >= 0 && y >= 0 && (x as usize) < 8 * gw && (y as usize) < 8 * gh { fine.at(&[c, y as usize, x as usize]) } else { 0.0 };
                    prop_assert_eq!(pairs[0].patch_a.at(&[c, py, px]), want);
                }
            }
        }
    }

    #[test]
    fn stage1_invariant_under_increasing_maps(seed: u64) {
        let s = random(&[16, 16], seed, 3.0);
        let r0 = stage1_from_scores(&s, &[true; 16], &[true; 16]).unwrap().unwrap();
        let r1 = stage1_from_scores(&s.map(|v| (v * 0.7).exp() - 4.0), &[true; 16], &[true; 16]).unwrap().unwrap();
        prop_assert_eq!((r0.a, r0.b), (r1.a, r1.b));
    }

    #[test]
    fn stage1_mirrors_with_swapped_patches(seed: u64) {
        let pa = random(&[4, 4, 4], seed, 1.0);
        let pb = random(&[4, 4, 4], seed ^ 5, 1.0);
        let (a, b, _) = stage1_mnn(&pair_from(pa.clone(), pb.clone())).unwrap().unwrap();
        let (b2, a2, _) = stage1_mnn(&pair_from(pb, pa)).unwrap().unwrap();
        prop_assert_eq!((a, b), (a2, b2));
    }

    #[test]
    fn stage2_matches_f64_reference(seed: u64, scale in 0.1f64..10.0) {
        let feat = random(&[16], seed, scale);
        let win = random(&[16, 3, 3], seed ^ 7, scale);
        let (dx, dy) = stage2_expectation(feat.data(), &win, &[true; 9]).unwrap().unwrap();
        let s: Vec<f64> = (0..9).map(|k| (0..16).map(|c| feat.data()[c] * win.at(&[c, k / 3, k % 3])).sum::<f64>() / 4.0).collect();
        let z: f64 = s.iter().map(|v| v.exp()).sum();
        let ex: f64 = (0..9).map(|k| s[k].exp() / z * WINDOW[k].0 as f64).sum();
        let ey: f64 = (0..9).map(|k| s[k].exp() / z * WINDOW[k].1 as f64).sum();
        prop_assert!((dx - ex).abs() < 1e-6 && (dy - ey).abs() < 1e-6);
    }
}

#[test]
fn stage1_matches_brute_force_on_1000_instances() {
    for seed in 0..1000 {
        let w = [4, 6, 8][seed as usize % 3];
        let pair = pair_from(random(&[8, w, w], seed, 1.0), random(&[8, w, w], seed ^ 0xabc, 1.0));
        let s = local_scores(&pair).unwrap();
        let r = stage1_from_scores(&s, &pair.valid_a, &pair.valid_b).unwrap().unwrap();
        assert_eq!((r.a, r.b), brute_stage1(&pair), "seed {seed}");
    }
}

#[test]
fn stage1_one_hot_scores() {
    for (a, b) in [(0, 0), (5, 63), (40, 17)] {
        let mut s = Tensor::<f64>::zeros([64, 64]);
        s.set(&[a, b], 1.0);
        let r = stage1_from_scores(&s, &[true; 64], &[true; 64]).unwrap().unwrap();
        assert_eq!((r.a, r.b), (a, b));
    }
}

#[test]
fn identical_orthonormal_patches_pick_the_strongest_pixel() {
    // 16 pixels, each a scaled basis vector; pixel 6 has the largest norm.
    let pa = Tensor::from_fn([16, 4, 4], |i| if i[0] == i[1] * 4 + i[2] { if i[0] == 6 { 2.0 } else { 1.0 } } else { 0.0 });
    let (a, b, _) = stage1_mnn(&pair_from(pa.clone(), pa)).unwrap().unwrap();
    assert_eq!((a, b), ((2, 1), (2, 1)));
}

#[test]
fn stage2_offsets_stay_in_the_window() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10_000 {
        let scale = 10f64.powf(rng.random_range(-3.0..4.0));
        let s: [f64; 9] = std::array::from_fn(|_| rng.random_range(-scale..scale));
        let valid: [bool; 9] = std::array::from_fn(|_| rng.random_bool(0.8));
        if let Some((dx, dy)) = expectation_from_scores(&s, &valid) {
            assert!(dx.abs() <= 1.0 && dy.abs() <= 1.0);
        } else {
            assert!(valid.iter().all(|v| !v));
        }
    }
}

#[test]
fn stage2_closed_forms() {
    let (dx, dy) = expectation_from_scores(&[2.0; 9], &[true; 9]).unwrap();
    assert_eq!((dx, dy), (0.0, 0.0));
    for (k, &(u, v)) in WINDOW.iter().enumerate() {
        let mut s = [0.0; 9];
        s[k] = 1e3;
        assert_eq!(expectation_from_scores(&s, &[true; 9]).unwrap(), (u as f64, v as f64));
    }
    // Masked cells carry no weight.
    let mut valid = [false; 9];
    valid[4] = true;
    valid[5] = true;
    let (dx, dy) = expectation_from_scores(&[0.0; 9], &valid).unwrap();
    assert!((dx - 0.5).abs() < 1e-15 && dy == 0.0);
}

#[test]
fn self_pair_refines_to_the_same_pixel() {
    let fine = random(&[16, 32, 40], 12, 3.0);
    let matches: Vec<_> = (0..20).map(|i| CoarseMatch { i, j: i, confidence: 1.0 }).collect();
    let out = refine(&matches, &fine, &fine, 8).unwrap();
    assert_eq!(out.len(), matches.len());
    let mean: f64 = out.iter().map(|m| ((m.pt_b.0 - m.pt_a.0).powi(2) + (m.pt_b.1 - m.pt_a.1).powi(2)).sqrt() as f64).sum::<f64>() / out.len() as f64;
    assert!(mean < 0.01, "mean offset {mean}");
}

#[test]
fn refined_matches_stay_near_their_cells() {
    let fa = random(&[16, 32, 40], 13, 1.0);
    let fb = random(&[16, 32, 40], 14, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let matches: Vec<_> = (0..50).map(|_| CoarseMatch { i: rng.random_range(0..20), j: rng.random_range(0..20), confidence: 0.5 }).collect();
    let out = refine(&matches, &fa, &fb, 8).unwrap();
    assert!(out.len() <= matches.len());
    for m in &out {
        let c = matches[m.coarse];
        let centre = (8.0 * (c.j % 5) as f32 + 4.0, 8.0 * (c.j / 5) as f32 + 4.0);
        let d = ((m.pt_b.0 - centre.0).powi(2) + (m.pt_b.1 - centre.1).powi(2)).sqrt();
        assert!(d <= 4.0 * 2f32.sqrt() + 1.0);
        assert!((m.pt_b.0 - m.stage1_b.0).abs() <= 1.0 && (m.pt_b.1 - m.stage1_b.1).abs() <= 1.0);
        assert!(m.pt_b.0 >= 0.0 && m.pt_b.1 >= 0.0 && m.pt_b.0 <= 39.0 && m.pt_b.1 <= 31.0);
    }
}
