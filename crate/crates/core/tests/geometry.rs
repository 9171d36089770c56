use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semidense::geometry::{apply_homography, corner_error, dlt_homography, image_corners, ransac_homography, symmetric_transfer_error, Homography, Point, RansacParams};
use semidense::synth::random_homography;

fn by_hand(h: &[[f64; 3]; 3], p: Point) -> Point {
    let w = h[2][0] * p.0 + h[2][1] * p.1 + h[2][2];
    ((h[0][0] * p.0 + h[0][1] * p.1 + h[0][2]) / w, (h[1][0] * p.0 + h[1][1] * p.1 + h[1][2]) / w)
}

fn close(a: Point, b: Point, tol: f64) -> bool {
    (a.0 - b.0).abs() <= tol && (a.1 - b.1).abs() <= tol
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn apply_matches_hand_evaluation(seed: u64, x in -50.0f64..300.0, y in -50.0f64..300.0) {
        let h = random_homography(&mut ChaCha8Rng::seed_from_u64(seed), 256);
        let got = h.apply((x, y)).unwrap();
        prop_assert!(close(got, by_hand(&h.rows(), (x, y)), 1e-9));
    }

    #[test]
    fn inverse_round_trips(seed: u64, x in 0.0f64..256.0, y in 0.0f64..256.0) {
        let h = random_homography(&mut ChaCha8Rng::seed_from_u64(seed), 256);
        let back = h.inverse().unwrap().apply(h.apply((x, y)).unwrap()).unwrap();
        prop_assert!(close(back, (x, y), 1e-9));
        prop_assert!(symmetric_transfer_error(&h, &h.inverse().unwrap(), (x, y), h.apply((x, y)).unwrap()) < 1e-9);
    }

    #[test]
    fn dlt_recovers_from_exact_correspondences(seed: u64, n in 4usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = random_homography(&mut rng, 256);
        let src: Vec<Point> = (0..n).map(|_| (rng.random_range(0.0..256.0), rng.random_range(0.0..256.0))).collect();
        let dst: Vec<Point> = src.iter().map(|&p| h.apply(p).unwrap()).collect();
        let est = dlt_homography(&src, &dst).unwrap();
        prop_assert!(corner_error(&est, &h, 256, 256) < 1e-6);
    }

    #[test]
    fn corner_error_of_a_translation(tx in -20.0f64..20.0, ty in -20.0f64..20.0) {
        let e = corner_error(&Homography::translation(tx, ty), &Homography::identity(), 100, 50);
        prop_assert!((e - (tx * tx + ty * ty).sqrt()).abs() < 1e-9);
    }
}

#[test]
fn identity_and_translation() {
    let pts = [(0.0, 0.0), (3.5, -2.0), (100.0, 7.25)];
    for (p, q) in pts.iter().zip(apply_homography(&Homography::identity(), &pts)) {
        assert_eq!(Some(*p), q);
    }
    for (p, q) in pts.iter().zip(apply_homography(&Homography::translation(5.0, -3.0), &pts)) {
        assert_eq!(Some((p.0 + 5.0, p.1 - 3.0)), q);
    }
    let horizon = Homography::from_rows([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.01, 0.0, 1.0]]).unwrap();
    assert_eq!(horizon.apply((-100.0, 4.0)), None);
    assert_eq!(image_corners(10, 5), [(0.0, 0.0), (9.0, 0.0), (9.0, 4.0), (0.0, 4.0)]);
}

#[test]
fn dlt_unit_square_round_trip() {
    let square = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
    let quad = [(10.0, 12.0), (40.0, 9.0), (45.0, 50.0), (7.0, 38.0)];
    let h = dlt_homography(&square, &quad).unwrap();
    for (p, q) in square.iter().zip(&quad) {
        assert!(close(h.apply(*p).unwrap(), *q, 1e-6));
    }
    let id = dlt_homography(&quad, &quad).unwrap();
    for p in [(0.0, 0.0), (20.0, 30.0), (-5.0, 100.0)] {
        assert!(close(id.apply(p).unwrap(), p, 1e-6));
    }
}

#[test]
fn dlt_rejects_degenerate_input() {
    let line = [(0.0, 0.0), (1.0, 1.0), (2.0, 2.0), (0.0, 5.0)];
    let ok = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
    assert!(dlt_homography(&line, &ok).is_err());
    assert!(dlt_homography(&ok, &line).is_err());
    assert!(dlt_homography(&ok[..3], &ok[..3]).is_err());
    assert!(dlt_homography(&ok, &ok[..3]).is_err());
    let all_on_line: Vec<Point> = (0..10).map(|i| (i as f64, 2.0 * i as f64)).collect();
    assert!(dlt_homography(&all_on_line, &all_on_line).is_err());
    assert!(dlt_homography(&[(f64::NAN, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)], &ok).is_err());
}

/// `n` correspondences under `h`: the first `n - outliers` within `noise` px,
/// the rest uniform over the image.
fn corrupted(h: &Homography, n: usize, outliers: usize, noise: f64, rng: &mut ChaCha8Rng) -> (Vec<Point>, Vec<Point>) {
    let src: Vec<Point> = (0..n).map(|_| (rng.random_range(0.0..256.0), rng.random_range(0.0..256.0))).collect();
    let dst = src
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            if i < n - outliers {
                let q = h.apply(p).unwrap();
                (q.0 + noise * rng.random_range(-1.0..1.0), q.1 + noise * rng.random_range(-1.0..1.0))
            } else {
                (rng.random_range(0.0..256.0), rng.random_range(0.0..256.0))
            }
        })
        .collect();
    (src, dst)
}

#[test]
fn ransac_noise_free_keeps_every_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10 {
        let h = random_homography(&mut rng, 256);
        let (src, dst) = corrupted(&h, 60, 0, 0.0, &mut rng);
        let r = ransac_homography(&src, &dst, &RansacParams::default()).unwrap();
        assert_eq!(r.n_inliers(), 60);
        assert!(corner_error(&r.h, &h, 256, 256) < 1e-6);
    }
}

#[test]
fn ransac_survives_half_outliers() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let h = random_homography(&mut rng, 256);
        let (src, dst) = corrupted(&h, 200, 100, 0.5, &mut rng);
        let r = ransac_homography(&src, &dst, &RansacParams { seed, ..RansacParams::default() }).unwrap();
        let e = corner_error(&r.h, &h, 256, 256);
        assert!(e < 1.0, "seed {seed}: corner error {e}");
        assert!(r.inliers[..100].iter().filter(|b| **b).count() >= 95);
    }
}

#[test]
fn ransac_input_checks_and_determinism() {
    let pts = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0)];
    assert!(ransac_homography(&pts, &pts, &RansacParams::default()).is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let h = random_homography(&mut rng, 256);
    let (src, dst) = corrupted(&h, 100, 40, 1.0, &mut rng);
    let p = RansacParams { seed: 5, ..RansacParams::default() };
    assert_eq!(ransac_homography(&src, &dst, &p).unwrap(), ransac_homography(&src, &dst, &p).unwrap());
    // Collinear points admit no homography.
    let junk: Vec<Point> = (0..8).map(|i| (i as f64, 0.0)).collect();
    assert!(ransac_homography(&junk, &junk, &p).is_err());
}
