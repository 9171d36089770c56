use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semidense_tensor::{bilinear_upsample, conv2d, counters, matmul, maxpool2d, softmax, Graph, Kernel, Tensor};

fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-scale..scale))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn softmax_is_a_distribution(rows in 1usize..6, cols in 1usize..9, scale in 0.1f64..200.0, seed: u64) {
        let x = random(&[rows, cols], seed, scale);
        let y = softmax(&x, 1).unwrap();
        for r in 0..rows {
            let s: f64 = y.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(y.row(r).iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn softmax_ignores_constant_shift(cols in 1usize..9, shift in -50.0f64..50.0, seed: u64) {
        let x = random(&[1, cols], seed, 5.0);
        let y0 = softmax(&x, 1).unwrap();
        let y1 = softmax(&x.map(|v| v + shift), 1).unwrap();
        prop_assert!(y0.max_abs_diff(&y1) < 1e-12);
    }

    #[test]
    fn matmul_transpose_identity(n in 1usize..6, k in 1usize..6, m in 1usize..6, seed: u64) {
        let a = random(&[n, k], seed, 1.0);
        let b = random(&[k, m], seed ^ 1, 1.0);
        let ab = matmul(&a, &b, false, false).unwrap();
        let bt_at = matmul(&b, &a, true, true).unwrap();
        prop_assert!(ab.transpose2().unwrap().max_abs_diff(&bt_at) < 1e-12);
    }

    #[test]
    fn conv_is_linear_in_input(c in 1usize..3, h in 3usize..7, w in 3usize..7, alpha in -3.0f64..3.0, seed: u64) {
        let x1 = random(&[c, h, w], seed, 1.0);
        let x2 = random(&[c, h, w], seed ^ 1, 1.0);
        let k = random(&[2, c, 3, 3], seed ^ 2, 1.0);
        let mix = x1.zip_map(&x2, |a, b| alpha * a + b).unwrap();
        let lhs = conv2d(&mix, &k, None, 1, 1).unwrap();
        let y1 = conv2d(&x1, &k, None, 1, 1).unwrap();
        let y2 = conv2d(&x2, &k, None, 1, 1).unwrap();
        let rhs = y1.zip_map(&y2, |a, b| alpha * a + b).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-10);
    }

    #[test]
    fn maxpool_output_is_an_input_value(h in 2usize..8, w in 2usize..8, k in 1usize..3, seed: u64) {
        prop_assume!(h >= k && w >= k);
        let x = random(&[1, h, w], seed, 1.0);
        let (y, arg) = maxpool2d(&x, k, k).unwrap();
        for (o, &src) in arg.iter().enumerate() {
            prop_assert_eq!(y.data()[o], x.data()[src]);
        }
    }

    #[test]
    fn upsample_stays_within_input_range(h in 1usize..6, w in 1usize..6, f in 1usize..4, seed: u64) {
        let x = random(&[2, h, w], seed, 1.0);
        let y = bilinear_upsample(&x, f).unwrap();
        let (lo, hi) = x.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), &v| (l.min(v), u.max(v)));
        prop_assert!(y.data().iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
    }

    /// The tape forward equals the free-function forward bit for bit.
    #[test]
    fn graph_forward_matches_kernels(n in 1usize..5, d in 1usize..5, seed: u64) {
        let a = random(&[n, d], seed, 2.0);
        let b = random(&[d, n], seed ^ 3, 2.0);
        let mut g = Graph::new();
        let va = g.param(a.clone());
        let vb = g.constant(b.clone());
        let m = g.matmul(va, vb, false, false).unwrap();
        let s = g.softmax(m, 1).unwrap();
        let direct = softmax(&matmul(&a, &b, false, false).unwrap(), 1).unwrap();
        prop_assert_eq!(g.value(s), &direct);
    }
}

#[test]
fn counters_track_attention_entries() {
    counters::reset();
    let mut g = Graph::new();
    let q = g.constant(Tensor::<f64>::zeros([2, 3, 4]));
    let k = g.constant(Tensor::<f64>::zeros([2, 5, 4]));
    let v = g.constant(Tensor::<f64>::zeros([2, 5, 1]));
    g.attention(q, k, v, None).unwrap();
    assert_eq!(counters::get(Kernel::AttentionScores), 2 * 3 * 5);
}
