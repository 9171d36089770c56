use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semidense::backbone::{block_specs, forward_deploy, forward_train, fuse_params, BatchNorm, RepVggBlock};
use semidense::config::{BackboneConfig, ModelConfig};
use semidense::params::Params;
use semidense_tensor::counters::{self, Kernel};
use semidense_tensor::{Float, Tensor};

fn image<T: Float>(c: usize, h: usize, w: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([c, h, w], |_| T::lit(rng.random_range(-1.0..1.0)))
}

fn backbone_params<T: Float>(cfg: &BackboneConfig, seed: u64) -> Params<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Params::new();
    for spec in block_specs(cfg) {
        RepVggBlock::<T>::random(&mut rng, spec.in_c, spec.out_c, spec.stride).write_params(&mut p, &spec.prefix());
    }
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fusion_is_lossless_f32(in_c in 1usize..6, same in any::<bool>(), out_c in 1usize..6, stride in 1usize..3, h in 3usize..10, w in 3usize..10, seed: u64) {
        let out_c = if same { in_c } else { out_c };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let block = RepVggBlock::<f32>::random(&mut rng, in_c, out_c, stride);
        let fused = block.fuse().unwrap();
        let x = image::<f32>(in_c, h, w, seed ^ 1);
        let diff = block.forward(&x).unwrap().max_abs_diff(&fused.forward(&x).unwrap());
        prop_assert!(diff <= 1e-4, "diff {diff}");
    }

    #[test]
    fn fusion_is_lossless_f64(in_c in 1usize..6, same in any::<bool>(), out_c in 1usize..6, stride in 1usize..3, h in 3usize..10, w in 3usize..10, seed: u64) {
        let out_c = if same { in_c } else { out_c };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let block = RepVggBlock::<f64>::random(&mut rng, in_c, out_c, stride);
        let fused = block.fuse().unwrap();
        let x = image::<f64>(in_c, h, w, seed ^ 1);
        let diff = block.forward(&x).unwrap().max_abs_diff(&fused.forward(&x).unwrap());
        prop_assert!(diff <= 1e-10, "diff {diff:e}");
    }
}

#[test]
fn identity_branch_only_with_matching_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    assert!(RepVggBlock::<f32>::random(&mut rng, 4, 4, 1).identity.is_some());
    assert!(RepVggBlock::<f32>::random(&mut rng, 4, 4, 2).identity.is_none());
    assert!(RepVggBlock::<f32>::random(&mut rng, 3, 4, 1).identity.is_none());
}

#[test]
fn one_by_one_branch_lands_in_the_centre() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut b = RepVggBlock::<f64>::random(&mut rng, 2, 3, 1);
    b.conv3x3.kernel = Tensor::zeros([3, 2, 3, 3]);
    b.conv3x3.bias = Tensor::zeros([3]);
    b.conv3x3.bn = BatchNorm::identity(3);
    b.conv3x3.bn.scale = Tensor::zeros([3]);
    b.conv1x1.bias = Tensor::zeros([3]);
    // Unit batch norm: var + eps = 1.
    b.conv1x1.bn = BatchNorm::identity(3);
    b.conv1x1.bn.var = Tensor::full([3], 1.0 - 1e-5);
    let f = b.fuse().unwrap();
    for o in 0..3 {
        for i in 0..2 {
            for y in 0..3 {
                for x in 0..3 {
                    let want = if (y, x) == (1, 1) { b.conv1x1.kernel.at(&[o, i, 0, 0]) } else { 0.0 };
                    assert!((f.kernel.at(&[o, i, y, x]) - want).abs() < 1e-15);
                }
            }
        }
    }
}

#[test]
fn default_config_pyramid_shapes() {
    let cfg = BackboneConfig::default();
    let p = backbone_params::<f32>(&cfg, 0);
    let img = image::<f32>(1, 64, 64, 9);
    let pyr = forward_train(&cfg, &p, &img).unwrap();
    assert_eq!(pyr.half.shape(), &[64, 32, 32]);
    assert_eq!(pyr.quarter.shape(), &[128, 16, 16]);
    assert_eq!(pyr.coarse.shape(), &[256, 8, 8]);
}

#[test]
fn pyramid_strides_on_rectangular_input() {
    let cfg = ModelConfig::toy().backbone;
    let p = backbone_params::<f32>(&cfg, 1);
    let pyr = forward_train(&cfg, &p, &image::<f32>(1, 48, 80, 2)).unwrap();
    assert_eq!(&pyr.half.shape()[1..], &[24, 40]);
    assert_eq!(&pyr.quarter.shape()[1..], &[12, 20]);
    assert_eq!(&pyr.coarse.shape()[1..], &[6, 10]);
    assert!(forward_train(&cfg, &p, &image::<f32>(1, 20, 24, 2)).is_err());
}

/// A zero image makes every level constant away from the zero-padded border.
#[test]
fn zero_image_gives_constant_interior() {
    let cfg = ModelConfig::toy().backbone;
    let p = backbone_params::<f64>(&cfg, 4);
    let img = Tensor::<f64>::zeros([1, 256, 256]);
    let train = forward_train(&cfg, &p, &img).unwrap();
    let deploy = forward_deploy(&cfg, &fuse_params(&cfg, &p).unwrap(), &img).unwrap();
    for (t, d, margin) in [(&train.half, &deploy.half, 8), (&train.quarter, &deploy.quarter, 6), (&train.coarse, &deploy.coarse, 6)] {
        let (c, h, w) = t.dims3().unwrap();
        for ch in 0..c {
            let v0 = t.at(&[ch, h / 2, w / 2]);
            for y in margin..h - margin {
                for x in margin..w - margin {
                    assert!((t.at(&[ch, y, x]) - v0).abs() < 1e-12);
                }
            }
        }
        assert!(t.max_abs_diff(d) < 1e-10);
    }
}

#[test]
fn deploy_equals_train_toy_f32() {
    let cfg = ModelConfig::toy().backbone;
    let p = backbone_params::<f32>(&cfg, 7);
    let fused = fuse_params(&cfg, &p).unwrap();
    for seed in 0..3 {
        let img = image::<f32>(1, 64, 64, seed).map(|v| 0.5 + 0.5 * v);
        let a = forward_train(&cfg, &p, &img).unwrap();
        let b = forward_deploy(&cfg, &fused, &img).unwrap();
        assert!(a.half.max_abs_diff(&b.half) <= 1e-4);
        assert!(a.quarter.max_abs_diff(&b.quarter) <= 1e-4);
        assert!(a.coarse.max_abs_diff(&b.coarse) <= 1e-4);
    }
}

#[test]
fn deploy_runs_one_convolution_per_block() {
    let cfg = ModelConfig::toy().backbone;
    let p = backbone_params::<f32>(&cfg, 8);
    let fused = fuse_params(&cfg, &p).unwrap();
    let img = image::<f32>(1, 32, 32, 0);
    let n = block_specs(&cfg).len() as u64;
    let with_identity = block_specs(&cfg).iter().filter(|s| s.has_identity()).count();
    counters::reset();
    forward_deploy(&cfg, &fused, &img).unwrap();
    assert_eq!(counters::get(Kernel::Conv2d), n);
    counters::reset();
    forward_train(&cfg, &p, &img).unwrap();
    assert_eq!(counters::get(Kernel::Conv2d), 2 * n);
    assert!(with_identity > 0);
}

#[test]
fn deploy_is_not_slower_than_train() {
    let cfg = ModelConfig::toy().backbone;
    let p = backbone_params::<f32>(&cfg, 10);
    let fused = fuse_params(&cfg, &p).unwrap();
    let img = image::<f32>(1, 256, 256, 0);
    let time = |f: &dyn Fn()| {
        f();
        (0..3)
            .map(|_| {
                let t = std::time::Instant::now();
                f();
                t.elapsed()
            })
            .min()
            .unwrap()
    };
    let t_train = time(&|| {
        forward_train(&cfg, &p, &img).unwrap();
    });
    let t_deploy = time(&|| {
        forward_deploy(&cfg, &fused, &img).unwrap();
    });
    assert!(t_deploy <= t_train, "deploy {t_deploy:?} vs train {t_train:?}");
}

#[test]
fn fused_params_drop_branch_tensors() {
    let cfg = ModelConfig::toy().backbone;
    let p = backbone_params::<f32>(&cfg, 11);
    let fused = fuse_params(&cfg, &p).unwrap();
    assert!(fused.names().all(|n| n.contains(".fused.")));
    assert_eq!(fused.len(), 2 * block_specs(&cfg).len());
}
