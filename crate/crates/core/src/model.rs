//! The full matcher: padding, deploy backbone, transformer, coarse matching
//! and two-stage refinement.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use semidense_tensor::Tensor;

use crate::backbone::{self, forward_deploy};
use crate::coarse::{map_tokens, match_tokens, CoarseMatch, MatchMode};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::fine::{self, fuse_fine_features, refine_within, Bounds, FineMatch, COARSE_STRIDE};
use crate::io::WeightContainer;
use crate::params::Params;
use crate::transform;

/// Freshly initialised training parameters for `cfg`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Params<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Params::new();
    backbone::init_params(&cfg.backbone, &mut rng, &mut p);
    transform::init_params(cfg, &mut rng, &mut p);
    fine::init_params(cfg, &mut rng, &mut p);
    p
}

/// Zero-pads a `[1, H, W]` image on the bottom and right to multiples of `m`.
pub fn pad_image(img: &Tensor<f32>, m: usize) -> Result<Tensor<f32>> {
    let (c, h, w) = img.dims3()?;
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (ph, pw) == (h, w) {
        return Ok(img.clone());
    }
    Ok(Tensor::from_fn([c, ph, pw], |i| if i[1] < h && i[2] < w { img.at(&[i[0], i[1], i[2]]) } else { 0.0 }))
}

/// Cells of a padded grid whose centre lies inside the original image.
pub fn valid_cells(grid: (usize, usize), bounds: Bounds) -> Vec<usize> {
    let s = COARSE_STRIDE;
    let mut out = Vec::new();
    for cy in 0..grid.1 {
        for cx in 0..grid.0 {
            if s * cx + s / 2 < bounds.0 && s * cy + s / 2 < bounds.1 {
                out.push(cy * grid.0 + cx);
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageTimings {
    pub backbone: Duration,
    pub transform: Duration,
    pub coarse: Duration,
    pub fusion: Duration,
    pub refine: Duration,
}

impl StageTimings {
    pub const NAMES: [&'static str; 5] = ["backbone", "transform", "coarse_matching", "fine_fusion", "refinement"];

    pub fn as_array(&self) -> [Duration; 5] {
        [self.backbone, self.transform, self.coarse, self.fusion, self.refine]
    }

    pub fn total(&self) -> Duration {
        self.as_array().iter().sum()
    }
}

#[derive(Clone, Debug)]
pub struct MatchOutput {
    /// Coarse matches, indexed on the padded grids.
    pub coarse: Vec<CoarseMatch>,
    pub matches: Vec<FineMatch>,
    pub timings: StageTimings,
}

/// Inference-ready model: the backbone is held in fused form.
#[derive(Clone, Debug)]
pub struct Matcher {
    cfg: ModelConfig,
    params: Params<f32>,
}

impl Matcher {
    /// Checks every expected tensor name and shape, then fuses the backbone.
    pub fn new(cfg: ModelConfig, params: &Params<f32>) -> Result<Self> {
        cfg.validate()?;
        for (name, t) in init_params(&cfg, 0).iter() {
            params.require(name, t.shape())?;
        }
        let params = backbone::fuse_params(&cfg.backbone, params)?;
        Ok(Matcher { cfg, params })
    }

    /// Reads the model configuration from the container metadata.
    pub fn from_container(wc: &WeightContainer) -> Result<Self> {
        let cfg = ModelConfig::from_pairs(&wc.meta)?;
        Matcher::new(cfg, &wc.params)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn run(&self, a: &Tensor<f32>, b: &Tensor<f32>, mode: MatchMode) -> Result<MatchOutput> {
        self.run_with_tau(a, b, mode, self.cfg.tau)
    }

    pub fn run_with_tau(&self, a: &Tensor<f32>, b: &Tensor<f32>, mode: MatchMode, tau: f32) -> Result<MatchOutput> {
        let (_, ha, wa) = a.dims3()?;
        let (_, hb, wb) = b.dims3()?;
        let (bounds_a, bounds_b) = ((wa, ha), (wb, hb));
        let cfg = &self.cfg;
        let mut t = StageTimings::default();

        let clock = Instant::now();
        let pa = forward_deploy(&cfg.backbone, &self.params, &pad_image(a, cfg.pad_multiple())?)?;
        let pb = forward_deploy(&cfg.backbone, &self.params, &pad_image(b, cfg.pad_multiple())?)?;
        t.backbone = clock.elapsed();

        let clock = Instant::now();
        let (ca, cb) = transform::transform(cfg, &self.params, &pa.coarse, &pb.coarse)?;
        t.transform = clock.elapsed();

        let clock = Instant::now();
        let coarse = self.coarse_matches(&ca, &cb, bounds_a, bounds_b, mode, tau)?;
        t.coarse = clock.elapsed();

        let clock = Instant::now();
        let fa = fuse_fine_features(&self.params, &ca, &pa.quarter, &pa.half)?;
        let fb = fuse_fine_features(&self.params, &cb, &pb.quarter, &pb.half)?;
        t.fusion = clock.elapsed();

        let clock = Instant::now();
        let matches = refine_within(&coarse, &fa, &fb, cfg.patch, bounds_a, bounds_b)?;
        t.refine = clock.elapsed();

        if matches.iter().any(|m| !(m.pt_b.0.is_finite() && m.pt_b.1.is_finite() && m.confidence.is_finite())) {
            return Err(Error::NonFinite("refined match".into()));
        }
        Ok(MatchOutput { coarse, matches, timings: t })
    }

    /// Coarse matches between transformed maps, restricted to cells inside the original images.
    pub fn coarse_matches(&self, ca: &Tensor<f32>, cb: &Tensor<f32>, bounds_a: Bounds, bounds_b: Bounds, mode: MatchMode, tau: f32) -> Result<Vec<CoarseMatch>> {
        let (c, gha, gwa) = ca.dims3()?;
        let (_, ghb, gwb) = cb.dims3()?;
        let keep_a = valid_cells((gwa, gha), bounds_a);
        let keep_b = valid_cells((gwb, ghb), bounds_b);
        let scale = 1.0 / (c as f32).sqrt();
        let select = |map: &Tensor<f32>, keep: &[usize]| -> Result<Tensor<f32>> {
            let tok = map_tokens(map)?;
            Ok(Tensor::from_fn([keep.len(), c], |i| tok.at(&[keep[i[0]], i[1]]) * scale))
        };
        let ta = select(ca, &keep_a)?;
        let tb = select(cb, &keep_b)?;
        let mut m = match_tokens(&ta, &tb, mode, tau, self.cfg.inv_temp)?;
        for x in &mut m {
            x.i = keep_a[x.i];
            x.j = keep_b[x.j];
        }
        Ok(m)
    }
}
