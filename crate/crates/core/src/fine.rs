//! Fine feature fusion and two-stage sub-pixel refinement.
//!
//! Stage 1 correlates the `w x w` fine patches of a coarse match and keeps the
//! single best mutual pixel pair. Stage 2 correlates the A pixel's feature with
//! the 3x3 neighbourhood of the B pixel and takes the softmax expectation of
//! the offsets.

use rand::Rng;
use semidense_tensor::{matmul, Float, Tensor, Var};

use crate::coarse::CoarseMatch;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{normal, Ctx, Params};

/// Stride of the coarse grid in pixels.
pub const COARSE_STRIDE: usize = 8;

/// Valid image extent `(width, height)` in pixels.
pub type Bounds = (usize, usize);

pub fn init_params<T: Float>(cfg: &ModelConfig, rng: &mut impl Rng, params: &mut Params<T>) {
    let [_, c2, c3, c4] = cfg.backbone.widths;
    let df = cfg.d_fine;
    params.insert("fine.lat_quarter.weight", normal(rng, &[c4, c3, 1, 1], (1.0 / c3 as f64).sqrt()));
    params.insert("fine.conv_quarter.kernel", normal(rng, &[c3, c4, 3, 3], (2.0 / (9 * c4) as f64).sqrt()));
    params.insert("fine.conv_quarter.bias", Tensor::zeros([c3]));
    params.insert("fine.lat_half.weight", normal(rng, &[c3, c2, 1, 1], (1.0 / c2 as f64).sqrt()));
    params.insert("fine.conv_half.kernel", normal(rng, &[df, c3, 3, 3], (1.0 / (9 * c3) as f64).sqrt()));
    params.insert("fine.conv_half.bias", Tensor::zeros([df]));
}

/// Upsample-and-add ladder from the transformed coarse map down to full
/// resolution: `[C, h, w]` to `[d_fine, 8h, 8w]`.
pub fn fuse_fine_graph<T: Float>(ctx: &mut Ctx<'_, T>, coarse: Var, quarter: Var, half: Var) -> Result<Var> {
    let (c, q, h) = (ctx.g.shape(coarse).to_vec(), ctx.g.shape(quarter).to_vec(), ctx.g.shape(half).to_vec());
    let ok = c.len() == 3
        && q.len() == 3
        && h.len() == 3
        && q[1] == 2 * c[1]
        && q[2] == 2 * c[2]
        && h[1] == 2 * q[1]
        && h[2] == 2 * q[2];
    if !ok {
        return Err(Error::Input(format!("fine fusion: inconsistent pyramid {c:?}, {q:?}, {h:?}")));
    }
    let up = ctx.g.upsample(coarse, 2)?;
    let lq = ctx.w("fine.lat_quarter.weight")?;
    let lat = ctx.g.conv2d(quarter, lq, None, 1, 0)?;
    let x = ctx.g.add(up, lat)?;
    let k = ctx.w("fine.conv_quarter.kernel")?;
    let b = ctx.w("fine.conv_quarter.bias")?;
    let x = ctx.g.conv2d(x, k, Some(b), 1, 1)?;
    let x = ctx.g.relu(x)?;
    let up = ctx.g.upsample(x, 2)?;
    let lh = ctx.w("fine.lat_half.weight")?;
    let lat = ctx.g.conv2d(half, lh, None, 1, 0)?;
    let x = ctx.g.add(up, lat)?;
    let k = ctx.w("fine.conv_half.kernel")?;
    let b = ctx.w("fine.conv_half.bias")?;
    let x = ctx.g.conv2d(x, k, Some(b), 1, 1)?;
    Ok(ctx.g.upsample(x, 2)?)
}

pub fn fuse_fine_features<T: Float>(params: &Params<T>, coarse: &Tensor<T>, quarter: &Tensor<T>, half: &Tensor<T>) -> Result<Tensor<T>> {
    let mut ctx = Ctx::new(params, false);
    let c = ctx.constant(coarse.clone());
    let q = ctx.constant(quarter.clone());
    let h = ctx.constant(half.clone());
    let out = fuse_fine_graph(&mut ctx, c, q, h)?;
    Ok(ctx.g.value(out).clone())
}

/// Top-left pixel of the `w x w` patch centred on coarse cell `cell` of a grid `grid_w` cells wide.
pub fn patch_origin(cell: usize, grid_w: usize, w: usize) -> (i64, i64) {
    let (cx, cy) = ((cell % grid_w) as i64, (cell / grid_w) as i64);
    let s = COARSE_STRIDE as i64;
    let half = (w / 2) as i64;
    (s * cx + s / 2 - half, s * cy + s / 2 - half)
}

fn inside(x: i64, y: i64, b: Bounds) -> bool {
    x >= 0 && y >= 0 && (x as usize) < b.0 && (y as usize) < b.1
}

/// Flat indices into a `[d, H, W]` map laid out as `[w*w, d]` patch tokens;
/// `None` for pixels outside `bounds`.
pub(crate) fn patch_gather_index(map_dims: (usize, usize, usize), origin: (i64, i64), w: usize, bounds: Bounds) -> Vec<Option<usize>> {
    let (d, h, wd) = map_dims;
    let mut idx = Vec::with_capacity(w * w * d);
    for py in 0..w as i64 {
        for px in 0..w as i64 {
            let (x, y) = (origin.0 + px, origin.1 + py);
            let ok = inside(x, y, bounds);
            for c in 0..d {
                idx.push(ok.then(|| (c * h + y as usize) * wd + x as usize));
            }
        }
    }
    idx
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinePatchPair<T: Float = f32> {
    /// `[d_f, w, w]`, zero outside the image.
    pub patch_a: Tensor<T>,
    pub patch_b: Tensor<T>,
    pub origin_a: (i64, i64),
    pub origin_b: (i64, i64),
    /// Row-major in-image masks, `w * w` entries.
    pub valid_a: Vec<bool>,
    pub valid_b: Vec<bool>,
    /// True when either patch extends past its image.
    pub padded: bool,
}

fn crop<T: Float>(fine: &Tensor<T>, origin: (i64, i64), w: usize, bounds: Bounds) -> Result<(Tensor<T>, Vec<bool>)> {
    let (d, h, wd) = fine.dims3()?;
    let b = (bounds.0.min(wd), bounds.1.min(h));
    let mut patch = Tensor::zeros([d, w, w]);
    let mut valid = vec![false; w * w];
    for py in 0..w {
        for px in 0..w {
            let (x, y) = (origin.0 + px as i64, origin.1 + py as i64);
            if !inside(x, y, b) {
                continue;
            }
            valid[py * w + px] = true;
            for c in 0..d {
                patch.set(&[c, py, px], fine.at(&[c, y as usize, x as usize]));
            }
        }
    }
    Ok((patch, valid))
}

/// Patches around each coarse match, with pixels outside `bounds` zeroed and masked.
pub fn crop_patches_within<T: Float>(
    fine_a: &Tensor<T>,
    fine_b: &Tensor<T>,
    matches: &[CoarseMatch],
    w: usize,
    bounds_a: Bounds,
    bounds_b: Bounds,
) -> Result<Vec<FinePatchPair<T>>> {
    let (da, _, wa) = fine_a.dims3()?;
    let (db, _, wb) = fine_b.dims3()?;
    if da != db {
        return Err(Error::Input(format!("fine maps have {da} and {db} channels")));
    }
    let (ga, gb) = (wa / COARSE_STRIDE, wb / COARSE_STRIDE);
    matches
        .iter()
        .map(|m| {
            let origin_a = patch_origin(m.i, ga, w);
            let origin_b = patch_origin(m.j, gb, w);
            let (patch_a, valid_a) = crop(fine_a, origin_a, w, bounds_a)?;
            let (patch_b, valid_b) = crop(fine_b, origin_b, w, bounds_b)?;
            let padded = valid_a.iter().chain(&valid_b).any(|v| !v);
            Ok(FinePatchPair { patch_a, patch_b, origin_a, origin_b, valid_a, valid_b, padded })
        })
        .collect()
}

pub fn crop_patches<T: Float>(fine_a: &Tensor<T>, fine_b: &Tensor<T>, matches: &[CoarseMatch], w: usize) -> Result<Vec<FinePatchPair<T>>> {
    let ba = (fine_a.shape()[2], fine_a.shape()[1]);
    let bb = (fine_b.shape()[2], fine_b.shape()[1]);
    crop_patches_within(fine_a, fine_b, matches, w, ba, bb)
}

/// `S_l = patch_a^T patch_b / sqrt(d_f)` over the `w*w` pixels of each patch.
pub fn local_scores<T: Float>(pair: &FinePatchPair<T>) -> Result<Tensor<T>> {
    let (d, w, _) = pair.patch_a.dims3()?;
    let a = pair.patch_a.reshape([d, w * w])?;
    let b = pair.patch_b.reshape([d, w * w])?;
    let mut s = matmul(&a, &b, true, false)?;
    let inv = T::one() / T::lit(d as f64).sqrt();
    s.data_mut().iter_mut().for_each(|v| *v *= inv);
    Ok(s)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage1 {
    /// Row-major pixel indices inside the two patches.
    pub a: usize,
    pub b: usize,
    pub score: f64,
}

/// Highest-scoring mutual pair of a masked score matrix. The global argmax is
/// always mutual; ties go to the smallest row-major index.
pub fn stage1_from_scores<T: Float>(s: &Tensor<T>, valid_a: &[bool], valid_b: &[bool]) -> Result<Option<Stage1>> {
    let (n, m) = s.dims2()?;
    if valid_a.len() != n || valid_b.len() != m {
        return Err(Error::Input("stage 1: mask length does not match score matrix".into()));
    }
    let mut best: Option<Stage1> = None;
    for a in (0..n).filter(|&a| valid_a[a]) {
        for b in (0..m).filter(|&b| valid_b[b]) {
            let v = s.data()[a * m + b].to_f64();
            if best.is_none_or(|bst| v > bst.score) {
                best = Some(Stage1 { a, b, score: v });
            }
        }
    }
    Ok(best)
}

/// Stage-1 result in absolute pixels: `(pixel_a, pixel_b, score)`.
pub fn stage1_mnn<T: Float>(pair: &FinePatchPair<T>) -> Result<Option<((i64, i64), (i64, i64), f64)>> {
    let w = pair.patch_a.shape()[1] as i64;
    let s = local_scores(pair)?;
    Ok(stage1_from_scores(&s, &pair.valid_a, &pair.valid_b)?.map(|r| {
        let pa = (pair.origin_a.0 + r.a as i64 % w, pair.origin_a.1 + r.a as i64 / w);
        let pb = (pair.origin_b.0 + r.b as i64 % w, pair.origin_b.1 + r.b as i64 / w);
        (pa, pb, r.score)
    }))
}

/// Window offsets `(u, v)` in row-major order over `{-1, 0, 1}^2`.
pub const WINDOW: [(i64, i64); 9] = [(-1, -1), (0, -1), (1, -1), (-1, 0), (0, 0), (1, 0), (-1, 1), (0, 1), (1, 1)];

/// Softmax expectation of the window offsets; masked cells get zero weight.
/// `None` when every cell is masked.
pub fn expectation_from_scores(scores: &[f64; 9], valid: &[bool; 9]) -> Option<(f64, f64)> {
    let m = (0..9).filter(|&k| valid[k]).map(|k| scores[k]).fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return None;
    }
    let mut z = 0.0;
    let (mut ex, mut ey) = (0.0, 0.0);
    for k in (0..9).filter(|&k| valid[k]) {
        let e = (scores[k] - m).exp();
        z += e;
        ex += e * WINDOW[k].0 as f64;
        ey += e * WINDOW[k].1 as f64;
    }
    Some(((ex / z).clamp(-1.0, 1.0), (ey / z).clamp(-1.0, 1.0)))
}

/// Sub-pixel offset from correlating `feat_a` (`[d]`) with a `[d, 3, 3]` window.
pub fn stage2_expectation<T: Float>(feat_a: &[T], window: &Tensor<T>, valid: &[bool; 9]) -> Result<Option<(f64, f64)>> {
    let (d, h, w) = window.dims3()?;
    if d != feat_a.len() || h != 3 || w != 3 {
        return Err(Error::Input(format!("stage 2: window {:?} for a {}-dim feature", window.shape(), feat_a.len())));
    }
    let inv = 1.0 / (d as f64).sqrt();
    let mut scores = [0.0; 9];
    for (k, s) in scores.iter_mut().enumerate() {
        let (u, v) = (k % 3, k / 3);
        *s = (0..d).map(|c| feat_a[c].to_f64() * window.at(&[c, v, u]).to_f64()).sum::<f64>() * inv;
    }
    Ok(expectation_from_scores(&scores, valid))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FineMatch {
    /// Integer pixel in A.
    pub pt_a: (f32, f32),
    /// Sub-pixel location in B.
    pub pt_b: (f32, f32),
    pub confidence: f32,
    /// Stage-1 pixel in B, before the sub-pixel offset.
    pub stage1_b: (f32, f32),
    /// Index of the coarse match this came from.
    pub coarse: usize,
}

fn feature_at<T: Float>(fine: &Tensor<T>, x: i64, y: i64) -> Vec<T> {
    let (d, h, w) = (fine.shape()[0], fine.shape()[1], fine.shape()[2]);
    (0..d).map(|c| fine.data()[(c * h + y as usize) * w + x as usize]).collect()
}

fn window_at<T: Float>(fine: &Tensor<T>, x: i64, y: i64, bounds: Bounds) -> (Tensor<T>, [bool; 9]) {
    let (d, h, w) = (fine.shape()[0], fine.shape()[1], fine.shape()[2]);
    let b = (bounds.0.min(w), bounds.1.min(h));
    let mut win = Tensor::zeros([d, 3, 3]);
    let mut valid = [false; 9];
    for (k, &(u, v)) in WINDOW.iter().enumerate() {
        let (px, py) = (x + u, y + v);
        if inside(px, py, b) {
            valid[k] = true;
            for c in 0..d {
                win.set(&[c, k / 3, k % 3], fine.data()[(c * h + py as usize) * w + px as usize]);
            }
        }
    }
    (win, valid)
}

/// Two-stage refinement of coarse matches. At most one fine match per coarse match.
pub fn refine_within<T: Float>(
    matches: &[CoarseMatch],
    fine_a: &Tensor<T>,
    fine_b: &Tensor<T>,
    w: usize,
    bounds_a: Bounds,
    bounds_b: Bounds,
) -> Result<Vec<FineMatch>> {
    let pairs = crop_patches_within(fine_a, fine_b, matches, w, bounds_a, bounds_b)?;
    let mut out = Vec::with_capacity(pairs.len());
    for (k, pair) in pairs.iter().enumerate() {
        let Some((pa, pb, score)) = stage1_mnn(pair)? else { continue };
        let fa = feature_at(fine_a, pa.0, pa.1);
        let (win, valid) = window_at(fine_b, pb.0, pb.1, bounds_b);
        let Some((dx, dy)) = stage2_expectation(&fa, &win, &valid)? else { continue };
        out.push(FineMatch {
            pt_a: (pa.0 as f32, pa.1 as f32),
            pt_b: ((pb.0 as f64 + dx) as f32, (pb.1 as f64 + dy) as f32),
            confidence: score as f32,
            stage1_b: (pb.0 as f32, pb.1 as f32),
            coarse: k,
        });
    }
    Ok(out)
}

pub fn refine<T: Float>(matches: &[CoarseMatch], fine_a: &Tensor<T>, fine_b: &Tensor<T>, w: usize) -> Result<Vec<FineMatch>> {
    let ba = (fine_a.shape()[2], fine_a.shape()[1]);
    let bb = (fine_b.shape()[2], fine_b.shape()[1]);
    refine_within(matches, fine_a, fine_b, w, ba, bb)
}

/// Comparison baseline: the A point is the patch centre and the B point is the
/// softmax expectation of pixel positions over the whole B patch.
pub fn refine_patch_expectation<T: Float>(
    matches: &[CoarseMatch],
    fine_a: &Tensor<T>,
    fine_b: &Tensor<T>,
    w: usize,
    bounds_a: Bounds,
    bounds_b: Bounds,
) -> Result<Vec<FineMatch>> {
    let pairs = crop_patches_within(fine_a, fine_b, matches, w, bounds_a, bounds_b)?;
    let d = fine_a.shape()[0];
    let inv = 1.0 / (d as f64).sqrt();
    let mut out = Vec::new();
    for (k, pair) in pairs.iter().enumerate() {
        let c = (pair.origin_a.0 + (w / 2) as i64, pair.origin_a.1 + (w / 2) as i64);
        if !inside(c.0, c.1, bounds_a) {
            continue;
        }
        let fa = feature_at(fine_a, c.0, c.1);
        let scores: Vec<Option<f64>> = (0..w * w)
            .map(|p| {
                pair.valid_b[p].then(|| (0..d).map(|ch| fa[ch].to_f64() * pair.patch_b.at(&[ch, p / w, p % w]).to_f64()).sum::<f64>() * inv)
            })
            .collect();
        let m = scores.iter().flatten().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        if m == f64::NEG_INFINITY {
            continue;
        }
        let (mut z, mut ex, mut ey) = (0.0, 0.0, 0.0);
        for (p, s) in scores.iter().enumerate() {
            if let Some(s) = s {
                let e = (s - m).exp();
                z += e;
                ex += e * (pair.origin_b.0 + (p % w) as i64) as f64;
                ey += e * (pair.origin_b.1 + (p / w) as i64) as f64;
            }
        }
        out.push(FineMatch {
            pt_a: (c.0 as f32, c.1 as f32),
            pt_b: ((ex / z) as f32, (ey / z) as f32),
            confidence: m as f32,
            stage1_b: ((ex / z) as f32, (ey / z) as f32),
            coarse: k,
        });
    }
    Ok(out)
}
