//! Ground truth from known geometry and the three matching losses.

use nalgebra::{Matrix3, Vector3};
use semidense_tensor::{softmax, Float, Tensor};

use crate::error::{Error, Result};
use crate::fine::COARSE_STRIDE;
use crate::geometry::{Homography, Point};

/// Probabilities are clamped to this before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 1.0, beta: 0.25 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    /// `(cell in A, cell in B)`, ordered by the A cell.
    pub coarse_pairs: Vec<(usize, usize)>,
    /// Warped centre of each paired A cell, in B pixels.
    pub fine_targets: Vec<Point>,
    /// Per A cell: true when its centre lands inside B.
    pub valid_mask: Vec<bool>,
    /// Coarse grid `(width, height)` of each image.
    pub grid_a: (usize, usize),
    pub grid_b: (usize, usize),
}

/// Centre of coarse cell `(cx, cy)` in pixels.
pub fn cell_center(cx: usize, cy: usize) -> Point {
    let s = COARSE_STRIDE as f64;
    (s * cx as f64 + s / 2.0, s * cy as f64 + s / 2.0)
}

/// Coarse cell containing pixel position `p`, without bounds checks.
pub fn cell_of(p: Point) -> (i64, i64) {
    let s = COARSE_STRIDE as f64;
    ((p.0 / s).floor() as i64, (p.1 / s).floor() as i64)
}

/// Pairs every coarse cell of A whose centre warps inside B with the B cell containing it.
pub fn build_gt_homography(h: &Homography, dims_a: (usize, usize), dims_b: (usize, usize)) -> Result<GroundTruth> {
    if h.matrix().determinant().abs() <= 1e-12 {
        return Err(Error::Degenerate("ground-truth homography is singular".into()));
    }
    let grid_a = (dims_a.0 / COARSE_STRIDE, dims_a.1 / COARSE_STRIDE);
    let grid_b = (dims_b.0 / COARSE_STRIDE, dims_b.1 / COARSE_STRIDE);
    let mut gt = GroundTruth {
        coarse_pairs: Vec::new(),
        fine_targets: Vec::new(),
        valid_mask: vec![false; grid_a.0 * grid_a.1],
        grid_a,
        grid_b,
    };
    for cy in 0..grid_a.1 {
        for cx in 0..grid_a.0 {
            let Some(q) = h.apply(cell_center(cx, cy)) else { continue };
            let inside = q.0 >= 0.0 && q.1 >= 0.0 && q.0 < dims_b.0 as f64 && q.1 < dims_b.1 as f64;
            let (bx, by) = cell_of(q);
            if !inside || bx as usize >= grid_b.0 || by as usize >= grid_b.1 {
                continue;
            }
            let i = cy * grid_a.0 + cx;
            gt.valid_mask[i] = true;
            gt.coarse_pairs.push((i, by as usize * grid_b.0 + bx as usize));
            gt.fine_targets.push(q);
        }
    }
    Ok(gt)
}

/// Rigid motion `x_B = R x_A + t` between camera frames.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
}

/// Warps pixels of A into B through depth and relative pose. A point is valid
/// when its depth is positive, its projected depth is positive and it lands
/// inside `dims_b`. Depth is looked up at the nearest pixel of the `[H, W]` map.
pub fn warp_points_depth_pose(
    pts: &[Point],
    depth_a: &Tensor<f64>,
    k_a: &Matrix3<f64>,
    k_b: &Matrix3<f64>,
    pose: &Pose,
    dims_b: (usize, usize),
) -> Result<Vec<(Point, bool)>> {
    let (dh, dw) = depth_a.dims2()?;
    let ka_inv = k_a.try_inverse().ok_or_else(|| Error::Degenerate("K_A is singular".into()))?;
    Ok(pts
        .iter()
        .map(|&(x, y)| {
            let (ix, iy) = (x.round(), y.round());
            if !(ix >= 0.0 && iy >= 0.0 && (ix as usize) < dw && (iy as usize) < dh) {
                return ((f64::NAN, f64::NAN), false);
            }
            let z = depth_a.at(&[iy as usize, ix as usize]);
            if !(z > 0.0) {
                return ((f64::NAN, f64::NAN), false);
            }
            let xa = ka_inv * Vector3::new(x, y, 1.0) * z;
            let xb = pose.r * xa + pose.t;
            if !(xb.z > 0.0) {
                return ((f64::NAN, f64::NAN), false);
            }
            let p = k_b * (xb / xb.z);
            let q = (p.x, p.y);
            let inside = q.0 >= 0.0 && q.1 >= 0.0 && q.0 <= (dims_b.0 as f64 - 1.0) && q.1 <= (dims_b.1 as f64 - 1.0);
            (q, inside)
        })
        .collect())
}

/// `-mean log P(i, j)` over ground-truth pairs.
pub fn coarse_loss<T: Float>(p: &Tensor<T>, pairs: &[(usize, usize)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyGroundTruth("no coarse pairs"));
    }
    let (n, m) = p.dims2()?;
    let mut sum = 0.0;
    for &(i, j) in pairs {
        if i >= n || j >= m {
            return Err(Error::Input(format!("pair ({i}, {j}) outside a {n}x{m} matrix")));
        }
        sum -= p.data()[i * m + j].to_f64().max(PROB_FLOOR).ln();
    }
    Ok(sum / pairs.len() as f64)
}

/// Stage-1 loss: mean over matches of `-log` of the dual-softmax of each local
/// score matrix at its ground-truth pixel pair. Matches without one are skipped.
pub fn fine_loss_stage1<T: Float>(scores: &[Tensor<T>], gt: &[Option<(usize, usize)>]) -> Result<f64> {
    if scores.len() != gt.len() {
        return Err(Error::Input(format!("{} score matrices but {} targets", scores.len(), gt.len())));
    }
    let mut sum = 0.0;
    let mut n = 0;
    for (s, g) in scores.iter().zip(gt) {
        let Some((a, b)) = *g else { continue };
        let (r, c) = s.dims2()?;
        if a >= r || b >= c {
            return Err(Error::Input(format!("pixel pair ({a}, {b}) outside a {r}x{c} matrix")));
        }
        let rows = softmax(s, 1)?;
        let cols = softmax(s, 0)?;
        let p = rows.at(&[a, b]).to_f64() * cols.at(&[a, b]).to_f64();
        sum -= p.max(PROB_FLOOR).ln();
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyGroundTruth("every fine target lies outside its patch"));
    }
    Ok(sum / n as f64)
}

/// Mean squared distance in pixels between predictions and targets.
pub fn fine_loss_stage2(pred: &[Point], gt: &[Point]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Input(format!("{} predictions but {} targets", pred.len(), gt.len())));
    }
    if pred.is_empty() {
        return Err(Error::EmptyGroundTruth("no refined matches"));
    }
    let sum: f64 = pred.iter().zip(gt).map(|(p, q)| (p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sum();
    Ok(sum / pred.len() as f64)
}

pub fn total_loss(l_c: f64, l_f1: f64, l_f2: f64, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("coarse loss", l_c), ("stage-1 loss", l_f1), ("stage-2 loss", l_f2)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} is {v}")));
        }
    }
    if !(w.alpha >= 0.0 && w.beta >= 0.0) {
        return Err(Error::Config("loss weights must be nonnegative".into()));
    }
    Ok(l_c + w.alpha * l_f1 + w.beta * l_f2)
}
