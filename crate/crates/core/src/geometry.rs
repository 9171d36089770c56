//! Homographies: application, normalized DLT and RANSAC.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type Point = (f64, f64);

/// Projective 3x3 transform, scaled so that `h33 = 1` whenever it is non-zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography(Matrix3<f64>);

impl Homography {
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("homography has non-finite entries".into()));
        }
        let m = if m[(2, 2)].abs() > 1e-12 { m / m[(2, 2)] } else { m / m.norm() };
        if m.determinant().abs() <= 1e-12 {
            return Err(Error::Degenerate(format!("singular homography (det {:e})", m.determinant())));
        }
        Ok(Homography(m))
    }

    pub fn from_rows(r: [[f64; 3]; 3]) -> Result<Self> {
        Self::new(Matrix3::from_fn(|i, j| r[i][j]))
    }

    pub fn identity() -> Self {
        Homography(Matrix3::identity())
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Homography(Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        std::array::from_fn(|i| std::array::from_fn(|j| self.0[(i, j)]))
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self.0.try_inverse().ok_or_else(|| Error::Degenerate("homography is not invertible".into()))?;
        Self::new(inv)
    }

    /// `self` after `first`: `p -> self(first(p))`.
    pub fn after(&self, first: &Homography) -> Result<Self> {
        Self::new(self.0 * first.0)
    }

    /// `None` when the point maps to infinity (`|h3 . p| < 1e-12`).
    pub fn apply(&self, p: Point) -> Option<Point> {
        let v = self.0 * Vector3::new(p.0, p.1, 1.0);
        if v.z.abs() < 1e-12 || !p.0.is_finite() || !p.1.is_finite() {
            return None;
        }
        Some((v.x / v.z, v.y / v.z))
    }
}

pub fn apply_homography(h: &Homography, pts: &[Point]) -> Vec<Option<Point>> {
    pts.iter().map(|&p| h.apply(p)).collect()
}

fn dist(a: Point, b: Point) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Similarity taking the centroid to the origin with mean distance sqrt(2).
fn normalizer(pts: &[Point]) -> Result<Matrix3<f64>> {
    let n = pts.len() as f64;
    let (cx, cy) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0 / n, a.1 + p.1 / n));
    let mean = pts.iter().map(|p| dist(*p, (cx, cy))).sum::<f64>() / n;
    if !(mean > 1e-12) || !mean.is_finite() {
        return Err(Error::Degenerate("points are coincident".into()));
    }
    let s = std::f64::consts::SQRT_2 / mean;
    Ok(Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0))
}

fn collinear(a: Point, b: Point, c: Point, scale: f64) -> bool {
    let cross = (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0);
    cross.abs() <= 1e-9 * scale * scale
}

fn has_collinear_triple(pts: &[Point]) -> bool {
    let scale = pts.iter().flat_map(|p| [p.0.abs(), p.1.abs()]).fold(1.0, f64::max);
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            for k in j + 1..pts.len() {
                if collinear(pts[i], pts[j], pts[k], scale) {
                    return true;
                }
            }
        }
    }
    false
}

/// Normalized direct linear transform from `src[i] -> dst[i]` correspondences.
pub fn dlt_homography(src: &[Point], dst: &[Point]) -> Result<Homography> {
    let n = src.len();
    if n != dst.len() {
        return Err(Error::Input(format!("{n} source points but {} targets", dst.len())));
    }
    if n < 4 {
        return Err(Error::Input(format!("need at least 4 correspondences, got {n}")));
    }
    if src.iter().chain(dst).any(|p| !p.0.is_finite() || !p.1.is_finite()) {
        return Err(Error::Input("non-finite correspondence".into()));
    }
    if n == 4 && (has_collinear_triple(src) || has_collinear_triple(dst)) {
        return Err(Error::Degenerate("three of the four points are collinear".into()));
    }
    let ts = normalizer(src)?;
    let td = normalizer(dst)?;
    let rows = (2 * n).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (k, (p, q)) in src.iter().zip(dst).enumerate() {
        let p = ts * Vector3::new(p.0, p.1, 1.0);
        let q = td * Vector3::new(q.0, q.1, 1.0);
        let (x, y, u, v) = (p.x, p.y, q.x, q.y);
        let r = 2 * k;
        for (c, val) in [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u].into_iter().enumerate() {
            a[(r, c)] = val;
        }
        for (c, val) in [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v].into_iter().enumerate() {
            a[(r + 1, c)] = val;
        }
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t.ok_or_else(|| Error::Degenerate("SVD failed".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]));
    let (smallest, second) = (order[0], order[1]);
    let largest = svd.singular_values[order[order.len() - 1]];
    if svd.singular_values[second] <= 1e-10 * largest {
        return Err(Error::Degenerate("correspondences do not determine a unique homography".into()));
    }
    let h = vt.row(smallest);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let td_inv = td.try_inverse().ok_or_else(|| Error::Degenerate("normalizer".into()))?;
    Homography::new(td_inv * hn * ts)
}

/// Root mean square of the forward and backward transfer distances.
pub fn symmetric_transfer_error(h: &Homography, h_inv: &Homography, p: Point, q: Point) -> f64 {
    match (h.apply(p), h_inv.apply(q)) {
        (Some(hp), Some(hq)) => ((dist(hp, q).powi(2) + dist(hq, p).powi(2)) / 2.0).sqrt(),
        _ => f64::INFINITY,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RansacParams {
    pub threshold: f64,
    pub max_iters: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        RansacParams { threshold: 3.0, max_iters: 10_000, confidence: 0.999, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RansacResult {
    pub h: Homography,
    pub inliers: Vec<bool>,
    pub iterations: usize,
}

impl RansacResult {
    pub fn n_inliers(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

fn inlier_mask(h: &Homography, src: &[Point], dst: &[Point], thr: f64) -> Option<Vec<bool>> {
    let inv = h.inverse().ok()?;
    Some(src.iter().zip(dst).map(|(&p, &q)| symmetric_transfer_error(h, &inv, p, q) < thr).collect())
}

fn select(pts: &[Point], mask: &[bool]) -> Vec<Point> {
    pts.iter().zip(mask).filter(|(_, &m)| m).map(|(p, _)| *p).collect()
}

/// Four-point RANSAC with adaptive iteration count and a final refit on the inliers.
pub fn ransac_homography(src: &[Point], dst: &[Point], params: &RansacParams) -> Result<RansacResult> {
    let n = src.len();
    if n != dst.len() {
        return Err(Error::Input(format!("{n} source points but {} targets", dst.len())));
    }
    if n < 4 {
        return Err(Error::Input(format!("RANSAC needs at least 4 matches, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<(Homography, Vec<bool>, usize)> = None;
    let mut needed = params.max_iters;
    let mut it = 0;
    while it < needed.min(params.max_iters) {
        it += 1;
        let idx = sample(&mut rng, n, 4);
        let s: Vec<Point> = idx.iter().map(|i| src[i]).collect();
        let d: Vec<Point> = idx.iter().map(|i| dst[i]).collect();
        let Ok(h) = dlt_homography(&s, &d) else { continue };
        let Some(mask) = inlier_mask(&h, src, dst, params.threshold) else { continue };
        let count = mask.iter().filter(|&&b| b).count();
        if best.as_ref().is_none_or(|b| count > b.2) {
            let w = count as f64 / n as f64;
            needed = if w >= 1.0 {
                it
            } else {
                let denom = (1.0 - w.powi(4)).ln();
                if denom < 0.0 {
                    (((1.0 - params.confidence).ln() / denom).ceil() as usize).max(it)
                } else {
                    params.max_iters
                }
            };
            best = Some((h, mask, count));
        }
    }
    let Some((mut h, mut mask, mut count)) = best.filter(|b| b.2 >= 4) else {
        return Err(Error::Degenerate("no model with at least 4 inliers".into()));
    };
    if let Ok(refit) = dlt_homography(&select(src, &mask), &select(dst, &mask)) {
        if let Some(m2) = inlier_mask(&refit, src, dst, params.threshold) {
            let c2 = m2.iter().filter(|&&b| b).count();
            if c2 >= count {
                h = refit;
                mask = m2;
                count = c2;
            }
        }
    }
    debug_assert!(count >= 4);
    Ok(RansacResult { h, inliers: mask, iterations: it })
}

/// Corners of a `width x height` image in pixel-centre coordinates.
pub fn image_corners(width: usize, height: usize) -> [Point; 4] {
    let (w, h) = ((width as f64 - 1.0).max(0.0), (height as f64 - 1.0).max(0.0));
    [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)]
}

/// Mean distance between the four image corners mapped by `est` and by `gt`.
pub fn corner_error(est: &Homography, gt: &Homography, width: usize, height: usize) -> f64 {
    let cs = image_corners(width, height);
    let mut total = 0.0;
    for c in cs {
        match (est.apply(c), gt.apply(c)) {
            (Some(a), Some(b)) => total += dist(a, b),
            _ => return f64::INFINITY,
        }
    }
    total / 4.0
}
