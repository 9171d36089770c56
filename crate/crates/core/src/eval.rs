//! Corner-error AUC, homography evaluation over pair sets, match accuracy
//! against ground truth and per-stage timing.

use std::fmt;
use std::time::{Duration, Instant};

use semidense_tensor::Tensor;

use crate::coarse::MatchMode;
use crate::error::{Error, Result};
use crate::geometry::{corner_error, ransac_homography, Homography, Point, RansacParams};
use crate::model::{Matcher, StageTimings};
use crate::supervision::{cell_center, cell_of};
use crate::synth::SynthPair;

pub const AUC_THRESHOLDS: [f64; 3] = [3.0, 5.0, 10.0];

/// `mean(max(0, 1 - e / t))` for each threshold. Non-finite errors (failed
/// estimates) count as zero.
pub fn corner_auc(errors: &[f64], thresholds: &[f64]) -> Result<Vec<f64>> {
    if errors.is_empty() {
        return Err(Error::Input("corner AUC of an empty error list".into()));
    }
    if let Some(e) = errors.iter().find(|e| **e < 0.0 || e.is_nan()) {
        return Err(Error::Input(format!("corner error {e} is not a nonnegative number")));
    }
    Ok(thresholds
        .iter()
        .map(|&t| errors.iter().map(|&e| (1.0 - e / t).max(0.0)).sum::<f64>() / errors.len() as f64)
        .collect())
}

#[derive(Clone, Debug, Default)]
pub struct EvalReport {
    pub mode: MatchMode,
    /// Per pair; infinite when estimation failed.
    pub corner_errors: Vec<f64>,
    pub n_matches: Vec<usize>,
    /// AUC at 3, 5 and 10 px.
    pub auc: [f64; 3],
    /// Per-stage wall clock summed over all pairs.
    pub timings: StageTimings,
    /// Confidence sums per pair, for comparing modes.
    pub confidence_sums: Vec<f64>,
}

impl EvalReport {
    /// One CSV row per pair plus an AUC row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("# schema_version=1\npair,n_matches,corner_error\n");
        for (i, (e, n)) in self.corner_errors.iter().zip(&self.n_matches).enumerate() {
            s.push_str(&format!("{i},{n},{e}\n"));
        }
        s.push_str(&format!("# auc@3={},auc@5={},auc@10={}\n", self.auc[0], self.auc[1], self.auc[2]));
        s
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.corner_errors.len().max(1) as f64;
        writeln!(f, "mode            {}", self.mode)?;
        writeln!(f, "pairs           {}", self.corner_errors.len())?;
        writeln!(f, "failed          {}", self.corner_errors.iter().filter(|e| !e.is_finite()).count())?;
        writeln!(f, "auc@3/5/10 px   {:.4} / {:.4} / {:.4}", self.auc[0], self.auc[1], self.auc[2])?;
        for (name, d) in StageTimings::NAMES.iter().zip(self.timings.as_array()) {
            writeln!(f, "{name:<16}{:.3} ms/pair", d.as_secs_f64() * 1e3 / n)?;
        }
        Ok(())
    }
}

/// Homography from the refined matches of `out`, by RANSAC.
pub fn estimate(matches: &[crate::fine::FineMatch], ransac: &RansacParams) -> Result<Homography> {
    let src: Vec<Point> = matches.iter().map(|m| (m.pt_a.0 as f64, m.pt_a.1 as f64)).collect();
    let dst: Vec<Point> = matches.iter().map(|m| (m.pt_b.0 as f64, m.pt_b.1 as f64)).collect();
    Ok(ransac_homography(&src, &dst, ransac)?.h)
}

/// Matches every pair, fits a homography and scores its corner error.
pub fn evaluate(matcher: &Matcher, pairs: &[SynthPair], mode: MatchMode, ransac: &RansacParams) -> Result<EvalReport> {
    let mut rep = EvalReport { mode, ..Default::default() };
    for p in pairs {
        let out = matcher.run(&p.a, &p.b, mode)?;
        let (_, h, w) = p.a.dims3()?;
        let err = match estimate(&out.matches, ransac) {
            Ok(est) => corner_error(&est, &p.h, w, h),
            Err(e) if e.is_numeric() => return Err(e),
            Err(_) => f64::INFINITY,
        };
        rep.corner_errors.push(if err.is_finite() { err } else { f64::INFINITY });
        rep.n_matches.push(out.matches.len());
        rep.confidence_sums.push(out.matches.iter().map(|m| m.confidence as f64).sum());
        let t = out.timings;
        rep.timings.backbone += t.backbone;
        rep.timings.transform += t.transform;
        rep.timings.coarse += t.coarse;
        rep.timings.fusion += t.fusion;
        rep.timings.refine += t.refine;
    }
    if !pairs.is_empty() {
        let auc = corner_auc(&rep.corner_errors, &AUC_THRESHOLDS)?;
        rep.auc = [auc[0], auc[1], auc[2]];
    }
    Ok(rep)
}

/// Match quality against a known homography.
#[derive(Clone, Debug, Default)]
pub struct MatchAccuracy {
    pub coarse_total: usize,
    /// Coarse matches whose B cell is within one cell (Chebyshev) of the cell
    /// containing the warped A cell centre.
    pub coarse_correct: usize,
    /// `|pt_b - H(pt_a)|` after both refinement stages.
    pub fine_errors: Vec<f64>,
    /// The same with the stage-1 pixel alone.
    pub stage1_errors: Vec<f64>,
}

impl MatchAccuracy {
    pub fn coarse_precision(&self) -> f64 {
        if self.coarse_total == 0 {
            0.0
        } else {
            self.coarse_correct as f64 / self.coarse_total as f64
        }
    }
}

pub fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    Some(if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) })
}

pub fn match_accuracy(matcher: &Matcher, pairs: &[SynthPair], mode: MatchMode) -> Result<MatchAccuracy> {
    let mut acc = MatchAccuracy::default();
    for p in pairs {
        let out = matcher.run(&p.a, &p.b, mode)?;
        let gw = p.a.shape()[2] / crate::fine::COARSE_STRIDE;
        let gwb = p.b.shape()[2] / crate::fine::COARSE_STRIDE;
        for m in &out.coarse {
            acc.coarse_total += 1;
            let Some(q) = p.h.apply(cell_center(m.i % gw, m.i / gw)) else { continue };
            let (gx, gy) = cell_of(q);
            let (bx, by) = ((m.j % gwb) as i64, (m.j / gwb) as i64);
            if (gx - bx).abs() <= 1 && (gy - by).abs() <= 1 {
                acc.coarse_correct += 1;
            }
        }
        for m in &out.matches {
            let Some(q) = p.h.apply((m.pt_a.0 as f64, m.pt_a.1 as f64)) else { continue };
            let dist = |b: (f32, f32)| ((b.0 as f64 - q.0).powi(2) + (b.1 as f64 - q.1).powi(2)).sqrt();
            acc.fine_errors.push(dist(m.pt_b));
            acc.stage1_errors.push(dist(m.stage1_b));
        }
    }
    Ok(acc)
}

/// Timing samples per stage and end to end.
#[derive(Clone, Debug)]
pub struct BenchReport {
    pub mode: MatchMode,
    pub samples: Vec<StageTimings>,
    pub end_to_end: Vec<Duration>,
}

fn stats(v: &[Duration]) -> (Duration, Duration) {
    let mut s = v.to_vec();
    s.sort();
    let mean = s.iter().sum::<Duration>() / s.len() as u32;
    (s[s.len() / 2], mean)
}

impl BenchReport {
    /// `(median, mean)` of stage `k` in [`StageTimings::NAMES`] order.
    pub fn stage(&self, k: usize) -> (Duration, Duration) {
        stats(&self.samples.iter().map(|t| t.as_array()[k]).collect::<Vec<_>>())
    }

    pub fn total(&self) -> (Duration, Duration) {
        stats(&self.end_to_end)
    }
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "mode {} , {} repetitions (median / mean ms)", self.mode, self.samples.len())?;
        for (k, name) in StageTimings::NAMES.iter().enumerate() {
            let (md, mn) = self.stage(k);
            writeln!(f, "{name:<16}{:>9.3} {:>9.3}", md.as_secs_f64() * 1e3, mn.as_secs_f64() * 1e3)?;
        }
        let (md, mn) = self.total();
        writeln!(f, "{:<16}{:>9.3} {:>9.3}", "end_to_end", md.as_secs_f64() * 1e3, mn.as_secs_f64() * 1e3)
    }
}

/// Runs `warmup` untimed passes, then `repetitions` timed ones.
pub fn bench_pipeline(matcher: &Matcher, a: &Tensor<f32>, b: &Tensor<f32>, mode: MatchMode, repetitions: usize, warmup: usize) -> Result<BenchReport> {
    if repetitions == 0 {
        return Err(Error::Input("bench needs at least one repetition".into()));
    }
    for _ in 0..warmup {
        matcher.run(a, b, mode)?;
    }
    let mut rep = BenchReport { mode, samples: Vec::new(), end_to_end: Vec::new() };
    for _ in 0..repetitions {
        let clock = Instant::now();
        let out = matcher.run(a, b, mode)?;
        rep.end_to_end.push(clock.elapsed());
        rep.samples.push(out.timings);
    }
    Ok(rep)
}
