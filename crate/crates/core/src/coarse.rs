//! Coarse correlation, dual-softmax and mutual-nearest-neighbour selection.

use std::fmt;
use std::str::FromStr;

use semidense_tensor::counters::{self, Kernel};
use semidense_tensor::{matmul, softmax, Float, Tensor};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MatchMode {
    /// Dual-softmax probabilities, thresholded by `tau`.
    #[default]
    Full,
    /// Mutual nearest neighbours of the raw scores; no softmax, no threshold.
    Optimized,
}

impl fmt::Display for MatchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MatchMode::Full => "full",
            MatchMode::Optimized => "optimized",
        })
    }
}

impl FromStr for MatchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(MatchMode::Full),
            "optimized" => Ok(MatchMode::Optimized),
            _ => Err(Error::Config(format!("unknown match mode `{s}` (expected full or optimized)"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ScoreMatrix<T: Float = f32> {
    /// Raw correlations `[n_a, n_b]`.
    pub s: Tensor<T>,
    /// Dual-softmax probabilities, once computed.
    pub p: Option<Tensor<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoarseMatch {
    pub i: usize,
    pub j: usize,
    pub confidence: f32,
}

/// `[C, H, W]` map to `[H*W, C]` token matrix.
pub fn map_tokens<T: Float>(f: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = f.dims3()?;
    Ok(f.reshape([c, h * w])?.transpose2()?)
}

/// `s(i, j) = inv_temp * <a_i, b_j>` over token rows.
pub fn correlate_tokens<T: Float>(a: &Tensor<T>, b: &Tensor<T>, inv_temp: T) -> Result<ScoreMatrix<T>> {
    let (_, ca) = a.dims2()?;
    let (_, cb) = b.dims2()?;
    if ca != cb {
        return Err(Error::Input(format!("correlate: channel dims {ca} and {cb} differ")));
    }
    let mut s = matmul(a, b, false, true)?;
    s.data_mut().iter_mut().for_each(|v| *v *= inv_temp);
    Ok(ScoreMatrix { s, p: None })
}

/// Dense correlation of two `[C, H, W]` maps over their flattened grids.
pub fn correlate<T: Float>(fa: &Tensor<T>, fb: &Tensor<T>, inv_temp: T) -> Result<ScoreMatrix<T>> {
    if fa.rank() != 3 || fb.rank() != 3 || fa.shape()[0] != fb.shape()[0] {
        return Err(Error::Input(format!("correlate: maps {:?} and {:?} need equal channels", fa.shape(), fb.shape())));
    }
    correlate_tokens(&map_tokens(fa)?, &map_tokens(fb)?, inv_temp)
}

/// Fills `p = softmax_rows(s) * softmax_cols(s)`.
pub fn dual_softmax<T: Float>(mut m: ScoreMatrix<T>) -> Result<ScoreMatrix<T>> {
    counters::record(Kernel::DualSoftmax);
    let rows = softmax(&m.s, 1)?;
    let cols = softmax(&m.s, 0)?;
    m.p = Some(rows.zip_map(&cols, |a, b| a * b)?);
    Ok(m)
}

/// Row and column argmaxes with ties resolved toward the smallest index.
pub fn argmaxes<T: Float>(m: &Tensor<T>) -> Result<(Vec<usize>, Vec<usize>)> {
    let (n, k) = m.dims2()?;
    let d = m.data();
    let mut row = vec![0usize; n];
    let mut col = vec![0usize; k];
    let mut col_best = vec![T::neg_infinity(); k];
    for i in 0..n {
        let r = &d[i * k..(i + 1) * k];
        let mut best = T::neg_infinity();
        for (j, &v) in r.iter().enumerate() {
            if v > best || j == 0 {
                best = v;
                row[i] = j;
            }
            if v > col_best[j] || i == 0 {
                col_best[j] = v;
                col[j] = i;
            }
        }
    }
    Ok((row, col))
}

/// Mutual nearest neighbours of `m` whose value is at least `tau`, ordered by `i`.
pub fn mnn_select<T: Float>(m: &Tensor<T>, tau: T) -> Result<Vec<CoarseMatch>> {
    let (n, k) = m.dims2()?;
    if n == 0 || k == 0 {
        return Ok(Vec::new());
    }
    let (row, col) = argmaxes(m)?;
    let mut out = Vec::new();
    for (i, &j) in row.iter().enumerate() {
        let v = m.data()[i * k + j];
        if col[j] == i && v >= tau {
            out.push(CoarseMatch { i, j, confidence: v.to_f64() as f32 });
        }
    }
    Ok(out)
}

/// Matches token matrices `[n_a, C]`, `[n_b, C]`.
pub fn match_tokens<T: Float>(a: &Tensor<T>, b: &Tensor<T>, mode: MatchMode, tau: T, inv_temp: T) -> Result<Vec<CoarseMatch>> {
    let sm = correlate_tokens(a, b, inv_temp)?;
    match mode {
        MatchMode::Full => {
            let sm = dual_softmax(sm)?;
            mnn_select(sm.p.as_ref().expect("filled by dual_softmax"), tau)
        }
        MatchMode::Optimized => mnn_select(&sm.s, T::neg_infinity()),
    }
}

/// Coarse matches between two transformed `[C, H, W]` maps. `tau` is ignored
/// in optimized mode, whose confidences are raw scores.
pub fn match_coarse<T: Float>(fa: &Tensor<T>, fb: &Tensor<T>, mode: MatchMode, tau: T, inv_temp: T) -> Result<Vec<CoarseMatch>> {
    if fa.rank() != 3 || fb.rank() != 3 || fa.shape()[0] != fb.shape()[0] {
        return Err(Error::Input(format!("match_coarse: maps {:?} and {:?} need equal channels", fa.shape(), fb.shape())));
    }
    match_tokens(&map_tokens(fa)?, &map_tokens(fb)?, mode, tau, inv_temp)
}
