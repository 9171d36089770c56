//! Two-dimensional rotary position encoding.
//!
//! Channels are grouped in fours. Within group `k`, channels `(4k, 4k+1)` are
//! rotated by `theta_k * x` and `(4k+2, 4k+3)` by `theta_k * y`, so the dot
//! product of two encoded vectors depends on positions only through their
//! difference.

use semidense_tensor::{Float, Graph, Tensor, Var};

use crate::error::{Error, Result};

/// `theta_k = 10000^(-4k/d)` for `k = 1..=d/4`.
pub fn thetas(d: usize) -> Result<Vec<f64>> {
    if d == 0 || d % 4 != 0 {
        return Err(Error::Input(format!("rotary encoding needs d divisible by 4, got {d}")));
    }
    Ok((1..=d / 4).map(|k| 10000f64.powf(-(4.0 * k as f64) / d as f64)).collect())
}

/// Cosine and sine tables of shape `[n, d/2]`, one angle per channel pair.
pub fn tables<T: Float>(d: usize, positions: &[(f64, f64)]) -> Result<(Vec<T>, Vec<T>)> {
    let th = thetas(d)?;
    let mut cos = Vec::with_capacity(positions.len() * d / 2);
    let mut sin = Vec::with_capacity(cos.capacity());
    for &(x, y) in positions {
        for &t in &th {
            for a in [t * x, t * y] {
                cos.push(T::lit(a.cos()));
                sin.push(T::lit(a.sin()));
            }
        }
    }
    Ok((cos, sin))
}

/// Rotates each row of `features` (`[n, d]`) by the angle set of its position.
pub fn rope_encode<T: Float>(features: &Tensor<T>, positions: &[(f64, f64)]) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.constant(features.clone());
    let y = rope_graph(&mut g, x, positions)?;
    Ok(g.value(y).clone())
}

pub fn rope_graph<T: Float>(g: &mut Graph<T>, x: Var, positions: &[(f64, f64)]) -> Result<Var> {
    let (n, d) = g.value(x).dims2()?;
    if positions.len() != n {
        return Err(Error::Input(format!("{} positions for {n} tokens", positions.len())));
    }
    let (cos, sin) = tables(d, positions)?;
    Ok(g.rotate_pairs(x, cos, sin)?)
}

/// Block `k` of the relative rotation `R(dx, dy)`, as a row-major 4x4 matrix.
pub fn relative_block(theta: f64, dx: f64, dy: f64) -> [[f64; 4]; 4] {
    let (cx, sx) = ((theta * dx).cos(), (theta * dx).sin());
    let (cy, sy) = ((theta * dy).cos(), (theta * dy).sin());
    [[cx, -sx, 0.0, 0.0], [sx, cx, 0.0, 0.0], [0.0, 0.0, cy, -sy], [0.0, 0.0, sy, cy]]
}
