//! Central finite-difference checks of tape gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Comparison of analytic and numeric gradients for one input tensor.
#[derive(Clone, Debug)]
pub struct GradComparison {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradComparison {
    /// Largest elementwise `|a - n| / max(|a|, |n|, floor)` where `floor` is
    /// `1e-3` times the largest numeric magnitude, so that entries which are
    /// zero up to rounding do not dominate.
    pub fn max_rel_error(&self) -> f64 {
        let scale = self.numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let floor = (1e-3 * scale).max(1e-12);
        self.analytic
            .iter()
            .zip(&self.numeric)
            .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
            .fold(0.0, f64::max)
    }

    /// `||a - n|| / max(||a||, ||n||)` over the compared entries.
    pub fn rel_norm_error(&self) -> f64 {
        let diff: f64 = self.analytic.iter().zip(&self.numeric).map(|(a, n)| (a - n) * (a - n)).sum();
        let na: f64 = self.analytic.iter().map(|a| a * a).sum();
        let nn: f64 = self.numeric.iter().map(|n| n * n).sum();
        let den = na.max(nn).sqrt();
        if den == 0.0 {
            0.0
        } else {
            diff.sqrt() / den
        }
    }
}

/// Compares `d f / d inputs[i]` from the tape against central differences
/// with step `h`.
///
/// `f` builds the scalar loss from parameter leaves holding the inputs. When
/// `sample` is `Some(k)`, only `k` evenly spaced entries of each input are
/// perturbed.
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, sample: Option<usize>, f: F) -> Result<Vec<GradComparison>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ts: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.scalar(out))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut work = inputs.to_vec();
    let mut report = Vec::with_capacity(inputs.len());
    for (i, v) in vars.iter().enumerate() {
        let n = inputs[i].numel();
        let full = grads.get(*v).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let picks: Vec<usize> = match sample {
            Some(k) if k < n => (0..k).map(|j| j * n / k).collect(),
            _ => (0..n).collect(),
        };
        let mut cmp = GradComparison { analytic: Vec::with_capacity(picks.len()), numeric: Vec::with_capacity(picks.len()) };
        for &e in &picks {
            let orig = work[i].data()[e];
            work[i].data_mut()[e] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[e] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[e] = orig;
            cmp.analytic.push(full[e]);
            cmp.numeric.push((up - down) / (2.0 * h));
        }
        report.push(cmp);
    }
    Ok(report)
}

/// Result of checking one differentiable op.
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub name: &'static str,
    /// Worst [`GradComparison::max_rel_error`] over the op's inputs.
    pub max_rel_error: f64,
}

/// Deterministic values in `(-1, 1)` with magnitude at least `0.05`, so that
/// kinks (relu, max) stay further than any finite-difference step away.
fn fill(shape: &[usize], salt: u64) -> Tensor<f64> {
    let mut state = salt.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0xD1B5_4A32_D192_ED03;
    Tensor::from_fn(shape.to_vec(), |_| {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        let u = (state >> 11) as f64 / (1u64 << 53) as f64;
        let m = 0.05 + 0.95 * u;
        if state & 1 == 0 {
            m
        } else {
            -m
        }
    })
}

/// Weighted sum `sum(w * y)` with fixed pseudo-random weights, so every
/// output entry contributes a distinct amount to the checked scalar.
fn probe(g: &mut Graph<f64>, y: Var) -> Result<Var> {
    let w = g.constant(fill(g.shape(y), 977));
    let p = g.mul(y, w)?;
    g.sum(p)
}

type Build = fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

/// Central-difference check of every differentiable tape op in 64-bit.
pub fn op_suite(h: f64) -> Result<Vec<OpCheck>> {
    let positive = |t: Tensor<f64>| t.map(|v| v.abs() + 0.5);
    let distinct = |n: usize| Tensor::from_fn([1, n, n], |i| ((i[1] * 7 + i[2] * 13) % (n * n)) as f64 * 0.1 - 1.0);
    let cases: Vec<(&'static str, Vec<Tensor<f64>>, Build)> = vec![
        ("conv2d", vec![fill(&[2, 5, 6], 1), fill(&[3, 2, 3, 3], 2), fill(&[3], 3)], |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
            probe(g, y)
        }),
        ("depthwise_conv2d", vec![fill(&[3, 6, 6], 4), fill(&[3, 2, 2], 5), fill(&[3], 6)], |g, v| {
            let y = g.depthwise_conv2d(v[0], v[1], Some(v[2]), 2, 0)?;
            probe(g, y)
        }),
        ("maxpool2d", vec![distinct(6)], |g, v| {
            let y = g.maxpool2d(v[0], 2, 2)?;
            probe(g, y)
        }),
        ("add_broadcast", vec![fill(&[2, 3, 4], 7), fill(&[2, 1, 1], 8)], |g, v| {
            let y = g.add(v[0], v[1])?;
            probe(g, y)
        }),
        ("sub_broadcast", vec![fill(&[3, 4], 9), fill(&[1, 4], 10)], |g, v| {
            let y = g.sub(v[0], v[1])?;
            probe(g, y)
        }),
        ("mul_broadcast", vec![fill(&[2, 3, 4], 11), fill(&[1, 3, 1], 12)], |g, v| {
            let y = g.mul(v[0], v[1])?;
            probe(g, y)
        }),
        ("div", vec![fill(&[3, 4], 13), positive(fill(&[3, 1], 14))], |g, v| {
            let y = g.div(v[0], v[1])?;
            probe(g, y)
        }),
        ("scale_add_scalar", vec![fill(&[5], 15)], |g, v| {
            let y = g.scale(v[0], -1.7)?;
            let y = g.add_scalar(y, 0.3)?;
            probe(g, y)
        }),
        ("relu", vec![fill(&[4, 5], 16)], |g, v| {
            let y = g.relu(v[0])?;
            probe(g, y)
        }),
        ("elu_plus_one", vec![fill(&[4, 5], 17)], |g, v| {
            let y = g.elu_plus_one(v[0])?;
            probe(g, y)
        }),
        ("log_clamped", vec![positive(fill(&[6], 18))], |g, v| {
            let y = g.log_clamped(v[0], 1e-12)?;
            probe(g, y)
        }),
        ("matmul", vec![fill(&[3, 4], 19), fill(&[4, 5], 20)], |g, v| {
            let y = g.matmul(v[0], v[1], false, false)?;
            probe(g, y)
        }),
        ("matmul_transposed", vec![fill(&[4, 3], 21), fill(&[5, 4], 22)], |g, v| {
            let y = g.matmul(v[0], v[1], true, true)?;
            probe(g, y)
        }),
        ("matmul_batched", vec![fill(&[2, 3, 4], 23), fill(&[4, 2], 24)], |g, v| {
            let y = g.matmul(v[0], v[1], false, false)?;
            probe(g, y)
        }),
        ("permute", vec![fill(&[2, 3, 4], 25)], |g, v| {
            let y = g.permute(v[0], &[2, 0, 1])?;
            probe(g, y)
        }),
        ("reshape", vec![fill(&[2, 6], 26)], |g, v| {
            let y = g.reshape(v[0], &[3, 4])?;
            probe(g, y)
        }),
        ("concat", vec![fill(&[2, 3], 27), fill(&[2, 2], 28)], |g, v| {
            let y = g.concat(&[v[0], v[1]], 1)?;
            probe(g, y)
        }),
        ("softmax_last", vec![fill(&[3, 5], 29)], |g, v| {
            let y = g.softmax(v[0], 1)?;
            probe(g, y)
        }),
        ("softmax_inner", vec![fill(&[2, 4, 3], 30)], |g, v| {
            let y = g.softmax(v[0], 1)?;
            probe(g, y)
        }),
        ("layer_norm", vec![fill(&[3, 6], 31), fill(&[6], 32), fill(&[6], 33)], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            probe(g, y)
        }),
        ("upsample", vec![fill(&[2, 3, 4], 34)], |g, v| {
            let y = g.upsample(v[0], 2)?;
            probe(g, y)
        }),
        ("rotate_pairs", vec![fill(&[3, 4], 35)], |g, v| {
            let ang: Vec<f64> = (0..6).map(|k| 0.4 * k as f64 - 1.0).collect();
            let y = g.rotate_pairs(v[0], ang.iter().map(|a| a.cos()).collect(), ang.iter().map(|a| a.sin()).collect())?;
            probe(g, y)
        }),
        ("gather", vec![fill(&[6], 36)], |g, v| {
            let y = g.gather(v[0], vec![Some(4), None, Some(0), Some(4), Some(2)], &[5])?;
            probe(g, y)
        }),
        ("mean", vec![fill(&[3, 3], 37)], |g, v| {
            let y = g.mul(v[0], v[0])?;
            g.mean(y)
        }),
        ("sum_axis", vec![fill(&[3, 4], 38)], |g, v| {
            let y = g.sum_axis(v[0], 0)?;
            probe(g, y)
        }),
        ("attention", vec![fill(&[2, 3, 4], 39), fill(&[2, 5, 4], 40), fill(&[2, 5, 3], 41)], |g, v| {
            let y = g.attention(v[0], v[1], v[2], Some(0.5))?;
            probe(g, y)
        }),
        ("linear_attention", vec![fill(&[3, 4], 42), fill(&[5, 4], 43), fill(&[5, 2], 44)], |g, v| {
            let y = g.linear_attention(v[0], v[1], v[2], crate::LinearAttentionForm::Normalized)?;
            probe(g, y)
        }),
    ];
    cases
        .into_iter()
        .map(|(name, inputs, f)| {
            let r = check(&inputs, h, None, f)?;
            Ok(OpCheck { name, max_rel_error: r.iter().map(GradComparison::max_rel_error).fold(0.0, f64::max) })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap();
        let r = check(&[x], 1e-4, None, |g, v| {
            let y = g.mul(v[0], v[0])?;
            g.sum(y)
        })
        .unwrap();
        assert!(r[0].max_rel_error() < 1e-8);
        assert!((r[0].numeric[1] + 4.0).abs() < 1e-8);
    }
}
