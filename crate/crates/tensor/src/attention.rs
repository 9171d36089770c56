//! Attention primitives on `[tokens, features]` matrices.

use crate::counters::{self, Kernel};
use crate::error::{shape_err, Result};
use crate::float::Float;
use crate::linalg::matmul;
use crate::softmax::softmax;
use crate::tensor::Tensor;

/// How the linear-attention kernel handles values and normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LinearAttentionForm {
    /// `phi(Q) (phi(K)^T V)` divided per query by `phi(Q) . sum_j phi(K_j)`.
    #[default]
    Normalized,
    /// `phi(Q) (phi(K)^T phi(V))` with no normalizer.
    Literal,
}

pub(crate) fn check_qkv<T: Float>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    let (n, d) = q.dims2()?;
    let (m, dk) = k.dims2()?;
    let (mv, dv) = v.dims2()?;
    if d != dk {
        return shape_err("attention", format!("query dim {d} != key dim {dk}"));
    }
    if m != mv {
        return shape_err("attention", format!("{m} keys but {mv} values"));
    }
    Ok((n, m, d, dv))
}

/// `softmax(Q K^T * scale) V`; `scale` is `1/sqrt(d)` when `scaled`, else 1.
pub fn vanilla_attention<T: Float>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, scaled: bool) -> Result<Tensor<T>> {
    let (n, m, d, _) = check_qkv(q, k, v)?;
    counters::add(Kernel::AttentionScores, (n * m) as u64);
    let mut scores = matmul(q, k, false, true)?;
    if scaled {
        let s = T::one() / T::lit(d as f64).sqrt();
        scores.data_mut().iter_mut().for_each(|x| *x *= s);
    }
    let p = softmax(&scores, 1)?;
    matmul(&p, v, false, false)
}

/// `elu(x) + 1`, strictly positive.
pub fn elu_plus_one<T: Float>(x: T) -> T {
    if x > T::zero() {
        x + T::one()
    } else {
        x.exp()
    }
}

/// Kernelized attention with feature map `elu + 1`.
pub fn linear_attention<T: Float>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    form: LinearAttentionForm,
) -> Result<Tensor<T>> {
    let (n, _, d, dv) = check_qkv(q, k, v)?;
    let fq = q.map(elu_plus_one);
    let fk = k.map(elu_plus_one);
    match form {
        LinearAttentionForm::Literal => {
            let fv = v.map(elu_plus_one);
            let kv = matmul(&fk, &fv, true, false)?;
            matmul(&fq, &kv, false, false)
        }
        LinearAttentionForm::Normalized => {
            let kv = matmul(&fk, v, true, false)?;
            let mut num = matmul(&fq, &kv, false, false)?;
            let mut ksum = vec![T::zero(); d];
            for row in fk.data().chunks(d) {
                for (s, &x) in ksum.iter_mut().zip(row) {
                    *s += x;
                }
            }
            let nd = num.data_mut();
            for i in 0..n {
                let z: T = fq.row(i).iter().zip(&ksum).map(|(&a, &b)| a * b).sum();
                let inv = T::one() / z;
                nd[i * dv..(i + 1) * dv].iter_mut().for_each(|x| *x *= inv);
            }
            Ok(num)
        }
    }
}
