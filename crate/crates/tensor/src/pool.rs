use crate::conv::out_dim;
use crate::counters::{self, Kernel};
use crate::error::{arg_err, shape_err, Result};
use crate::float::Float;
use crate::tensor::Tensor;

/// Max-pooling over `k x k` windows without padding.
///
/// Returns the pooled map and, for every output cell, the flat input index of
/// the selected element. Ties resolve to the first element in row-major
/// window order.
pub fn maxpool2d<T: Float>(input: &Tensor<T>, k: usize, stride: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let (c, h, w) = input.dims3()?;
    if k == 0 || stride == 0 {
        return arg_err("maxpool2d", "window and stride must be at least 1");
    }
    let (Some(ho), Some(wo)) = (out_dim(h, k, stride, 0), out_dim(w, k, stride, 0)) else {
        return shape_err("maxpool2d", format!("window {k} larger than {h}x{w} input"));
    };
    counters::record(Kernel::MaxPool2d);
    let x = input.data();
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut arg = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best_i = base + oy * stride * w + ox * stride;
                let mut best = x[best_i];
                for i in 0..k {
                    for j in 0..k {
                        let idx = base + (oy * stride + i) * w + ox * stride + j;
                        if x[idx] > best {
                            best = x[idx];
                            best_i = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    Ok((Tensor::new([c, ho, wo], out)?, arg))
}

/// Routes each output gradient to its argmax input element.
pub fn maxpool2d_backward<T: Float>(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let mut g = Tensor::zeros(input_shape.to_vec());
    let gd = g.data_mut();
    for (&i, &d) in argmax.iter().zip(grad_out.data()) {
        gd[i] += d;
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn global_max_of_arange() {
        let x = Tensor::<f32>::arange([1, 4, 4]);
        let (y, arg) = maxpool2d(&x, 4, 4).unwrap();
        assert_eq!(y.data(), &[15.0]);
        assert_eq!(arg, vec![15]);
    }

    #[test]
    fn ties_pick_first_in_window() {
        let x = Tensor::<f32>::full([1, 2, 2], 3.0);
        let (y, arg) = maxpool2d(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[3.0]);
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn oversized_window_rejected() {
        let x = Tensor::<f32>::zeros([1, 3, 3]);
        assert!(maxpool2d(&x, 4, 4).is_err());
    }
}
