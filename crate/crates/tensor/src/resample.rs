use crate::counters::{self, Kernel};
use crate::error::{arg_err, Result};
use crate::float::Float;
use crate::tensor::Tensor;

/// Source taps `(i0, i1, weight_of_i1)` for each output index along one axis,
/// using the half-pixel (align-corners = false) convention with edge clamping.
fn taps(n_in: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n_in * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear upsampling of a `[C, H, W]` map by an integer factor.
pub fn bilinear_upsample<T: Float>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (c, h, w) = input.dims3()?;
    if factor == 0 {
        return arg_err("bilinear_upsample", "factor must be at least 1");
    }
    if factor == 1 {
        return Ok(input.clone());
    }
    counters::record(Kernel::Upsample);
    let ty = taps(h, factor);
    let tx = taps(w, factor);
    let (ho, wo) = (h * factor, w * factor);
    let x = input.data();
    let mut out = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        let plane = &x[ch * h * w..][..h * w];
        for &(y0, y1, wy) in &ty {
            let wy = T::lit(wy);
            for &(x0, x1, wx) in &tx {
                let wx = T::lit(wx);
                let top = plane[y0 * w + x0] * (T::one() - wx) + plane[y0 * w + x1] * wx;
                let bot = plane[y1 * w + x0] * (T::one() - wx) + plane[y1 * w + x1] * wx;
                out.push(top * (T::one() - wy) + bot * wy);
            }
        }
    }
    Tensor::new([c, ho, wo], out)
}

pub fn bilinear_upsample_backward<T: Float>(input_shape: &[usize], factor: usize, grad_out: &Tensor<T>) -> Tensor<T> {
    if factor == 1 {
        return grad_out.clone();
    }
    let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    let ty = taps(h, factor);
    let tx = taps(w, factor);
    let wo = w * factor;
    let g = grad_out.data();
    let mut gx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let plane = &mut gx[ch * h * w..][..h * w];
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            let wy = T::lit(wy);
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let wx = T::lit(wx);
                let d = g[(ch * h * factor + oy) * wo + ox];
                plane[y0 * w + x0] += d * (T::one() - wy) * (T::one() - wx);
                plane[y0 * w + x1] += d * (T::one() - wy) * wx;
                plane[y1 * w + x0] += d * wy * (T::one() - wx);
                plane[y1 * w + x1] += d * wy * wx;
            }
        }
    }
    Tensor::new(input_shape.to_vec(), gx).expect("upsample grad shape")
}
