//! Convolution kernels on `[C, H, W]` feature maps with zero padding.

use crate::counters::{self, Kernel};
use crate::error::{arg_err, shape_err, Result};
use crate::float::Float;
use crate::linalg::{gemm, View};
use crate::tensor::Tensor;

/// Output spatial size of a sliding window; `None` when the window does not fit.
pub fn out_dim(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < k || stride == 0 {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn conv_geometry<T: Float>(
    op: &'static str,
    input: &Tensor<T>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Result<Geometry> {
    let (c, h, w) = input.dims3()?;
    if stride == 0 {
        return arg_err(op, "stride must be at least 1");
    }
    let (Some(ho), Some(wo)) = (out_dim(h, kh, stride, pad), out_dim(w, kw, stride, pad)) else {
        return shape_err(op, format!("{kh}x{kw} window does not fit {h}x{w} input with pad {pad}"));
    };
    Ok(Geometry { c, h, w, kh, kw, ho, wo, stride, pad })
}

fn im2col<T: Float>(x: &[T], g: &Geometry) -> Vec<T> {
    let p = g.ho * g.wo;
    let mut cols = vec![T::zero(); g.c * g.kh * g.kw * p];
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = &mut cols[((c * g.kh + i) * g.kw + j) * p..][..p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Float>(cols: &[T], g: &Geometry) -> Vec<T> {
    let p = g.ho * g.wo;
    let mut x = vec![T::zero(); g.c * g.h * g.w];
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = &cols[((c * g.kh + i) * g.kw + j) * p..][..p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += row[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

fn check_kernel<T: Float>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<(usize, usize, usize)> {
    let [o, ci, kh, kw] = kernel.shape()[..] else {
        return shape_err("conv2d", format!("kernel must be [out, in, kh, kw], got {:?}", kernel.shape()));
    };
    let (c, _, _) = input.dims3()?;
    if ci != c {
        return shape_err("conv2d", format!("input has {c} channels, kernel expects {ci}"));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return arg_err("conv2d", format!("kernel size must be odd, got {kh}x{kw}"));
    }
    if let Some(b) = bias {
        if b.shape() != [o] {
            return shape_err("conv2d", format!("bias shape {:?}, expected [{o}]", b.shape()));
        }
    }
    Ok((o, kh, kw))
}

/// Dense 2-D convolution (cross-correlation) of a `[C, H, W]` map with a
/// `[O, C, kh, kw]` kernel.
pub fn conv2d<T: Float>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (o, kh, kw) = check_kernel(input, kernel, bias)?;
    let g = conv_geometry("conv2d", input, kh, kw, stride, pad)?;
    counters::record(Kernel::Conv2d);
    let p = g.ho * g.wo;
    let ckk = g.c * kh * kw;
    let mut out = vec![T::zero(); o * p];
    if let Some(b) = bias {
        for (oc, chunk) in out.chunks_mut(p).enumerate() {
            chunk.fill(b.data()[oc]);
        }
    }
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    let kv = View::row_major(kernel.data(), o, ckk);
    if g.is_pointwise() {
        gemm(kv, View::row_major(input.data(), ckk, p), &mut out, beta);
    } else {
        let cols = im2col(input.data(), &g);
        gemm(kv, View::row_major(&cols, ckk, p), &mut out, beta);
    }
    Tensor::new([o, g.ho, g.wo], out)
}

/// Gradients `(input, kernel, bias)` of [`conv2d`].
pub fn conv2d_backward<T: Float>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    with_bias: bool,
    stride: usize,
    pad: usize,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Option<Tensor<T>>)> {
    let (o, kh, kw) = check_kernel(input, kernel, None)?;
    let g = conv_geometry("conv2d", input, kh, kw, stride, pad)?;
    let p = g.ho * g.wo;
    let ckk = g.c * kh * kw;
    let gout = View::row_major(grad_out.data(), o, p);
    let kv = View::row_major(kernel.data(), o, ckk);

    let mut gk = vec![T::zero(); o * ckk];
    let gx = if g.is_pointwise() {
        gemm(gout, View::row_major(input.data(), ckk, p).t(), &mut gk, T::zero());
        let mut gx = vec![T::zero(); ckk * p];
        gemm(kv.t(), gout, &mut gx, T::zero());
        gx
    } else {
        let cols = im2col(input.data(), &g);
        gemm(gout, View::row_major(&cols, ckk, p).t(), &mut gk, T::zero());
        let mut gcols = vec![T::zero(); ckk * p];
        gemm(kv.t(), gout, &mut gcols, T::zero());
        col2im(&gcols, &g)
    };
    let gb = with_bias.then(|| {
        let sums = grad_out.data().chunks(p).map(|ch| ch.iter().copied().sum()).collect();
        Tensor::new([o], sums).expect("bias grad shape")
    });
    Ok((Tensor::new(input.shape().to_vec(), gx)?, Tensor::new(kernel.shape().to_vec(), gk)?, gb))
}

fn check_depthwise<T: Float>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<(usize, usize)> {
    let [kc, kh, kw] = kernel.shape()[..] else {
        return shape_err("depthwise_conv2d", format!("kernel must be [C, kh, kw], got {:?}", kernel.shape()));
    };
    let (c, _, _) = input.dims3()?;
    if kc != c {
        return shape_err("depthwise_conv2d", format!("input has {c} channels, kernel has {kc}"));
    }
    if let Some(b) = bias {
        if b.shape() != [c] {
            return shape_err("depthwise_conv2d", format!("bias shape {:?}, expected [{c}]", b.shape()));
        }
    }
    Ok((kh, kw))
}

/// Per-channel convolution: output channel `c` sees only input channel `c`.
/// Even kernel sizes are allowed (the token aggregation uses `s x s`).
pub fn depthwise_conv2d<T: Float>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (kh, kw) = check_depthwise(input, kernel, bias)?;
    let g = conv_geometry("depthwise_conv2d", input, kh, kw, stride, pad)?;
    counters::record(Kernel::DepthwiseConv2d);
    let x = input.data();
    let kd = kernel.data();
    let mut out = vec![T::zero(); g.c * g.ho * g.wo];
    for c in 0..g.c {
        let b = bias.map_or(T::zero(), |b| b.data()[c]);
        let plane = &x[c * g.h * g.w..][..g.h * g.w];
        let k = &kd[c * kh * kw..][..kh * kw];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let mut acc = b;
                for i in 0..kh {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for j in 0..kw {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            acc += k[i * kw + j] * plane[iy as usize * g.w + ix as usize];
                        }
                    }
                }
                out[(c * g.ho + oy) * g.wo + ox] = acc;
            }
        }
    }
    Tensor::new([g.c, g.ho, g.wo], out)
}

/// Gradients `(input, kernel, bias)` of [`depthwise_conv2d`].
pub fn depthwise_conv2d_backward<T: Float>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    with_bias: bool,
    stride: usize,
    pad: usize,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Option<Tensor<T>>)> {
    let (kh, kw) = check_depthwise(input, kernel, None)?;
    let g = conv_geometry("depthwise_conv2d", input, kh, kw, stride, pad)?;
    let x = input.data();
    let kd = kernel.data();
    let go = grad_out.data();
    let mut gx = vec![T::zero(); x.len()];
    let mut gk = vec![T::zero(); kd.len()];
    let mut gb = vec![T::zero(); g.c];
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..][..g.h * g.w];
        let k = &kd[c * kh * kw..][..kh * kw];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let d = go[(c * g.ho + oy) * g.wo + ox];
                gb[c] += d;
                for i in 0..kh {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for j in 0..kw {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            let xi = iy as usize * g.w + ix as usize;
                            gk[c * kh * kw + i * kw + j] += d * plane[xi];
                            gx[c * g.h * g.w + xi] += d * k[i * kw + j];
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), gx)?,
        Tensor::new(kernel.shape().to_vec(), gk)?,
        with_bias.then(|| Tensor::new([g.c], gb).expect("bias grad shape")),
    ))
}
