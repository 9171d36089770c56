use crate::counters::{self, Kernel};
use crate::error::{shape_err, Result};
use crate::float::Float;
use crate::tensor::Tensor;

/// Strided read-only matrix view.
#[derive(Clone, Copy)]
pub(crate) struct View<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a, T: Float> View<'a, T> {
    pub(crate) fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        debug_assert!(data.len() >= rows * cols);
        View { data, rows, cols, rs: cols as isize, cs: 1 }
    }

    /// `op(X)` for a row-major `stored_rows x stored_cols` matrix.
    pub(crate) fn op(data: &'a [T], stored_rows: usize, stored_cols: usize, trans: bool) -> Self {
        let v = Self::row_major(data, stored_rows, stored_cols);
        if trans {
            v.t()
        } else {
            v
        }
    }

    pub(crate) fn t(self) -> Self {
        View { data: self.data, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }

    fn in_bounds(&self) -> bool {
        if self.rows == 0 || self.cols == 0 {
            return true;
        }
        let last = (self.rows as isize - 1) * self.rs + (self.cols as isize - 1) * self.cs;
        last >= 0 && (last as usize) < self.data.len()
    }
}

/// `C = A B + beta C` with `C` contiguous row-major `A.rows x B.cols`.
pub(crate) fn gemm<T: Float>(a: View<'_, T>, b: View<'_, T>, c: &mut [T], beta: T) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert!(a.in_bounds() && b.in_bounds(), "gemm view out of bounds");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(c.len() >= m * n, "gemm output too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    // SAFETY: both views were bounds-checked above and `c` is a distinct,
    // exclusively borrowed buffer of at least m * n elements.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Resolved geometry of a (possibly batched) matrix product.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatMulDims {
    pub batch: usize,
    pub a_batched: bool,
    pub b_batched: bool,
    pub a_rows: usize,
    pub a_cols: usize,
    pub b_rows: usize,
    pub b_cols: usize,
    pub n: usize,
    pub m: usize,
}

pub(crate) fn matmul_dims<T: Float>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    ta: bool,
    tb: bool,
) -> Result<MatMulDims> {
    let split = |t: &Tensor<T>| -> Result<(Option<usize>, usize, usize)> {
        match t.shape()[..] {
            [r, c] => Ok((None, r, c)),
            [bt, r, c] => Ok((Some(bt), r, c)),
            _ => shape_err("matmul", format!("operands must be rank 2 or 3, got {:?}", t.shape())),
        }
    };
    let (ba, ar, ac) = split(a)?;
    let (bb, br, bc) = split(b)?;
    let batch = match (ba, bb) {
        (Some(x), Some(y)) if x != y => {
            return shape_err("matmul", format!("batch sizes differ: {x} vs {y}"));
        }
        (Some(x), _) | (None, Some(x)) => x,
        (None, None) => 1,
    };
    let (n, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, m) = if tb { (bc, br) } else { (br, bc) };
    if k != k2 {
        return shape_err(
            "matmul",
            format!("inner dimensions differ: {:?}{} x {:?}{}", a.shape(), if ta { "^T" } else { "" }, b.shape(), if tb { "^T" } else { "" }),
        );
    }
    Ok(MatMulDims {
        batch,
        a_batched: ba.is_some(),
        b_batched: bb.is_some(),
        a_rows: ar,
        a_cols: ac,
        b_rows: br,
        b_cols: bc,
        n,
        m,
    })
}

/// `op(A) op(B)` where `op` optionally transposes the last two axes.
///
/// Rank-3 operands are batched along the leading axis; a rank-2 operand is
/// shared across the batch.
pub fn matmul<T: Float>(a: &Tensor<T>, b: &Tensor<T>, ta: bool, tb: bool) -> Result<Tensor<T>> {
    let d = matmul_dims(a, b, ta, tb)?;
    counters::record(Kernel::MatMul);
    let a_sz = d.a_rows * d.a_cols;
    let b_sz = d.b_rows * d.b_cols;
    let c_sz = d.n * d.m;
    let mut out = vec![T::zero(); d.batch * c_sz];
    for bi in 0..d.batch {
        let ad = if d.a_batched { &a.data()[bi * a_sz..(bi + 1) * a_sz] } else { a.data() };
        let bd = if d.b_batched { &b.data()[bi * b_sz..(bi + 1) * b_sz] } else { b.data() };
        let av = View::op(ad, d.a_rows, d.a_cols, ta);
        let bv = View::op(bd, d.b_rows, d.b_cols, tb);
        gemm(av, bv, &mut out[bi * c_sz..(bi + 1) * c_sz], T::zero());
    }
    let shape = if d.a_batched || d.b_batched { vec![d.batch, d.n, d.m] } else { vec![d.n, d.m] };
    Tensor::new(shape, out)
}

/// Gradients of `matmul(a, b, ta, tb)` given the output gradient.
pub fn matmul_backward<T: Float>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    ta: bool,
    tb: bool,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let d = matmul_dims(a, b, ta, tb)?;
    let a_sz = d.a_rows * d.a_cols;
    let b_sz = d.b_rows * d.b_cols;
    let c_sz = d.n * d.m;
    let mut ga = vec![T::zero(); a.numel()];
    let mut gb = vec![T::zero(); b.numel()];
    for bi in 0..d.batch {
        let (a_lo, b_lo) = (
            if d.a_batched { bi * a_sz } else { 0 },
            if d.b_batched { bi * b_sz } else { 0 },
        );
        let ad = &a.data()[a_lo..a_lo + a_sz];
        let bd = &b.data()[b_lo..b_lo + b_sz];
        let gd = &grad_out.data()[bi * c_sz..(bi + 1) * c_sz];
        let op_a = View::op(ad, d.a_rows, d.a_cols, ta);
        let op_b = View::op(bd, d.b_rows, d.b_cols, tb);
        let g = View::row_major(gd, d.n, d.m);
        let beta_a = if d.a_batched || bi == 0 { T::zero() } else { T::one() };
        let beta_b = if d.b_batched || bi == 0 { T::zero() } else { T::one() };
        let ga_slot = &mut ga[a_lo..a_lo + a_sz];
        if ta {
            gemm(op_b, g.t(), ga_slot, beta_a);
        } else {
            gemm(g, op_b.t(), ga_slot, beta_a);
        }
        let gb_slot = &mut gb[b_lo..b_lo + b_sz];
        if tb {
            gemm(g.t(), op_a, gb_slot, beta_b);
        } else {
            gemm(op_a.t(), g, gb_slot, beta_b);
        }
    }
    Ok((Tensor::new(a.shape().to_vec(), ga)?, Tensor::new(b.shape().to_vec(), gb)?))
}
