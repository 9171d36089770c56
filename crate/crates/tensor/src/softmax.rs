use crate::counters::{self, Kernel};
use crate::error::{arg_err, Result};
use crate::float::Float;
use crate::tensor::Tensor;

/// `(outer, len, inner)` decomposition of a tensor around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically stable softmax along `axis` (max-subtracted).
pub fn softmax<T: Float>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return arg_err("softmax", format!("axis {axis} out of range for rank {}", x.rank()));
    }
    counters::record(Kernel::Softmax);
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    if inner == 1 {
        for (row, dst) in xd.chunks(len.max(1)).zip(out.chunks_mut(len.max(1))) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut z = T::zero();
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v - m).exp();
                z += *d;
            }
            let inv = T::one() / z;
            dst.iter_mut().for_each(|d| *d *= inv);
        }
    } else {
        // Sweep whole rows of the reduced axis so memory access stays contiguous.
        let mut m = vec![T::zero(); inner];
        let mut z = vec![T::zero(); inner];
        for o in 0..outer {
            let block = o * len * inner;
            m.fill(T::neg_infinity());
            z.fill(T::zero());
            for l in 0..len {
                let row = &xd[block + l * inner..block + (l + 1) * inner];
                m.iter_mut().zip(row).for_each(|(a, &b)| *a = a.max(b));
            }
            for l in 0..len {
                let lo = block + l * inner;
                for i in 0..inner {
                    let e = (xd[lo + i] - m[i]).exp();
                    out[lo + i] = e;
                    z[i] += e;
                }
            }
            z.iter_mut().for_each(|v| *v = T::one() / *v);
            for l in 0..len {
                let lo = block + l * inner;
                out[lo..lo + inner].iter_mut().zip(&z).for_each(|(d, &inv)| *d *= inv);
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Input gradient of softmax given its output `y`.
pub fn softmax_backward<T: Float>(y: &Tensor<T>, axis: usize, grad_out: &Tensor<T>) -> Tensor<T> {
    let (outer, len, inner) = axis_split(y.shape(), axis);
    let yd = y.data();
    let gd = grad_out.data();
    let mut gx = vec![T::zero(); yd.len()];
    let mut dot = vec![T::zero(); inner];
    for o in 0..outer {
        let block = o * len * inner;
        dot.fill(T::zero());
        for l in 0..len {
            let lo = block + l * inner;
            for i in 0..inner {
                dot[i] += yd[lo + i] * gd[lo + i];
            }
        }
        for l in 0..len {
            let lo = block + l * inner;
            for i in 0..inner {
                gx[lo + i] = yd[lo + i] * (gd[lo + i] - dot[i]);
            }
        }
    }
    Tensor::new(y.shape().to_vec(), gx).expect("softmax grad shape")
}
