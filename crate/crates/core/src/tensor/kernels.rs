//! Raw loops behind the differentiable primitives. Every function here works
//! on flat row-major slices; shape checking happens in the tape layer.

use serde::{Deserialize, Serialize};

use super::Scalar;
use crate::error::{arg_err, dim_err, Result};

/// `a[m×k] · b[k×n]`
pub(crate) fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `aᵀ · c` for `a[m×k]`, `c[m×n]`, giving `k×n`.
pub(crate) fn matmul_at_b<T: Scalar>(a: &[T], c: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let c_row = &c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &cv) in out_row.iter_mut().zip(c_row) {
                *o += av * cv;
            }
        }
    }
    out
}

/// `c · bᵀ` for `c[m×n]`, `b[k×n]`, giving `m×k`.
pub(crate) fn matmul_a_bt<T: Scalar>(c: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * k];
    for i in 0..m {
        let c_row = &c[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            out[i * k + p] = dot(c_row, b_row);
        }
    }
    out
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Output spatial size `ceil(in / stride)`, zero padding split with the
    /// extra row/column at the bottom/right.
    Same,
    /// No padding.
    Valid,
}

/// Spatial bookkeeping shared by regular and depthwise convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub channels: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input_shape: &[usize], k_h: usize, k_w: usize, stride: usize, padding: Padding) -> Result<Self> {
        let &[batch, in_h, in_w, channels] = input_shape else {
            return Err(dim_err!("convolution input must be B×H×W×C, got {input_shape:?}"));
        };
        if stride == 0 {
            return Err(arg_err!("stride must be positive"));
        }
        let (out_h, pad_top) = out_dim(in_h, k_h, stride, padding);
        let (out_w, pad_left) = out_dim(in_w, k_w, stride, padding);
        if out_h == 0 || out_w == 0 {
            return Err(dim_err!("kernel {k_h}×{k_w} larger than padded input {in_h}×{in_w}"));
        }
        Ok(ConvGeometry {
            batch,
            in_h,
            in_w,
            channels,
            k_h,
            k_w,
            stride,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    /// Input coordinate touched by output position `o` and kernel tap `k`.
    #[inline]
    fn src(o: usize, k: usize, stride: usize, pad: usize, limit: usize) -> Option<usize> {
        let pos = (o * stride + k).checked_sub(pad)?;
        (pos < limit).then_some(pos)
    }
}

fn out_dim(input: usize, kernel: usize, stride: usize, padding: Padding) -> (usize, usize) {
    match padding {
        Padding::Valid => {
            if kernel > input {
                (0, 0)
            } else {
                ((input - kernel) / stride + 1, 0)
            }
        }
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(input);
            (out, total / 2)
        }
    }
}

/// Visits every (input pixel offset, kernel tap, output pixel offset) triple,
/// offsets measured in pixels (multiply by channel count for element offsets).
#[inline]
fn for_each_tap(g: &ConvGeometry, mut f: impl FnMut(usize, usize, usize)) {
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ky in 0..g.k_h {
                let Some(iy) = ConvGeometry::src(oy, ky, g.stride, g.pad_top, g.in_h) else {
                    continue;
                };
                for ox in 0..g.out_w {
                    let out_px = (b * g.out_h + oy) * g.out_w + ox;
                    for kx in 0..g.k_w {
                        let Some(ix) = ConvGeometry::src(ox, kx, g.stride, g.pad_left, g.in_w) else {
                            continue;
                        };
                        let in_px = (b * g.in_h + iy) * g.in_w + ix;
                        f(in_px, ky * g.k_w + kx, out_px);
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(x: &[T], kernel: &[T], g: &ConvGeometry, c_out: usize) -> Vec<T> {
    let c_in = g.channels;
    let mut out = vec![T::zero(); g.batch * g.out_h * g.out_w * c_out];
    for_each_tap(g, |in_px, tap, out_px| {
        let x_row = &x[in_px * c_in..(in_px + 1) * c_in];
        let k_tap = &kernel[tap * c_in * c_out..(tap + 1) * c_in * c_out];
        let o_row = &mut out[out_px * c_out..(out_px + 1) * c_out];
        for (ci, &xv) in x_row.iter().enumerate() {
            let k_row = &k_tap[ci * c_out..(ci + 1) * c_out];
            for (o, &kv) in o_row.iter_mut().zip(k_row) {
                *o += xv * kv;
            }
        }
    });
    out
}

/// Returns `(d input, d kernel)`.
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    kernel: &[T],
    grad_out: &[T],
    g: &ConvGeometry,
    c_out: usize,
) -> (Vec<T>, Vec<T>) {
    let c_in = g.channels;
    let mut dx = vec![T::zero(); x.len()];
    let mut dk = vec![T::zero(); kernel.len()];
    for_each_tap(g, |in_px, tap, out_px| {
        let go = &grad_out[out_px * c_out..(out_px + 1) * c_out];
        let x_row = &x[in_px * c_in..(in_px + 1) * c_in];
        let base = tap * c_in * c_out;
        let dx_row = &mut dx[in_px * c_in..(in_px + 1) * c_in];
        for ci in 0..c_in {
            let k_row = &kernel[base + ci * c_out..base + (ci + 1) * c_out];
            dx_row[ci] += dot(go, k_row);
            let xv = x_row[ci];
            let dk_row = &mut dk[base + ci * c_out..base + (ci + 1) * c_out];
            for (d, &gv) in dk_row.iter_mut().zip(go) {
                *d += xv * gv;
            }
        }
    });
    (dx, dk)
}

pub(crate) fn depthwise_forward<T: Scalar>(x: &[T], kernel: &[T], g: &ConvGeometry) -> Vec<T> {
    let c = g.channels;
    let mut out = vec![T::zero(); g.batch * g.out_h * g.out_w * c];
    for_each_tap(g, |in_px, tap, out_px| {
        let x_row = &x[in_px * c..(in_px + 1) * c];
        let k_row = &kernel[tap * c..(tap + 1) * c];
        let o_row = &mut out[out_px * c..(out_px + 1) * c];
        for ((o, &xv), &kv) in o_row.iter_mut().zip(x_row).zip(k_row) {
            *o += xv * kv;
        }
    });
    out
}

pub(crate) fn depthwise_backward<T: Scalar>(
    x: &[T],
    kernel: &[T],
    grad_out: &[T],
    g: &ConvGeometry,
) -> (Vec<T>, Vec<T>) {
    let c = g.channels;
    let mut dx = vec![T::zero(); x.len()];
    let mut dk = vec![T::zero(); kernel.len()];
    for_each_tap(g, |in_px, tap, out_px| {
        let go = &grad_out[out_px * c..(out_px + 1) * c];
        let x_row = &x[in_px * c..(in_px + 1) * c];
        let k_row = &kernel[tap * c..(tap + 1) * c];
        let dx_row = &mut dx[in_px * c..(in_px + 1) * c];
        for ((d, &gv), &kv) in dx_row.iter_mut().zip(go).zip(k_row) {
            *d += gv * kv;
        }
        let dk_row = &mut dk[tap * c..(tap + 1) * c];
        for ((d, &gv), &xv) in dk_row.iter_mut().zip(go).zip(x_row) {
            *d += gv * xv;
        }
    });
    (dx, dk)
}

/// `(outer, len, inner)` strides for reducing along `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax<T: Scalar>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).map(|j| x[idx(j)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for j in 0..len {
                let e = (x[idx(j)] - max).exp();
                out[idx(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[idx(j)] /= total;
            }
        }
    }
    out
}

pub(crate) fn softmax_backward<T: Scalar>(y: &[T], grad_out: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let s = (0..len).fold(T::zero(), |acc, j| acc + grad_out[idx(j)] * y[idx(j)]);
            for j in 0..len {
                dx[idx(j)] = y[idx(j)] * (grad_out[idx(j)] - s);
            }
        }
    }
    dx
}
