//! Raw kernels shared by the tape ops and the plain-tensor helpers.

use crate::element::Element;
use crate::error::{invalid, Result, TensorError};
use crate::tensor::NdTensor;

/// Row-major matrix view: `rows × cols` with explicit strides, so transposes are free.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a, T> Mat<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `c = a · b + beta · c`, with `c` row-major `a.rows × b.cols`.
pub(crate) fn gemm<T: Element>(a: Mat<'_, T>, b: Mat<'_, T>, c: &mut [T], beta: T) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(c.len(), m * n, "gemm output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v = *v * beta);
        return;
    }
    // SAFETY: the slices cover every index reachable through the given
    // dimensions and strides (checked by the asserts above and the Mat constructors).
    unsafe {
        T::gemm(
            m,
            k,
            n,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(invalid(
                "conv2d",
                format!("expected [N,C,H,W] input and [O,C,kH,kW] kernel, got {input:?} and {kernel:?}"),
            ));
        }
        if stride == 0 {
            return Err(invalid("conv2d", "stride must be >= 1"));
        }
        if input[1] != kernel[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: input.to_vec(),
                rhs: kernel.to_vec(),
            });
        }
        let (h, w, kh, kw) = (input[2], input[3], kernel[2], kernel[3]);
        let out_extent = |size: usize, k: usize| -> Result<usize> {
            let padded = size + 2 * pad;
            if k == 0 || padded < k {
                return Err(invalid(
                    "conv2d",
                    format!("non-positive output extent (size {size}, kernel {k}, pad {pad})"),
                ));
            }
            Ok((padded - k) / stride + 1)
        };
        Ok(Self {
            c_in: input[1],
            h,
            w,
            c_out: kernel[0],
            kh,
            kw,
            stride,
            pad,
            h_out: out_extent(h, kh)?,
            w_out: out_extent(w, kw)?,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn out_positions(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Output columns `ox` whose input column `ox·stride + kj − pad` lies inside `[0, w)`.
fn valid_cols(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let off = kj as isize - g.pad as isize;
    let s = g.stride as isize;
    // smallest ox with ox·s + off >= 0
    let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
    // largest ox with ox·s + off <= w − 1
    let last = g.w as isize - 1 - off;
    let hi = if last < 0 { 0 } else { (last / s + 1).min(g.w_out as isize) };
    let lo = lo.min(hi);
    (lo as usize, hi as usize)
}

/// Unfold one image `[C,H,W]` into columns `[C·kH·kW, H'·W']`.
pub(crate) fn im2col<T: Element>(g: &ConvGeom, img: &[T], cols: &mut [T]) {
    let p = g.out_positions();
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_cols(g, kj);
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        line.fill(T::zero());
                        continue;
                    }
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    let src = &img[(c * g.h + iy as usize) * g.w..][..g.w];
                    let first = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[first..first + (hi - lo)]);
                    } else {
                        for (o, out) in line[lo..hi].iter_mut().enumerate() {
                            *out = src[first + o * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Unfold one image into rows `[H'·W', C·kH·kW]`, the transpose of [`im2col`].
pub(crate) fn im2row<T: Element>(g: &ConvGeom, img: &[T], rows: &mut [T]) {
    let kl = g.patch_len();
    for oy in 0..g.h_out {
        for ox in 0..g.w_out {
            let dst = &mut rows[(oy * g.w_out + ox) * kl..][..kl];
            let mut at = 0;
            for c in 0..g.c_in {
                for ki in 0..g.kh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let inside_y = iy >= 0 && iy < g.h as isize;
                    for kj in 0..g.kw {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        dst[at] = if inside_y && ix >= 0 && ix < g.w as isize {
                            img[(c * g.h + iy as usize) * g.w + ix as usize]
                        } else {
                            T::zero()
                        };
                        at += 1;
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image gradient.
pub(crate) fn col2im<T: Element>(g: &ConvGeom, cols: &[T], img: &mut [T]) {
    let p = g.out_positions();
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_cols(g, kj);
                if lo >= hi {
                    continue;
                }
                let first = lo * g.stride + kj - g.pad;
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut img[(c * g.h + iy as usize) * g.w..][..g.w];
                    let line = &src[oy * g.w_out + lo..oy * g.w_out + hi];
                    if g.stride == 1 {
                        for (d, &v) in dst[first..first + line.len()].iter_mut().zip(line) {
                            *d = *d + v;
                        }
                    } else {
                        for (o, &v) in line.iter().enumerate() {
                            let ix = first + o * g.stride;
                            dst[ix] = dst[ix] + v;
                        }
                    }
                }
            }
        }
    }
}

/// Batched cross-correlation forward: `x [N,C,H,W]`, `k [O,C,kH,kW]`.
pub(crate) fn conv2d_forward<T: Element>(
    g: &ConvGeom,
    n: usize,
    x: &[T],
    k: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (kl, p) = (g.patch_len(), g.out_positions());
    let mut cols = vec![T::zero(); kl * p];
    let mut out = vec![T::zero(); n * g.c_out * p];
    let img_len = g.c_in * g.h * g.w;
    for b in 0..n {
        im2col(g, &x[b * img_len..(b + 1) * img_len], &mut cols);
        let dst = &mut out[b * g.c_out * p..(b + 1) * g.c_out * p];
        gemm(Mat::new(k, g.c_out, kl), Mat::new(&cols, kl, p), dst, T::zero());
        if let Some(bias) = bias {
            for (o, row) in dst.chunks_mut(p).enumerate() {
                let b = bias[o];
                row.iter_mut().for_each(|v| *v = *v + b);
            }
        }
    }
    out
}

/// Cross-correlation of a single `[C_in,H,W]` image with `[C_out,C_in,kH,kW]`.
///
/// Output extent is `(H + 2·padding − kH)/stride + 1` (floor), likewise for `W`.
pub fn conv2d<T: Element>(
    input: &NdTensor<T>,
    kernel: &NdTensor<T>,
    stride: usize,
    padding: usize,
) -> Result<NdTensor<T>> {
    if input.rank() != 3 {
        return Err(invalid("conv2d", format!("expected [C,H,W] input, got {:?}", input.shape())));
    }
    let s = input.shape();
    let g = ConvGeom::new(&[1, s[0], s[1], s[2]], kernel.shape(), stride, padding)?;
    let out = conv2d_forward(&g, 1, input.data(), kernel.data(), None);
    NdTensor::new([g.c_out, g.h_out, g.w_out], out)
}

/// Plain matrix product `[M,K] · [K,N]`.
pub fn matmul<T: Element>(a: &NdTensor<T>, b: &NdTensor<T>) -> Result<NdTensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![T::zero(); m * n];
    gemm(Mat::new(a.data(), m, k), Mat::new(b.data(), k, n), &mut out, T::zero());
    NdTensor::new([m, n], out)
}
