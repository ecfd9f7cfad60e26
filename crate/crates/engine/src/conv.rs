//! im2col / col2im lowering for 2-D convolution.
//!
//! A convolution over one sample becomes a single GEMM:
//! `y = w_mat (Cout x Cin*kh*kw)  ·  col (Cin*kh*kw x Ho*Wo)`.

use crate::real::Real;
use ndarray::{Array2, ArrayView3, ArrayViewMut3};

/// Output spatial size for one axis.
#[inline]
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Expands one sample `[Cin, H, W]` into the column matrix
/// `[Cin*kh*kw, Ho*Wo]`. Out-of-range taps (padding) contribute zeros.
pub fn im2col<T: Real>(
    x: ArrayView3<T>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<T> {
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(w, kw, stride, pad);
    let mut col = Array2::<T>::zeros((cin * kh * kw, ho * wo));
    for c in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let mut row_view = col.row_mut(row);
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        row_view[oy * wo + ox] = x[(c, iy as usize, ix as usize)];
                    }
                }
            }
        }
    }
    col
}

/// Scatter-adds a column-matrix gradient `[Cin*kh*kw, Ho*Wo]` back into the
/// input-shaped gradient `[Cin, H, W]` (the adjoint of [`im2col`]).
pub fn col2im_add<T: Real>(
    dcol: &Array2<T>,
    mut dx: ArrayViewMut3<T>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) {
    let (cin, h, w) = (dx.shape()[0], dx.shape()[1], dx.shape()[2]);
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(w, kw, stride, pad);
    debug_assert_eq!(dcol.shape(), &[cin * kh * kw, ho * wo]);
    for c in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let row_view = dcol.row(row);
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[(c, iy as usize, ix as usize)] += row_view[oy * wo + ox];
                    }
                }
            }
        }
    }
}
