//! im2col / col2im lowering for single-sample 2D convolution.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

/// Output length of a convolution or pooling window along one axis.
pub fn output_len(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || input + 2 * padding < kernel {
        return None;
    }
    Some((input + 2 * padding - kernel) / stride + 1)
}

/// Unfolds `x` (C×H×W) into a `(C·k·k) × (Ho·Wo)` patch matrix. Out-of-bounds taps are zero.
pub fn im2col(x: ArrayView3<f64>, kernel: usize, stride: usize, padding: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let ho = output_len(h, kernel, stride, padding).expect("kernel larger than padded input");
    let wo = output_len(w, kernel, stride, padding).expect("kernel larger than padded input");
    let rows = c * kernel * kernel;
    let cols = ho * wo;
    let mut out = vec![0.0; rows * cols];
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("standard layout");
    for ci in 0..c {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ci * kernel + ky) * kernel + kx;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &src[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    let dst_row = &mut dst[oy * wo..(oy + 1) * wo];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((rows, cols), out).expect("shape computed above")
}

/// Adjoint of [`im2col`]: scatters patch-matrix entries back onto a C×H×W grid, summing overlaps.
pub fn col2im(
    cols: ArrayView2<f64>,
    shape: (usize, usize, usize),
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Array3<f64> {
    let (c, h, w) = shape;
    let ho = output_len(h, kernel, stride, padding).expect("kernel larger than padded input");
    let wo = output_len(w, kernel, stride, padding).expect("kernel larger than padded input");
    let ncols = ho * wo;
    let cols = cols.as_standard_layout();
    let src = cols.as_slice().expect("standard layout");
    let mut out = vec![0.0; c * h * w];
    for ci in 0..c {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ci * kernel + ky) * kernel + kx;
                let patch = &src[row * ncols..(row + 1) * ncols];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            out[base + ix as usize] += patch[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    Array3::from_shape_vec((c, h, w), out).expect("shape computed above")
}
