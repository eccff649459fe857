//! Raw array kernels shared by the autodiff ops.

use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new(
        (batch, in_channels, height, width): (usize, usize, usize, usize),
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if height + 2 * pad < kernel || width + 2 * pad < kernel || stride == 0 {
            return None;
        }
        Some(Self {
            batch,
            in_channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_height: (height + 2 * pad - kernel) / stride + 1,
            out_width: (width + 2 * pad - kernel) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.batch * self.out_height * self.out_width
    }

    /// Input coordinate for output index `o` and kernel offset `k`, if inside the image.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    /// Output indices `lo..hi` whose source `o * stride + k - pad` lies in `0..extent`.
    #[inline]
    fn valid_range(&self, k: usize, out_extent: usize, extent: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.pad);
        let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
        let hi = if extent + p > k {
            ((extent + p - k - 1) / s + 1).min(out_extent)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

/// Unfold `x` (B, C, H, W) into a `(C*k*k, B*Ho*Wo)` patch matrix.
pub(crate) fn im2col<T: Scalar>(x: &[T], geo: &ConvGeometry) -> Vec<T> {
    let ncols = geo.col_cols();
    let plane = geo.height * geo.width;
    let out_plane = geo.out_height * geo.out_width;
    let mut cols = vec![T::zero(); geo.col_rows() * ncols];
    for c in 0..geo.in_channels {
        for ki in 0..geo.kernel {
            for kj in 0..geo.kernel {
                let row = (c * geo.kernel + ki) * geo.kernel + kj;
                let (lo, hi) = geo.valid_range(kj, geo.out_width, geo.width);
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for b in 0..geo.batch {
                    let src = &x[(b * geo.in_channels + c) * plane..][..plane];
                    let dst_b = &mut dst[b * out_plane..(b + 1) * out_plane];
                    for oy in 0..geo.out_height {
                        let Some(iy) = geo.source(oy, ki, geo.height) else {
                            continue;
                        };
                        let src_row = &src[iy * geo.width..(iy + 1) * geo.width];
                        let dst_row = &mut dst_b[oy * geo.out_width..(oy + 1) * geo.out_width];
                        if lo >= hi {
                            continue;
                        }
                        let first = lo * geo.stride + kj - geo.pad;
                        if geo.stride == 1 {
                            dst_row[lo..hi].copy_from_slice(&src_row[first..first + hi - lo]);
                        } else {
                            for (d, &v) in dst_row[lo..hi]
                                .iter_mut()
                                .zip(src_row[first..].iter().step_by(geo.stride))
                            {
                                *d = v;
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add a patch matrix back onto (B, C, H, W).
pub(crate) fn col2im<T: Scalar>(cols: &[T], geo: &ConvGeometry) -> Vec<T> {
    let ncols = geo.col_cols();
    let plane = geo.height * geo.width;
    let out_plane = geo.out_height * geo.out_width;
    let mut x = vec![T::zero(); geo.batch * geo.in_channels * plane];
    for c in 0..geo.in_channels {
        for ki in 0..geo.kernel {
            for kj in 0..geo.kernel {
                let row = (c * geo.kernel + ki) * geo.kernel + kj;
                let (lo, hi) = geo.valid_range(kj, geo.out_width, geo.width);
                let src = &cols[row * ncols..(row + 1) * ncols];
                for b in 0..geo.batch {
                    let dst = &mut x[(b * geo.in_channels + c) * plane..][..plane];
                    let src_b = &src[b * out_plane..(b + 1) * out_plane];
                    for oy in 0..geo.out_height {
                        let Some(iy) = geo.source(oy, ki, geo.height) else {
                            continue;
                        };
                        let src_row = &src_b[oy * geo.out_width..(oy + 1) * geo.out_width];
                        let dst_row = &mut dst[iy * geo.width..(iy + 1) * geo.width];
                        if lo >= hi {
                            continue;
                        }
                        let first = lo * geo.stride + kj - geo.pad;
                        for (d, &v) in dst_row[first..]
                            .iter_mut()
                            .step_by(geo.stride)
                            .zip(&src_row[lo..hi])
                        {
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
    x
}

/// (B, C, P) <-> (C, B, P) with P the per-channel plane size. The map is
/// its own inverse once `outer` and `inner` are swapped.
pub(crate) fn swap_leading_axes<T: Scalar>(
    src: &[T],
    outer: usize,
    inner: usize,
    plane: usize,
) -> Vec<T> {
    let mut dst = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let s = &src[(o * inner + i) * plane..][..plane];
            dst[(i * outer + o) * plane..][..plane].copy_from_slice(s);
        }
    }
    dst
}

/// Rotate one `h x w` plane clockwise by `turns` quarter turns.
///
/// One turn sends pixel `(i, j)` to `(j, h - 1 - i)`; odd turns need `h == w`.
pub(crate) fn rotate_plane<T: Copy>(src: &[T], dst: &mut [T], h: usize, w: usize, turns: u8) {
    match turns % 4 {
        0 => dst.copy_from_slice(src),
        1 => {
            for i in 0..h {
                for j in 0..w {
                    dst[j * h + (h - 1 - i)] = src[i * w + j];
                }
            }
        }
        2 => {
            for i in 0..h {
                for j in 0..w {
                    dst[(h - 1 - i) * w + (w - 1 - j)] = src[i * w + j];
                }
            }
        }
        _ => {
            for i in 0..h {
                for j in 0..w {
                    dst[(w - 1 - j) * h + i] = src[i * w + j];
                }
            }
        }
    }
}
