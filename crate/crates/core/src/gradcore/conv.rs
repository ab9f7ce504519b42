//! im2col / col2im lowering for strided, zero-padded 3D convolution.

use super::array::Real;

/// Geometry of a cubic-kernel convolution mapping a "large" grid onto a
/// "small" one: `small = (large + 2*pad - kernel) / stride + 1` per axis.
///
/// A forward convolution reads the large grid; a transposed convolution
/// writes into it with the same geometry.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub large: [usize; 3],
    pub small: [usize; 3],
}

impl ConvGeom {
    pub fn small_extent(large: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = large + 2 * pad;
        if padded < kernel {
            return None;
        }
        Some((padded - kernel) / stride + 1)
    }

    pub fn large_len(&self) -> usize {
        self.large.iter().product()
    }

    pub fn small_len(&self) -> usize {
        self.small.iter().product()
    }

    pub fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel * self.kernel
    }

    /// Output positions `o` along one axis whose input `o*stride - pad + kk`
    /// falls inside `0..len`.
    fn valid(&self, len: usize, out_len: usize, kk: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.pad);
        // o*s + kk >= p
        let lo = if kk >= p { 0 } else { (p - kk).div_ceil(s) };
        // o*s + kk < len + p
        let hi = if len + p > kk { ((len + p - kk - 1) / s + 1).min(out_len) } else { 0 };
        (lo.min(hi), hi)
    }

    /// `cols[rows, small_len]` from an image `[channels, large...]`.
    #[cfg(test)]
    pub fn im2col<T: Real>(&self, image: &[T], cols: &mut [T]) {
        self.im2col_at(image, cols, self.small_len(), 0);
    }

    /// Like [`ConvGeom::im2col`], writing row `r` to
    /// `cols[r * stride_row + off..][..small_len]`, so several images can sit side by
    /// side in one wide matrix.
    pub fn im2col_at<T: Real>(&self, image: &[T], cols: &mut [T], stride_row: usize, off: usize) {
        let [ld, lh, lw] = self.large;
        let [sd, sh, sw] = self.small;
        let (k, s, p) = (self.kernel, self.stride, self.pad);
        let plen = self.small_len();
        let mut row = 0;
        for c in 0..self.channels {
            let img = &image[c * ld * lh * lw..(c + 1) * ld * lh * lw];
            for kd in 0..k {
                let (d0, d1) = self.valid(ld, sd, kd);
                for kh in 0..k {
                    let (h0, h1) = self.valid(lh, sh, kh);
                    for kw in 0..k {
                        let (w0, w1) = self.valid(lw, sw, kw);
                        let out = &mut cols[row * stride_row + off..row * stride_row + off + plen];
                        row += 1;
                        if d0 >= d1 || h0 >= h1 || w0 >= w1 {
                            out.fill(T::ZERO);
                            continue;
                        }
                        out[..d0 * sh * sw].fill(T::ZERO);
                        out[d1 * sh * sw..].fill(T::ZERO);
                        for od in d0..d1 {
                            let id = od * s + kd - p;
                            let plane = &mut out[od * sh * sw..(od + 1) * sh * sw];
                            plane[..h0 * sw].fill(T::ZERO);
                            plane[h1 * sw..].fill(T::ZERO);
                            for oh in h0..h1 {
                                let ih = oh * s + kh - p;
                                let line = &mut plane[oh * sw..(oh + 1) * sw];
                                line[..w0].fill(T::ZERO);
                                line[w1..].fill(T::ZERO);
                                let base = (id * lh + ih) * lw + kw;
                                if s == 1 {
                                    let start = base + w0 - p;
                                    line[w0..w1].copy_from_slice(&img[start..start + (w1 - w0)]);
                                } else {
                                    for ow in w0..w1 {
                                        line[ow] = img[base + ow * s - p];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add `cols[rows, small_len]` into an image `[channels, large...]`.
    #[cfg(test)]
    pub fn col2im<T: Real>(&self, cols: &[T], image: &mut [T]) {
        self.col2im_at(cols, self.small_len(), 0, image);
    }

    /// Adjoint of [`ConvGeom::im2col_at`].
    pub fn col2im_at<T: Real>(&self, cols: &[T], stride_row: usize, off: usize, image: &mut [T]) {
        let [ld, lh, lw] = self.large;
        let [sd, sh, sw] = self.small;
        let (k, s, p) = (self.kernel, self.stride, self.pad);
        let plen = self.small_len();
        let mut row = 0;
        for c in 0..self.channels {
            let img = &mut image[c * ld * lh * lw..(c + 1) * ld * lh * lw];
            for kd in 0..k {
                let (d0, d1) = self.valid(ld, sd, kd);
                for kh in 0..k {
                    let (h0, h1) = self.valid(lh, sh, kh);
                    for kw in 0..k {
                        let (w0, w1) = self.valid(lw, sw, kw);
                        let src = &cols[row * stride_row + off..row * stride_row + off + plen];
                        row += 1;
                        for od in d0..d1 {
                            let id = od * s + kd - p;
                            for oh in h0..h1 {
                                let ih = oh * s + kh - p;
                                let line = &src[(od * sh + oh) * sw..(od * sh + oh + 1) * sw];
                                let base = (id * lh + ih) * lw + kw;
                                if s == 1 {
                                    let start = base + w0 - p;
                                    for (d, &v) in img[start..start + (w1 - w0)].iter_mut().zip(&line[w0..w1]) {
                                        *d += v;
                                    }
                                } else {
                                    for ow in w0..w1 {
                                        img[base + ow * s - p] += line[ow];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Copies samples `n0..n1` of `src[N, c, plen]` into `dst[c, (n1 - n0) * plen]`.
pub(crate) fn gather_samples<T: Real>(src: &[T], n0: usize, n1: usize, c: usize, plen: usize, dst: &mut [T]) {
    let width = (n1 - n0) * plen;
    for (j, s) in (n0..n1).enumerate() {
        for ch in 0..c {
            let from = &src[(s * c + ch) * plen..(s * c + ch + 1) * plen];
            dst[ch * width + j * plen..ch * width + (j + 1) * plen].copy_from_slice(from);
        }
    }
}

/// Inverse of [`gather_samples`]; adds into `dst` when `accumulate` is set.
pub(crate) fn scatter_samples<T: Real>(
    src: &[T],
    n0: usize,
    n1: usize,
    c: usize,
    plen: usize,
    dst: &mut [T],
    accumulate: bool,
) {
    let width = (n1 - n0) * plen;
    for (j, s) in (n0..n1).enumerate() {
        for ch in 0..c {
            let from = &src[ch * width + j * plen..ch * width + (j + 1) * plen];
            let to = &mut dst[(s * c + ch) * plen..(s * c + ch + 1) * plen];
            if accumulate {
                to.iter_mut().zip(from).for_each(|(d, &v)| *d += v);
            } else {
                to.copy_from_slice(from);
            }
        }
    }
}

/// Samples per lowered GEMM so the column buffer stays near `budget` values.
pub(crate) fn chunk_samples(n: usize, per_sample: usize, budget: usize) -> usize {
    (budget / per_sample.max(1)).clamp(1, n.max(1))
}

/// Writes the transpose of row-major `src[rows, cols]` into `dst[cols, rows]`.
pub(crate) fn transpose_into<T: Real>(src: &[T], rows: usize, cols: usize, dst: &mut [T]) {
    const B: usize = 32;
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}
