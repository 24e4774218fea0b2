//! Forward and backward kernels on raw row-major buffers.

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub in_c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

impl ConvGeom {
    /// Output columns `lo..hi` whose input column `ox * stride + kx - pad`
    /// lands inside the image, plus the input column of `lo`.
    fn valid_cols(&self, kx: usize) -> (usize, usize, usize) {
        let first = self.pad.saturating_sub(kx).div_ceil(self.stride);
        let hi = match (self.w + self.pad).checked_sub(kx + 1) {
            Some(d) => (d / self.stride + 1).min(self.ow),
            None => 0,
        };
        let lo = first.min(hi);
        (lo, hi, (lo * self.stride + kx).saturating_sub(self.pad))
    }
}

/// Unfolds one image `[in_c, h, w]` into `[in_c*kh*kw, oh*ow]`.
pub(crate) fn im2col<S: Scalar>(g: &ConvGeom, input: &[S], cols: &mut [S]) {
    let p = g.col_cols();
    for c in 0..g.in_c {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (lo, hi, ix0) = g.valid_cols(kx);
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(S::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    line[..lo].fill(S::zero());
                    line[hi..].fill(S::zero());
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[ix0..ix0 + hi - lo]);
                    } else {
                        for (v, &x) in line[lo..hi].iter_mut().zip(src[ix0..].iter().step_by(g.stride)) {
                            *v = x;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into `[in_c, h, w]`.
pub(crate) fn col2im<S: Scalar>(g: &ConvGeom, cols: &[S], out: &mut [S]) {
    let p = g.col_cols();
    for c in 0..g.in_c {
        let plane = &mut out[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi, ix0) = g.valid_cols(kx);
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let line = &src[oy * g.ow + lo..oy * g.ow + hi];
                    if g.stride == 1 {
                        for (d, &v) in dst[ix0..ix0 + line.len()].iter_mut().zip(line) {
                            *d += v;
                        }
                    } else {
                        for (d, &v) in dst[ix0..].iter_mut().step_by(g.stride).zip(line) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

/// Output extent of a 2x2 / stride-2 pool with replicate padding.
pub(crate) fn pooled(n: usize) -> usize {
    n.div_ceil(2)
}

/// Max over 2x2 windows; odd trailing rows/columns are replicated.
/// Returns the winning flat input index per output cell.
pub(crate) fn maxpool2x2<S: Scalar>(
    planes: usize,
    h: usize,
    w: usize,
    input: &[S],
    out: &mut [S],
    argmax: &mut [usize],
) {
    let (oh, ow) = (pooled(h), pooled(w));
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = usize::MAX;
                let mut best_v = S::neg_infinity();
                for dy in 0..2 {
                    let y = (2 * oy + dy).min(h - 1);
                    for dx in 0..2 {
                        let x = (2 * ox + dx).min(w - 1);
                        let idx = base + y * w + x;
                        if best == usize::MAX || input[idx] > best_v {
                            best = idx;
                            best_v = input[idx];
                        }
                    }
                }
                let o = (p * oh + oy) * ow + ox;
                out[o] = best_v;
                argmax[o] = best;
            }
        }
    }
}

/// Source coordinate and blend weight of one output coordinate under the
/// align-corners convention.
#[inline]
pub(crate) fn align_corners(o: usize, n_in: usize, n_out: usize) -> (usize, usize, f64) {
    if n_out <= 1 || n_in <= 1 {
        return (0, 0, 0.0);
    }
    let src = o as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
    let lo = (src.floor() as usize).min(n_in - 1);
    let hi = (lo + 1).min(n_in - 1);
    (lo, hi, src - lo as f64)
}

pub(crate) fn upsample_bilinear<S: Scalar>(
    planes: usize,
    (h, w): (usize, usize),
    (th, tw): (usize, usize),
    input: &[S],
    out: &mut [S],
) {
    let xs: Vec<_> = (0..tw).map(|x| align_corners(x, w, tw)).collect();
    for p in 0..planes {
        let src = &input[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * th * tw..(p + 1) * th * tw];
        for oy in 0..th {
            let (y0, y1, fy) = align_corners(oy, h, th);
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = src[y0 * w + x0].as_f64() * (1.0 - fx) + src[y0 * w + x1].as_f64() * fx;
                let bot = src[y1 * w + x0].as_f64() * (1.0 - fx) + src[y1 * w + x1].as_f64() * fx;
                dst[oy * tw + ox] = S::from_f64_lossy(top * (1.0 - fy) + bot * fy);
            }
        }
    }
}

pub(crate) fn upsample_bilinear_backward<S: Scalar>(
    planes: usize,
    (h, w): (usize, usize),
    (th, tw): (usize, usize),
    grad_out: &[S],
    grad_in: &mut [S],
) {
    let xs: Vec<_> = (0..tw).map(|x| align_corners(x, w, tw)).collect();
    for p in 0..planes {
        let g = &grad_out[p * th * tw..(p + 1) * th * tw];
        let acc = &mut grad_in[p * h * w..(p + 1) * h * w];
        for oy in 0..th {
            let (y0, y1, fy) = align_corners(oy, h, th);
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let go = g[oy * tw + ox].as_f64();
                let mut add = |idx: usize, wgt: f64| acc[idx] += S::from_f64_lossy(go * wgt);
                add(y0 * w + x0, (1.0 - fy) * (1.0 - fx));
                add(y0 * w + x1, (1.0 - fy) * fx);
                add(y1 * w + x0, fy * (1.0 - fx));
                add(y1 * w + x1, fy * fx);
            }
        }
    }
}
