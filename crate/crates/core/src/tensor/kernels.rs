use super::Scalar;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    #[inline]
    fn source(&self, o: usize, tap: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + tap) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Unfolds `x` into a `(C·k·k) × (Ho·Wo)` matrix.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let mut cols = vec![T::zero(); g.c * g.k * g.k * ho * wo];
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let Some(iy) = g.source(oy, ky, g.h) else { continue };
                    for ox in 0..wo {
                        if let Some(ix) = g.source(ox, kx, g.w) {
                            dst[oy * wo + ox] = plane[iy * g.w + ix];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub(crate) fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let Some(iy) = g.source(oy, ky, g.h) else { continue };
                    for ox in 0..wo {
                        if let Some(ix) = g.source(ox, kx, g.w) {
                            dx[(c * g.h + iy) * g.w + ix] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Depthwise stride-1 convolution with a per-channel `k×k` kernel.
pub(crate) fn depthwise_forward<T: Scalar>(x: &[T], kern: &[T], g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let mut out = vec![T::zero(); g.c * ho * wo];
    for c in 0..g.c {
        let kc = &kern[c * g.k * g.k..(c + 1) * g.k * g.k];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = T::zero();
                for ky in 0..g.k {
                    let Some(iy) = g.source(oy, ky, g.h) else { continue };
                    for kx in 0..g.k {
                        if let Some(ix) = g.source(ox, kx, g.w) {
                            acc += kc[ky * g.k + kx] * x[(c * g.h + iy) * g.w + ix];
                        }
                    }
                }
                out[(c * ho + oy) * wo + ox] = acc;
            }
        }
    }
    out
}

pub(crate) fn depthwise_backward<T: Scalar>(
    x: &[T],
    kern: &[T],
    dy: &[T],
    g: &ConvGeom,
    dx: Option<&mut Vec<T>>,
    dk: Option<&mut Vec<T>>,
) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let mut dx = dx;
    let mut dk = dk;
    for c in 0..g.c {
        for oy in 0..ho {
            for ox in 0..wo {
                let gy = dy[(c * ho + oy) * wo + ox];
                if gy == T::zero() {
                    continue;
                }
                for ky in 0..g.k {
                    let Some(iy) = g.source(oy, ky, g.h) else { continue };
                    for kx in 0..g.k {
                        let Some(ix) = g.source(ox, kx, g.w) else { continue };
                        let xi = (c * g.h + iy) * g.w + ix;
                        let ki = (c * g.k + ky) * g.k + kx;
                        if let Some(dx) = dx.as_deref_mut() {
                            dx[xi] += kern[ki] * gy;
                        }
                        if let Some(dk) = dk.as_deref_mut() {
                            dk[ki] += x[xi] * gy;
                        }
                    }
                }
            }
        }
    }
}

/// Half-open input range averaged into output cell `i` of `out` cells.
/// Works for both shrinking and growing extents.
#[inline]
pub(crate) fn pool_range(i: usize, input: usize, out: usize) -> (usize, usize) {
    let start = i * input / out;
    let end = ((i + 1) * input).div_ceil(out);
    (start, end.max(start + 1))
}
