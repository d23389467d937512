//! im2col / col2im for square-kernel 2-D convolutions.
//!
//! Feature maps are flattened `(channel, row, col)`. Patch columns are ordered
//! `(channel, ky, kx)`, which is also the row order of a conv weight matrix.

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Spatial metadata of a convolution. The output channel count is the
/// column count of the weight matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 {
            return Err(Error::InvalidLayer("kernel and stride must be positive".into()));
        }
        if self.in_h + 2 * self.padding < self.kernel || self.in_w + 2 * self.padding < self.kernel {
            return Err(Error::InvalidLayer("kernel larger than padded input".into()));
        }
        Ok(())
    }

    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// Output positions per channel.
    pub fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Rows of the weight matrix contributed by one input channel.
    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel
    }

    pub fn in_features(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    pub fn with_in_channels(mut self, c: usize) -> Self {
        self.in_channels = c;
        self
    }

    /// Walks every (position, patch column, input index) triple that hits the
    /// un-padded input.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow, k) = (self.out_h(), self.out_w(), self.kernel);
        let plane = self.in_h * self.in_w;
        for oy in 0..oh {
            for ox in 0..ow {
                let p = oy * ow + ox;
                for c in 0..self.in_channels {
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy as usize >= self.in_h {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix as usize >= self.in_w {
                                continue;
                            }
                            let col = (c * k + ky) * k + kx;
                            let src = c * plane + iy as usize * self.in_w + ix as usize;
                            f(p, col, src);
                        }
                    }
                }
            }
        }
    }
}

/// `x` is `batch × in_features`; returns `(batch·positions) × (in_channels·k²)`.
pub fn im2col(x: &Matrix, g: &ConvGeometry) -> Matrix {
    let batch = x.rows();
    let p_count = g.positions();
    let cols = g.in_channels * g.patch_len();
    let mut out = Matrix::zeros(batch * p_count, cols);
    let data = out.as_mut_slice();
    for b in 0..batch {
        let xb = x.row(b);
        let base = b * p_count;
        g.for_each_tap(|p, col, src| {
            data[(base + p) * cols + col] = xb[src];
        });
    }
    out
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
pub fn col2im(patches: &Matrix, g: &ConvGeometry, batch: usize) -> Matrix {
    let p_count = g.positions();
    let cols = g.in_channels * g.patch_len();
    let mut out = Matrix::zeros(batch, g.in_features());
    let src = patches.as_slice();
    for b in 0..batch {
        let ob = out.row_mut(b);
        let base = b * p_count;
        g.for_each_tap(|p, col, dst| {
            ob[dst] += src[(base + p) * cols + col];
        });
    }
    out
}

/// `(batch·positions) × channels` → `batch × (channels·positions)`.
pub fn positions_to_maps(y: &Matrix, batch: usize, positions: usize) -> Matrix {
    let ch = y.cols();
    let mut out = Matrix::zeros(batch, ch * positions);
    for b in 0..batch {
        let ob = out.row_mut(b);
        for p in 0..positions {
            let yr = y.row(b * positions + p);
            for c in 0..ch {
                ob[c * positions + p] = yr[c];
            }
        }
    }
    out
}

/// Inverse of [`positions_to_maps`].
pub fn maps_to_positions(y: &Matrix, batch: usize, positions: usize) -> Matrix {
    let ch = y.cols() / positions;
    let mut out = Matrix::zeros(batch * positions, ch);
    for b in 0..batch {
        let yb = y.row(b);
        for p in 0..positions {
            let or = out.row_mut(b * positions + p);
            for c in 0..ch {
                or[c] = yb[c * positions + p];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom() -> ConvGeometry {
        ConvGeometry {
            in_channels: 2,
            in_h: 4,
            in_w: 3,
            kernel: 3,
            stride: 1,
            padding: 1,
        }
    }

    #[test]
    fn output_size() {
        let g = geom();
        assert_eq!((g.out_h(), g.out_w()), (4, 3));
        let s2 = ConvGeometry { stride: 2, ..g };
        assert_eq!((s2.out_h(), s2.out_w()), (2, 2));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), p> == <x, col2im(p)>
        let g = geom();
        let x = Matrix::from_fn(2, g.in_features(), |i, j| ((i * 31 + j * 7) % 11) as f64 - 5.0);
        let cols = im2col(&x, &g);
        let p = Matrix::from_fn(cols.rows(), cols.cols(), |i, j| ((i * 13 + j * 5) % 9) as f64 - 4.0);
        let lhs: f64 = cols.as_slice().iter().zip(p.as_slice()).map(|(a, b)| a * b).sum();
        let back = col2im(&p, &g, 2);
        let rhs: f64 = x.as_slice().iter().zip(back.as_slice()).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn position_layout_roundtrip() {
        let y = Matrix::from_fn(6, 4, |i, j| (i * 4 + j) as f64);
        let maps = positions_to_maps(&y, 2, 3);
        assert_eq!(maps_to_positions(&maps, 2, 3), y);
        // channel-major: sample 0, channel 1, position 2
        assert_eq!(maps.get(0, 3 + 2), y.get(2, 1));
    }

    #[test]
    fn rejects_oversized_kernel() {
        let g = ConvGeometry {
            kernel: 7,
            padding: 0,
            ..geom()
        };
        assert!(g.validate().is_err());
    }
}
