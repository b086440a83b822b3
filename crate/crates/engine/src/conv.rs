//! im2col-based convolution kernels.
//!
//! Both convolution directions share one geometry: the *image* side is the
//! larger spatial grid (conv2d input, conv_transpose2d output) and the
//! *column* side is the strided grid. `im2col` maps image to columns and
//! `col2im` is its exact adjoint, which makes conv_transpose2d the adjoint of
//! conv2d by construction. Convolution is cross-correlation (no kernel flip).

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    /// Channels on the image side.
    pub channels: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub col_h: usize,
    pub col_w: usize,
}

impl ConvGeom {
    /// Geometry of a forward convolution over an `image_h x image_w` input.
    pub fn forward(
        op: &'static str,
        channels: usize,
        image: (usize, usize),
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Self> {
        check_hyper(op, kernel, stride)?;
        let padded_h = image.0 + 2 * pad.0;
        let padded_w = image.1 + 2 * pad.1;
        if padded_h < kernel.0 {
            return Err(shape_err(
                op,
                "height",
                format!("padded height {padded_h} smaller than kernel {}", kernel.0),
            ));
        }
        if padded_w < kernel.1 {
            return Err(shape_err(
                op,
                "width",
                format!("padded width {padded_w} smaller than kernel {}", kernel.1),
            ));
        }
        Ok(ConvGeom {
            channels,
            image_h: image.0,
            image_w: image.1,
            kernel_h: kernel.0,
            kernel_w: kernel.1,
            stride_h: stride.0,
            stride_w: stride.1,
            pad_h: pad.0,
            pad_w: pad.1,
            col_h: (padded_h - kernel.0) / stride.0 + 1,
            col_w: (padded_w - kernel.1) / stride.1 + 1,
        })
    }

    /// Geometry of a transposed convolution whose input is the `col_h x col_w` grid.
    pub fn transposed(
        op: &'static str,
        channels: usize,
        input: (usize, usize),
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Self> {
        check_hyper(op, kernel, stride)?;
        let full_h = (input.0 - 1) * stride.0 + kernel.0;
        let full_w = (input.1 - 1) * stride.1 + kernel.1;
        if full_h <= 2 * pad.0 {
            return Err(shape_err(
                op,
                "height",
                format!("padding {} consumes the whole output height {full_h}", pad.0),
            ));
        }
        if full_w <= 2 * pad.1 {
            return Err(shape_err(
                op,
                "width",
                format!("padding {} consumes the whole output width {full_w}", pad.1),
            ));
        }
        let geom = ConvGeom {
            channels,
            image_h: full_h - 2 * pad.0,
            image_w: full_w - 2 * pad.1,
            kernel_h: kernel.0,
            kernel_w: kernel.1,
            stride_h: stride.0,
            stride_w: stride.1,
            pad_h: pad.0,
            pad_w: pad.1,
            col_h: input.0,
            col_w: input.1,
        };
        debug_assert_eq!(
            (geom.image_h + 2 * pad.0 - kernel.0) / stride.0 + 1,
            input.0
        );
        Ok(geom)
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.image_h * self.image_w
    }

    /// Rows of the column matrix (`channels * kernel_h * kernel_w`).
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    /// Columns of the column matrix (`col_h * col_w`).
    pub fn col_cols(&self) -> usize {
        self.col_h * self.col_w
    }

    /// Range of output positions `o` for which `o * stride + k - pad` lands
    /// inside `[0, extent)`.
    fn valid_range(extent: usize, col: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
        let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
        // o * stride + k - pad <= extent - 1
        let limit = extent + pad;
        let hi = if limit > k {
            ((limit - k - 1) / stride + 1).min(col)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

fn check_hyper(op: &'static str, kernel: (usize, usize), stride: (usize, usize)) -> Result<()> {
    if kernel.0 == 0 || kernel.1 == 0 {
        return Err(shape_err(op, "kernel", "kernel extents must be >= 1"));
    }
    if stride.0 == 0 || stride.1 == 0 {
        return Err(shape_err(op, "stride", "stride must be >= 1"));
    }
    Ok(())
}

/// Unfold one image (`channels x image_h x image_w`) into `col`
/// (`col_rows x col_cols`, row-major).
pub fn im2col<T: Scalar>(img: &[T], g: &ConvGeom, col: &mut [T]) {
    debug_assert_eq!(img.len(), g.image_len());
    debug_assert_eq!(col.len(), g.col_rows() * g.col_cols());
    let cols = g.col_cols();
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &img[c * g.image_h * g.image_w..(c + 1) * g.image_h * g.image_w];
        for ki in 0..g.kernel_h {
            let (oh_lo, oh_hi) =
                ConvGeom::valid_range(g.image_h, g.col_h, ki, g.stride_h, g.pad_h);
            for kj in 0..g.kernel_w {
                let (ow_lo, ow_hi) =
                    ConvGeom::valid_range(g.image_w, g.col_w, kj, g.stride_w, g.pad_w);
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oh in 0..g.col_h {
                    let out = &mut dst[oh * g.col_w..(oh + 1) * g.col_w];
                    if oh < oh_lo || oh >= oh_hi || ow_lo >= ow_hi {
                        out.fill(T::zero());
                        continue;
                    }
                    let y = oh * g.stride_h + ki - g.pad_h;
                    let src = &plane[y * g.image_w..(y + 1) * g.image_w];
                    out[..ow_lo].fill(T::zero());
                    out[ow_hi..].fill(T::zero());
                    let x0 = ow_lo * g.stride_w + kj - g.pad_w;
                    if g.stride_w == 1 {
                        out[ow_lo..ow_hi].copy_from_slice(&src[x0..x0 + (ow_hi - ow_lo)]);
                    } else {
                        for (k, o) in out[ow_lo..ow_hi].iter_mut().enumerate() {
                            *o = src[x0 + k * g.stride_w];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add `col` back into `img` (which is
/// accumulated into, not overwritten).
pub fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, img: &mut [T]) {
    debug_assert_eq!(img.len(), g.image_len());
    debug_assert_eq!(col.len(), g.col_rows() * g.col_cols());
    let cols = g.col_cols();
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &mut img[c * g.image_h * g.image_w..(c + 1) * g.image_h * g.image_w];
        for ki in 0..g.kernel_h {
            let (oh_lo, oh_hi) =
                ConvGeom::valid_range(g.image_h, g.col_h, ki, g.stride_h, g.pad_h);
            for kj in 0..g.kernel_w {
                let (ow_lo, ow_hi) =
                    ConvGeom::valid_range(g.image_w, g.col_w, kj, g.stride_w, g.pad_w);
                let src = &col[row * cols..(row + 1) * cols];
                row += 1;
                if ow_lo >= ow_hi {
                    continue;
                }
                for oh in oh_lo..oh_hi {
                    let y = oh * g.stride_h + ki - g.pad_h;
                    let dst = &mut plane[y * g.image_w..(y + 1) * g.image_w];
                    let s = &src[oh * g.col_w + ow_lo..oh * g.col_w + ow_hi];
                    let x0 = ow_lo * g.stride_w + kj - g.pad_w;
                    if g.stride_w == 1 {
                        for (d, &v) in dst[x0..x0 + s.len()].iter_mut().zip(s) {
                            *d += v;
                        }
                    } else {
                        for (k, &v) in s.iter().enumerate() {
                            dst[x0 + k * g.stride_w] += v;
                        }
                    }
                }
            }
        }
    }
}
