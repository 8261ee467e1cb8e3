//! Patch extraction helpers behind convolution and transposed convolution.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Geometry of a sliding-window correlation over one sample.
///
/// `(h, w)` is the image side (the input of a convolution, the output of a
/// transposed convolution); `(oh, ow)` is the grid of window positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
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
    /// Geometry of a forward convolution over an `h x w` image. The output
    /// extent `(h + 2 pad - k) / stride + 1` must be integral.
    pub fn forward(
        channels: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let oh = out_extent(h, kh, stride, pad)?;
        let ow = out_extent(w, kw, stride, pad)?;
        Ok(Self {
            channels,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        })
    }

    /// Geometry of a transposed convolution reading an `ih x iw` grid; the
    /// produced image is `(ih - 1) stride - 2 pad + k` on each side.
    pub fn transposed(
        channels: usize,
        ih: usize,
        iw: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 || ih == 0 || iw == 0 {
            return Err(Error::Config("transposed convolution with empty input or zero stride".into()));
        }
        let h = ((ih - 1) * stride + kh)
            .checked_sub(2 * pad)
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::Config(format!("transposed convolution padding {pad} too large")))?;
        let w = ((iw - 1) * stride + kw)
            .checked_sub(2 * pad)
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::Config(format!("transposed convolution padding {pad} too large")))?;
        let g = Self::forward(channels, h, w, kh, kw, stride, pad)?;
        debug_assert_eq!((g.oh, g.ow), (ih, iw));
        Ok(g)
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.oh * self.ow
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.h * self.w
    }

    /// A 1x1, stride-1, unpadded window makes the column matrix equal to the image.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn out_extent(size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || k == 0 {
        return Err(Error::Config("convolution with zero stride or kernel".into()));
    }
    let padded = size + 2 * pad;
    if padded < k {
        return Err(Error::Config(format!(
            "kernel {k} larger than padded input {padded}"
        )));
    }
    if !(padded - k).is_multiple_of(stride) {
        return Err(Error::Config(format!(
            "non-integral output size: ({size} + 2*{pad} - {k}) / {stride} + 1"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Unfold one `channels x h x w` image into a `patch_len x positions` matrix.
pub fn im2col<T: Scalar>(img: &[T], g: &ConvGeom, cols: &mut [T]) {
    let n = g.positions();
    for c in 0..g.channels {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let out = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.oh {
                    let y = (oy * g.stride + ki) as isize - g.pad as isize;
                    let dst = &mut out[oy * g.ow..(oy + 1) * g.ow];
                    if y < 0 || y >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[y as usize * g.w..(y as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let x = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if x < 0 || x >= g.w as isize {
                            T::zero()
                        } else {
                            src[x as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add a column matrix back onto an image.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, img: &mut [T]) {
    let n = g.positions();
    for c in 0..g.channels {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.oh {
                    let y = (oy * g.stride + ki) as isize - g.pad as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[y as usize * g.w..(y as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let x = (ox * g.stride + kj) as isize - g.pad as isize;
                        if x >= 0 && x < g.w as isize {
                            dst[x as usize] = dst[x as usize] + src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}
