use super::scalar::Scalar;
use crate::error::{dim_err, Result};

/// Shapes of one 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

/// `⌊(n + 2·pad − k)/stride⌋ + 1`, or `None` when non-positive.
pub fn conv_out_extent(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    if stride == 0 || k == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 3 || kernel.len() != 4 {
            return Err(dim_err!(
                "conv2d expects c×h×w input and o×c×k×k kernels, got {:?} and {:?}",
                input,
                kernel
            ));
        }
        let (c_in, h, w) = (input[0], input[1], input[2]);
        let (c_out, kc, k, k2) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if kc != c_in || k != k2 {
            return Err(dim_err!(
                "kernel {:?} incompatible with {} input channels",
                kernel,
                c_in
            ));
        }
        let (Some(h_out), Some(w_out)) = (conv_out_extent(h, k, stride, pad), conv_out_extent(w, k, stride, pad))
        else {
            return Err(dim_err!(
                "kernel {} stride {} pad {} leaves no output on {}×{}",
                k,
                stride,
                pad,
                h,
                w
            ));
        };
        Ok(Self {
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            h_out,
            w_out,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    /// Input coordinate for output `o` and kernel tap `t`, if inside the image.
    #[inline]
    fn src(&self, o: usize, t: usize, n: usize) -> Option<usize> {
        let p = (o * self.stride + t).checked_sub(self.pad)?;
        (p < n).then_some(p)
    }
}

/// Unfold the input into a `(c_in·k·k) × (h_out·w_out)` column matrix.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let hw = g.h_out * g.w_out;
    let mut cols = vec![T::zero(); g.patch_len() * hw];
    for c in 0..g.c_in {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..g.h_out {
                    let Some(iy) = g.src(oy, ki, g.h) else { continue };
                    let src_row = &x[(c * g.h + iy) * g.w..(c * g.h + iy + 1) * g.w];
                    for ox in 0..g.w_out {
                        if let Some(ix) = g.src(ox, kj, g.w) {
                            dst[oy * g.w_out + ox] = src_row[ix];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back onto the input grid.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let hw = g.h_out * g.w_out;
    let mut x = vec![T::zero(); g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..g.h_out {
                    let Some(iy) = g.src(oy, ki, g.h) else { continue };
                    for ox in 0..g.w_out {
                        if let Some(ix) = g.src(ox, kj, g.w) {
                            x[(c * g.h + iy) * g.w + ix] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
    x
}
