use crate::error::{dim_err, Result};

/// Shape bookkeeping for a strided, zero-padded 2-D cross-correlation over a
/// batch of `batch` images of `channels × height × width`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        batch: usize,
        channels: usize,
        height: usize,
        width: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return dim_err("conv stride must be positive");
        }
        let span_h = height + 2 * padding;
        let span_w = width + 2 * padding;
        if span_h < kernel_h || span_w < kernel_w {
            return dim_err(format!(
                "kernel {kernel_h}x{kernel_w} larger than padded input {span_h}x{span_w}"
            ));
        }
        Ok(ConvGeometry {
            batch,
            channels,
            height,
            width,
            kernel_h,
            kernel_w,
            stride,
            padding,
            out_h: (span_h - kernel_h) / stride + 1,
            out_w: (span_w - kernel_w) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    pub fn out_positions(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }
}

/// Unfolds `[N, C, H, W]` into `[C·kh·kw, N·out_h·out_w]`.
pub(crate) fn im2col(g: &ConvGeometry, img: &[f32]) -> Vec<f32> {
    let cols_w = g.out_positions();
    let per_img = g.out_h * g.out_w;
    let mut cols = vec![0.0f32; g.patch_len() * cols_w];
    let pad = g.padding as isize;
    for c in 0..g.channels {
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut cols[row * cols_w..(row + 1) * cols_w];
                for n in 0..g.batch {
                    let plane = &img[(n * g.channels + c) * g.height * g.width..][..g.height * g.width];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride) as isize - pad + ki as isize;
                        let base = n * per_img + oy * g.out_w;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * g.width..][..g.width];
                        for ox in 0..g.out_w {
                            let ix = (ox * g.stride) as isize - pad + kj as isize;
                            if ix >= 0 && ix < g.width as isize {
                                dst[base + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters and accumulates columns back into an image batch.
pub(crate) fn col2im(g: &ConvGeometry, cols: &[f32]) -> Vec<f32> {
    let cols_w = g.out_positions();
    let per_img = g.out_h * g.out_w;
    let mut img = vec![0.0f32; g.batch * g.channels * g.height * g.width];
    let pad = g.padding as isize;
    for c in 0..g.channels {
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &cols[row * cols_w..(row + 1) * cols_w];
                for n in 0..g.batch {
                    let plane_off = (n * g.channels + c) * g.height * g.width;
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride) as isize - pad + ki as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let base = n * per_img + oy * g.out_w;
                        let row_off = plane_off + iy as usize * g.width;
                        for ox in 0..g.out_w {
                            let ix = (ox * g.stride) as isize - pad + kj as isize;
                            if ix >= 0 && ix < g.width as isize {
                                img[row_off + ix as usize] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    img
}

/// `[N, F, P]` <-> `[F, N·P]` layout shuffles.
pub(crate) fn batch_major_to_channel_major(x: &[f32], n: usize, f: usize, p: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for b in 0..n {
        for c in 0..f {
            let src = &x[(b * f + c) * p..][..p];
            out[c * n * p + b * p..][..p].copy_from_slice(src);
        }
    }
    out
}

pub(crate) fn channel_major_to_batch_major(x: &[f32], n: usize, f: usize, p: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for c in 0..f {
        for b in 0..n {
            let src = &x[c * n * p + b * p..][..p];
            out[(b * f + c) * p..][..p].copy_from_slice(src);
        }
    }
    out
}

/// Operand layout for [`gemm`].
#[derive(Clone, Copy)]
pub(crate) enum Layout {
    Normal,
    Transposed,
}

/// `c = alpha·op(a)·op(b) + beta·c`, where `op(a)` is `m×k` and `op(b)` is `k×n`.
/// Row-major storage; `Transposed` means the buffer holds the transpose.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    la: Layout,
    b: &[f32],
    lb: Layout,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = match la {
        Layout::Normal => (k as isize, 1),
        Layout::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match lb {
        Layout::Normal => (n as isize, 1),
        Layout::Transposed => (1, k as isize),
    };
    // SAFETY: slices are sized for the given dims and strides (checked above in debug).
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeometry::new(2, 2, 5, 4, 3, 2, 2, 1).unwrap();
        let x: Vec<f32> = (0..2 * 2 * 5 * 4).map(|i| (i as f32 * 0.37).sin()).collect();
        let y: Vec<f32> = (0..g.patch_len() * g.out_positions())
            .map(|i| (i as f32 * 0.11).cos())
            .collect();
        let lhs: f64 = im2col(&g, &x)
            .iter()
            .zip(&y)
            .map(|(a, b)| (*a as f64) * (*b as f64))
            .sum();
        let rhs: f64 = col2im(&g, &y)
            .iter()
            .zip(&x)
            .map(|(a, b)| (*a as f64) * (*b as f64))
            .sum();
        assert!((lhs - rhs).abs() < 1e-4, "{lhs} vs {rhs}");
    }

    #[test]
    fn output_dims_follow_floor_rule() {
        let g = ConvGeometry::new(1, 3, 18, 32, 5, 5, 2, 2).unwrap();
        assert_eq!((g.out_h, g.out_w), (9, 16));
        assert!(ConvGeometry::new(1, 1, 2, 2, 5, 5, 1, 0).is_err());
    }
}
