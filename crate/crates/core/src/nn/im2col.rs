//! Patch extraction for convolutions.
//!
//! Convolutions are computed as `W · im2col(x)` so that both the forward and the
//! backward pass reduce to dense matrix products. The column matrix has shape
//! `[C·kh·kw, N·Ho·Wo]`; the backward pass scatters column gradients back with
//! [`Col2Im`].

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor, WithDType};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PatchGeometry {
    pub fn out_size(&self, size: usize) -> Option<usize> {
        let padded = size + 2 * self.padding;
        if padded < self.kernel || self.stride == 0 {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }
}

pub(crate) struct Im2Col {
    pub geometry: PatchGeometry,
}

struct Dims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

/// Output positions `o` in `0..out` whose input index `o·stride + k − padding` lies in
/// `0..size`.
fn valid_range(k: usize, size: usize, out: usize, g: PatchGeometry) -> std::ops::Range<usize> {
    let lo = g.padding.saturating_sub(k).div_ceil(g.stride);
    let hi = if size + g.padding > k {
        ((size + g.padding - k - 1) / g.stride + 1).min(out)
    } else {
        0
    };
    lo..hi.max(lo)
}

fn im2col_kernel<T: WithDType>(src: &[T], d: &Dims, g: PatchGeometry) -> Vec<T> {
    let k = g.kernel;
    let cols = d.n * d.ho * d.wo;
    let mut dst = vec![T::zero(); d.c * k * k * cols];
    for c in 0..d.c {
        for ky in 0..k {
            let ys = valid_range(ky, d.h, d.ho, g);
            for kx in 0..k {
                let xs = valid_range(kx, d.w, d.wo, g);
                let row = (c * k + ky) * k + kx;
                let dst_row = &mut dst[row * cols..(row + 1) * cols];
                for n in 0..d.n {
                    let plane = &src[(n * d.c + c) * d.h * d.w..(n * d.c + c + 1) * d.h * d.w];
                    for oy in ys.clone() {
                        let iy = oy * g.stride + ky - g.padding;
                        let src_line = &plane[iy * d.w..(iy + 1) * d.w];
                        let base = (n * d.ho + oy) * d.wo;
                        let out = &mut dst_row[base + xs.start..base + xs.end];
                        let first = xs.start * g.stride + kx - g.padding;
                        if g.stride == 1 {
                            out.copy_from_slice(&src_line[first..first + out.len()]);
                        } else {
                            for (i, v) in out.iter_mut().enumerate() {
                                *v = src_line[first + i * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
    dst
}

fn col2im_kernel<T: WithDType>(src: &[T], d: &Dims, g: PatchGeometry) -> Vec<T> {
    let k = g.kernel;
    let cols = d.n * d.ho * d.wo;
    let mut dst = vec![T::zero(); d.n * d.c * d.h * d.w];
    for c in 0..d.c {
        for ky in 0..k {
            let ys = valid_range(ky, d.h, d.ho, g);
            for kx in 0..k {
                let xs = valid_range(kx, d.w, d.wo, g);
                let row = (c * k + ky) * k + kx;
                let src_row = &src[row * cols..(row + 1) * cols];
                for n in 0..d.n {
                    let plane_start = (n * d.c + c) * d.h * d.w;
                    for oy in ys.clone() {
                        let iy = oy * g.stride + ky - g.padding;
                        let line = &mut dst[plane_start + iy * d.w..plane_start + (iy + 1) * d.w];
                        let base = (n * d.ho + oy) * d.wo;
                        let vals = &src_row[base + xs.start..base + xs.end];
                        let first = xs.start * g.stride + kx - g.padding;
                        for (i, v) in vals.iter().enumerate() {
                            line[first + i * g.stride] += *v;
                        }
                    }
                }
            }
        }
    }
    dst
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("im2col: input must be contiguous"),
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = layout.shape().dims4()?;
        let g = self.geometry;
        let (ho, wo) = match (g.out_size(h), g.out_size(w)) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => candle_core::bail!("im2col: kernel {} larger than padded input {h}x{w}", g.kernel),
        };
        let d = Dims { n, c, h, w, ho, wo };
        let shape = Shape::from((c * g.kernel * g.kernel, n * ho * wo));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(im2col_kernel(contiguous(v, layout)?, &d, g)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col_kernel(contiguous(v, layout)?, &d, g)),
            _ => candle_core::bail!("im2col: only f32 and f64 are supported"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (n, c, h, w) = arg.dims4()?;
        let op = Col2Im {
            geometry: self.geometry,
            input_shape: (n, c, h, w),
        };
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&op)?))
    }
}

/// Adjoint of [`Im2Col`]: accumulates column entries back onto the image grid.
pub(crate) struct Col2Im {
    pub geometry: PatchGeometry,
    pub input_shape: (usize, usize, usize, usize),
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = self.input_shape;
        let g = self.geometry;
        let (ho, wo) = match (g.out_size(h), g.out_size(w)) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => candle_core::bail!("col2im: inconsistent geometry"),
        };
        let (rows, cols) = layout.shape().dims2()?;
        if rows != c * g.kernel * g.kernel || cols != n * ho * wo {
            candle_core::bail!("col2im: column matrix {rows}x{cols} does not match input shape");
        }
        let d = Dims { n, c, h, w, ho, wo };
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(col2im_kernel(contiguous(v, layout)?, &d, g)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im_kernel(contiguous(v, layout)?, &d, g)),
            _ => candle_core::bail!("col2im: only f32 and f64 are supported"),
        };
        Ok((out, Shape::from((n, c, h, w))))
    }
}
