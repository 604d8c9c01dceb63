//! Patch extraction for convolutions as a custom op: `im2col` forward,
//! `col2im` (its adjoint) backward.

use std::ops::AddAssign;

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

#[derive(Debug, Clone, Copy)]
pub(crate) struct Geometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl Geometry {
    /// Calls `f(col_offset, src_token)` for every in-bounds tap of output
    /// row `(b, oy, ox)`, where `src_token` indexes the `[B*H*W]` rows.
    #[inline]
    fn taps(&self, b: usize, oy: usize, ox: usize, mut f: impl FnMut(usize, usize)) {
        let pad = (self.kernel / 2) as isize;
        for dy in 0..self.kernel {
            let iy = (oy * self.stride + dy) as isize - pad;
            if iy < 0 || iy >= self.height as isize {
                continue;
            }
            for dx in 0..self.kernel {
                let ix = (ox * self.stride + dx) as isize - pad;
                if ix < 0 || ix >= self.width as isize {
                    continue;
                }
                let token = (b * self.height + iy as usize) * self.width + ix as usize;
                f((dy * self.kernel + dx) * self.channels, token);
            }
        }
    }

    fn cols_shape(&self) -> Shape {
        Shape::from((
            self.batch * self.out_height * self.out_width,
            self.kernel * self.kernel * self.channels,
        ))
    }

    fn image_shape(&self) -> Shape {
        Shape::from((self.batch, self.height * self.width, self.channels))
    }

    fn im2col<T: Copy + Default>(&self, src: &[T]) -> Vec<T> {
        let row_len = self.kernel * self.kernel * self.channels;
        let c = self.channels;
        let mut dst = vec![T::default(); self.cols_shape().elem_count()];
        let mut r = 0;
        for b in 0..self.batch {
            for oy in 0..self.out_height {
                for ox in 0..self.out_width {
                    let row = &mut dst[r * row_len..(r + 1) * row_len];
                    self.taps(b, oy, ox, |off, tok| {
                        row[off..off + c].copy_from_slice(&src[tok * c..(tok + 1) * c]);
                    });
                    r += 1;
                }
            }
        }
        dst
    }

    fn col2im<T: Copy + Default + AddAssign>(&self, cols: &[T]) -> Vec<T> {
        let row_len = self.kernel * self.kernel * self.channels;
        let c = self.channels;
        let mut dst = vec![T::default(); self.image_shape().elem_count()];
        let mut r = 0;
        for b in 0..self.batch {
            for oy in 0..self.out_height {
                for ox in 0..self.out_width {
                    let row = &cols[r * row_len..(r + 1) * row_len];
                    self.taps(b, oy, ox, |off, tok| {
                        for (d, s) in dst[tok * c..(tok + 1) * c].iter_mut().zip(&row[off..off + c]) {
                            *d += *s;
                        }
                    });
                    r += 1;
                }
            }
        }
        dst
    }
}

fn contiguous<'a, T>(v: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    let (a, b) = layout
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("im2col input must be contiguous".into()))?;
    Ok(&v[a..b])
}

pub(crate) struct Im2Col(pub Geometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(g.im2col(contiguous(v, layout)?)),
            CpuStorage::F64(v) => CpuStorage::F64(g.im2col(contiguous(v, layout)?)),
            _ => candle_core::bail!("im2col supports f32 and f64 only"),
        };
        Ok((out, g.cols_shape()))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&Col2Im(self.0))?))
    }
}

struct Col2Im(Geometry);

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(g.col2im(contiguous(v, layout)?)),
            CpuStorage::F64(v) => CpuStorage::F64(g.col2im(contiguous(v, layout)?)),
            _ => candle_core::bail!("col2im supports f32 and f64 only"),
        };
        Ok((out, g.image_shape()))
    }
}
