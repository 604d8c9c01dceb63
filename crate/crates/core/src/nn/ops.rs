//! Differentiable helpers composed from primitive tensor ops, so every one
//! of them has a backward pass.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, Layout, Shape, Tensor, D};

use crate::error::Result;

/// Fused softmax over the last dimension with an analytic backward pass
/// `dx = p * (g - sum(g * p))`.
struct SoftmaxLast;

fn softmax_rows<T: num_like::Float>(src: &[T], dim: usize) -> Vec<T> {
    let mut dst = vec![T::ZERO; src.len()];
    for (row, out) in src.chunks(dim).zip(dst.chunks_mut(dim)) {
        let max = row.iter().fold(T::NEG_INFINITY, |a, &b| if b > a { b } else { a });
        for (o, &v) in out.iter_mut().zip(row) {
            *o = (v - max).exp();
        }
        let sum = out.iter().fold(T::ZERO, |a, &b| a + b);
        let inv = T::from_f64(1.0) / sum;
        for o in out.iter_mut() {
            *o = *o * inv;
        }
    }
    dst
}

/// The two float element types the fused kernels support.
mod num_like {
    pub trait Float:
        Copy
        + PartialOrd
        + std::ops::Add<Output = Self>
        + std::ops::Sub<Output = Self>
        + std::ops::Mul<Output = Self>
        + std::ops::Div<Output = Self>
    {
        const ZERO: Self;
        const NEG_INFINITY: Self;
        fn exp(self) -> Self;
        fn sqrt(self) -> Self;
        fn from_f64(v: f64) -> Self;
    }

    macro_rules! float {
        ($t:ty) => {
            impl Float for $t {
                const ZERO: Self = 0.0;
                const NEG_INFINITY: Self = <$t>::NEG_INFINITY;
                fn exp(self) -> Self {
                    <$t>::exp(self)
                }
                fn sqrt(self) -> Self {
                    <$t>::sqrt(self)
                }
                fn from_f64(v: f64) -> Self {
                    v as $t
                }
            }
        };
    }
    float!(f32);
    float!(f64);
}

impl CustomOp1 for SoftmaxLast {
    fn name(&self) -> &'static str {
        "softmax-last"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dim = *layout.shape().dims().last().unwrap_or(&1);
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(softmax_rows(contiguous(v, layout)?, dim)),
            CpuStorage::F64(v) => CpuStorage::F64(softmax_rows(contiguous(v, layout)?, dim)),
            _ => candle_core::bail!("softmax supports f32 and f64 only"),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(res.apply_op2_no_bwd(&grad_res.contiguous()?, &SoftmaxGrad)?))
    }
}

struct SoftmaxGrad;

fn softmax_grad<T: num_like::Float>(p: &[T], g: &[T], dim: usize) -> Vec<T> {
    let mut dst = vec![T::ZERO; p.len()];
    for ((pr, gr), out) in p.chunks(dim).zip(g.chunks(dim)).zip(dst.chunks_mut(dim)) {
        let dot = pr.iter().zip(gr).fold(T::ZERO, |a, (&pv, &gv)| a + pv * gv);
        for ((o, &pv), &gv) in out.iter_mut().zip(pr).zip(gr) {
            *o = pv * (gv - dot);
        }
    }
    dst
}

impl CustomOp2 for SoftmaxGrad {
    fn name(&self) -> &'static str {
        "softmax-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let dim = *l1.shape().dims().last().unwrap_or(&1);
        let out = match (s1, s2) {
            (CpuStorage::F32(p), CpuStorage::F32(g)) => {
                CpuStorage::F32(softmax_grad(contiguous(p, l1)?, contiguous(g, l2)?, dim))
            }
            (CpuStorage::F64(p), CpuStorage::F64(g)) => {
                CpuStorage::F64(softmax_grad(contiguous(p, l1)?, contiguous(g, l2)?, dim))
            }
            _ => candle_core::bail!("softmax supports f32 and f64 only"),
        };
        Ok((out, l1.shape().clone()))
    }
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(SoftmaxLast)?)
}

fn contiguous<'a, T>(v: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    let (a, b) = layout
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("fused op input must be contiguous".into()))?;
    Ok(&v[a..b])
}

/// Zero-mean, unit-variance rows (biased variance) with a fused backward.
struct Standardize {
    eps: f64,
}

fn inv_std<T: num_like::Float>(row: &[T], eps: f64) -> (T, T) {
    let n = T::from_f64(row.len() as f64);
    let mean = row.iter().fold(T::ZERO, |a, &v| a + v) / n;
    let var = row.iter().fold(T::ZERO, |a, &v| a + (v - mean) * (v - mean)) / n;
    (mean, T::from_f64(1.0) / (var + T::from_f64(eps)).sqrt())
}

fn standardize_rows<T: num_like::Float>(src: &[T], dim: usize, eps: f64) -> Vec<T> {
    let mut dst = Vec::with_capacity(src.len());
    for row in src.chunks(dim) {
        let (mean, inv) = inv_std(row, eps);
        dst.extend(row.iter().map(|&v| (v - mean) * inv));
    }
    dst
}

/// `dx = inv_std * (g - mean(g) - y * mean(g * y))` per row.
fn standardize_grad<T: num_like::Float>(x: &[T], y: &[T], g: &[T], dim: usize, eps: f64) -> Vec<T> {
    let n = T::from_f64(dim as f64);
    let mut dst = Vec::with_capacity(x.len());
    for ((xr, yr), gr) in x.chunks(dim).zip(y.chunks(dim)).zip(g.chunks(dim)) {
        let (_, inv) = inv_std(xr, eps);
        let mg = gr.iter().fold(T::ZERO, |a, &v| a + v) / n;
        let mgy = gr.iter().zip(yr).fold(T::ZERO, |a, (&gv, &yv)| a + gv * yv) / n;
        dst.extend(gr.iter().zip(yr).map(|(&gv, &yv)| inv * (gv - mg - yv * mgy)));
    }
    dst
}

impl CustomOp1 for Standardize {
    fn name(&self) -> &'static str {
        "standardize"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dim = *layout.shape().dims().last().unwrap_or(&1);
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(standardize_rows(contiguous(v, layout)?, dim, self.eps)),
            CpuStorage::F64(v) => CpuStorage::F64(standardize_rows(contiguous(v, layout)?, dim, self.eps)),
            _ => candle_core::bail!("standardize supports f32 and f64 only"),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let g = grad_res.contiguous()?;
        Ok(Some(arg.apply_op3_no_bwd(res, &g, &StandardizeGrad { eps: self.eps })?))
    }
}

struct StandardizeGrad {
    eps: f64,
}

impl CustomOp3 for StandardizeGrad {
    fn name(&self) -> &'static str {
        "standardize-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let dim = *l1.shape().dims().last().unwrap_or(&1);
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(y), CpuStorage::F32(g)) => CpuStorage::F32(standardize_grad(
                contiguous(x, l1)?,
                contiguous(y, l2)?,
                contiguous(g, l3)?,
                dim,
                self.eps,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(y), CpuStorage::F64(g)) => CpuStorage::F64(standardize_grad(
                contiguous(x, l1)?,
                contiguous(y, l2)?,
                contiguous(g, l3)?,
                dim,
                self.eps,
            )),
            _ => candle_core::bail!("standardize supports f32 and f64 only"),
        };
        Ok((out, l1.shape().clone()))
    }
}

/// Standardizes each row over the last dimension: `(x - mean) / sqrt(var + eps)`.
pub fn standardize_last(x: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Standardize { eps })?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Row-wise L2 normalization over the last dimension.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-24)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// Scaled dot-product attention. `q: [B, Lq, C]`, `k, v: [B, Lk, C]`, with
/// `C` split evenly across `heads`.
pub fn multi_head_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, lq, c) = q.dims3()?;
    let lk = k.dim(1)?;
    let dh = c / heads;
    let split = |t: &Tensor, l: usize| -> Result<Tensor> {
        Ok(t.reshape((b, l, heads, dh))?.transpose(1, 2)?.contiguous()?)
    };
    let q = (q * (1.0 / (dh as f64).sqrt()))?;
    let (qh, kh, vh) = (split(&q, lq)?, split(k, lk)?, split(v, lk)?);
    let scores = qh.matmul(&kh.t()?)?;
    let attn = softmax_last(&scores)?;
    let out = attn.matmul(&vh)?.transpose(1, 2)?.reshape((b, lq, c))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn fused_softmax_gradient_matches_composite() -> Result<()> {
        let x = candle_core::Var::randn(0f64, 2.0, (3, 5), &Device::Cpu)?;
        let w = Tensor::randn(0f64, 1.0, (3, 5), &Device::Cpu)?;
        let fused = (softmax_last(x.as_tensor())? * &w)?.sum_all()?.backward()?;
        let e = x.as_tensor().exp()?;
        let composite = e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?;
        let plain = (composite * &w)?.sum_all()?.backward()?;
        let a = fused.get(x.as_tensor()).unwrap();
        let b = plain.get(x.as_tensor()).unwrap();
        let err = (a - b)?.abs()?.max_all()?.to_scalar::<f64>()?;
        assert!(err < 1e-12);
        Ok(())
    }

    #[test]
    fn fused_standardize_matches_composite() -> Result<()> {
        let x = candle_core::Var::randn(0.5f64, 2.0, (4, 7), &Device::Cpu)?;
        let w = Tensor::randn(0f64, 1.0, (4, 7), &Device::Cpu)?;
        let y = standardize_last(x.as_tensor(), 1e-5)?;
        let fused = (&y * &w)?.sum_all()?.backward()?;
        let xt = x.as_tensor();
        let c = xt.broadcast_sub(&xt.mean_keepdim(D::Minus1)?)?;
        let var = c.sqr()?.mean_keepdim(D::Minus1)?;
        let y2 = c.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        let diff = (&y - &y2)?.abs()?.max_all()?.to_scalar::<f64>()?;
        assert!(diff < 1e-12);
        let plain = (y2 * &w)?.sum_all()?.backward()?;
        let err = (fused.get(xt).unwrap() - plain.get(xt).unwrap())?.abs()?.max_all()?.to_scalar::<f64>()?;
        assert!(err < 1e-10);
        Ok(())
    }

    #[test]
    fn softmax_rows_sum_to_one() -> Result<()> {
        let x = Tensor::new(&[[1000.0f64, 1001.0, 999.0], [0.0, 0.0, 0.0]], &Device::Cpu)?;
        let p = softmax_last(&x)?.sum(1)?.to_vec1::<f64>()?;
        for s in p {
            assert!((s - 1.0).abs() < 1e-12);
        }
        let lp = log_softmax_last(&x)?.exp()?.sum(1)?.to_vec1::<f64>()?;
        assert!((lp[0] - 1.0).abs() < 1e-12);
        Ok(())
    }
}
