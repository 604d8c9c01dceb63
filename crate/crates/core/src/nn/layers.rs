use candle_core::Tensor;

use super::im2col::{Geometry, Im2Col};
use super::{ops, Builder, Init, Param};
use crate::error::{Error, Result};

/// Height/width of a token grid stored row-major as `[B, H*W, C]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpatialShape {
    pub height: usize,
    pub width: usize,
}

impl SpatialShape {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }
}

/// Affine map `y = x W + b` with `W: [in, out]`, applied over the last dim.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Param,
    bias: Option<Param>,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    pub fn new(b: &Builder, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = b.param("weight", (in_dim, out_dim), Init::Uniform { bound })?;
        let bias = if bias {
            Some(b.param("bias", out_dim, Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn weight(&self) -> &Param {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Param> {
        self.bias.as_ref()
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let last = *dims.last().ok_or_else(|| Error::Shape("linear on a scalar".into()))?;
        if last != self.in_dim {
            return Err(Error::Shape(format!(
                "linear expects last dim {}, got {:?}",
                self.in_dim, dims
            )));
        }
        let rows = x.elem_count() / last;
        let y = x.reshape((rows, last))?.matmul(&self.weight.tensor())?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(&b.tensor())?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_dim;
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Param,
    bias: Param,
    eps: f64,
}

impl LayerNorm {
    pub fn new(b: &Builder, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: b.param("weight", dim, Init::Ones)?,
            bias: b.param("bias", dim, Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(ops::standardize_last(x, self.eps)?
            .broadcast_mul(&self.weight.tensor())?
            .broadcast_add(&self.bias.tensor())?)
    }
}

/// Group normalization over token-layout activations `[B, L, C]`.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    weight: Param,
    bias: Param,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(b: &Builder, groups: usize, channels: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::Config(format!(
                "{channels} channels not divisible into {groups} groups"
            )));
        }
        Ok(Self {
            weight: b.param("weight", channels, Init::Ones)?,
            bias: b.param("bias", channels, Init::Zeros)?,
            groups,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, c) = x.dims3()?;
        let g = self.groups;
        let rows = x
            .reshape((b, l, g, c / g))?
            .permute([0, 2, 1, 3])?
            .contiguous()?
            .reshape((b, g, l * (c / g)))?;
        let normed = ops::standardize_last(&rows, self.eps)?
            .reshape((b, g, l, c / g))?
            .permute([0, 2, 1, 3])?
            .contiguous()?
            .reshape((b, l, c))?;
        Ok(normed
            .broadcast_mul(&self.weight.tensor())?
            .broadcast_add(&self.bias.tensor())?)
    }
}

/// Batch normalization over `[B, C]` with running statistics kept as buffers.
#[derive(Debug, Clone)]
pub struct BatchNorm1d {
    weight: Option<Param>,
    bias: Option<Param>,
    running_mean: Param,
    running_var: Param,
    momentum: f64,
    eps: f64,
}

impl BatchNorm1d {
    pub fn new(b: &Builder, features: usize, affine: bool) -> Result<Self> {
        let (weight, bias) = if affine {
            (
                Some(b.param("weight", features, Init::Ones)?),
                Some(b.param("bias", features, Init::Zeros)?),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            weight,
            bias,
            running_mean: b.buffer("running_mean", features, Init::Zeros)?,
            running_var: b.buffer("running_var", features, Init::Ones)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn weight(&self) -> Option<&Param> {
        self.weight.as_ref()
    }

    pub fn bias(&self) -> Option<&Param> {
        self.bias.as_ref()
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (n, _) = x.dims2()?;
        let normed = if train {
            let mean = x.mean_keepdim(0)?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim(0)?;
            let out = centered.broadcast_div(&(&var + self.eps)?.sqrt()?)?;
            if n > 1 {
                let unbiased = (var.detach().squeeze(0)? * (n as f64 / (n as f64 - 1.0)))?;
                let m = self.momentum;
                let rm = ((self.running_mean.value() * (1.0 - m))? + (mean.detach().squeeze(0)? * m)?)?;
                let rv = ((self.running_var.value() * (1.0 - m))? + (unbiased * m)?)?;
                self.running_mean.set(&rm)?;
                self.running_var.set(&rv)?;
            }
            out
        } else {
            let rm = self.running_mean.value().unsqueeze(0)?;
            let rv = self.running_var.value().unsqueeze(0)?;
            x.broadcast_sub(&rm)?.broadcast_div(&(rv + self.eps)?.sqrt()?)?
        };
        match (&self.weight, &self.bias) {
            (Some(w), Some(b)) => Ok(normed
                .broadcast_mul(&w.tensor())?
                .broadcast_add(&b.tensor())?),
            _ => Ok(normed),
        }
    }
}

/// 2-D convolution on token-layout activations, lowered to patch extraction
/// followed by a single matmul. `weight` is `[k*k*C_in, C_out]`, tap-major.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Param,
    bias: Param,
    kernel: usize,
    stride: usize,
    in_channels: usize,
    out_channels: usize,
}

impl Conv2d {
    pub fn new(
        b: &Builder,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        if kernel % 2 == 0 || stride == 0 {
            return Err(Error::Config(format!(
                "conv needs an odd kernel and positive stride, got k={kernel} s={stride}"
            )));
        }
        let fan_in = kernel * kernel * in_channels;
        let bound = 1.0 / (fan_in as f64).sqrt();
        Ok(Self {
            weight: b.param("weight", (fan_in, out_channels), Init::Uniform { bound })?,
            bias: b.param("bias", out_channels, Init::Zeros)?,
            kernel,
            stride,
            in_channels,
            out_channels,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.weight, &self.bias]
    }

    pub fn output_shape(&self, input: SpatialShape) -> SpatialShape {
        let pad = self.kernel / 2;
        SpatialShape::new(
            (input.height + 2 * pad - self.kernel) / self.stride + 1,
            (input.width + 2 * pad - self.kernel) / self.stride + 1,
        )
    }

    pub fn forward(&self, x: &Tensor, shape: SpatialShape) -> Result<(Tensor, SpatialShape)> {
        let (batch, tokens, channels) = x.dims3()?;
        if tokens != shape.tokens() || channels != self.in_channels {
            return Err(Error::Shape(format!(
                "conv expects [B, {}, {}], got {:?}",
                shape.tokens(),
                self.in_channels,
                x.dims()
            )));
        }
        let out_shape = self.output_shape(shape);
        let geometry = Geometry {
            batch,
            height: shape.height,
            width: shape.width,
            channels,
            kernel: self.kernel,
            stride: self.stride,
            out_height: out_shape.height,
            out_width: out_shape.width,
        };
        let cols = x.contiguous()?.apply_op1(Im2Col(geometry))?;
        let y = cols
            .matmul(&self.weight.tensor())?
            .broadcast_add(&self.bias.tensor())?
            .reshape((batch, out_shape.tokens(), self.out_channels))?;
        Ok((y, out_shape))
    }
}

/// Nearest-neighbour 2x upsampling of token-layout activations.
pub fn upsample_nearest2x(x: &Tensor, shape: SpatialShape) -> Result<(Tensor, SpatialShape)> {
    let (batch, _, channels) = x.dims3()?;
    let out = SpatialShape::new(shape.height * 2, shape.width * 2);
    let y = x
        .reshape((batch, shape.height, 1, shape.width, 1, channels))?
        .broadcast_as((batch, shape.height, 2, shape.width, 2, channels))?
        .reshape((batch, out.tokens(), channels))?;
    Ok((y, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution used as an independent reference.
    fn conv_reference(
        x: &[f64],
        w: &[f64],
        (h, wd, cin, cout, k, stride): (usize, usize, usize, usize, usize, usize),
    ) -> Vec<f64> {
        let pad = (k / 2) as isize;
        let ho = (h + 2 * (k / 2) - k) / stride + 1;
        let wo = (wd + 2 * (k / 2) - k) / stride + 1;
        let mut out = vec![0.0; ho * wo * cout];
        for oy in 0..ho {
            for ox in 0..wo {
                for co in 0..cout {
                    let mut acc = 0.0;
                    for dy in 0..k {
                        for dx in 0..k {
                            let iy = (oy * stride + dy) as isize - pad;
                            let ix = (ox * stride + dx) as isize - pad;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                let xv = x[(iy as usize * wd + ix as usize) * cin + ci];
                                let wv = w[((dy * k + dx) * cin + ci) * cout + co];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[(oy * wo + ox) * cout + co] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() -> Result<()> {
        for &(h, wd, stride) in &[(5usize, 4usize, 1usize), (6, 6, 2), (5, 3, 2)] {
            let store = ParamStore::new(DType::F64);
            let b = store.builder("c", ChaCha8Rng::seed_from_u64(7));
            let conv = Conv2d::new(&b, 3, 2, 3, stride)?;
            let xs: Vec<f64> = (0..h * wd * 3).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
            let x = Tensor::from_vec(xs.clone(), (1, h * wd, 3), &Device::Cpu)?;
            let (y, s) = conv.forward(&x, SpatialShape::new(h, wd))?;
            let w = conv.weight.value().flatten_all()?.to_vec1::<f64>()?;
            let expect = conv_reference(&xs, &w, (h, wd, 3, 2, 3, stride));
            assert_eq!(s.tokens() * 2, expect.len());
            let got = y.flatten_all()?.to_vec1::<f64>()?;
            for (g, e) in got.iter().zip(&expect) {
                assert!((g - e).abs() < 1e-12, "{g} vs {e}");
            }
        }
        Ok(())
    }

    #[test]
    fn conv_input_gradient_matches_finite_differences() -> Result<()> {
        let store = ParamStore::new(DType::F64);
        let b = store.builder("c", ChaCha8Rng::seed_from_u64(2));
        let conv = Conv2d::new(&b, 2, 3, 3, 2)?;
        let shape = SpatialShape::new(5, 4);
        let xs: Vec<f64> = (0..2 * 20 * 2).map(|i| ((i * 29 % 13) as f64) / 7.0 - 1.0).collect();
        let w = Tensor::randn(0f64, 1.0, (2, 6, 3), &Device::Cpu)?;
        let loss = |v: &[f64]| -> Result<f64> {
            let x = Tensor::from_vec(v.to_vec(), (2, 20, 2), &Device::Cpu)?;
            let (y, _) = conv.forward(&x, shape)?;
            Ok((y * &w)?.sum_all()?.to_scalar::<f64>()?)
        };
        let x = candle_core::Var::from_vec(xs.clone(), (2, 20, 2), &Device::Cpu)?;
        let (y, _) = conv.forward(x.as_tensor(), shape)?;
        let grads = (y * &w)?.sum_all()?.backward()?;
        let g = grads.get(x.as_tensor()).unwrap().flatten_all()?.to_vec1::<f64>()?;
        for i in 0..xs.len() {
            let (mut up, mut dn) = (xs.clone(), xs.clone());
            up[i] += 1e-5;
            dn[i] -= 1e-5;
            let num = (loss(&up)? - loss(&dn)?) / 2e-5;
            assert!((num - g[i]).abs() < 1e-6, "{i}: {num} vs {}", g[i]);
        }
        Ok(())
    }

    #[test]
    fn batchnorm_train_output_has_zero_batch_mean() -> Result<()> {
        let store = ParamStore::new(DType::F64);
        let b = store.builder("bn", ChaCha8Rng::seed_from_u64(0));
        let bn = BatchNorm1d::new(&b, 3, false)?;
        let x = Tensor::new(&[[1.0f64, 2.0, -3.0], [4.0, 0.5, 3.0], [7.0, 1.0, 0.0]], &Device::Cpu)?;
        let y = bn.forward(&x, true)?;
        for m in y.mean(0)?.to_vec1::<f64>()? {
            assert!(m.abs() < 1e-12);
        }
        let e1 = bn.forward(&x, false)?.to_vec2::<f64>()?;
        let e2 = bn.forward(&x, false)?.to_vec2::<f64>()?;
        assert_eq!(e1, e2);
        Ok(())
    }

    #[test]
    fn upsample_repeats_neighbours() -> Result<()> {
        let x = Tensor::new(&[[[1.0f32], [2.0], [3.0], [4.0]]], &Device::Cpu)?;
        let (y, s) = upsample_nearest2x(&x, SpatialShape::new(2, 2))?;
        assert_eq!(s, SpatialShape::new(4, 4));
        let v = y.flatten_all()?.to_vec1::<f32>()?;
        assert_eq!(&v[..8], &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
        Ok(())
    }
}
