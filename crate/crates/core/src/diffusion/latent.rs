use candle_core::{DType, Tensor};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng;

pub const LATENT_CHANNELS: usize = 4;
pub const LATENT_SIZE: usize = 16;
const BLOCK: usize = 8;
const INPUT_SIZE: usize = LATENT_SIZE * BLOCK;

/// Parameter-free image-to-latent map: 8x8 space-to-depth followed by a
/// fixed orthonormal projection of each 192-value block onto 4 channels.
#[derive(Debug, Clone)]
pub struct LatentMapper {
    /// `[3 * 8 * 8, 4]`, orthonormal columns times `scale`.
    projection: Tensor,
    scale: f64,
}

impl LatentMapper {
    /// The projection is a pure function of `seed`.
    pub fn new(seed: u64, scale: f64, dtype: DType) -> Result<Self> {
        let n = 3 * BLOCK * BLOCK;
        let mut r = rng::stream(seed, &[rng::tag::LATENT_PROJECTION]);
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(LATENT_CHANNELS);
        while cols.len() < LATENT_CHANNELS {
            let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut r)).collect();
            for c in &cols {
                let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                cols.push(v.into_iter().map(|x| x / norm).collect());
            }
        }
        let mut flat = Vec::with_capacity(n * LATENT_CHANNELS);
        for i in 0..n {
            for c in &cols {
                flat.push(c[i] * scale);
            }
        }
        let projection = Tensor::from_vec(flat, (n, LATENT_CHANNELS), &candle_core::Device::Cpu)?.to_dtype(dtype)?;
        Ok(Self { projection, scale })
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// `[B, 3, 128, 128]` in `[-1, 1]` to `[B, 4, 16, 16]`. The result is
    /// always detached.
    pub fn encode(&self, images: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = images.dims4()?;
        if (c, h, w) != (3, INPUT_SIZE, INPUT_SIZE) {
            return Err(Error::Shape(format!(
                "latent mapper expects [B, 3, {INPUT_SIZE}, {INPUT_SIZE}], got {:?}",
                images.dims()
            )));
        }
        let x = images.detach();
        let lo = x.min_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let hi = x.max_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if lo < -1.0 - 1e-6 || hi > 1.0 + 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "latent mapper input must lie in [-1, 1], got [{lo}, {hi}]"
            )));
        }
        let g = LATENT_SIZE;
        let blocks = x
            .reshape((b, 3, g, BLOCK, g, BLOCK))?
            .permute([0, 2, 4, 1, 3, 5])?
            .contiguous()?
            .reshape((b * g * g, 3 * BLOCK * BLOCK))?;
        let lat = blocks
            .matmul(&self.projection.to_dtype(x.dtype())?)?
            .reshape((b, g, g, LATENT_CHANNELS))?
            .permute([0, 3, 1, 2])?
            .contiguous()?;
        Ok(lat)
    }
}
