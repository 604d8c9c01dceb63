//! The generative side: noise schedule, forward noising kernel, a fixed
//! latent mapper, the conditional denoiser, and the noise-prediction loss.

mod latent;
mod unet;

pub use latent::{LatentMapper, LATENT_CHANNELS, LATENT_SIZE};
pub use unet::{timestep_embedding, Denoiser, DenoiserConfig, DENOISER_PREFIX};

use std::fmt::Write as _;
use std::path::Path;

use candle_core::{Device, Tensor};

use crate::error::{Error, Result};

/// Linear-beta schedule with cumulative products `alpha_bar[t] = prod_{s<=t} (1 - beta[s])`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < beta_min <= beta_max < 1, got {beta_min}..{beta_max}"
            )));
        }
        let betas = (0..steps)
            .map(|t| {
                if steps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * t as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    /// Any beta sequence with entries in `[0, 1]`; the endpoints are only
    /// allowed so tests can build the no-noise and pure-noise limits.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|b| !(0.0..=1.0).contains(b)) {
            return Err(Error::InvalidArgument("betas must be non-empty and within [0, 1]".into()));
        }
        let mut alpha_bar = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(Self { betas, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::InvalidArgument(format!("timestep {t} outside 0..{}", self.steps())));
        }
        Ok(())
    }

    /// `sqrt(ab) * f0 + sqrt(1 - ab) * eps` at a single timestep.
    pub fn forward_diffuse(&self, f0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check(t)?;
        if f0.shape() != eps.shape() {
            return Err(Error::Shape(format!("latent {:?} vs noise {:?}", f0.dims(), eps.dims())));
        }
        let ab = self.alpha_bar[t];
        Ok(((f0 * ab.sqrt())? + (eps * (1.0 - ab).sqrt())?)?)
    }

    /// Per-sample timesteps along the leading dimension.
    pub fn forward_diffuse_batch(&self, f0: &Tensor, ts: &[usize], eps: &Tensor) -> Result<Tensor> {
        let b = f0.dim(0)?;
        if ts.len() != b || f0.shape() != eps.shape() {
            return Err(Error::Shape(format!(
                "{} timesteps for latent {:?} and noise {:?}",
                ts.len(),
                f0.dims(),
                eps.dims()
            )));
        }
        let mut signal = Vec::with_capacity(b);
        let mut noise = Vec::with_capacity(b);
        for &t in ts {
            self.check(t)?;
            signal.push(self.alpha_bar[t].sqrt());
            noise.push((1.0 - self.alpha_bar[t]).sqrt());
        }
        let mut shape = vec![1; f0.rank()];
        shape[0] = b;
        let coef = |v: Vec<f64>| -> Result<Tensor> {
            Ok(Tensor::from_vec(v, shape.clone(), &Device::Cpu)?.to_dtype(f0.dtype())?)
        };
        Ok((f0.broadcast_mul(&coef(signal)?)? + eps.broadcast_mul(&coef(noise)?)?)?)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,beta,alpha_bar\n");
        for (t, (b, ab)) in self.betas.iter().zip(&self.alpha_bar).enumerate() {
            let _ = writeln!(out, "{t},{b:?},{ab:?}");
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Mean squared error over every element.
pub fn diffusion_loss(eps: &Tensor, eps_hat: &Tensor) -> Result<Tensor> {
    if eps.shape() != eps_hat.shape() {
        return Err(Error::Shape(format!("noise {:?} vs prediction {:?}", eps.dims(), eps_hat.dims())));
    }
    Ok((eps - eps_hat)?.sqr()?.mean_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    #[test]
    fn schedule_examples() {
        let s = NoiseSchedule::from_betas(vec![0.5]).unwrap();
        assert_eq!(s.alpha_bar(), &[0.5]);
        let b = 0.01;
        let s = NoiseSchedule::linear(7, b, b).unwrap();
        for (t, ab) in s.alpha_bar().iter().enumerate() {
            assert!((ab - (1.0f64 - b).powi(t as i32 + 1)).abs() < 1e-15);
        }
        assert!(NoiseSchedule::linear(10, 0.02, 0.01).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.01).is_err());
        assert!(NoiseSchedule::linear(0, 0.01, 0.02).is_err());
    }

    #[test]
    fn default_schedule_ends_near_pure_noise() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let direct: f64 = (0..1000).map(|t| 1.0 - (1e-4 + (0.02 - 1e-4) * t as f64 / 999.0)).product();
        assert!((s.alpha_bar()[999] - direct).abs() < 1e-18);
        assert!(direct < 5e-5);
        assert!(s.alpha_bar().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar().iter().all(|&a| a > 0.0 && a < 1.0));
    }

    #[test]
    fn alpha_bar_recomputes_bitwise() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        for t in 1..1000 {
            assert_eq!(s.alpha_bar()[t], (1.0 - s.betas()[t]) * s.alpha_bar()[t - 1]);
        }
    }

    #[test]
    fn forward_kernel_limits_and_arithmetic() -> Result<()> {
        let dev = Device::Cpu;
        let f0 = Tensor::new(&[2.0f64, -1.0], &dev)?;
        let eps = Tensor::new(&[1.0f64, 0.5], &dev)?;
        let clean = NoiseSchedule::from_betas(vec![0.0])?;
        assert_eq!(clean.forward_diffuse(&f0, 0, &eps)?.to_vec1::<f64>()?, vec![2.0, -1.0]);
        let noisy = NoiseSchedule::from_betas(vec![1.0])?;
        assert_eq!(noisy.forward_diffuse(&f0, 0, &eps)?.to_vec1::<f64>()?, vec![1.0, 0.5]);
        let quarter = NoiseSchedule::from_betas(vec![0.75])?;
        let v = quarter.forward_diffuse(&Tensor::new(&[2.0f64], &dev)?, 0, &Tensor::new(&[1.0f64], &dev)?)?;
        assert!((v.to_vec1::<f64>()?[0] - (1.0 + 0.75f64.sqrt())).abs() < 1e-12);
        assert!(quarter.forward_diffuse(&f0, 1, &eps).is_err());
        Ok(())
    }

    #[test]
    fn batched_kernel_matches_single_step() -> Result<()> {
        let s = NoiseSchedule::linear(50, 1e-3, 0.2)?;
        let f0 = Tensor::randn(0f64, 1.0, (3, 2, 2, 2), &Device::Cpu)?;
        let eps = Tensor::randn(0f64, 1.0, (3, 2, 2, 2), &Device::Cpu)?;
        let ts = [0, 17, 49];
        let batched = s.forward_diffuse_batch(&f0, &ts, &eps)?;
        for (i, &t) in ts.iter().enumerate() {
            let one = s.forward_diffuse(&f0.get(i)?, t, &eps.get(i)?)?;
            let diff = (one - batched.get(i)?)?.abs()?.max_all()?.to_scalar::<f64>()?;
            assert!(diff < 1e-15);
        }
        Ok(())
    }

    #[test]
    fn loss_examples() -> Result<()> {
        let dev = Device::Cpu;
        let eps = Tensor::randn(0f64, 1.0, (2, 4, 3, 3), &dev)?;
        assert_eq!(diffusion_loss(&eps, &eps)?.to_scalar::<f64>()?, 0.0);
        let zero = Tensor::zeros((2, 4, 3, 3), DType::F64, &dev)?;
        let one = Tensor::ones((2, 4, 3, 3), DType::F64, &dev)?;
        assert_eq!(diffusion_loss(&zero, &one)?.to_scalar::<f64>()?, 1.0);
        let a = Tensor::new(&[1.0f64, 2.0, 3.0, 4.0], &dev)?;
        let b = Tensor::new(&[0.0f64, 0.0, 1.0, 1.0], &dev)?;
        let ap = Tensor::new(&[4.0f64, 3.0, 1.0, 2.0], &dev)?;
        let bp = Tensor::new(&[1.0f64, 1.0, 0.0, 0.0], &dev)?;
        assert_eq!(
            diffusion_loss(&a, &b)?.to_scalar::<f64>()?,
            diffusion_loss(&ap, &bp)?.to_scalar::<f64>()?
        );
        assert!(diffusion_loss(&a, &zero).is_err());
        Ok(())
    }

    #[test]
    fn csv_has_header_and_one_row_per_step() {
        let s = NoiseSchedule::linear(4, 0.1, 0.4).unwrap();
        let csv = s.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "t,beta,alpha_bar");
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("0,0.1,"));
    }
}
