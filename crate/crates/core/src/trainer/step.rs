use candle_core::{DType, Tensor};
use image::RgbImage;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{self, AugmentConfig};
use crate::diffusion::diffusion_loss;
use crate::error::{Error, Result};
use crate::objectives::{self, PrototypeMemory};
use crate::optim::Adam;

use super::model::DcacModel;

/// One training batch: augmented encoder views and clean diffusion latents
/// of the same records, plus the diffusion draws.
#[derive(Debug, Clone)]
pub struct StepBatch {
    pub images: Tensor,
    pub latents: Tensor,
    pub labels: Vec<usize>,
    pub timesteps: Vec<usize>,
    pub noise: Tensor,
}

impl StepBatch {
    /// Augments `images[indices]` with `rng` and draws one timestep and one
    /// noise tensor per sample from `noise_rng`.
    #[allow(clippy::too_many_arguments)]
    pub fn assemble(
        images: &[RgbImage],
        latents: &Tensor,
        labels: &[usize],
        indices: &[usize],
        augment: &AugmentConfig,
        steps: usize,
        rng: &mut impl Rng,
        noise_rng: &mut impl Rng,
        dtype: DType,
    ) -> Result<Self> {
        let views: Vec<_> = indices
            .iter()
            .map(|&i| data::augment_for_reid(&images[i], augment, rng))
            .collect();
        let idx = Tensor::from_vec(
            indices.iter().map(|&i| i as u32).collect::<Vec<_>>(),
            indices.len(),
            latents.device(),
        )?;
        let latents = latents.index_select(&idx, 0)?;
        let timesteps: Vec<usize> = indices.iter().map(|_| noise_rng.random_range(0..steps)).collect();
        let n = latents.elem_count();
        let noise: Vec<f64> = (0..n).map(|_| noise_rng.sample(StandardNormal)).collect();
        let noise = Tensor::from_vec(noise, latents.shape(), latents.device())?.to_dtype(dtype)?;
        Ok(Self {
            images: data::stack_images(&views, dtype)?,
            latents,
            labels: indices.iter().map(|&i| labels[i]).collect(),
            timesteps,
            noise,
        })
    }
}

/// The individual loss graphs of one forward pass.
#[derive(Debug, Clone)]
pub struct LossGraph {
    pub id: Tensor,
    pub pcl: Tensor,
    pub dif: Tensor,
    /// Post-neck features of the batch.
    pub z: Tensor,
}

impl LossGraph {
    pub fn reid(&self) -> Result<Tensor> {
        objectives::reid_loss(&self.id, &self.pcl)
    }

    /// `L_reid + lambda * L_dif`. At `lambda == 0` the diffusion graph is
    /// left out entirely rather than scaled by zero.
    pub fn total(&self, lambda: f64) -> Result<Tensor> {
        let reid = self.reid()?;
        if lambda == 0.0 {
            Ok(reid)
        } else {
            Ok((reid + (&self.dif * lambda)?)?)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    #[serde(rename = "L_id")]
    pub id: f64,
    #[serde(rename = "L_pcl")]
    pub pcl: f64,
    #[serde(rename = "L_dif")]
    pub dif: f64,
    #[serde(rename = "L_total")]
    pub total: f64,
}

/// Encoder, both re-ID losses, the condition from the same features, and
/// the denoiser's noise-prediction loss on the clean latents.
pub fn forward_losses(
    model: &DcacModel,
    batch: &StepBatch,
    memory: &PrototypeMemory,
    smoothing: f64,
) -> Result<LossGraph> {
    let (_, z) = model.reid.encode(&batch.images, true)?;
    let logits = model.reid.logits(&z)?;
    let id = objectives::id_loss(&logits, &batch.labels, smoothing)?;
    let pcl = objectives::pcl_loss(&z, &batch.labels, memory)?;
    let cond = model
        .condition
        .forward(&z, model.reid.classifier(), &batch.labels, true)?;
    let noisy = model
        .schedule
        .forward_diffuse_batch(&batch.latents, &batch.timesteps, &batch.noise)?;
    let predicted = model.denoiser.forward(&noisy, &batch.timesteps, &cond)?;
    let dif = diffusion_loss(&batch.noise, &predicted)?;
    Ok(LossGraph { id, pcl, dif, z })
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// One optimizer step over every trainable parameter followed by the
/// hardest-sample memory update.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &DcacModel,
    optimizer: &mut Adam,
    memory: &mut PrototypeMemory,
    batch: &StepBatch,
    lambda: f64,
    smoothing: f64,
    lr: f64,
    (epoch, step): (usize, usize),
) -> Result<StepLosses> {
    if !memory.is_initialized() {
        return Err(Error::UninitializedMemory);
    }
    let graph = forward_losses(model, batch, memory, smoothing)?;
    let total = graph.total(lambda)?;
    let losses = StepLosses {
        id: scalar(&graph.id)?,
        pcl: scalar(&graph.pcl)?,
        dif: scalar(&graph.dif)?,
        total: scalar(&total)?,
    };
    if ![losses.id, losses.pcl, losses.dif, losses.total].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteLoss {
            epoch,
            step,
            detail: format!(
                "L_id={} L_pcl={} L_dif={} L_total={} lr={lr}",
                losses.id, losses.pcl, losses.dif, losses.total
            ),
        });
    }
    let grads = total.backward()?;
    optimizer.step(&model.store.trainable(), &grads, lr)?;
    let hardest = objectives::select_hardest(&graph.z.detach(), &batch.labels, memory)?;
    objectives::update_memory(memory, &hardest)?;
    Ok(losses)
}
