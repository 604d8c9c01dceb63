//! Dataset manifests, the synthetic multi-domain identity generator,
//! identity-balanced batch sampling, and image preprocessing.

mod augment;
mod manifest;
mod sampler;
mod synth;

pub use augment::{
    augment_for_reid, prepare_for_diffusion, prepare_for_reid_eval, AugmentConfig, AugmentPlan,
    EraseRect, DIFFUSION_SIZE, REID_HEIGHT, REID_WIDTH,
};
pub use manifest::{load_manifest, write_manifest, DatasetManifest, ImageRecord, Split};
pub use sampler::{pk_sample, BatchIndices};
pub use synth::{generate_synthetic_dataset, DomainStyle, SynthConfig};

use candle_core::{DType, Device, Tensor};
use image::RgbImage;

use crate::error::{Error, Result};

/// A dense channel-major image, `[C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ImageTensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    /// Raw 0..255 pixel values, channel-major.
    pub fn from_rgb(img: &RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let (w, h) = (w as usize, h as usize);
        let mut out = Self::zeros(3, h, w);
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                out.data[c * h * w + y as usize * w + x as usize] = f32::from(px.0[c]);
            }
        }
        out
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f32 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }
}

/// Stacks equally shaped images into a `[B, C, H, W]` tensor.
pub fn stack_images(images: &[ImageTensor], dtype: DType) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot stack zero images".into()))?;
    let [c, h, w] = first.shape();
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if img.shape() != first.shape() {
            return Err(Error::Shape(format!(
                "image {:?} differs from {:?}",
                img.shape(),
                first.shape()
            )));
        }
        data.extend_from_slice(&img.data);
    }
    Ok(Tensor::from_vec(data, (images.len(), c, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Decodes every image of a manifest, in manifest order.
pub fn load_images(manifest: &DatasetManifest) -> Result<Vec<RgbImage>> {
    manifest
        .records
        .iter()
        .map(|r| {
            let path = manifest.resolve(r);
            let img = image::open(&path).map_err(|e| Error::ImageDecode {
                path: path.clone(),
                reason: e.to_string(),
            })?;
            Ok(img.to_rgb8())
        })
        .collect()
}
