use image::imageops::{self, FilterType};
use image::RgbImage;
use rand::Rng;

use super::ImageTensor;

pub const REID_HEIGHT: usize = 256;
pub const REID_WIDTH: usize = 128;
pub const DIFFUSION_SIZE: usize = 128;

/// Per-channel statistics of the encoder's expected input normalization.
const ENCODER_MEAN: [f32; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
const ENCODER_STD: [f32; 3] = [0.268_629_54, 0.261_302_6, 0.275_777_1];

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub height: usize,
    pub width: usize,
    /// Zero padding added on every side before the random crop.
    pub pad: usize,
    pub flip_prob: f64,
    pub erase_prob: f64,
    pub erase_area: (f64, f64),
    pub erase_aspect: (f64, f64),
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            height: REID_HEIGHT,
            width: REID_WIDTH,
            pad: 10,
            flip_prob: 0.5,
            erase_prob: 0.5,
            erase_area: (0.02, 0.4),
            erase_aspect: (0.3, 3.33),
            mean: ENCODER_MEAN,
            std: ENCODER_STD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EraseRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// The random decisions of one augmentation, drawn up front so the
/// transform itself is a pure function.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentPlan {
    pub flip: bool,
    /// Crop offset into the padded image; `(pad, pad)` is the identity crop.
    pub crop_top: usize,
    pub crop_left: usize,
    pub erase: Option<EraseRect>,
}

impl AugmentPlan {
    pub fn identity(cfg: &AugmentConfig) -> Self {
        Self {
            flip: false,
            crop_top: cfg.pad,
            crop_left: cfg.pad,
            erase: None,
        }
    }

    pub fn sample(cfg: &AugmentConfig, rng: &mut impl Rng) -> Self {
        let flip = rng.random::<f64>() < cfg.flip_prob;
        let crop_top = rng.random_range(0..=2 * cfg.pad);
        let crop_left = rng.random_range(0..=2 * cfg.pad);
        let erase = if rng.random::<f64>() < cfg.erase_prob {
            sample_erase(cfg, rng)
        } else {
            None
        };
        Self {
            flip,
            crop_top,
            crop_left,
            erase,
        }
    }
}

fn sample_erase(cfg: &AugmentConfig, rng: &mut impl Rng) -> Option<EraseRect> {
    let area = (cfg.height * cfg.width) as f64;
    let (log_lo, log_hi) = (cfg.erase_aspect.0.ln(), cfg.erase_aspect.1.ln());
    for _ in 0..100 {
        let target = area * rng.random_range(cfg.erase_area.0..=cfg.erase_area.1);
        let aspect = rng.random_range(log_lo..=log_hi).exp();
        let h = (target * aspect).sqrt().round() as usize;
        let w = (target / aspect).sqrt().round() as usize;
        if h > 0 && w > 0 && h < cfg.height && w < cfg.width {
            return Some(EraseRect {
                top: rng.random_range(0..=cfg.height - h),
                left: rng.random_range(0..=cfg.width - w),
                height: h,
                width: w,
            });
        }
    }
    None
}

fn resize(img: &RgbImage, height: usize, width: usize) -> ImageTensor {
    if img.height() as usize == height && img.width() as usize == width {
        return ImageTensor::from_rgb(img);
    }
    let resized = imageops::resize(img, width as u32, height as u32, FilterType::Triangle);
    ImageTensor::from_rgb(&resized)
}

pub fn flip_horizontal(img: &mut ImageTensor) {
    let w = img.width;
    for row in img.data.chunks_mut(w) {
        row.reverse();
    }
}

/// Pads by `pad` zeros on every side, then crops the original size at the
/// given offset.
pub fn pad_crop(img: &ImageTensor, pad: usize, top: usize, left: usize) -> ImageTensor {
    let mut out = ImageTensor::zeros(img.channels, img.height, img.width);
    for c in 0..img.channels {
        for y in 0..img.height {
            let sy = (y + top) as isize - pad as isize;
            if sy < 0 || sy >= img.height as isize {
                continue;
            }
            for x in 0..img.width {
                let sx = (x + left) as isize - pad as isize;
                if sx < 0 || sx >= img.width as isize {
                    continue;
                }
                *out.at_mut(c, y, x) = img.at(c, sy as usize, sx as usize);
            }
        }
    }
    out
}

fn normalize(img: &mut ImageTensor, mean: &[f32; 3], std: &[f32; 3]) {
    let plane = img.height * img.width;
    for (c, chunk) in img.data.chunks_mut(plane).enumerate() {
        for v in chunk {
            *v = (*v / 255.0 - mean[c]) / std[c];
        }
    }
}

/// Erased pixels take the normalized mean value.
fn erase(img: &mut ImageTensor, rect: &EraseRect) {
    for c in 0..img.channels {
        for y in rect.top..rect.top + rect.height {
            for x in rect.left..rect.left + rect.width {
                *img.at_mut(c, y, x) = 0.0;
            }
        }
    }
}

/// Applies a drawn plan: resize, flip, pad-and-crop, normalize, erase.
pub fn apply_plan(img: &RgbImage, plan: &AugmentPlan, cfg: &AugmentConfig) -> ImageTensor {
    let mut t = resize(img, cfg.height, cfg.width);
    if plan.flip {
        flip_horizontal(&mut t);
    }
    if (plan.crop_top, plan.crop_left) != (cfg.pad, cfg.pad) {
        t = pad_crop(&t, cfg.pad, plan.crop_top, plan.crop_left);
    }
    normalize(&mut t, &cfg.mean, &cfg.std);
    if let Some(rect) = &plan.erase {
        erase(&mut t, rect);
    }
    t
}

pub fn augment_for_reid(img: &RgbImage, cfg: &AugmentConfig, rng: &mut impl Rng) -> ImageTensor {
    let plan = AugmentPlan::sample(cfg, rng);
    apply_plan(img, &plan, cfg)
}

/// Deterministic evaluation-time preprocessing: resize and normalize only.
pub fn prepare_for_reid_eval(img: &RgbImage, cfg: &AugmentConfig) -> ImageTensor {
    apply_plan(img, &AugmentPlan::identity(cfg), cfg)
}

/// Resizes the clean image to the diffusion input size and maps it to [-1, 1].
pub fn prepare_for_diffusion(img: &RgbImage) -> ImageTensor {
    let mut t = resize(img, DIFFUSION_SIZE, DIFFUSION_SIZE);
    for v in &mut t.data {
        *v = *v / 127.5 - 1.0;
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gradient_image() -> RgbImage {
        RgbImage::from_fn(64, 128, |x, y| image::Rgb([(x * 3) as u8, (y * 2) as u8, ((x + y) % 256) as u8]))
    }

    #[test]
    fn identity_plan_is_resize_and_normalize() {
        let cfg = AugmentConfig::default();
        let img = gradient_image();
        let out = apply_plan(&img, &AugmentPlan::identity(&cfg), &cfg);
        let mut expect = resize(&img, 256, 128);
        normalize(&mut expect, &cfg.mean, &cfg.std);
        assert_eq!(out, expect);
        assert_eq!(out, prepare_for_reid_eval(&img, &cfg));
    }

    #[test]
    fn all_probabilities_missing_means_identity_path() {
        let cfg = AugmentConfig {
            flip_prob: 0.0,
            erase_prob: 0.0,
            pad: 0,
            ..AugmentConfig::default()
        };
        let img = gradient_image();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(augment_for_reid(&img, &cfg, &mut rng), prepare_for_reid_eval(&img, &cfg));
    }

    #[test]
    fn flip_is_an_involution() {
        let img = gradient_image();
        let base = pad_crop(&resize(&img, 256, 128), 10, 4, 17);
        let mut t = base.clone();
        flip_horizontal(&mut t);
        assert_ne!(t, base);
        flip_horizontal(&mut t);
        assert_eq!(t, base);
    }

    #[test]
    fn output_shape_is_fixed() {
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let out = augment_for_reid(&gradient_image(), &cfg, &mut rng);
            assert_eq!(out.shape(), [3, 256, 128]);
            assert!(out.data.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn erase_rects_fit_inside_the_image() {
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            if let Some(r) = sample_erase(&cfg, &mut rng) {
                assert!(r.top + r.height <= cfg.height && r.left + r.width <= cfg.width);
                let frac = (r.height * r.width) as f64 / (cfg.height * cfg.width) as f64;
                assert!(frac > 0.015 && frac < 0.42, "{frac}");
            }
        }
    }

    #[test]
    fn diffusion_input_is_scaled_and_deterministic() {
        let black = RgbImage::new(64, 128);
        let t = prepare_for_diffusion(&black);
        assert_eq!(t.shape(), [3, 128, 128]);
        assert!(t.data.iter().all(|&v| v == -1.0));
        let img = gradient_image();
        assert_eq!(prepare_for_diffusion(&img), prepare_for_diffusion(&img));
        assert!(prepare_for_diffusion(&img).data.iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}
