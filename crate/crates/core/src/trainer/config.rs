//! Run configuration as flat `key = value` text.

use std::path::{Path, PathBuf};

use candle_core::DType;

use crate::backbone::{BackboneKind, EncoderConfig};
use crate::conditioning::{ConditionConfig, PostTransformKind, Scheme};
use crate::data::AugmentConfig;
use crate::diffusion::DenoiserConfig;
use crate::error::{Error, Result};
use crate::lora::FineTuneMode;
use crate::optim::AdamConfig;

/// Everything a run depends on. Defaults reproduce the reference training
/// protocol; desk-scale runs override sizes and the learning rate.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub dtype: DType,
    pub epochs: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub warmup_start_lr: f64,
    pub lr_milestones: Vec<usize>,
    pub lr_gamma: f64,
    pub weight_decay: f64,
    /// Weight of the diffusion loss in the total objective.
    pub lambda: f64,
    pub batch_p: usize,
    pub batch_k: usize,
    /// Caps the batches of one epoch; 0 keeps every PK batch.
    pub max_batches_per_epoch: usize,
    pub memory_momentum: f64,
    pub memory_temperature: f64,
    pub label_smoothing: f64,
    pub encoder: EncoderConfig,
    pub augment_pad: usize,
    pub augment_flip_prob: f64,
    pub augment_erase_prob: f64,
    pub condition: ConditionConfig,
    pub fine_tune: FineTuneMode,
    pub lora_rank: usize,
    pub denoiser_widths: Vec<usize>,
    pub denoiser_heads: usize,
    pub denoiser_time_dim: usize,
    /// Seed of the stand-in pre-trained denoiser, shared across run seeds.
    pub denoiser_init_seed: u64,
    /// Optional checkpoint whose `denoiser.*` weights replace the seeded init.
    pub denoiser_init_from: Option<PathBuf>,
    pub diffusion_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub latent_scale: f64,
    pub latent_projection_seed: u64,
    pub data_root: PathBuf,
    pub sources: Vec<String>,
    pub target: String,
    /// Also keep `epoch_<n>` checkpoints every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    pub eval_batch_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dtype: DType::F32,
            epochs: 60,
            base_lr: 5e-6,
            warmup_epochs: 10,
            warmup_start_lr: 5e-7,
            lr_milestones: vec![30, 50],
            lr_gamma: 0.1,
            weight_decay: 1e-4,
            lambda: 1.0,
            batch_p: 16,
            batch_k: 4,
            max_batches_per_epoch: 0,
            memory_momentum: crate::objectives::DEFAULT_MOMENTUM,
            memory_temperature: crate::objectives::DEFAULT_TEMPERATURE,
            label_smoothing: crate::objectives::DEFAULT_SMOOTHING,
            encoder: EncoderConfig::default(),
            augment_pad: 10,
            augment_flip_prob: 0.5,
            augment_erase_prob: 0.5,
            condition: ConditionConfig::default(),
            fine_tune: FineTuneMode::Lora,
            lora_rank: crate::lora::DEFAULT_RANK,
            denoiser_widths: DenoiserConfig::default().widths,
            denoiser_heads: DenoiserConfig::default().heads,
            denoiser_time_dim: DenoiserConfig::default().time_dim,
            denoiser_init_seed: 0,
            denoiser_init_from: None,
            diffusion_steps: 1000,
            beta_min: 1e-4,
            beta_max: 0.02,
            latent_scale: 0.5,
            latent_projection_seed: 0,
            data_root: PathBuf::from("data"),
            sources: vec!["domA".into()],
            target: "domB".into(),
            checkpoint_every: 0,
            eval_batch_size: 64,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {value:?}: {e}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn dtype_name(d: DType) -> &'static str {
    match d {
        DType::F64 => "f64",
        _ => "f32",
    }
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Applies `key = value` lines on top of the current values. Blank lines
    /// and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        self.set(k.trim(), v.trim())?;
        self.validate()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "dtype" => {
                self.dtype = match v {
                    "f32" => DType::F32,
                    "f64" => DType::F64,
                    _ => return Err(Error::Config(format!("dtype must be f32 or f64, got {v:?}"))),
                }
            }
            "epochs" => self.epochs = parse(key, v)?,
            "lr.base" => self.base_lr = parse(key, v)?,
            "lr.warmup_epochs" => self.warmup_epochs = parse(key, v)?,
            "lr.warmup_start" => self.warmup_start_lr = parse(key, v)?,
            "lr.milestones" => self.lr_milestones = parse_list(key, v)?,
            "lr.gamma" => self.lr_gamma = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "batch.p" => self.batch_p = parse(key, v)?,
            "batch.k" => self.batch_k = parse(key, v)?,
            "batch.max_per_epoch" => self.max_batches_per_epoch = parse(key, v)?,
            "memory.momentum" => self.memory_momentum = parse(key, v)?,
            "memory.temperature" => self.memory_temperature = parse(key, v)?,
            "id.smoothing" => self.label_smoothing = parse(key, v)?,
            "encoder.backbone" => self.encoder.backbone = parse::<BackboneKind>(key, v)?,
            "encoder.feature_dim" => self.encoder.feature_dim = parse(key, v)?,
            "encoder.input_height" => self.encoder.input_size.0 = parse(key, v)?,
            "encoder.input_width" => self.encoder.input_size.1 = parse(key, v)?,
            "encoder.width" => self.encoder.width = parse(key, v)?,
            "encoder.depth" => self.encoder.depth = parse(key, v)?,
            "encoder.heads" => self.encoder.heads = parse(key, v)?,
            "encoder.patch" => self.encoder.patch = parse(key, v)?,
            "encoder.freeze_patch_projection" => self.encoder.freeze_patch_projection = parse(key, v)?,
            "encoder.neck_affine" => self.encoder.neck_affine = parse(key, v)?,
            "augment.pad" => self.augment_pad = parse(key, v)?,
            "augment.flip_prob" => self.augment_flip_prob = parse(key, v)?,
            "augment.erase_prob" => self.augment_erase_prob = parse(key, v)?,
            "condition.scheme" => self.condition.scheme = parse::<Scheme>(key, v)?,
            "condition.post_transform" => self.condition.post_transform = parse::<PostTransformKind>(key, v)?,
            "condition.tau_c" => self.condition.tau_c = parse(key, v)?,
            "condition.dim" => self.condition.dim = parse(key, v)?,
            "condition.detach_logits" => self.condition.detach_classifier = parse(key, v)?,
            "denoiser.fine_tune" => self.fine_tune = parse::<FineTuneMode>(key, v)?,
            "lora.rank" => self.lora_rank = parse(key, v)?,
            "denoiser.widths" => self.denoiser_widths = parse_list(key, v)?,
            "denoiser.heads" => self.denoiser_heads = parse(key, v)?,
            "denoiser.time_dim" => self.denoiser_time_dim = parse(key, v)?,
            "denoiser.init_seed" => self.denoiser_init_seed = parse(key, v)?,
            "denoiser.init_from" => {
                self.denoiser_init_from = if v.is_empty() { None } else { Some(PathBuf::from(v)) }
            }
            "diffusion.steps" => self.diffusion_steps = parse(key, v)?,
            "diffusion.beta_min" => self.beta_min = parse(key, v)?,
            "diffusion.beta_max" => self.beta_max = parse(key, v)?,
            "diffusion.latent_scale" => self.latent_scale = parse(key, v)?,
            "diffusion.projection_seed" => self.latent_projection_seed = parse(key, v)?,
            "data.root" => self.data_root = PathBuf::from(v),
            "data.sources" => self.sources = parse_list(key, v)?,
            "data.target" => self.target = v.to_string(),
            "checkpoint.every" => self.checkpoint_every = parse(key, v)?,
            "eval.batch_size" => self.eval_batch_size = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("seed", self.seed.to_string()),
            ("dtype", dtype_name(self.dtype).into()),
            ("epochs", self.epochs.to_string()),
            ("lr.base", self.base_lr.to_string()),
            ("lr.warmup_epochs", self.warmup_epochs.to_string()),
            ("lr.warmup_start", self.warmup_start_lr.to_string()),
            ("lr.milestones", join(&self.lr_milestones)),
            ("lr.gamma", self.lr_gamma.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("lambda", self.lambda.to_string()),
            ("batch.p", self.batch_p.to_string()),
            ("batch.k", self.batch_k.to_string()),
            ("batch.max_per_epoch", self.max_batches_per_epoch.to_string()),
            ("memory.momentum", self.memory_momentum.to_string()),
            ("memory.temperature", self.memory_temperature.to_string()),
            ("id.smoothing", self.label_smoothing.to_string()),
            ("encoder.backbone", self.encoder.backbone.to_string()),
            ("encoder.feature_dim", self.encoder.feature_dim.to_string()),
            ("encoder.input_height", self.encoder.input_size.0.to_string()),
            ("encoder.input_width", self.encoder.input_size.1.to_string()),
            ("encoder.width", self.encoder.width.to_string()),
            ("encoder.depth", self.encoder.depth.to_string()),
            ("encoder.heads", self.encoder.heads.to_string()),
            ("encoder.patch", self.encoder.patch.to_string()),
            ("encoder.freeze_patch_projection", self.encoder.freeze_patch_projection.to_string()),
            ("encoder.neck_affine", self.encoder.neck_affine.to_string()),
            ("augment.pad", self.augment_pad.to_string()),
            ("augment.flip_prob", self.augment_flip_prob.to_string()),
            ("augment.erase_prob", self.augment_erase_prob.to_string()),
            ("condition.scheme", self.condition.scheme.to_string()),
            ("condition.post_transform", self.condition.post_transform.to_string()),
            ("condition.tau_c", self.condition.tau_c.to_string()),
            ("condition.dim", self.condition.dim.to_string()),
            ("condition.detach_logits", self.condition.detach_classifier.to_string()),
            ("denoiser.fine_tune", self.fine_tune.to_string()),
            ("lora.rank", self.lora_rank.to_string()),
            ("denoiser.widths", join(&self.denoiser_widths)),
            ("denoiser.heads", self.denoiser_heads.to_string()),
            ("denoiser.time_dim", self.denoiser_time_dim.to_string()),
            ("denoiser.init_seed", self.denoiser_init_seed.to_string()),
            (
                "denoiser.init_from",
                self.denoiser_init_from
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_default(),
            ),
            ("diffusion.steps", self.diffusion_steps.to_string()),
            ("diffusion.beta_min", self.beta_min.to_string()),
            ("diffusion.beta_max", self.beta_max.to_string()),
            ("diffusion.latent_scale", self.latent_scale.to_string()),
            ("diffusion.projection_seed", self.latent_projection_seed.to_string()),
            ("data.root", self.data_root.display().to_string()),
            ("data.sources", self.sources.join(",")),
            ("data.target", self.target.clone()),
            ("checkpoint.every", self.checkpoint_every.to_string()),
            ("eval.batch_size", self.eval_batch_size.to_string()),
        ]
    }

    /// Names of every accepted key.
    pub fn keys() -> Vec<&'static str> {
        Self::default().entries().into_iter().map(|(k, _)| k).collect()
    }

    /// Complete `key = value` text; parsing it back yields an equal config.
    pub fn echo(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if !(self.base_lr > 0.0 && self.warmup_start_lr > 0.0 && self.lr_gamma > 0.0) {
            return bad("learning rates and lr.gamma must be positive".into());
        }
        if self.lr_milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("lr.milestones must be strictly increasing, got {:?}", self.lr_milestones));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be a finite non-negative number, got {}", self.lambda));
        }
        if self.batch_p == 0 || self.batch_k == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        if self.lora_rank == 0 {
            return bad("lora.rank must be positive".into());
        }
        if self.sources.is_empty() {
            return bad("data.sources needs at least one domain".into());
        }
        if !(self.latent_scale > 0.0) {
            return bad("diffusion.latent_scale must be positive".into());
        }
        self.encoder.validate()?;
        self.denoiser_config().validate()
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            widths: self.denoiser_widths.clone(),
            heads: self.denoiser_heads,
            cond_dim: self.condition.dim,
            time_dim: self.denoiser_time_dim,
            ..DenoiserConfig::default()
        }
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            height: self.encoder.input_size.0,
            width: self.encoder.input_size.1,
            pad: self.augment_pad,
            flip_prob: self.augment_flip_prob,
            erase_prob: self.augment_erase_prob,
            ..AugmentConfig::default()
        }
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// Drops float noise below twelve significant digits, so schedule values
/// compare equal to their decimal definitions.
fn round_significant(x: f64) -> f64 {
    format!("{x:.11e}").parse().unwrap_or(x)
}

/// Linear warmup from the start rate to the base rate over the warmup
/// epochs, then the base rate scaled by `gamma` once per passed milestone.
pub fn lr_at(epoch: usize, cfg: &RunConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::InvalidArgument(format!(
            "epoch {epoch} outside 0..{}",
            cfg.epochs
        )));
    }
    let lr = if epoch < cfg.warmup_epochs {
        let frac = epoch as f64 / cfg.warmup_epochs as f64;
        cfg.warmup_start_lr + frac * (cfg.base_lr - cfg.warmup_start_lr)
    } else {
        let passed = cfg.lr_milestones.iter().filter(|&&m| epoch >= m).count();
        cfg.base_lr * cfg.lr_gamma.powi(passed as i32)
    };
    Ok(round_significant(lr))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_full_scale_settings() {
        let c = RunConfig::default();
        assert_eq!((c.epochs, c.base_lr, c.warmup_epochs, c.warmup_start_lr), (60, 5e-6, 10, 5e-7));
        assert_eq!((c.lr_milestones.clone(), c.lr_gamma, c.weight_decay), (vec![30, 50], 0.1, 1e-4));
        assert_eq!((c.lambda, c.batch_p, c.batch_k), (1.0, 16, 4));
        assert_eq!((c.memory_momentum, c.memory_temperature, c.label_smoothing), (0.2, 0.01, 0.1));
        assert_eq!((c.lora_rank, c.diffusion_steps), (8, 1000));
    }

    #[test]
    fn schedule_examples() {
        let c = RunConfig::default();
        assert_eq!(lr_at(0, &c).unwrap(), 5e-7);
        assert_eq!(lr_at(5, &c).unwrap(), 2.75e-6);
        for e in 10..30 {
            assert_eq!(lr_at(e, &c).unwrap(), 5e-6);
        }
        assert_eq!(lr_at(30, &c).unwrap(), 5e-7);
        assert_eq!(lr_at(49, &c).unwrap(), 5e-7);
        assert_eq!(lr_at(50, &c).unwrap(), 5e-8);
        assert_eq!(lr_at(59, &c).unwrap(), 5e-8);
        assert!(lr_at(60, &c).is_err());
    }

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig::default();
        c.apply_text("lambda = 0\nseed=7 # comment\ndenoiser.widths = 32,64\ncondition.scheme = class\n")
            .unwrap();
        assert_eq!(c.lambda, 0.0);
        assert_eq!(c.denoiser_widths, vec![32, 64]);
        let back = RunConfig::from_text(&c.echo()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.echo(), c.echo());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let mut c = RunConfig::default();
        assert!(matches!(c.apply_override("nope=1"), Err(Error::Config(_))));
        assert!(c.apply_override("epochs=abc").is_err());
        assert!(c.apply_override("lambda").is_err());
        assert!(c.apply_override("denoiser.fine_tune=sideways").is_err());
        assert!(RunConfig::from_text("epochs = 0").is_err());
        assert!(RunConfig::from_text("denoiser.heads = 3").is_err());
    }
}
