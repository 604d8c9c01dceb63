use std::collections::BTreeMap;

use crate::backbone::ReidModel;
use crate::conditioning::{ConditionModule, CONDITION_PREFIX};
use crate::diffusion::{Denoiser, LatentMapper, NoiseSchedule, DENOISER_PREFIX};
use crate::error::{Error, Result};
use crate::lora::{self, LORA_PREFIX};
use crate::nn::ParamStore;
use crate::rng::{self, tag};

use super::checkpoint::Checkpoint;
use super::RunConfig;

pub const ENCODER_PREFIX: &str = "encoder";
pub const CLASSIFIER_PREFIX: &str = "classifier";

/// Every component of a joint run, sharing one parameter store.
#[derive(Debug, Clone)]
pub struct DcacModel {
    pub store: ParamStore,
    pub reid: ReidModel,
    pub condition: ConditionModule,
    pub denoiser: Denoiser,
    pub mapper: LatentMapper,
    pub schedule: NoiseSchedule,
}

impl DcacModel {
    /// Seeded construction. The denoiser comes from `denoiser_init_seed`
    /// (or `denoiser_init_from`), independent of the run seed, so every run
    /// starts from the same generative prior; the fine-tune mode then picks
    /// what of it trains.
    pub fn build(cfg: &RunConfig, num_identities: usize) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::new(cfg.dtype);
        let enc = store.builder(ENCODER_PREFIX, rng::stream(cfg.seed, &[tag::ENCODER_INIT]));
        let cls = store.builder(CLASSIFIER_PREFIX, rng::stream(cfg.seed, &[tag::CLASSIFIER_INIT]));
        let reid = ReidModel::new(&enc, &cls, &cfg.encoder, num_identities)?;
        let cb = store.builder(CONDITION_PREFIX, rng::stream(cfg.seed, &[tag::PROMPT_INIT]));
        let condition = ConditionModule::new(&cb, &cfg.condition, num_identities, cfg.encoder.feature_dim)?;
        let db = store.builder(DENOISER_PREFIX, rng::stream(cfg.denoiser_init_seed, &[tag::DENOISER_INIT]));
        let mut denoiser = Denoiser::new(&db, &cfg.denoiser_config())?;
        if let Some(path) = &cfg.denoiser_init_from {
            let ckpt = Checkpoint::read(path)?;
            let prefix = format!("{DENOISER_PREFIX}.");
            let weights: BTreeMap<_, _> = ckpt
                .params
                .into_iter()
                .filter(|(k, _)| k.starts_with(&prefix))
                .collect();
            if weights.is_empty() {
                return Err(Error::Checkpoint(format!("{} holds no denoiser weights", path.display())));
            }
            store.load(&weights)?;
        }
        lora::apply_fine_tune_mode(&mut denoiser, &store, DENOISER_PREFIX, cfg.fine_tune, cfg.lora_rank, cfg.seed)?;
        let mapper = LatentMapper::new(cfg.latent_projection_seed, cfg.latent_scale, cfg.dtype)?;
        let schedule = NoiseSchedule::linear(cfg.diffusion_steps, cfg.beta_min, cfg.beta_max)?;
        Ok(Self {
            store,
            reid,
            condition,
            denoiser,
            mapper,
            schedule,
        })
    }

    /// Names of the stored tensors that belong to the re-ID side.
    pub fn is_reid_param(name: &str) -> bool {
        name.starts_with(&format!("{ENCODER_PREFIX}.")) || name.starts_with(&format!("{CLASSIFIER_PREFIX}."))
    }

    pub fn is_lora_param(name: &str) -> bool {
        name.starts_with(&format!("{LORA_PREFIX}."))
    }
}
