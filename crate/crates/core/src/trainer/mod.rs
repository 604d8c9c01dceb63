//! Joint optimization: config, learning-rate schedule, the per-batch step
//! and the epoch loop with checkpointing and a JSON-lines metric log.

mod checkpoint;
mod config;
mod model;
mod step;

pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use config::{lr_at, RunConfig};
pub use model::{DcacModel, CLASSIFIER_PREFIX, ENCODER_PREFIX};
pub use step::{forward_losses, train_step, LossGraph, StepBatch, StepLosses};

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::backbone::extract_features;
use crate::data::{self, DatasetManifest, ImageRecord, Split};
use crate::error::{Error, Result};
use crate::objectives::PrototypeMemory;
use crate::optim::Adam;
use crate::rng::{self, tag};

pub const CONFIG_ECHO: &str = "config.cfg";
pub const METRICS_LOG: &str = "metrics.jsonl";
pub const SCHEDULE_CSV: &str = "noise_schedule.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const LAST_CHECKPOINT: &str = "last";
pub const FINAL_CHECKPOINT: &str = "final";

/// One line of the metric log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: usize,
    pub step: u64,
    #[serde(flatten)]
    pub losses: StepLosses,
    pub lr: f64,
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

pub fn checkpoint_path(run_dir: &Path, tag: &str) -> PathBuf {
    run_dir.join(CHECKPOINT_DIR).join(format!("{tag}.ckpt"))
}

/// Loads `<root>/<domain>/train.tsv` for every configured source domain.
pub fn load_source_manifests(cfg: &RunConfig) -> Result<Vec<DatasetManifest>> {
    cfg.sources
        .iter()
        .map(|d| data::load_manifest(&cfg.data_root.join(d).join("train.tsv")))
        .collect()
}

/// Concatenates train manifests, offsetting each one's identity labels
/// past the previous ones. Image paths become root-resolved.
pub fn merge_sources(manifests: &[DatasetManifest]) -> Result<DatasetManifest> {
    if manifests.is_empty() {
        return Err(Error::InvalidArgument("no source manifests".into()));
    }
    let mut records = Vec::new();
    let mut offset = 0;
    for m in manifests {
        if m.split != Split::Train {
            return Err(Error::InvalidArgument(format!("source manifest has split {}", m.split)));
        }
        if m.is_empty() {
            return Err(Error::EmptyManifest(m.root.clone()));
        }
        records.extend(m.records.iter().map(|r| ImageRecord {
            image_path: m.resolve(r),
            identity: r.identity + offset,
            camera: r.camera,
            domain: r.domain.clone(),
        }));
        offset += m.num_identities;
    }
    Ok(DatasetManifest {
        records,
        split: Split::Train,
        num_identities: offset,
        root: PathBuf::new(),
    })
}

/// Decoded source data with the fixed diffusion latents precomputed: the
/// diffusion branch never augments, so each record's latent is constant.
pub struct TrainData {
    pub manifest: DatasetManifest,
    pub images: Vec<RgbImage>,
    pub labels: Vec<usize>,
    pub latents: Tensor,
}

impl TrainData {
    pub fn load(manifests: &[DatasetManifest], model: &DcacModel, batch_size: usize) -> Result<Self> {
        let manifest = merge_sources(manifests)?;
        let images = data::load_images(&manifest)?;
        let dtype = model.store.dtype();
        let mut chunks = Vec::new();
        for batch in images.chunks(batch_size.max(1)) {
            let prepared: Vec<_> = batch.iter().map(data::prepare_for_diffusion).collect();
            chunks.push(model.mapper.encode(&data::stack_images(&prepared, dtype)?)?);
        }
        let latents = Tensor::cat(&chunks, 0)?;
        Ok(Self {
            labels: manifest.identities(),
            manifest,
            images,
            latents,
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from `checkpoints/last.ckpt` when present.
    pub resume: bool,
    /// Stop after this many completed epochs (counted from zero), leaving a
    /// resumable checkpoint; used to simulate interruptions.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub epochs_done: usize,
    pub last_losses: Option<StepLosses>,
    pub checkpoint: PathBuf,
}

fn truncate_log(path: &Path, keep_before_epoch: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let kept: String = read_metrics(path)?
        .into_iter()
        .filter(|r| r.epoch < keep_before_epoch)
        .map(|r| serde_json::to_string(&r).map(|s| s + "\n"))
        .collect::<std::result::Result<_, _>>()?;
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

fn save(model: &DcacModel, adam: &Adam, memory: &PrototypeMemory, cfg: &RunConfig, meta: CheckpointMeta, path: &Path) -> Result<()> {
    let ckpt = Checkpoint {
        config_text: cfg.echo(),
        meta,
        params: model.store.snapshot(),
        optimizer: adam.state(),
        memory: if memory.is_initialized() {
            Some(memory.to_tensor(candle_core::DType::F64, model.store.device())?)
        } else {
            None
        },
    };
    ckpt.write(path)
}

/// Trains on `sources` and writes everything under `run_dir`: the config
/// echo, the noise schedule, the metric log and the checkpoints.
pub fn run_training(
    cfg: &RunConfig,
    sources: &[DatasetManifest],
    run_dir: &Path,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ckpt_dir = run_dir.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let num_identities: usize = sources.iter().map(|m| m.num_identities).sum();
    let model = DcacModel::build(cfg, num_identities)?;
    let data = TrainData::load(sources, &model, cfg.eval_batch_size)?;
    let augment = cfg.augment_config();
    let dtype = cfg.dtype;

    let mut adam = Adam::new(cfg.adam_config());
    let mut start_epoch = 0;
    let mut global_step = 0u64;
    let last = checkpoint_path(run_dir, LAST_CHECKPOINT);
    let log_path = run_dir.join(METRICS_LOG);
    if opts.resume && last.exists() {
        let ckpt = Checkpoint::read(&last)?;
        if ckpt.config_text != cfg.echo() {
            return Err(Error::Checkpoint(format!(
                "{} was written by a different configuration",
                last.display()
            )));
        }
        let unknown = model.store.load(&ckpt.params)?;
        if !unknown.is_empty() {
            return Err(Error::Checkpoint(format!("unknown parameters {unknown:?}")));
        }
        adam = Adam::load_state(cfg.adam_config(), ckpt.meta.optimizer_steps, &ckpt.optimizer)?;
        start_epoch = ckpt.meta.epochs_done;
        global_step = ckpt.meta.global_step;
        truncate_log(&log_path, start_epoch)?;
        log::info!("resuming {} at epoch {start_epoch}", run_dir.display());
    } else if log_path.exists() {
        fs::remove_file(&log_path).map_err(|e| Error::io(&log_path, e))?;
    }

    let echo = run_dir.join(CONFIG_ECHO);
    fs::write(&echo, cfg.echo()).map_err(|e| Error::io(&echo, e))?;
    model.schedule.write_csv(&run_dir.join(SCHEDULE_CSV))?;
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;

    let mut memory = PrototypeMemory::new(
        num_identities,
        cfg.encoder.feature_dim,
        cfg.memory_momentum,
        cfg.memory_temperature,
    )?;
    let mut last_losses = None;
    let end_epoch = opts.stop_after.map_or(cfg.epochs, |s| s.min(cfg.epochs));
    for epoch in start_epoch..end_epoch {
        let lr = lr_at(epoch, cfg)?;
        let features = extract_features(&model.reid, &data.manifest, &data.images, cfg.eval_batch_size, dtype)?;
        memory.init(&features, &data.labels)?;
        let mut batches = data::pk_sample(
            &data.manifest,
            cfg.batch_p,
            cfg.batch_k,
            &mut rng::stream(cfg.seed, &[tag::SAMPLER, epoch as u64]),
        )?;
        if cfg.max_batches_per_epoch > 0 {
            batches.truncate(cfg.max_batches_per_epoch);
        }
        for (i, b) in batches.iter().enumerate() {
            let batch = StepBatch::assemble(
                &data.images,
                &data.latents,
                &data.labels,
                &b.indices,
                &augment,
                model.schedule.steps(),
                &mut rng::stream(cfg.seed, &[tag::AUGMENT, epoch as u64, i as u64]),
                &mut rng::stream(cfg.seed, &[tag::DIFFUSION_NOISE, epoch as u64, i as u64]),
                dtype,
            )?;
            let losses = train_step(
                &model,
                &mut adam,
                &mut memory,
                &batch,
                cfg.lambda,
                cfg.label_smoothing,
                lr,
                (epoch, global_step as usize),
            )?;
            let record = MetricRecord {
                epoch,
                step: global_step,
                losses,
                lr,
            };
            writeln!(log, "{}", serde_json::to_string(&record)?).map_err(|e| Error::io(&log_path, e))?;
            global_step += 1;
            last_losses = Some(losses);
        }
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        if let Some(l) = last_losses {
            log::info!(
                "epoch {epoch}: lr {lr:e} L_id {:.4} L_pcl {:.4} L_dif {:.4} L_total {:.4}",
                l.id,
                l.pcl,
                l.dif,
                l.total
            );
        }
        let meta = CheckpointMeta {
            epochs_done: epoch + 1,
            global_step,
            optimizer_steps: adam.steps_taken(),
            num_identities,
            sources: cfg.sources.clone(),
        };
        save(&model, &adam, &memory, cfg, meta.clone(), &last)?;
        if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
            fs::copy(&last, checkpoint_path(run_dir, &format!("epoch_{}", epoch + 1)))
                .map_err(|e| Error::io(&last, e))?;
        }
        if epoch + 1 == cfg.epochs {
            fs::copy(&last, checkpoint_path(run_dir, FINAL_CHECKPOINT)).map_err(|e| Error::io(&last, e))?;
        }
    }
    Ok(TrainOutcome {
        run_dir: run_dir.to_path_buf(),
        epochs_done: end_epoch.max(start_epoch),
        last_losses,
        checkpoint: last,
    })
}

/// Rebuilds the model a checkpoint was written from.
pub fn load_model(ckpt: &Checkpoint) -> Result<(RunConfig, DcacModel)> {
    let mut cfg = RunConfig::from_text(&ckpt.config_text)?;
    // The stored weights supersede any initial denoiser source.
    cfg.denoiser_init_from = None;
    let model = DcacModel::build(&cfg, ckpt.meta.num_identities)?;
    let unknown = model.store.load(&ckpt.params)?;
    if !unknown.is_empty() {
        return Err(Error::Checkpoint(format!("unknown parameters {unknown:?}")));
    }
    Ok((cfg, model))
}
