#![allow(dead_code)]

use std::path::Path;

use dcac::data::{generate_synthetic_dataset, SynthConfig};
use dcac::trainer::RunConfig;

/// Two small synthetic domains under `dir`.
pub fn synth(dir: &Path, num_ids: usize, per_id: usize) {
    generate_synthetic_dataset(&SynthConfig::new(0, num_ids, per_id, 2), dir).unwrap();
}

/// A model small enough for a training step in well under a second.
pub fn tiny_config(root: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.apply_text(&format!(
        "
        data.root = {}
        epochs = 3
        lr.base = 1e-3
        lr.warmup_start = 1e-4
        lr.warmup_epochs = 1
        lr.milestones = 2
        batch.p = 4
        batch.k = 2
        encoder.input_height = 32
        encoder.input_width = 16
        encoder.patch = 8
        encoder.width = 16
        encoder.depth = 1
        encoder.heads = 2
        encoder.feature_dim = 16
        condition.dim = 8
        denoiser.widths = 8,8
        denoiser.heads = 2
        denoiser.time_dim = 8
        lora.rank = 2
        eval.batch_size = 16
        ",
        root.display()
    ))
    .unwrap();
    cfg
}
