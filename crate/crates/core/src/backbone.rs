//! The discriminative model: a pluggable image encoder, a batch-norm neck,
//! and a bias-free identity classifier.

use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Tensor};
use image::RgbImage;

use crate::data::{self, AugmentConfig, DatasetManifest, ImageTensor, REID_HEIGHT, REID_WIDTH};
use crate::error::{Error, Result};
use crate::nn::{ops, BatchNorm1d, Builder, Conv2d, Init, LayerNorm, Linear, Param, SpatialShape};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackboneKind {
    PatchTransformer,
    ConvNet,
}

impl std::str::FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy_patch_transformer" => Ok(Self::PatchTransformer),
            "toy_convnet" => Ok(Self::ConvNet),
            other => Err(Error::Config(format!("unknown backbone {other:?}"))),
        }
    }
}

impl std::fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::PatchTransformer => "toy_patch_transformer",
            Self::ConvNet => "toy_convnet",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub backbone: BackboneKind,
    pub feature_dim: usize,
    pub input_size: (usize, usize),
    pub freeze_patch_projection: bool,
    /// Token width of the transformer, or the last stage width of the convnet.
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub patch: usize,
    /// Affine terms of the batch-norm neck.
    pub neck_affine: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::PatchTransformer,
            feature_dim: 128,
            input_size: (REID_HEIGHT, REID_WIDTH),
            freeze_patch_projection: true,
            width: 64,
            depth: 4,
            heads: 4,
            patch: 16,
            neck_affine: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        if self.feature_dim == 0 || self.width == 0 || self.depth == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if self.backbone == BackboneKind::PatchTransformer {
            if self.patch == 0 || h % self.patch != 0 || w % self.patch != 0 {
                return Err(Error::Config(format!(
                    "input {h}x{w} is not divisible into {}px patches",
                    self.patch
                )));
            }
            if self.heads == 0 || self.width % self.heads != 0 {
                return Err(Error::Config("encoder width must divide evenly across heads".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct EncoderBlock {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
}

impl EncoderBlock {
    fn new(b: &Builder, width: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(&b.pp("ln1"), width)?,
            qkv: Linear::new(&b.pp("qkv"), width, 3 * width, true)?,
            proj: Linear::new(&b.pp("proj"), width, width, true)?,
            ln2: LayerNorm::new(&b.pp("ln2"), width)?,
            fc1: Linear::new(&b.pp("fc1"), width, 4 * width, true)?,
            fc2: Linear::new(&b.pp("fc2"), 4 * width, width, true)?,
            heads,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim(2)?;
        let qkv = self.qkv.forward(&self.ln1.forward(x)?)?;
        let q = qkv.narrow(2, 0, c)?;
        let k = qkv.narrow(2, c, c)?;
        let v = qkv.narrow(2, 2 * c, c)?;
        let attn = ops::multi_head_attention(&q, &k, &v, self.heads)?;
        let x = (x + self.proj.forward(&attn)?)?;
        let h = self.fc2.forward(&self.fc1.forward(&self.ln2.forward(&x)?)?.silu()?)?;
        Ok((x + h)?)
    }
}

/// ViT-style encoder: patch projection, class token, pre-norm blocks.
#[derive(Debug, Clone)]
struct PatchTransformer {
    patch_proj: Linear,
    cls: Param,
    pos: Param,
    ln_pre: LayerNorm,
    blocks: Vec<EncoderBlock>,
    ln_post: LayerNorm,
    head: Linear,
    patch: usize,
}

impl PatchTransformer {
    fn new(b: &Builder, cfg: &EncoderConfig) -> Result<Self> {
        let (h, w) = cfg.input_size;
        let tokens = (h / cfg.patch) * (w / cfg.patch) + 1;
        let patch_dim = 3 * cfg.patch * cfg.patch;
        Ok(Self {
            patch_proj: Linear::new(&b.pp("patch_proj"), patch_dim, cfg.width, true)?,
            cls: b.param("cls_token", cfg.width, Init::Normal { std: 0.02 })?,
            pos: b.param("pos_embed", (tokens, cfg.width), Init::Normal { std: 0.02 })?,
            ln_pre: LayerNorm::new(&b.pp("ln_pre"), cfg.width)?,
            blocks: (0..cfg.depth)
                .map(|i| EncoderBlock::new(&b.pp(format!("blocks.{i}")), cfg.width, cfg.heads))
                .collect::<Result<_>>()?,
            ln_post: LayerNorm::new(&b.pp("ln_post"), cfg.width)?,
            head: Linear::new(&b.pp("head"), cfg.width, cfg.feature_dim, false)?,
            patch: cfg.patch,
        })
    }

    fn patchify(&self, images: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = images.dims4()?;
        let p = self.patch;
        let (gh, gw) = (h / p, w / p);
        Ok(images
            .reshape((b, c, gh, p, gw, p))?
            .permute([0, 2, 4, 1, 3, 5])?
            .contiguous()?
            .reshape((b, gh * gw, c * p * p))?)
    }

    fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let b = images.dim(0)?;
        let tokens = self.patch_proj.forward(&self.patchify(images)?)?;
        let width = tokens.dim(2)?;
        let cls = self.cls.tensor().reshape((1, 1, width))?.broadcast_as((b, 1, width))?;
        let x = Tensor::cat(&[&cls, &tokens], 1)?.broadcast_add(&self.pos.tensor().unsqueeze(0)?)?;
        let mut x = self.ln_pre.forward(&x)?;
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        let cls_out = self.ln_post.forward(&x.narrow(1, 0, 1)?.squeeze(1)?)?;
        self.head.forward(&cls_out)
    }

    fn patch_projection(&self) -> Vec<Param> {
        std::iter::once(self.patch_proj.weight().clone())
            .chain(self.patch_proj.bias().cloned())
            .collect()
    }
}

/// Four stride-2 convolutions, global average pooling, and a projection.
#[derive(Debug, Clone)]
struct ConvNet {
    stages: Vec<Conv2d>,
    head: Linear,
}

impl ConvNet {
    fn new(b: &Builder, cfg: &EncoderConfig) -> Result<Self> {
        let last = cfg.width.max(8);
        let widths = [3, last / 8, last / 4, last / 2, last];
        let stages = (0..4)
            .map(|i| {
                let name = if i == 0 { "patch_proj".to_string() } else { format!("stages.{i}") };
                Conv2d::new(&b.pp(name), widths[i].max(1), widths[i + 1].max(1), 3, 2)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            stages,
            head: Linear::new(&b.pp("head"), last, cfg.feature_dim, false)?,
        })
    }

    fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = images.dims4()?;
        let mut x = images.permute([0, 2, 3, 1])?.contiguous()?.reshape((b, h * w, c))?;
        let mut shape = SpatialShape::new(h, w);
        for stage in &self.stages {
            let (y, s) = stage.forward(&x, shape)?;
            x = y.silu()?;
            shape = s;
        }
        self.head.forward(&x.mean(1)?)
    }
}

#[derive(Debug, Clone)]
enum Encoder {
    Transformer(PatchTransformer),
    Conv(ConvNet),
}

/// Image encoder with its batch-norm neck and identity classifier.
#[derive(Debug, Clone)]
pub struct ReidModel {
    encoder: Encoder,
    neck: BatchNorm1d,
    classifier: Param,
    cfg: EncoderConfig,
}

impl ReidModel {
    /// `encoder_builder` scopes the encoder and neck; the classifier is
    /// created under `classifier_builder` with one row per identity.
    pub fn new(
        encoder_builder: &Builder,
        classifier_builder: &Builder,
        cfg: &EncoderConfig,
        num_identities: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let encoder = match cfg.backbone {
            BackboneKind::PatchTransformer => Encoder::Transformer(PatchTransformer::new(encoder_builder, cfg)?),
            BackboneKind::ConvNet => Encoder::Conv(ConvNet::new(encoder_builder, cfg)?),
        };
        let neck = BatchNorm1d::new(&encoder_builder.pp("neck"), cfg.feature_dim, cfg.neck_affine)?;
        let classifier = classifier_builder.param(
            "weight",
            (num_identities, cfg.feature_dim),
            Init::Normal { std: 0.001 },
        )?;
        let model = Self {
            encoder,
            neck,
            classifier,
            cfg: cfg.clone(),
        };
        for p in model.patch_projection() {
            p.set_trainable(!cfg.freeze_patch_projection);
        }
        Ok(model)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn classifier(&self) -> &Param {
        &self.classifier
    }

    pub fn num_identities(&self) -> usize {
        self.classifier.var().dims()[0]
    }

    pub fn patch_projection(&self) -> Vec<Param> {
        match &self.encoder {
            Encoder::Transformer(t) => t.patch_projection(),
            Encoder::Conv(c) => c.stages[0].params().into_iter().cloned().collect(),
        }
    }

    /// Returns `(pre_neck, z)`, both `[B, d]`. In evaluation mode the neck
    /// uses its running statistics.
    pub fn encode(&self, images: &Tensor, train: bool) -> Result<(Tensor, Tensor)> {
        let (_, c, h, w) = images.dims4().map_err(|_| {
            Error::Shape(format!("encoder expects [B, 3, H, W], got {:?}", images.dims()))
        })?;
        if c != 3 || (h, w) != self.cfg.input_size {
            return Err(Error::Shape(format!(
                "encoder expects [B, 3, {}, {}], got {:?}",
                self.cfg.input_size.0,
                self.cfg.input_size.1,
                images.dims()
            )));
        }
        let pre_neck = match &self.encoder {
            Encoder::Transformer(t) => t.forward(images)?,
            Encoder::Conv(cn) => cn.forward(images)?,
        };
        let z = self.neck.forward(&pre_neck, train)?;
        Ok((pre_neck, z))
    }

    pub fn logits(&self, z: &Tensor) -> Result<Tensor> {
        classify(z, &self.classifier.tensor())
    }
}

/// `logits[b, j] = z_b · w_j` for `z: [B, d]`, `weights: [N, d]`.
pub fn classify(z: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let (_, d) = z.dims2()?;
    let (_, dw) = weights.dims2()?;
    if d != dw {
        return Err(Error::Shape(format!(
            "feature dim {d} does not match classifier dim {dw}"
        )));
    }
    Ok(z.matmul(&weights.t()?)?)
}

/// Post-neck features of every manifest image in manifest order, computed
/// in evaluation mode with deterministic preprocessing only.
pub fn extract_features(
    model: &ReidModel,
    manifest: &DatasetManifest,
    images: &[RgbImage],
    batch_size: usize,
    dtype: DType,
) -> Result<Tensor> {
    if manifest.is_empty() {
        return Err(Error::EmptyManifest(manifest.root.clone()));
    }
    if images.len() != manifest.len() {
        return Err(Error::InvalidArgument(format!(
            "{} decoded images for {} manifest records",
            images.len(),
            manifest.len()
        )));
    }
    let (height, width) = model.config().input_size;
    let cfg = AugmentConfig {
        height,
        width,
        ..AugmentConfig::default()
    };
    let mut chunks = Vec::new();
    for batch in images.chunks(batch_size.max(1)) {
        let prepared: Vec<ImageTensor> = batch.iter().map(|img| data::prepare_for_reid_eval(img, &cfg)).collect();
        let x = data::stack_images(&prepared, dtype)?;
        let (_, z) = model.encode(&x, false)?;
        chunks.push(z.detach());
    }
    Ok(Tensor::cat(&chunks, 0)?)
}

const FEATURE_MAGIC: &[u8; 8] = b"DCACFEAT";

/// Little-endian float32 matrix behind a 16-byte header: 8 magic bytes,
/// `u32` row count, `u32` column count.
pub fn write_feature_dump(path: &Path, features: &Tensor) -> Result<()> {
    let (m, d) = features.dims2()?;
    let values = features.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let mut buf = Vec::with_capacity(16 + values.len() * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&(m as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_feature_dump(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    if buf.len() < 16 || &buf[..8] != FEATURE_MAGIC {
        return Err(Error::InvalidArgument(format!("{} is not a feature dump", path.display())));
    }
    let m = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(buf[12..16].try_into().unwrap()) as usize;
    if buf.len() != 16 + m * d * 4 {
        return Err(Error::InvalidArgument(format!("{} is truncated", path.display())));
    }
    let values = buf[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((m, d, values))
}
