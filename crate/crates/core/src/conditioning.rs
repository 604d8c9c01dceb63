//! Builds the denoiser condition from the re-ID model's state.
//!
//! The default scheme mixes a table of learnable identity prompts with the
//! classifier's probability distribution over identities, so the denoiser's
//! loss reaches the encoder and the classifier through those probabilities.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{ops, BatchNorm1d, Builder, Init, Linear, Param};

/// Store prefix of the prompt table and every condition component.
pub const CONDITION_PREFIX: &str = "condition";
pub const DEFAULT_COND_DIM: usize = 64;
pub const PROMPT_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    /// Probability-weighted mix of all prompts.
    CorrelationAware,
    /// The ground-truth identity's prompt.
    ClassWise,
    /// A learned projection of the instance feature.
    InstanceWise,
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "correlation_aware" | "correlation" => Self::CorrelationAware,
            "class_wise" | "class" => Self::ClassWise,
            "instance_wise" | "instance" => Self::InstanceWise,
            other => return Err(Error::Config(format!("unknown condition scheme {other:?}"))),
        })
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::CorrelationAware => "correlation_aware",
            Self::ClassWise => "class_wise",
            Self::InstanceWise => "instance_wise",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PostTransformKind {
    None,
    Silu,
    BatchNorm,
    Mlp,
}

impl std::str::FromStr for PostTransformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => Self::None,
            "silu" => Self::Silu,
            "batchnorm" => Self::BatchNorm,
            "mlp" => Self::Mlp,
            other => return Err(Error::Config(format!("unknown post transform {other:?}"))),
        })
    }
}

impl std::fmt::Display for PostTransformKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Silu => "silu",
            Self::BatchNorm => "batchnorm",
            Self::Mlp => "mlp",
        })
    }
}

#[derive(Debug, Clone)]
enum PostTransform {
    None,
    Silu,
    BatchNorm(BatchNorm1d),
    Mlp(Linear, Linear),
}

impl PostTransform {
    fn new(b: &Builder, kind: PostTransformKind, dim: usize) -> Result<Self> {
        Ok(match kind {
            PostTransformKind::None => Self::None,
            PostTransformKind::Silu => Self::Silu,
            PostTransformKind::BatchNorm => Self::BatchNorm(BatchNorm1d::new(&b.pp("bn"), dim, true)?),
            PostTransformKind::Mlp => Self::Mlp(
                Linear::new(&b.pp("fc1"), dim, dim, true)?,
                Linear::new(&b.pp("fc2"), dim, dim, true)?,
            ),
        })
    }

    fn forward(&self, c: &Tensor, train: bool) -> Result<Tensor> {
        match self {
            Self::None => Ok(c.clone()),
            Self::Silu => Ok(c.silu()?),
            Self::BatchNorm(bn) => bn.forward(c, train),
            Self::Mlp(a, b) => b.forward(&a.forward(c)?.silu()?),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionConfig {
    pub scheme: Scheme,
    pub post_transform: PostTransformKind,
    /// Softmax temperature of the identity probabilities.
    pub tau_c: f64,
    pub dim: usize,
    /// Stops the condition path's gradient into the classifier weights
    /// while still reaching the encoder feature.
    pub detach_classifier: bool,
}

impl Default for ConditionConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::CorrelationAware,
            post_transform: PostTransformKind::None,
            tau_c: 1.0,
            dim: DEFAULT_COND_DIM,
            detach_classifier: false,
        }
    }
}

/// `softmax(z W^T / tau_c)` over identities, `z: [B, d]`, `W: [N, d]`.
pub fn id_probabilities(z: &Tensor, classifier: &Tensor, tau_c: f64) -> Result<Tensor> {
    if !(tau_c > 0.0) {
        return Err(Error::InvalidArgument(format!("tau_c must be positive, got {tau_c}")));
    }
    let logits = crate::backbone::classify(z, classifier)?;
    ops::softmax_last(&(logits * (1.0 / tau_c))?)
}

/// `c = p E` for `p: [B, N]`, `E: [N, d_c]`.
pub fn correlation_aware(p: &Tensor, prompts: &Tensor) -> Result<Tensor> {
    let (_, n) = p.dims2()?;
    let (rows, _) = prompts.dims2()?;
    if n != rows {
        return Err(Error::Shape(format!("{n} probabilities for {rows} prompts")));
    }
    Ok(p.matmul(prompts)?)
}

/// Prompt row of each label.
pub fn class_wise(labels: &[usize], prompts: &Tensor) -> Result<Tensor> {
    let (n, _) = prompts.dims2()?;
    if let Some(&bad) = labels.iter().find(|&&y| y >= n) {
        return Err(Error::LabelOutOfRange { label: bad, num_classes: n });
    }
    let idx: Vec<u32> = labels.iter().map(|&y| y as u32).collect();
    let idx = Tensor::from_vec(idx, labels.len(), prompts.device())?;
    Ok(prompts.index_select(&idx, 0)?)
}

/// `c = z P` with a bias-free learned projection.
pub fn instance_wise(z: &Tensor, projection: &Linear) -> Result<Tensor> {
    projection.forward(z)
}

/// Prompt table plus the components of the configured scheme.
#[derive(Debug, Clone)]
pub struct ConditionModule {
    prompts: Param,
    projection: Option<Linear>,
    post: PostTransform,
    cfg: ConditionConfig,
}

impl ConditionModule {
    /// `b` should be scoped at [`CONDITION_PREFIX`].
    pub fn new(b: &Builder, cfg: &ConditionConfig, num_identities: usize, feature_dim: usize) -> Result<Self> {
        if cfg.dim == 0 {
            return Err(Error::Config("condition dim must be positive".into()));
        }
        if !(cfg.tau_c > 0.0) {
            return Err(Error::Config(format!("condition tau_c must be positive, got {}", cfg.tau_c)));
        }
        let prompts = b.param("prompts", (num_identities, cfg.dim), Init::Normal { std: PROMPT_INIT_STD })?;
        let projection = match cfg.scheme {
            Scheme::InstanceWise => Some(Linear::new(&b.pp("instance_proj"), feature_dim, cfg.dim, false)?),
            _ => None,
        };
        Ok(Self {
            prompts,
            projection,
            post: PostTransform::new(&b.pp("post"), cfg.post_transform, cfg.dim)?,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &ConditionConfig {
        &self.cfg
    }

    pub fn prompts(&self) -> &Param {
        &self.prompts
    }

    /// Conditions `[B, d_c]` for encoder features `z: [B, d]`.
    pub fn forward(&self, z: &Tensor, classifier: &Param, labels: &[usize], train: bool) -> Result<Tensor> {
        let prompts = self.prompts.tensor();
        let c = match self.cfg.scheme {
            Scheme::CorrelationAware => {
                let w = if self.cfg.detach_classifier { classifier.value() } else { classifier.tensor() };
                correlation_aware(&id_probabilities(z, &w, self.cfg.tau_c)?, &prompts)?
            }
            Scheme::ClassWise => class_wise(labels, &prompts)?,
            Scheme::InstanceWise => instance_wise(z, self.projection.as_ref().expect("built for instance scheme"))?,
        };
        self.post.forward(&c, train)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t2(v: &[&[f64]]) -> Tensor {
        Tensor::new(v.iter().map(|r| r.to_vec()).collect::<Vec<_>>(), &Device::Cpu).unwrap()
    }

    #[test]
    fn zero_feature_gives_uniform_probabilities() -> Result<()> {
        let w = Tensor::randn(0f64, 1.0, (5, 3), &Device::Cpu)?;
        let z = Tensor::zeros((1, 3), DType::F64, &Device::Cpu)?;
        for p in id_probabilities(&z, &w, 0.7)?.to_vec2::<f64>()?[0].iter() {
            assert!((p - 0.2).abs() < 1e-15);
        }
        assert!(id_probabilities(&z, &w, 0.0).is_err());
        Ok(())
    }

    #[test]
    fn low_temperature_approaches_one_hot() -> Result<()> {
        let w = t2(&[&[1.0, 0.0], &[0.0, 1.0], &[-1.0, 0.0]]);
        let z = t2(&[&[0.3, 0.1]]);
        let p = id_probabilities(&z, &w, 1e-3)?.to_vec2::<f64>()?;
        assert!(p[0][0] > 1.0 - 1e-12);
        Ok(())
    }

    #[test]
    fn correlation_aware_examples() -> Result<()> {
        let e = t2(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let c = correlation_aware(&t2(&[&[0.25, 0.75]]), &e)?.to_vec2::<f64>()?;
        assert_eq!(c, vec![vec![0.25, 0.75]]);
        let e3 = t2(&[&[1.0, 2.0], &[3.0, -1.0], &[2.0, 2.0]]);
        let third = 1.0 / 3.0;
        let c = correlation_aware(&t2(&[&[third, third, third]]), &e3)?.to_vec2::<f64>()?;
        assert!((c[0][0] - 2.0).abs() < 1e-12 && (c[0][1] - 1.0).abs() < 1e-12);
        Ok(())
    }

    #[test]
    fn class_wise_is_the_one_hot_mix() -> Result<()> {
        let e = Tensor::randn(0f64, 1.0, (4, 6), &Device::Cpu)?;
        let c = class_wise(&[2, 0], &e)?.to_vec2::<f64>()?;
        let onehot = t2(&[&[0.0, 0.0, 1.0, 0.0], &[1.0, 0.0, 0.0, 0.0]]);
        assert_eq!(correlation_aware(&onehot, &e)?.to_vec2::<f64>()?, c);
        assert_eq!(c[0], e.get(2)?.to_vec1::<f64>()?);
        assert!(class_wise(&[4], &e).is_err());
        Ok(())
    }

    #[test]
    fn instance_wise_is_linear_and_bias_free() -> Result<()> {
        let store = ParamStore::new(DType::F64);
        let b = store.builder(CONDITION_PREFIX, ChaCha8Rng::seed_from_u64(0));
        let proj = Linear::new(&b.pp("instance_proj"), 4, 4, false)?;
        let zero = Tensor::zeros((1, 4), DType::F64, &Device::Cpu)?;
        assert_eq!(instance_wise(&zero, &proj)?.to_vec2::<f64>()?, vec![vec![0.0; 4]]);
        proj.weight().set(&Tensor::eye(4, DType::F64, &Device::Cpu)?)?;
        let z = t2(&[&[1.0, -2.0, 3.0, 0.5]]);
        assert_eq!(instance_wise(&z, &proj)?.to_vec2::<f64>()?, z.to_vec2::<f64>()?);
        Ok(())
    }

    #[test]
    fn post_transforms() -> Result<()> {
        let store = ParamStore::new(DType::F64);
        let b = store.builder(CONDITION_PREFIX, ChaCha8Rng::seed_from_u64(0));
        let c = t2(&[&[0.0, 1.0], &[-1.0, 2.0]]);
        let none = PostTransform::new(&b.pp("a"), PostTransformKind::None, 2)?;
        assert_eq!(none.forward(&c, true)?.to_vec2::<f64>()?, c.to_vec2::<f64>()?);
        let silu = PostTransform::new(&b.pp("b"), PostTransformKind::Silu, 2)?;
        assert_eq!(silu.forward(&c, true)?.to_vec2::<f64>()?[0][0], 0.0);
        let before = store.all().len();
        PostTransform::new(&b.pp("c"), PostTransformKind::Mlp, 2)?;
        assert_eq!(store.all().len(), before + 4);
        assert!("gelu".parse::<PostTransformKind>().is_err());
        Ok(())
    }

    #[test]
    fn class_wise_condition_has_no_path_to_the_feature() -> Result<()> {
        let store = ParamStore::new(DType::F64);
        let cls = store.builder("classifier", ChaCha8Rng::seed_from_u64(1)).param("weight", (3, 4), Init::Normal { std: 1.0 })?;
        let z = candle_core::Var::randn(0f64, 1.0, (2, 4), &Device::Cpu)?;
        for (scheme, expect_grad) in [(Scheme::ClassWise, false), (Scheme::CorrelationAware, true)] {
            let b = store.builder(&format!("{CONDITION_PREFIX}_{scheme}"), ChaCha8Rng::seed_from_u64(0));
            let cfg = ConditionConfig { scheme, dim: 4, ..Default::default() };
            let m = ConditionModule::new(&b, &cfg, 3, 4)?;
            let c = m.forward(z.as_tensor(), &cls, &[0, 2], true)?;
            let grads = c.sum_all()?.sqr()?.backward()?;
            assert_eq!(grads.get(z.as_tensor()).is_some(), expect_grad, "{scheme}");
            assert!(grads.get(m.prompts().var().as_tensor()).is_some());
        }
        Ok(())
    }
}
