//! Low-rank adapters on the denoiser's linear maps, and the fine-tuning
//! modes that decide which diffusion parameters are trainable.

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Builder, Init, Linear, Param, ParamStore};

/// Store prefix of every adapter matrix.
pub const LORA_PREFIX: &str = "lora";
pub const DEFAULT_RANK: usize = 8;
pub const A_INIT_STD: f64 = 0.01;

/// Rank-`r` pair `(A: [in, r], B: [r, out])` contributing `(h A B) / r`.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    a: Param,
    b: Param,
    rank: usize,
}

impl LoraAdapter {
    pub fn a(&self) -> &Param {
        &self.a
    }

    pub fn b(&self) -> &Param {
        &self.b
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// The additive term `(h A B) / r`.
    pub fn delta(&self, h: &Tensor) -> Result<Tensor> {
        let (a, b) = (self.a.tensor(), self.b.tensor());
        Ok((h.matmul(&a)?.matmul(&b)? * (1.0 / self.rank as f64))?)
    }
}

/// Largest admissible rank for a `[d_in -> d_out]` map.
pub fn max_rank(in_dim: usize, out_dim: usize) -> usize {
    in_dim.min(out_dim) / 4
}

/// A frozen-able linear map with an optional adapter.
#[derive(Debug, Clone)]
pub struct LoraLinear {
    base: Linear,
    path: String,
    adapter: Option<LoraAdapter>,
}

impl LoraLinear {
    pub fn new(b: &Builder, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        Ok(Self {
            base: Linear::new(b, in_dim, out_dim, bias)?,
            path: b.prefix().to_string(),
            adapter: None,
        })
    }

    pub fn base(&self) -> &Linear {
        &self.base
    }

    /// Dotted parameter path of the base map, used to key its adapter.
    pub fn path(&self) -> &str {
        &self.path
    }

    pub fn adapter(&self) -> Option<&LoraAdapter> {
        self.adapter.as_ref()
    }

    /// Attaches an adapter: `A ~ N(0, 0.01^2)`, `B = 0`, base weights frozen.
    pub fn attach(&mut self, store: &ParamStore, rank: usize, rng: ChaCha8Rng) -> Result<()> {
        let (din, dout) = (self.base.in_dim(), self.base.out_dim());
        if rank == 0 || rank > max_rank(din, dout) {
            return Err(Error::InvalidArgument(format!(
                "LoRA rank {rank} is too large for {} ({din} -> {dout}, max {})",
                self.path,
                max_rank(din, dout)
            )));
        }
        if self.adapter.is_some() {
            self.detach(store);
        }
        let b = store.builder(LORA_PREFIX, rng).pp(&self.path).pp(format!("r{rank}"));
        let a = b.param("a", (din, rank), Init::Normal { std: A_INIT_STD })?;
        let bm = b.param("b", (rank, dout), Init::Zeros)?;
        self.freeze_base();
        self.adapter = Some(LoraAdapter { a, b: bm, rank });
        Ok(())
    }

    pub fn detach(&mut self, store: &ParamStore) {
        if self.adapter.take().is_some() {
            store.remove_prefix(&format!("{LORA_PREFIX}.{}.", self.path));
        }
    }

    fn freeze_base(&self) {
        self.base.weight().set_trainable(false);
        if let Some(b) = self.base.bias() {
            b.set_trainable(false);
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.base.forward(x)?;
        match &self.adapter {
            None => Ok(y),
            Some(ad) => {
                let rows = x.elem_count() / self.base.in_dim();
                let delta = ad.delta(&x.reshape((rows, self.base.in_dim()))?)?.reshape(y.shape())?;
                Ok((y + delta)?)
            }
        }
    }
}

/// Anything that owns adapted linear maps.
pub trait HasLora {
    fn visit_lora(&mut self, f: &mut dyn FnMut(&mut LoraLinear) -> Result<()>) -> Result<()>;
}

/// Attaches a rank-`rank` adapter to every adapted map. Each adapter draws
/// from its own stream so placement order does not affect initial values.
pub fn attach_all(model: &mut impl HasLora, store: &ParamStore, rank: usize, seed: u64) -> Result<usize> {
    let mut count = 0u64;
    model.visit_lora(&mut |l| {
        l.attach(store, rank, crate::rng::stream(seed, &[crate::rng::tag::LORA_INIT, count]))?;
        count += 1;
        Ok(())
    })?;
    Ok(count as usize)
}

pub fn detach_all(model: &mut impl HasLora, store: &ParamStore) -> Result<()> {
    model.visit_lora(&mut |l| {
        l.detach(store);
        Ok(())
    })
}

/// Adapter paths currently attached.
pub fn placements(model: &mut impl HasLora) -> Result<Vec<String>> {
    let mut out = Vec::new();
    model.visit_lora(&mut |l| {
        if l.adapter.is_some() {
            out.push(l.path.clone());
        }
        Ok(())
    })?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FineTuneMode {
    Frozen,
    Lora,
    /// Output blocks only.
    Partial1,
    /// Middle and output blocks.
    Partial2,
    Full,
    /// Everything trainable, randomly initialized tensors redrawn.
    Scratch,
}

impl std::str::FromStr for FineTuneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "frozen" => Self::Frozen,
            "lora" => Self::Lora,
            "partial_1" => Self::Partial1,
            "partial_2" => Self::Partial2,
            "full" => Self::Full,
            "scratch" => Self::Scratch,
            other => return Err(Error::Config(format!("unknown fine-tune mode {other:?}"))),
        })
    }
}

impl std::fmt::Display for FineTuneMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Frozen => "frozen",
            Self::Lora => "lora",
            Self::Partial1 => "partial_1",
            Self::Partial2 => "partial_2",
            Self::Full => "full",
            Self::Scratch => "scratch",
        })
    }
}

/// Configures adapters and trainability of the denoiser, whose parameters
/// live under `denoiser_prefix` split into `input`, `middle` and `output`
/// groups.
pub fn apply_fine_tune_mode(
    model: &mut impl HasLora,
    store: &ParamStore,
    denoiser_prefix: &str,
    mode: FineTuneMode,
    rank: usize,
    seed: u64,
) -> Result<()> {
    detach_all(model, store)?;
    store.set_trainable_prefix(&format!("{denoiser_prefix}."), false);
    let open = |group: &str| store.set_trainable_prefix(&format!("{denoiser_prefix}.{group}."), true);
    match mode {
        FineTuneMode::Frozen => {}
        FineTuneMode::Lora => {
            attach_all(model, store, rank, seed)?;
        }
        FineTuneMode::Partial1 => open("output"),
        FineTuneMode::Partial2 => {
            open("middle");
            open("output");
        }
        FineTuneMode::Full => {
            open("input");
            open("middle");
            open("output");
        }
        FineTuneMode::Scratch => {
            let mut rng = crate::rng::stream(seed, &[crate::rng::tag::SCRATCH_INIT]);
            for p in store.with_prefix(&format!("{denoiser_prefix}.")) {
                if p.init().is_random() {
                    p.reinit(&mut rng)?;
                }
                p.set_trainable(true);
            }
        }
    }
    Ok(())
}

/// Trainable parameters outside the given prefixes (the encoder and
/// classifier), i.e. everything the diffusion side optimizes.
pub fn diffusion_trainable(store: &ParamStore, reid_prefixes: &[&str]) -> Vec<Param> {
    store
        .trainable()
        .into_iter()
        .filter(|p| !reid_prefixes.iter().any(|r| p.name().starts_with(r)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use rand::SeedableRng;

    fn layer(store: &ParamStore, din: usize, dout: usize) -> LoraLinear {
        let b = store.builder("net", ChaCha8Rng::seed_from_u64(0)).pp("fc");
        LoraLinear::new(&b, din, dout, true).unwrap()
    }

    #[test]
    fn fresh_adapter_is_an_identity() -> Result<()> {
        let store = ParamStore::new(DType::F32);
        let mut l = layer(&store, 16, 12);
        let x = Tensor::randn(0f32, 1.0, (5, 16), &Device::Cpu)?;
        let before = l.forward(&x)?.to_vec2::<f32>()?;
        l.attach(&store, 3, ChaCha8Rng::seed_from_u64(1))?;
        assert_eq!(l.forward(&x)?.to_vec2::<f32>()?, before);
        assert!(store.get("lora.net.fc.r3.a").is_some());
        assert!(!l.base().weight().is_trainable());
        Ok(())
    }

    #[test]
    fn rank_bound_is_enforced() {
        let store = ParamStore::new(DType::F32);
        let mut l = layer(&store, 16, 12);
        assert!(l.attach(&store, 4, ChaCha8Rng::seed_from_u64(1)).is_err());
        assert!(l.attach(&store, 0, ChaCha8Rng::seed_from_u64(1)).is_err());
        assert!(l.attach(&store, 3, ChaCha8Rng::seed_from_u64(1)).is_ok());
    }

    #[test]
    fn worked_example_with_unit_rank() -> Result<()> {
        let store = ParamStore::new(DType::F64);
        let b = store.builder("net", ChaCha8Rng::seed_from_u64(0)).pp("fc");
        let mut l = LoraLinear::new(&b, 4, 4, false)?;
        l.attach(&store, 1, ChaCha8Rng::seed_from_u64(0))?;
        let dev = Device::Cpu;
        l.base().weight().set(&Tensor::zeros((4, 4), DType::F64, &dev)?)?;
        let ad = l.adapter().unwrap();
        ad.a().set(&Tensor::new(&[[1.0f64], [0.0], [0.0], [0.0]], &dev)?)?;
        ad.b().set(&Tensor::new(&[[0.0f64, 2.0, 0.0, 0.0]], &dev)?)?;
        let h = Tensor::new(&[[1.0f64, 0.0, 0.0, 0.0]], &dev)?;
        assert_eq!(l.forward(&h)?.to_vec2::<f64>()?, vec![vec![0.0, 2.0, 0.0, 0.0]]);
        Ok(())
    }

    #[test]
    fn adapter_term_is_bilinear() -> Result<()> {
        let store = ParamStore::new(DType::F64);
        let mut l = layer(&store, 8, 8);
        l.attach(&store, 2, ChaCha8Rng::seed_from_u64(3))?;
        let ad = l.adapter().unwrap().clone();
        ad.b().set(&Tensor::randn(0f64, 1.0, (2, 8), &Device::Cpu)?)?;
        let h = Tensor::randn(0f64, 1.0, (3, 8), &Device::Cpu)?;
        let d1 = ad.delta(&h)?;
        ad.a().set(&(ad.a().value() * 2.0)?)?;
        ad.b().set(&(ad.b().value() * 2.0)?)?;
        let d2 = ad.delta(&h)?;
        let err = (d2 - (d1 * 4.0)?)?.abs()?.max_all()?.to_scalar::<f64>()?;
        assert!(err < 1e-12);
        Ok(())
    }

    #[test]
    fn detach_removes_adapter_params() {
        let store = ParamStore::new(DType::F32);
        let mut l = layer(&store, 16, 16);
        l.attach(&store, 4, ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(store.with_prefix("lora.").len(), 2);
        l.detach(&store);
        assert!(store.with_prefix("lora.").is_empty());
        assert!(l.adapter().is_none());
    }

    #[test]
    fn parameter_count_is_linear_in_rank() {
        for r in [1, 2, 4] {
            let store = ParamStore::new(DType::F32);
            let mut l = layer(&store, 16, 32);
            l.attach(&store, r, ChaCha8Rng::seed_from_u64(1)).unwrap();
            let n: usize = store.with_prefix("lora.").iter().map(Param::elem_count).sum();
            assert_eq!(n, (16 + 32) * r);
        }
    }

    #[test]
    fn modes_parse() {
        for m in ["frozen", "lora", "partial_1", "partial_2", "full", "scratch"] {
            assert_eq!(m.parse::<FineTuneMode>().unwrap().to_string(), m);
        }
        assert!("half".parse::<FineTuneMode>().is_err());
    }
}
