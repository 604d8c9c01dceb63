use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::lora::{HasLora, LoraLinear};
use crate::nn::{ops, upsample_nearest2x, Builder, Conv2d, GroupNorm, LayerNorm, Linear, SpatialShape};

/// Store prefix of all base denoiser weights.
pub const DENOISER_PREFIX: &str = "denoiser";

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    /// Channel width per resolution, finest first; each level halves the grid.
    pub widths: Vec<usize>,
    pub heads: usize,
    pub cond_dim: usize,
    /// Width of the sinusoidal timestep embedding.
    pub time_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            widths: vec![64, 128, 128],
            heads: 4,
            cond_dim: 64,
            time_dim: 64,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.heads == 0 || self.cond_dim == 0 || self.time_dim < 2 {
            return Err(Error::Config("denoiser needs widths, heads, a condition dim and a time dim".into()));
        }
        for &w in &self.widths {
            if w % self.heads != 0 {
                return Err(Error::Config(format!("denoiser width {w} not divisible by {} heads", self.heads)));
            }
        }
        if self.time_dim % 2 != 0 {
            return Err(Error::Config("timestep embedding width must be even".into()));
        }
        Ok(())
    }
}

/// Sinusoidal embedding `[sin(t f_i), cos(t f_i)]` with geometric frequencies.
pub fn timestep_embedding(ts: &[usize], dim: usize, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut v = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let freqs = (0..half).map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp() * t as f64);
        let angles: Vec<f64> = freqs.collect();
        v.extend(angles.iter().map(|a| a.sin()));
        v.extend(angles.iter().map(|a| a.cos()));
    }
    Ok(Tensor::from_vec(v, (ts.len(), dim), &Device::Cpu)?.to_dtype(dtype)?)
}

fn groups_for(channels: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|g| channels % g == 0).unwrap_or(1)
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Linear>,
}

impl ResBlock {
    fn new(b: &Builder, cin: usize, cout: usize, temb: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&b.pp("norm1"), groups_for(cin), cin)?,
            conv1: Conv2d::new(&b.pp("conv1"), cin, cout, 3, 1)?,
            time: Linear::new(&b.pp("time"), temb, cout, true)?,
            norm2: GroupNorm::new(&b.pp("norm2"), groups_for(cout), cout)?,
            conv2: Conv2d::new(&b.pp("conv2"), cout, cout, 3, 1)?,
            skip: if cin != cout { Some(Linear::new(&b.pp("skip"), cin, cout, true)?) } else { None },
        })
    }

    fn forward(&self, x: &Tensor, shape: SpatialShape, temb: &Tensor) -> Result<Tensor> {
        let (h, _) = self.conv1.forward(&self.norm1.forward(x)?.silu()?, shape)?;
        let h = h.broadcast_add(&self.time.forward(&temb.silu()?)?.unsqueeze(1)?)?;
        let (h, _) = self.conv2.forward(&self.norm2.forward(&h)?.silu()?, shape)?;
        let res = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((res + h)?)
    }
}

/// Self-attention over latent tokens, cross-attention to the condition
/// token, and a feed-forward map, each with a pre-norm residual.
#[derive(Debug, Clone)]
struct TransformerBlock {
    norm_in: GroupNorm,
    proj_in: Linear,
    ln1: LayerNorm,
    self_q: LoraLinear,
    self_k: LoraLinear,
    self_v: LoraLinear,
    self_out: LoraLinear,
    ln2: LayerNorm,
    cross_q: LoraLinear,
    cross_k: LoraLinear,
    cross_v: LoraLinear,
    cross_out: LoraLinear,
    ln3: LayerNorm,
    ff1: LoraLinear,
    ff2: LoraLinear,
    proj_out: Linear,
    heads: usize,
}

impl TransformerBlock {
    fn new(b: &Builder, c: usize, heads: usize, cond_dim: usize) -> Result<Self> {
        let lin = |name: &str, i: usize, o: usize| LoraLinear::new(&b.pp(name), i, o, false);
        Ok(Self {
            norm_in: GroupNorm::new(&b.pp("norm_in"), groups_for(c), c)?,
            proj_in: Linear::new(&b.pp("proj_in"), c, c, true)?,
            ln1: LayerNorm::new(&b.pp("ln1"), c)?,
            self_q: lin("attn_self.q", c, c)?,
            self_k: lin("attn_self.k", c, c)?,
            self_v: lin("attn_self.v", c, c)?,
            self_out: LoraLinear::new(&b.pp("attn_self.out"), c, c, true)?,
            ln2: LayerNorm::new(&b.pp("ln2"), c)?,
            cross_q: lin("attn_cross.q", c, c)?,
            cross_k: lin("attn_cross.k", cond_dim, c)?,
            cross_v: lin("attn_cross.v", cond_dim, c)?,
            cross_out: LoraLinear::new(&b.pp("attn_cross.out"), c, c, true)?,
            ln3: LayerNorm::new(&b.pp("ln3"), c)?,
            ff1: LoraLinear::new(&b.pp("ff.fc1"), c, 4 * c, true)?,
            ff2: LoraLinear::new(&b.pp("ff.fc2"), 4 * c, c, true)?,
            proj_out: Linear::new(&b.pp("proj_out"), c, c, true)?,
            heads,
        })
    }

    /// `x: [B, L, C]`, `cond: [B, 1, d_c]`.
    fn forward(&self, x: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let mut h = self.proj_in.forward(&self.norm_in.forward(x)?)?;
        let n = self.ln1.forward(&h)?;
        let a = ops::multi_head_attention(
            &self.self_q.forward(&n)?,
            &self.self_k.forward(&n)?,
            &self.self_v.forward(&n)?,
            self.heads,
        )?;
        h = (h + self.self_out.forward(&a)?)?;
        let n = self.ln2.forward(&h)?;
        let a = ops::multi_head_attention(
            &self.cross_q.forward(&n)?,
            &self.cross_k.forward(cond)?,
            &self.cross_v.forward(cond)?,
            self.heads,
        )?;
        h = (h + self.cross_out.forward(&a)?)?;
        let n = self.ln3.forward(&h)?;
        h = (&h + self.ff2.forward(&self.ff1.forward(&n)?.silu()?)?)?;
        Ok((x + self.proj_out.forward(&h)?)?)
    }

    fn adapted(&mut self) -> [&mut LoraLinear; 10] {
        [
            &mut self.self_q,
            &mut self.self_k,
            &mut self.self_v,
            &mut self.self_out,
            &mut self.cross_q,
            &mut self.cross_k,
            &mut self.cross_v,
            &mut self.cross_out,
            &mut self.ff1,
            &mut self.ff2,
        ]
    }
}

#[derive(Debug, Clone)]
struct Level {
    res: ResBlock,
    attn: TransformerBlock,
    /// Down-sampling conv (input side) or post-upsample conv (output side).
    resample: Option<Conv2d>,
}

/// Small conditional U-Net predicting the noise of a latent.
///
/// Parameters are grouped as `denoiser.input.*` (timestep MLP, stem, and
/// down path), `denoiser.middle.*`, and `denoiser.output.*` (up path and
/// head), which is what the partial fine-tuning modes select on.
#[derive(Debug, Clone)]
pub struct Denoiser {
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    down: Vec<Level>,
    mid_res1: ResBlock,
    mid_attn: TransformerBlock,
    mid_res2: ResBlock,
    up: Vec<Level>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    cfg: DenoiserConfig,
}

impl Denoiser {
    /// `b` should be scoped at [`DENOISER_PREFIX`].
    pub fn new(b: &Builder, cfg: &DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        let temb = 4 * cfg.time_dim;
        let (inp, mid, out) = (b.pp("input"), b.pp("middle"), b.pp("output"));
        let w = &cfg.widths;
        let levels = w.len();
        let mut down = Vec::with_capacity(levels);
        let mut prev = w[0];
        for (i, &c) in w.iter().enumerate() {
            let lb = inp.pp(format!("{i}"));
            down.push(Level {
                res: ResBlock::new(&lb.pp("res"), prev, c, temb)?,
                attn: TransformerBlock::new(&lb.pp("attn"), c, cfg.heads, cfg.cond_dim)?,
                resample: if i + 1 < levels { Some(Conv2d::new(&lb.pp("down"), c, c, 3, 2)?) } else { None },
            });
            prev = c;
        }
        let last = w[levels - 1];
        let mut up = Vec::with_capacity(levels);
        let mut cur = last;
        for i in (0..levels).rev() {
            let lb = out.pp(format!("{i}"));
            up.push(Level {
                res: ResBlock::new(&lb.pp("res"), cur + w[i], w[i], temb)?,
                attn: TransformerBlock::new(&lb.pp("attn"), w[i], cfg.heads, cfg.cond_dim)?,
                resample: if i > 0 { Some(Conv2d::new(&lb.pp("up"), w[i], w[i], 3, 1)?) } else { None },
            });
            cur = w[i];
        }
        Ok(Self {
            time1: Linear::new(&inp.pp("time1"), cfg.time_dim, temb, true)?,
            time2: Linear::new(&inp.pp("time2"), temb, temb, true)?,
            conv_in: Conv2d::new(&inp.pp("conv_in"), cfg.latent_channels, w[0], 3, 1)?,
            down,
            mid_res1: ResBlock::new(&mid.pp("res1"), last, last, temb)?,
            mid_attn: TransformerBlock::new(&mid.pp("attn"), last, cfg.heads, cfg.cond_dim)?,
            mid_res2: ResBlock::new(&mid.pp("res2"), last, last, temb)?,
            up,
            norm_out: GroupNorm::new(&out.pp("norm_out"), groups_for(w[0]), w[0])?,
            conv_out: Conv2d::new(&out.pp("conv_out"), w[0], cfg.latent_channels, 3, 1)?,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    /// Predicts the noise in `ft: [B, C_lat, H, W]` at per-sample timesteps
    /// `ts`, attending to one condition vector per sample, `cond: [B, d_c]`.
    pub fn forward(&self, ft: &Tensor, ts: &[usize], cond: &Tensor) -> Result<Tensor> {
        let (b, c, hh, ww) = ft.dims4()?;
        if c != self.cfg.latent_channels {
            return Err(Error::Shape(format!("denoiser expects {} latent channels, got {c}", self.cfg.latent_channels)));
        }
        let (cb, cd) = cond.dims2()?;
        if cd != self.cfg.cond_dim || cb != b {
            return Err(Error::Shape(format!(
                "condition must be [{b}, {}], got {:?}",
                self.cfg.cond_dim,
                cond.dims()
            )));
        }
        let scale = 1 << (self.cfg.widths.len() - 1);
        if hh % scale != 0 || ww % scale != 0 || ts.len() != b {
            return Err(Error::Shape(format!("latent {hh}x{ww} or {} timesteps incompatible with the denoiser", ts.len())));
        }
        let cond = cond.unsqueeze(1)?;
        let temb = timestep_embedding(ts, self.cfg.time_dim, ft.dtype())?;
        let temb = self.time2.forward(&self.time1.forward(&temb)?.silu()?)?;

        let mut shape = SpatialShape::new(hh, ww);
        let x = ft.permute([0, 2, 3, 1])?.contiguous()?.reshape((b, hh * ww, c))?;
        let (mut h, _) = self.conv_in.forward(&x, shape)?;
        let mut skips = Vec::with_capacity(self.down.len());
        for level in &self.down {
            h = level.res.forward(&h, shape, &temb)?;
            h = level.attn.forward(&h, &cond)?;
            skips.push((h.clone(), shape));
            if let Some(d) = &level.resample {
                let (y, s) = d.forward(&h, shape)?;
                h = y;
                shape = s;
            }
        }
        h = self.mid_res1.forward(&h, shape, &temb)?;
        h = self.mid_attn.forward(&h, &cond)?;
        h = self.mid_res2.forward(&h, shape, &temb)?;
        for level in &self.up {
            let (skip, s) = skips.pop().expect("one skip per level");
            debug_assert_eq!(s, shape);
            h = Tensor::cat(&[&h, &skip], 2)?;
            h = level.res.forward(&h, shape, &temb)?;
            h = level.attn.forward(&h, &cond)?;
            if let Some(u) = &level.resample {
                let (y, s) = upsample_nearest2x(&h, shape)?;
                let (y, s) = u.forward(&y, s)?;
                h = y;
                shape = s;
            }
        }
        let (out, _) = self.conv_out.forward(&self.norm_out.forward(&h)?.silu()?, shape)?;
        Ok(out.reshape((b, hh, ww, c))?.permute([0, 3, 1, 2])?.contiguous()?)
    }

    fn blocks_mut(&mut self) -> impl Iterator<Item = &mut TransformerBlock> {
        self.down
            .iter_mut()
            .map(|l| &mut l.attn)
            .chain(std::iter::once(&mut self.mid_attn))
            .chain(self.up.iter_mut().map(|l| &mut l.attn))
    }

    pub fn num_attention_blocks(&self) -> usize {
        2 * self.down.len() + 1
    }
}

impl HasLora for Denoiser {
    fn visit_lora(&mut self, f: &mut dyn FnMut(&mut LoraLinear) -> Result<()>) -> Result<()> {
        for block in self.blocks_mut() {
            for l in block.adapted() {
                f(l)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            latent_channels: 4,
            widths: vec![8, 16],
            heads: 2,
            cond_dim: 8,
            time_dim: 8,
        }
    }

    fn build(cfg: &DenoiserConfig) -> (ParamStore, Denoiser) {
        let store = ParamStore::new(DType::F64);
        let b = store.builder(DENOISER_PREFIX, ChaCha8Rng::seed_from_u64(0));
        let d = Denoiser::new(&b, cfg).unwrap();
        (store, d)
    }

    #[test]
    fn output_shape_matches_input() -> Result<()> {
        let (_, d) = build(&tiny());
        let x = Tensor::randn(0f64, 1.0, (2, 4, 8, 8), &Device::Cpu)?;
        let c = Tensor::randn(0f64, 1.0, (2, 8), &Device::Cpu)?;
        let y = d.forward(&x, &[3, 900], &c)?;
        assert_eq!(y.dims(), x.dims());
        assert!(y.flatten_all()?.to_vec1::<f64>()?.iter().all(|v| v.is_finite()));
        Ok(())
    }

    #[test]
    fn condition_reaches_the_output() -> Result<()> {
        let (_, d) = build(&tiny());
        let x = Tensor::randn(0f64, 1.0, (1, 4, 8, 8), &Device::Cpu)?;
        let c1 = Tensor::randn(0f64, 1.0, (1, 8), &Device::Cpu)?;
        let c2 = Tensor::randn(0f64, 1.0, (1, 8), &Device::Cpu)?;
        let diff = (d.forward(&x, &[10], &c1)? - d.forward(&x, &[10], &c2)?)?
            .abs()?
            .max_all()?
            .to_scalar::<f64>()?;
        assert!(diff > 0.0);
        Ok(())
    }

    #[test]
    fn wrong_condition_dim_is_rejected() {
        let (_, d) = build(&tiny());
        let x = Tensor::zeros((1, 4, 8, 8), DType::F64, &Device::Cpu).unwrap();
        let c = Tensor::zeros((1, 5), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(d.forward(&x, &[0], &c), Err(Error::Shape(_))));
    }

    #[test]
    fn parameters_are_grouped() {
        let (store, _) = build(&tiny());
        let all = store.all();
        assert!(all.iter().all(|p| {
            ["denoiser.input.", "denoiser.middle.", "denoiser.output."].iter().any(|g| p.name().starts_with(g))
        }));
        assert!(store.get("denoiser.middle.attn.attn_cross.k.weight").is_some());
    }

    #[test]
    fn every_attention_block_exposes_ten_adapted_maps() -> Result<()> {
        let (_, mut d) = build(&tiny());
        let mut n = 0;
        d.visit_lora(&mut |_| {
            n += 1;
            Ok(())
        })?;
        assert_eq!(n, 10 * d.num_attention_blocks());
        Ok(())
    }

    #[test]
    fn timestep_embedding_is_bounded_and_distinct() -> Result<()> {
        let e = timestep_embedding(&[0, 1, 999], 16, DType::F64)?.to_vec2::<f64>()?;
        assert_eq!(e[0][..8], [0.0; 8]);
        assert_eq!(e[0][8..], [1.0; 8]);
        assert_ne!(e[1], e[2]);
        assert!(e.iter().flatten().all(|v| v.abs() <= 1.0));
        Ok(())
    }
}
