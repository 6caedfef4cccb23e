//! Timestep-conditioned ε-prediction UNet.
//!
//! The encoder (input conv, residual levels, downsamplers) is a separate
//! type so the control branch and the discriminator can be built as exact
//! parameter-name-compatible copies of it.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Bind, Conv2d, GroupNorm, Init, Linear, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub latent_channels: usize,
    pub widths: Vec<usize>,
    pub res_blocks: usize,
    pub time_dim: usize,
    pub groups: usize,
    pub t_max: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self { latent_channels: 48, widths: vec![32, 64, 128], res_blocks: 2, time_dim: 128, groups: 8, t_max: 1000 }
    }
}

impl UNetConfig {
    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    /// Latent side lengths must be divisible by this.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.levels() - 1)
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }

    fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) || self.res_blocks == 0 {
            return Err(Error::InvalidArgument("UNet needs nonempty positive widths and >= 1 res block".into()));
        }
        if self.time_dim < 2 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::InvalidArgument("time_dim must be even".into()));
        }
        Ok(())
    }
}

/// Sinusoidal embedding of real-valued timesteps, `(n, dim)`.
pub fn timestep_embedding(ts: &[f64], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let mut sin = Vec::with_capacity(half);
        let mut cos = Vec::with_capacity(half);
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            sin.push((t * freq).sin());
            cos.push((t * freq).cos());
        }
        data.extend(sin);
        data.extend(cos);
    }
    Tensor::new(&[ts.len(), dim], data).expect("embedding shape")
}

#[derive(Clone, Debug)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize, t_dim: usize, groups: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            norm1: GroupNorm::new(ps, &format!("{name}.norm1"), c_in, groups),
            conv1: Conv2d::k3(ps, &format!("{name}.conv1"), c_in, c_out, rng),
            time: Linear::new(ps, &format!("{name}.time"), t_dim, c_out, Init::Fan(1.0), rng),
            norm2: GroupNorm::new(ps, &format!("{name}.norm2"), c_out, groups),
            conv2: Conv2d::new(ps, &format!("{name}.conv2"), c_out, c_out, 3, 1, Init::Fan(0.5), rng),
            skip: (c_in != c_out).then(|| Conv2d::new(ps, &format!("{name}.skip"), c_in, c_out, 1, 1, Init::Fan(1.0), rng)),
        }
    }

    /// `temb_act` is the SiLU-activated time embedding.
    pub fn forward(&self, b: &Bind, x: Var, temb_act: Var) -> Var {
        let g = b.g;
        let h = self.conv1.forward(b, g.silu(self.norm1.forward(b, x)));
        let h = g.add_channel(h, self.time.forward(b, temb_act));
        let h = self.conv2.forward(b, g.silu(self.norm2.forward(b, h)));
        let skip = match &self.skip {
            Some(s) => s.forward(b, x),
            None => x,
        };
        g.add(skip, h)
    }
}

/// Time MLP: sinusoid → Linear → SiLU → Linear.
#[derive(Clone, Debug)]
pub struct TimeMlp {
    dim: usize,
    l1: Linear,
    l2: Linear,
}

impl TimeMlp {
    pub fn new(ps: &mut ParamStore, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            dim,
            l1: Linear::new(ps, "time.l1", dim, dim, Init::Fan(1.0), rng),
            l2: Linear::new(ps, "time.l2", dim, dim, Init::Fan(1.0), rng),
        }
    }

    pub fn forward(&self, b: &Bind, ts: &[f64]) -> Var {
        let g = b.g;
        let x = g.constant(timestep_embedding(ts, self.dim));
        self.l2.forward(b, g.silu(self.l1.forward(b, x)))
    }
}

/// Input conv plus residual levels with stride-2 downsampling between them.
#[derive(Clone, Debug)]
pub struct Encoder {
    conv_in: Conv2d,
    levels: Vec<Vec<ResBlock>>,
    downs: Vec<Conv2d>,
}

impl Encoder {
    pub fn new(ps: &mut ParamStore, cfg: &UNetConfig, rng: &mut ChaCha8Rng) -> Self {
        let conv_in = Conv2d::k3(ps, "enc.conv_in", cfg.latent_channels, cfg.widths[0], rng);
        let mut levels = Vec::new();
        let mut downs = Vec::new();
        let mut c = cfg.widths[0];
        for (l, &w) in cfg.widths.iter().enumerate() {
            let blocks = (0..cfg.res_blocks)
                .map(|r| {
                    let blk = ResBlock::new(ps, &format!("enc.l{l}.r{r}"), c, w, cfg.time_dim, cfg.groups, rng);
                    c = w;
                    blk
                })
                .collect();
            levels.push(blocks);
            if l + 1 < cfg.widths.len() {
                downs.push(Conv2d::new(ps, &format!("enc.down{l}"), w, w, 3, 2, Init::Fan(1.0), rng));
            }
        }
        Self { conv_in, levels, downs }
    }

    /// Returns the per-level outputs (the skip tensors), finest first. The
    /// last entry is also the input of whatever follows the encoder.
    pub fn forward(&self, b: &Bind, x: Var, temb_act: Var, input_residual: Option<Var>) -> Vec<Var> {
        let mut h = self.conv_in.forward(b, x);
        if let Some(r) = input_residual {
            h = b.g.add(h, r);
        }
        let mut skips = Vec::with_capacity(self.levels.len());
        for (l, blocks) in self.levels.iter().enumerate() {
            for blk in blocks {
                h = blk.forward(b, h, temb_act);
            }
            skips.push(h);
            if let Some(d) = self.downs.get(l) {
                h = d.forward(b, h);
            }
        }
        skips
    }
}

/// Counts denoiser invocations per image, across all clones of a model.
static FORWARD_IMAGES: AtomicUsize = AtomicUsize::new(0);

/// Total images pushed through any denoiser forward pass so far.
pub fn forward_pass_count() -> usize {
    FORWARD_IMAGES.load(Ordering::SeqCst)
}

#[derive(Clone, Debug)]
pub struct UNet {
    pub config: UNetConfig,
    pub params: ParamStore,
    prompt: usize,
    time: TimeMlp,
    encoder: Encoder,
    mid: ResBlock,
    decoder: Vec<Vec<ResBlock>>,
    ups: Vec<Conv2d>,
    out_norm: GroupNorm,
    conv_out: Conv2d,
}

/// Output of a denoiser pass.
pub struct UNetOutput {
    pub eps: Var,
    /// SiLU-activated time+prompt embedding, reused by control branches.
    pub temb_act: Var,
}

impl UNet {
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let ps = &mut params;
        let cfg = &config;
        let prompt = ps.add("prompt", Tensor::randn(&[1, cfg.time_dim], 0.02, &mut rng));
        let time = TimeMlp::new(ps, cfg.time_dim, &mut rng);
        let encoder = Encoder::new(ps, cfg, &mut rng);
        let deepest = *cfg.widths.last().unwrap();
        let mid = ResBlock::new(ps, "mid", deepest, deepest, cfg.time_dim, cfg.groups, &mut rng);
        let mut decoder = Vec::new();
        let mut ups = Vec::new();
        let mut c = deepest;
        for l in (0..cfg.levels()).rev() {
            let w = cfg.widths[l];
            let blocks = (0..cfg.res_blocks)
                .map(|r| {
                    let c_in = if r == 0 { c + w } else { w };
                    ResBlock::new(ps, &format!("dec.l{l}.r{r}"), c_in, w, cfg.time_dim, cfg.groups, &mut rng)
                })
                .collect();
            decoder.push(blocks);
            c = w;
            if l > 0 {
                ups.push(Conv2d::k3(ps, &format!("dec.up{l}"), w, cfg.widths[l - 1], &mut rng));
                c = cfg.widths[l - 1];
            }
        }
        let out_norm = GroupNorm::new(ps, "out.norm", cfg.widths[0], cfg.groups);
        let conv_out = Conv2d::new(ps, "out.conv", cfg.widths[0], cfg.latent_channels, 3, 1, Init::Zeros, &mut rng);
        Ok(Self { config, params, prompt, time, encoder, mid, decoder, ups, out_norm, conv_out })
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let m = self.config.spatial_multiple();
        if shape.len() != 4 || shape[1] != self.config.latent_channels || !shape[2].is_multiple_of(m) || !shape[3].is_multiple_of(m) {
            return Err(Error::Shape(format!(
                "denoiser expects (N, {}, H, W) with H, W divisible by {m}, got {shape:?}",
                self.config.latent_channels
            )));
        }
        Ok(())
    }

    /// Activated time + prompt embedding for a batch.
    pub fn time_embedding(&self, b: &Bind, ts: &[f64]) -> Var {
        let g = b.g;
        let t = self.time.forward(b, ts);
        let prompt = b.p(self.prompt);
        let ones = g.constant(Tensor::full(&[ts.len(), 1], 1.0));
        // broadcast (1, D) over the batch via an outer product with ones
        let zero = g.constant(Tensor::zeros(&[self.config.time_dim]));
        let c = g.linear(ones, g.reshape(prompt, &[self.config.time_dim, 1]), zero);
        g.silu(g.add(t, c))
    }

    /// ε̂ for a batch of latents at real-valued timesteps. `residuals`, one
    /// per level, are added to the decoder skips.
    pub fn forward(&self, b: &Bind, z_t: Var, ts: &[f64], residuals: Option<&[Var]>) -> Result<UNetOutput> {
        let shape = b.g.shape(z_t);
        self.check_input(&shape)?;
        if shape[0] != ts.len() {
            return Err(Error::Shape(format!("{} timesteps for a batch of {}", ts.len(), shape[0])));
        }
        if let Some(r) = residuals {
            if r.len() != self.config.levels() {
                return Err(Error::Shape(format!("expected {} control residuals, got {}", self.config.levels(), r.len())));
            }
        }
        FORWARD_IMAGES.fetch_add(ts.len(), Ordering::SeqCst);
        let g = b.g;
        let temb = self.time_embedding(b, ts);
        let mut skips = self.encoder.forward(b, z_t, temb, None);
        if let Some(r) = residuals {
            for (s, &res) in skips.iter_mut().zip(r) {
                *s = g.add(*s, res);
            }
        }
        let mut h = self.mid.forward(b, *skips.last().unwrap(), temb);
        for (i, blocks) in self.decoder.iter().enumerate() {
            let l = self.config.levels() - 1 - i;
            h = g.concat(h, skips[l]);
            for blk in blocks {
                h = blk.forward(b, h, temb);
            }
            if let Some(up) = self.ups.get(i) {
                h = up.forward(b, g.upsample2x(h));
            }
        }
        let eps = self.conv_out.forward(b, g.silu(self.out_norm.forward(b, h)));
        Ok(UNetOutput { eps, temb_act: temb })
    }

    /// Convenience evaluation without gradients.
    pub fn predict(&self, z_t: &Tensor, ts: &[f64], residuals: Option<&[Tensor]>) -> Result<Tensor> {
        let g = Graph::new();
        let b = Bind::new(&g, &self.params, false);
        let res: Option<Vec<Var>> = residuals.map(|r| r.iter().map(|t| g.constant(t.clone())).collect());
        let out = self.forward(&b, g.constant(z_t.clone()), ts, res.as_deref())?;
        Ok((*g.value(out.eps)).clone())
    }
}
