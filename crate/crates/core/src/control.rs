//! Kernel-aware control: per-pixel kernel estimation, the filter module that
//! fuses the kernel condition with the noisy latent, the encoder-copy control
//! branch, the timestep regressor, and the latent discriminator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blur::BlurKernelField;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::ImageArray;
use crate::nn::{Bind, Conv2d, GroupNorm, Init, Linear, ParamStore};
use crate::tensor::Tensor;
use crate::unet::{Encoder, TimeMlp, UNet, UNetConfig};

/// Upper end of the timestep range the regressor covers.
pub const T_RANGE_MAX: f64 = 280.0;
/// Window of the filter module's dynamic filter.
pub const FILTER_WINDOW: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlConfig {
    /// Kernel side `m`.
    pub kernel_size: usize,
    pub image_channels: usize,
    pub estimator_widths: Vec<usize>,
    /// Initial logit bonus of the center tap.
    pub center_bias: f64,
    pub condition_channels: usize,
    pub regressor_width: usize,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            kernel_size: 9,
            image_channels: 3,
            estimator_widths: vec![16, 32, 64],
            center_bias: 4.0,
            condition_channels: 32,
            regressor_width: 32,
        }
    }
}

impl ControlConfig {
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }

    pub fn taps(&self) -> usize {
        self.kernel_size * self.kernel_size
    }
}

#[derive(Clone, Debug)]
struct ConvNormAct {
    conv: Conv2d,
    norm: GroupNorm,
}

impl ConvNormAct {
    fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv: Conv2d::new(ps, &format!("{name}.conv"), c_in, c_out, 3, stride, Init::Fan(1.4), rng),
            norm: GroupNorm::new(ps, &format!("{name}.norm"), c_out, 8),
        }
    }

    fn forward(&self, b: &Bind, x: Var) -> Var {
        b.g.silu(self.norm.forward(b, self.conv.forward(b, x)))
    }
}

/// Image-space UNet predicting an `m×m` kernel per pixel via softmax.
#[derive(Clone, Debug)]
pub struct KernelEstimator {
    pub config: ControlConfig,
    pub params: ParamStore,
    stem: ConvNormAct,
    downs: Vec<ConvNormAct>,
    ups: Vec<ConvNormAct>,
    head: Conv2d,
}

impl KernelEstimator {
    pub fn new(config: ControlConfig, seed: u64) -> Result<Self> {
        if config.kernel_size.is_multiple_of(2) || config.estimator_widths.is_empty() {
            return Err(Error::InvalidArgument("kernel size must be odd and estimator widths nonempty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let ps = &mut params;
        let w = &config.estimator_widths;
        let stem = ConvNormAct::new(ps, "est.stem", config.image_channels, w[0], 1, &mut rng);
        let downs = (1..w.len()).map(|l| ConvNormAct::new(ps, &format!("est.down{l}"), w[l - 1], w[l], 2, &mut rng)).collect();
        let ups = (1..w.len()).rev().map(|l| ConvNormAct::new(ps, &format!("est.up{l}"), w[l] + w[l - 1], w[l - 1], 1, &mut rng)).collect();
        let head = Conv2d::new(ps, "est.head", w[0], config.taps(), 3, 1, Init::Fan(0.1), &mut rng);
        let center = config.taps() / 2;
        let bias = config.center_bias;
        ps.update(head.bias, |t| t.data_mut()[center] = bias);
        Ok(Self { config, params, stem, downs, ups, head })
    }

    pub fn spatial_multiple(&self) -> usize {
        1 << (self.config.estimator_widths.len() - 1)
    }

    /// Kernel field `(n, m², h, w)` of a blurry image batch.
    pub fn forward(&self, b: &Bind, img: Var) -> Var {
        let g = b.g;
        let mut h = self.stem.forward(b, img);
        let mut skips = vec![h];
        for d in &self.downs {
            h = d.forward(b, h);
            skips.push(h);
        }
        skips.pop();
        for u in &self.ups {
            let s = skips.pop().expect("one skip per level");
            h = u.forward(b, g.concat(g.upsample2x(h), s));
        }
        g.softmax_channels(self.head.forward(b, h))
    }

    fn check(&self, img: &ImageArray) -> Result<()> {
        let m = self.spatial_multiple();
        if !img.height().is_multiple_of(m) || !img.width().is_multiple_of(m) || img.channels() != self.config.image_channels {
            return Err(Error::Shape(format!(
                "kernel estimator needs {} channels and sides divisible by {m}, got {:?}",
                self.config.image_channels,
                img.dims()
            )));
        }
        Ok(())
    }

    pub fn estimate_kernel(&self, blur_img: &ImageArray) -> Result<BlurKernelField> {
        self.check(blur_img)?;
        let g = Graph::new();
        let b = Bind::new(&g, &self.params, false);
        let k = self.forward(&b, g.constant(blur_img.to_tensor()));
        let m = self.config.kernel_size;
        BlurKernelField::new(m, blur_img.height(), blur_img.width(), g.value(k).data().to_vec())
    }
}

/// Applies a kernel field batch `(n, m², h, w)` to sharp images.
pub fn reblur_var(g: &Graph, field: Var, sharp: Var, m: usize) -> Var {
    g.pixel_conv(field, sharp, m)
}

pub fn reblur(field: &BlurKernelField, sharp: &ImageArray) -> Result<ImageArray> {
    crate::blur::convolve_pixelwise_unclamped(sharp, field)
}

pub fn field_tensor(field: &BlurKernelField) -> Tensor {
    let m = field.m();
    Tensor::new(&[1, m * m, field.height(), field.width()], field.weights().to_vec()).expect("field shape")
}

/// Filter module plus the learned kernel-to-latent condition map.
#[derive(Clone, Debug)]
pub struct FilterModule {
    to_condition: Conv2d,
    conv_in1: Conv2d,
    conv_in2: Conv2d,
    weight_pred: Conv2d,
    zero_out: Conv2d,
}

impl FilterModule {
    fn new(ps: &mut ParamStore, cfg: &ControlConfig, latent_channels: usize, factor: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut to_condition =
            Conv2d::new(ps, "filter.to_condition", cfg.taps(), cfg.condition_channels, factor, factor, Init::Fan(1.0), rng);
        to_condition.pad = 0;
        // z_in1 starts as the identity so the copied encoder initially sees z_t itself.
        let conv_in1 = Conv2d::new(ps, "filter.conv_in1", latent_channels, latent_channels, 3, 1, Init::Zeros, rng);
        ps.update(conv_in1.weight, |t| {
            for c in 0..latent_channels {
                t.data_mut()[((c * latent_channels + c) * 3 + 1) * 3 + 1] = 1.0;
            }
        });
        let conv_in2 = Conv2d::k3(ps, "filter.conv_in2", latent_channels, latent_channels, rng);
        let weight_pred =
            Conv2d::k3(ps, "filter.weight_pred", cfg.condition_channels + latent_channels, FILTER_WINDOW * FILTER_WINDOW, rng);
        let zero_out = Conv2d::new(ps, "filter.zero_out", latent_channels, latent_channels, 3, 1, Init::Zeros, rng);
        Self { to_condition, conv_in1, conv_in2, weight_pred, zero_out }
    }

    /// Kernel field `(n, m², H, W)` → condition `(n, C_k, H/d, W/d)`.
    pub fn kernel_to_condition(&self, b: &Bind, field: Var) -> Var {
        self.to_condition.forward(b, field)
    }

    /// `z_out = z_in1 + Z(W ∗ z_in2)` with `W = softmax(Conv(cat(k_in, z_in2)))`.
    pub fn forward(&self, b: &Bind, z_t: Var, k_in: Var) -> Result<Var> {
        let g = b.g;
        let (zs, ks) = (g.shape(z_t), g.shape(k_in));
        if zs[0] != ks[0] || zs[2..] != ks[2..] {
            return Err(Error::Shape(format!("kernel condition {ks:?} does not match latent {zs:?}")));
        }
        let z_in1 = self.conv_in1.forward(b, z_t);
        let z_in2 = self.conv_in2.forward(b, z_in1);
        let w = g.softmax_channels(self.weight_pred.forward(b, g.concat(k_in, z_in2)));
        let o = g.dynamic_filter(w, z_in2, FILTER_WINDOW);
        Ok(g.add(z_in1, self.zero_out.forward(b, o)))
    }
}

/// Encoder copy whose per-level outputs pass through zero-initialized 1×1
/// projections.
#[derive(Clone, Debug)]
pub struct ControlBranch {
    encoder: Encoder,
    projections: Vec<Conv2d>,
}

impl ControlBranch {
    fn new(ps: &mut ParamStore, ucfg: &UNetConfig, rng: &mut ChaCha8Rng) -> Self {
        let encoder = Encoder::new(ps, ucfg, rng);
        let projections = ucfg
            .widths
            .iter()
            .enumerate()
            .map(|(l, &w)| Conv2d::new(ps, &format!("control.zero{l}"), w, w, 1, 1, Init::Zeros, rng))
            .collect();
        Self { encoder, projections }
    }

    /// One residual per encoder level.
    pub fn forward(&self, b: &Bind, z_out: Var, temb_act: Var) -> Vec<Var> {
        let levels = self.encoder.forward(b, z_out, temb_act, None);
        levels.into_iter().zip(&self.projections).map(|(h, p)| p.forward(b, h)).collect()
    }
}

/// Multi-scale pooled summary of the kernel field → `t̂ ∈ [0, 280]`.
#[derive(Clone, Debug)]
pub struct TimeRegressor {
    feat: Conv2d,
    fc1: Linear,
    fc2: Linear,
}

const REGRESSOR_SCALES: usize = 3;

impl TimeRegressor {
    fn new(ps: &mut ParamStore, cfg: &ControlConfig, rng: &mut ChaCha8Rng) -> Self {
        let w = cfg.regressor_width;
        Self {
            feat: Conv2d::new(ps, "treg.feat", cfg.taps(), w, 1, 1, Init::Fan(1.0), rng),
            fc1: Linear::new(ps, "treg.fc1", 2 * w * REGRESSOR_SCALES, w, Init::Fan(1.0), rng),
            fc2: Linear::new(ps, "treg.fc2", w, 1, Init::Fan(0.1), rng),
        }
    }

    /// Returns `(n, 1)` timesteps.
    pub fn forward(&self, b: &Bind, field: Var) -> Var {
        let g = b.g;
        let mut h = g.silu(self.feat.forward(b, field));
        let mut pooled: Option<Var> = None;
        for s in 0..REGRESSOR_SCALES {
            if s > 0 {
                h = g.avg_pool2(h);
            }
            let both = g.concat(g.global_avg_pool(h), g.global_max_pool(h));
            pooled = Some(match pooled {
                None => both,
                Some(p) => g.concat(p, both),
            });
        }
        let z = self.fc2.forward(b, g.silu(self.fc1.forward(b, pooled.expect("at least one scale"))));
        g.scale(g.sigmoid(z), T_RANGE_MAX)
    }
}

/// `{F, C, T}` plus the kernel estimator `M`, trained together in stage 3.
#[derive(Clone, Debug)]
pub struct KernelControlNet {
    pub config: ControlConfig,
    pub unet_config: UNetConfig,
    pub factor: usize,
    pub estimator: KernelEstimator,
    /// Parameters of the filter module, control branch and regressor.
    pub params: ParamStore,
    pub filter: FilterModule,
    pub branch: ControlBranch,
    pub regressor: TimeRegressor,
}

/// Everything the control path produces for one batch.
pub struct ControlOutput {
    pub field: Var,
    pub residuals: Vec<Var>,
    /// `(n, 1)`.
    pub t_hat: Var,
}

impl KernelControlNet {
    /// Builds a fresh control net whose encoder copy starts equal to the
    /// foundation's encoder.
    pub fn new(config: ControlConfig, foundation: &UNet, factor: usize, estimator: KernelEstimator, seed: u64) -> Result<Self> {
        if estimator.config != config {
            return Err(Error::InvalidArgument("estimator config differs from control config".into()));
        }
        let ucfg = foundation.config.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let filter = FilterModule::new(&mut params, &config, ucfg.latent_channels, factor, &mut rng);
        let branch = ControlBranch::new(&mut params, &ucfg, &mut rng);
        let regressor = TimeRegressor::new(&mut params, &config, &mut rng);
        params.copy_prefixed(&foundation.params, "enc.", "enc.");
        Ok(Self { config, unet_config: ucfg, factor, estimator, params, filter, branch, regressor })
    }

    /// Runs `M` on the blurry images, then `F` and `C` on `z_t`.
    /// `temb_act` comes from the (frozen) foundation at the conditioning `t`.
    pub fn forward(&self, be: &Bind, bc: &Bind, blur_img: Var, z_t: Var, temb_act: Var) -> Result<ControlOutput> {
        let field = self.estimator.forward(be, blur_img);
        let t_hat = self.regressor.forward(bc, field);
        let k_in = self.filter.kernel_to_condition(bc, field);
        let z_out = self.filter.forward(bc, z_t, k_in)?;
        let residuals = self.branch.forward(bc, z_out, temb_act);
        Ok(ControlOutput { field, residuals, t_hat })
    }

    /// `t̂` for a batch of blurry images, without building control residuals.
    pub fn predict_timesteps(&self, imgs: &Tensor) -> Vec<f64> {
        let g = Graph::new();
        let be = Bind::new(&g, &self.estimator.params, false);
        let bc = Bind::new(&g, &self.params, false);
        let field = self.estimator.forward(&be, g.constant(imgs.clone()));
        g.value(self.regressor.forward(&bc, field)).data().to_vec()
    }

    pub fn predict_timestep(&self, field: &BlurKernelField) -> f64 {
        let g = Graph::new();
        let bc = Bind::new(&g, &self.params, false);
        g.value(self.regressor.forward(&bc, g.constant(field_tensor(field)))).data()[0]
    }
}

/// Latent discriminator: encoder copy evaluated at `t = 0` plus a small
/// convolutional head with a zero-initialized logit layer.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub params: ParamStore,
    time: TimeMlp,
    encoder: Encoder,
    head1: Conv2d,
    head2: Conv2d,
}

impl Discriminator {
    pub fn new(foundation: &UNet, seed: u64) -> Self {
        let cfg = &foundation.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let time = TimeMlp::new(&mut params, cfg.time_dim, &mut rng);
        let encoder = Encoder::new(&mut params, cfg, &mut rng);
        let deepest = *cfg.widths.last().unwrap();
        let mid = (deepest / 2).max(1);
        let head1 = Conv2d::k3(&mut params, "disc.head1", deepest, mid, &mut rng);
        let head2 = Conv2d::new(&mut params, "disc.head2", mid, 1, 3, 1, Init::Zeros, &mut rng);
        params.copy_prefixed(&foundation.params, "enc.", "enc.");
        params.copy_prefixed(&foundation.params, "time.", "time.");
        Self { params, time, encoder, head1, head2 }
    }

    /// Logit map `(n, 1, h', w')`.
    pub fn forward(&self, b: &Bind, z: Var) -> Var {
        let g = b.g;
        let n = g.shape(z)[0];
        let temb = g.silu(self.time.forward(b, &vec![0.0; n]));
        let levels = self.encoder.forward(b, z, temb, None);
        let h = g.silu(self.head1.forward(b, *levels.last().expect("encoder has levels")));
        self.head2.forward(b, h)
    }
}
