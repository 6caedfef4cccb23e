//! Image ↔ latent codecs.
//!
//! The exact codec is a lossless space-to-depth permutation (`C·d²` latent
//! channels). The learned codec is a small convolutional autoencoder with
//! `latent_channels` channels at `1/d` resolution.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::ImageArray;
use crate::nn::{cosine_lr, Adam, Bind, Conv2d, Init, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecKind {
    Exact,
    Learned,
}

impl std::str::FromStr for CodecKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(CodecKind::Exact),
            "learned" => Ok(CodecKind::Learned),
            _ => Err(Error::InvalidArgument(format!("unknown codec '{s}' (expected exact or learned)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    pub kind: CodecKind,
    pub factor: usize,
    pub image_channels: usize,
    /// Learned codec only.
    pub latent_channels: usize,
    /// Learned codec only.
    pub width: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self { kind: CodecKind::Exact, factor: 4, image_channels: 3, latent_channels: 4, width: 32 }
    }
}

impl CodecConfig {
    pub fn latent_channels(&self) -> usize {
        match self.kind {
            CodecKind::Exact => self.image_channels * self.factor * self.factor,
            CodecKind::Learned => self.latent_channels,
        }
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }

    fn validate(&self) -> Result<()> {
        if ![2, 4, 8].contains(&self.factor) {
            return Err(Error::InvalidArgument(format!("codec factor must be 2, 4 or 8, got {}", self.factor)));
        }
        if self.image_channels != 1 && self.image_channels != 3 {
            return Err(Error::InvalidArgument("codec image channels must be 1 or 3".into()));
        }
        if self.kind == CodecKind::Learned && (self.latent_channels == 0 || self.width == 0) {
            return Err(Error::InvalidArgument("learned codec needs positive latent channels and width".into()));
        }
        Ok(())
    }
}

/// Batched latent `(N, C_lat, H/d, W/d)` tagged with its codec.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentArray {
    pub values: Tensor,
    pub factor: usize,
    pub codec: CodecKind,
}

#[derive(Clone, Debug)]
struct LearnedNet {
    enc_in: Conv2d,
    enc_down: Vec<Conv2d>,
    enc_out: Conv2d,
    dec_in: Conv2d,
    dec_up: Vec<Conv2d>,
    dec_out: Conv2d,
}

#[derive(Clone, Debug)]
pub struct Codec {
    pub config: CodecConfig,
    pub params: ParamStore,
    net: Option<LearnedNet>,
}

impl Codec {
    pub fn new(config: CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let net = match config.kind {
            CodecKind::Exact => None,
            CodecKind::Learned => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let ps = &mut params;
                let (c, w, l) = (config.image_channels, config.width, config.latent_channels);
                let levels = config.factor.trailing_zeros() as usize;
                let enc_in = Conv2d::k3(ps, "enc.in", c, w, &mut rng);
                let enc_down =
                    (0..levels).map(|i| Conv2d::new(ps, &format!("enc.down{i}"), w, w, 3, 2, Init::Fan(1.0), &mut rng)).collect();
                let enc_out = Conv2d::k3(ps, "enc.out", w, l, &mut rng);
                let dec_in = Conv2d::k3(ps, "dec.in", l, w, &mut rng);
                let dec_up = (0..levels).map(|i| Conv2d::k3(ps, &format!("dec.up{i}"), w, w, &mut rng)).collect();
                let dec_out = Conv2d::k3(ps, "dec.out", w, c, &mut rng);
                Some(LearnedNet { enc_in, enc_down, enc_out, dec_in, dec_up, dec_out })
            }
        };
        Ok(Self { config, params, net })
    }

    pub fn exact(factor: usize, image_channels: usize) -> Result<Self> {
        Self::new(CodecConfig { kind: CodecKind::Exact, factor, image_channels, ..Default::default() }, 0)
    }

    pub fn factor(&self) -> usize {
        self.config.factor
    }

    pub fn latent_channels(&self) -> usize {
        self.config.latent_channels()
    }

    fn check_dims(&self, h: usize, w: usize, c: usize) -> Result<()> {
        let d = self.factor();
        if !h.is_multiple_of(d) || !w.is_multiple_of(d) {
            return Err(Error::Shape(format!("image {h}x{w} is not divisible by codec factor {d}")));
        }
        if c != self.config.image_channels {
            return Err(Error::Shape(format!("codec expects {} channels, got {c}", self.config.image_channels)));
        }
        Ok(())
    }

    /// Graph-level encoder over an `(N, C, H, W)` batch.
    pub fn encode_var(&self, b: &Bind, x: Var) -> Var {
        let g = b.g;
        match &self.net {
            None => g.space_to_depth(x, self.factor()),
            Some(net) => {
                let mut h = g.silu(net.enc_in.forward(b, x));
                for conv in &net.enc_down {
                    h = g.silu(conv.forward(b, h));
                }
                net.enc_out.forward(b, h)
            }
        }
    }

    /// Graph-level decoder.
    pub fn decode_var(&self, b: &Bind, z: Var) -> Var {
        let g = b.g;
        match &self.net {
            None => g.depth_to_space(z, self.config.image_channels, self.factor()),
            Some(net) => {
                let mut h = g.silu(net.dec_in.forward(b, z));
                for conv in &net.dec_up {
                    h = g.silu(conv.forward(b, g.upsample2x(h)));
                }
                net.dec_out.forward(b, h)
            }
        }
    }

    pub fn encode_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4();
        self.check_dims(h, w, c)?;
        let g = Graph::new();
        let b = Bind::new(&g, &self.params, false);
        let xv = g.constant(x.clone());
        let z = self.encode_var(&b, xv);
        Ok((*g.value(z)).clone())
    }

    pub fn decode_tensor(&self, z: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = z.dims4();
        if c != self.latent_channels() {
            return Err(Error::Shape(format!("latent has {c} channels, codec expects {}", self.latent_channels())));
        }
        let g = Graph::new();
        let b = Bind::new(&g, &self.params, false);
        let zv = g.constant(z.clone());
        let x = self.decode_var(&b, zv);
        Ok((*g.value(x)).clone())
    }

    pub fn encode(&self, img: &ImageArray) -> Result<LatentArray> {
        Ok(LatentArray { values: self.encode_tensor(&img.to_tensor())?, factor: self.factor(), codec: self.config.kind })
    }

    pub fn decode(&self, lat: &LatentArray) -> Result<ImageArray> {
        if lat.factor != self.factor() || lat.codec != self.config.kind {
            return Err(Error::Shape(format!(
                "latent was produced by a {:?} d={} codec, this is {:?} d={}",
                lat.codec,
                lat.factor,
                self.config.kind,
                self.factor()
            )));
        }
        ImageArray::from_tensor(&self.decode_tensor(&lat.values)?, 0)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new("codec");
        ck.set_meta("config", serde_json::to_value(&self.config).expect("config serializes"));
        ck.set_meta("config_hash", self.config.hash());
        ck.add_store("codec", &self.params);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg = ck.meta.get("config").ok_or_else(|| Error::Checkpoint("codec checkpoint lacks config".into()))?;
        let config: CodecConfig = serde_json::from_value(cfg.clone()).map_err(|e| Error::Checkpoint(format!("bad codec config: {e}")))?;
        let mut codec = Self::new(config, 0)?;
        if ck.has_store("codec") || !codec.params.is_empty() {
            ck.load_store("codec", &mut codec.params)?;
        }
        Ok(codec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        if ck.kind() != Some("codec") {
            return Err(Error::Checkpoint(format!("{} is not a codec checkpoint", path.display())));
        }
        Self::from_checkpoint(&ck)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecPretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for CodecPretrainConfig {
    fn default() -> Self {
        Self { epochs: 40, batch_size: 8, lr: 2e-3, seed: 0 }
    }
}

/// Mean squared reconstruction error over `images`.
pub fn reconstruction_mse(codec: &Codec, images: &[ImageArray]) -> Result<f64> {
    let mut total = 0.0;
    for img in images {
        let rec = codec.decode(&codec.encode(img)?)?;
        total += rec.data().iter().zip(img.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / img.data().len() as f64;
    }
    Ok(total / images.len().max(1) as f64)
}

/// Trains a learned codec on MSE reconstruction. Returns the full-set
/// reconstruction MSE after each epoch.
pub fn pretrain_codec(codec: &mut Codec, images: &[ImageArray], cfg: &CodecPretrainConfig) -> Result<Vec<f64>> {
    if codec.config.kind == CodecKind::Exact {
        return Ok(vec![reconstruction_mse(codec, images)?; cfg.epochs]);
    }
    if images.is_empty() || cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("codec pretraining needs images and batch_size >= 1".into()));
    }
    for img in images {
        codec.check_dims(img.height(), img.width(), img.channels())?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(&codec.params);
    let steps_per_epoch = images.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&ImageArray> = chunk.iter().map(|&i| &images[i]).collect();
            let x = ImageArray::batch_tensor(&batch)?;
            let g = Graph::new();
            let b = Bind::new(&g, &codec.params, true);
            let xv = g.constant(x);
            let rec = codec.decode_var(&b, codec.encode_var(&b, xv));
            let loss = g.mse_loss(rec, xv);
            let lv = g.value(loss).data()[0];
            if !lv.is_finite() {
                return Err(Error::NonFinite { step, detail: format!("codec reconstruction loss {lv}") });
            }
            let grads = g.backward(loss).for_store(&codec.params);
            opt.apply(&mut codec.params, &grads, cosine_lr(cfg.lr, step, total));
            step += 1;
        }
        let mse = reconstruction_mse(codec, images)?;
        log::info!("codec epoch {epoch}: reconstruction mse {mse:.3e}");
        history.push(mse);
    }
    Ok(history)
}

/// Bilinear 2× upsample, `inner`, then bilinear resize back.
pub fn resize_trick_wrap<F>(img: &ImageArray, inner: F) -> Result<ImageArray>
where
    F: FnOnce(&ImageArray) -> Result<ImageArray>,
{
    let (h, w) = (img.height(), img.width());
    let up = img.resize_bilinear(2 * h, 2 * w);
    let out = inner(&up)?;
    Ok(out.resize_bilinear(h, w))
}
