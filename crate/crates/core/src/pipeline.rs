//! Persisted model bundles and the shared one-step restoration graph.

use std::path::Path;

use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::codec::{Codec, CodecConfig};
use crate::control::{ControlConfig, ControlOutput, KernelControlNet, KernelEstimator};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::Bind;
use crate::schedule::{recover_z0_var, NoiseSchedule, ScheduleConfig};
use crate::unet::{UNet, UNetConfig};

fn from_meta<T: serde::de::DeserializeOwned>(ck: &Checkpoint, key: &str) -> Result<T> {
    let v = ck.meta.get(key).ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks '{key}'")))?;
    serde_json::from_value(v.clone()).map_err(|e| Error::Checkpoint(format!("bad '{key}': {e}")))
}

fn to_meta<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("config serializes")
}

fn expect_kind(ck: &Checkpoint, kind: &str, path: &Path) -> Result<()> {
    if ck.kind() != Some(kind) {
        return Err(Error::Checkpoint(format!("{} holds a '{}' checkpoint, expected '{kind}'", path.display(), ck.kind().unwrap_or("?"))));
    }
    Ok(())
}

/// Denoiser, codec and schedule: everything a one-step restore needs.
#[derive(Clone, Debug)]
pub struct Foundation {
    pub unet: UNet,
    pub codec: Codec,
    pub schedule_config: ScheduleConfig,
    pub schedule: NoiseSchedule,
}

impl Foundation {
    pub fn new(mut unet_config: UNetConfig, codec: Codec, schedule_config: ScheduleConfig, seed: u64) -> Result<Self> {
        unet_config.latent_channels = codec.latent_channels();
        unet_config.t_max = schedule_config.t_max;
        let schedule = NoiseSchedule::from_config(&schedule_config)?;
        Ok(Self { unet: UNet::new(unet_config, seed)?, codec, schedule_config, schedule })
    }

    /// Identifies the architecture, codec and schedule, not the weights.
    pub fn config_hash(&self) -> String {
        let record = format!(
            "{}|{}|{}",
            self.unet.config.hash(),
            self.codec.config.hash(),
            serde_json::to_string(&self.schedule_config).expect("config serializes")
        );
        hex::encode(&Sha256::digest(record.as_bytes())[..8])
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new("foundation");
        ck.set_meta("unet", to_meta(&self.unet.config));
        ck.set_meta("codec", to_meta(&self.codec.config));
        ck.set_meta("schedule", to_meta(&self.schedule_config));
        ck.set_meta("config_hash", self.config_hash());
        ck.set_meta("widths", to_meta(&self.unet.config.widths));
        ck.set_meta("t_max", self.schedule_config.t_max as u64);
        ck.set_meta("d", self.codec.factor() as u64);
        ck.set_meta("codec_id", format!("{:?}-{}", self.codec.config.kind, self.codec.config.hash()).to_lowercase());
        ck.add_store("unet", &self.unet.params);
        ck.add_store("codec", &self.codec.params);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let unet_config: UNetConfig = from_meta(ck, "unet")?;
        let codec_config: CodecConfig = from_meta(ck, "codec")?;
        let schedule_config: ScheduleConfig = from_meta(ck, "schedule")?;
        let mut codec = Codec::new(codec_config, 0)?;
        if !codec.params.is_empty() {
            ck.load_store("codec", &mut codec.params)?;
        }
        let mut f = Self::new(unet_config, codec, schedule_config, 0)?;
        ck.load_store("unet", &mut f.unet.params)?;
        if let Some(h) = ck.meta_str("config_hash") {
            if h != f.config_hash() {
                return Err(Error::Checkpoint(format!("foundation config hash {h} does not match rebuilt {}", f.config_hash())));
            }
        }
        Ok(f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        expect_kind(&ck, "foundation", path)?;
        Self::from_checkpoint(&ck)
    }

    /// `decode(recover_z0(z_t, ε_θ(z_t, t, residuals), t))` for image batch
    /// `x`. Returns `(restored image, ẑ_0, z_t)`.
    pub fn restore_var(&self, bu: &Bind, bc: &Bind, x: Var, ts: &[f64], residuals: Option<&[Var]>) -> Result<(Var, Var, Var)> {
        let g = bu.g;
        let z_t = self.codec.encode_var(bc, x);
        let out = self.unet.forward(bu, z_t, ts, residuals)?.eps;
        let z0 = recover_z0_var(g, z_t, self.epsilon_var(g, z_t, out, ts)?, ts, &self.schedule)?;
        Ok((self.codec.decode_var(bc, z0), z0, z_t))
    }

    /// `ε̂ = U(z_t) + κ_t·z_t` with κ from [`NoiseSchedule::skip_coefficient`],
    /// so a zero network output restores `z_t` unchanged.
    pub fn epsilon_var(&self, g: &Graph, z_t: Var, unet_out: Var, ts: &[f64]) -> Result<Var> {
        let shape = g.shape(z_t);
        let per: usize = shape[1..].iter().product();
        let mut k = Vec::with_capacity(per * ts.len());
        for &t in ts {
            k.extend(std::iter::repeat_n(self.schedule.skip_coefficient(t)?, per));
        }
        Ok(g.add(unet_out, g.mul(z_t, g.constant(crate::tensor::Tensor::new(&shape, k)?))))
    }
}

/// Trained kernel estimator on its own (stage-2 output).
pub fn save_estimator(est: &KernelEstimator, ck: &mut Checkpoint) {
    ck.set_meta("control", to_meta(&est.config));
    ck.add_store("est", &est.params);
}

pub fn load_estimator(path: &Path) -> Result<(KernelEstimator, Checkpoint)> {
    let ck = Checkpoint::load(path)?;
    expect_kind(&ck, "estimator", path)?;
    let cfg: ControlConfig = from_meta(&ck, "control")?;
    let mut est = KernelEstimator::new(cfg, 0)?;
    ck.load_store("est", &mut est.params)?;
    Ok((est, ck))
}

impl KernelControlNet {
    pub fn to_checkpoint(&self, foundation: &Foundation) -> Checkpoint {
        let mut ck = Checkpoint::new("control");
        save_estimator(&self.estimator, &mut ck);
        ck.set_meta("foundation_hash", foundation.config_hash());
        ck.set_meta("factor", self.factor as u64);
        ck.add_store("ctrl", &self.params);
        ck
    }

    /// Rebuilds against `foundation`; refuses a mismatched foundation.
    pub fn from_checkpoint(ck: &Checkpoint, foundation: &Foundation) -> Result<Self> {
        let want = foundation.config_hash();
        match ck.meta_str("foundation_hash") {
            Some(h) if h == want => {}
            other => {
                return Err(Error::Checkpoint(format!(
                    "control checkpoint was trained for foundation {} but this foundation is {want}",
                    other.unwrap_or("?")
                )))
            }
        }
        let cfg: ControlConfig = from_meta(ck, "control")?;
        let mut est = KernelEstimator::new(cfg.clone(), 0)?;
        ck.load_store("est", &mut est.params)?;
        let mut net = KernelControlNet::new(cfg, &foundation.unet, foundation.codec.factor(), est, 0)?;
        ck.load_store("ctrl", &mut net.params)?;
        Ok(net)
    }

    pub fn load(path: &Path, foundation: &Foundation) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        expect_kind(&ck, "control", path)?;
        Self::from_checkpoint(&ck, foundation)
    }
}

/// Everything a conditioned restore produces.
pub struct ConditionedRestore {
    pub image: Var,
    pub z0: Var,
    pub control: ControlOutput,
}

/// Kernel-controlled restore of blurry batch `x` conditioned at `ts`.
pub fn conditioned_restore_var(
    foundation: &Foundation,
    net: &KernelControlNet,
    binds: (&Bind, &Bind, &Bind, &Bind),
    x: Var,
    ts: &[f64],
) -> Result<ConditionedRestore> {
    let (bu, bcodec, be, bctrl) = binds;
    let g: &Graph = bu.g;
    let z_t = foundation.codec.encode_var(bcodec, x);
    let temb = foundation.unet.time_embedding(bu, ts);
    let control = net.forward(be, bctrl, x, z_t, temb)?;
    let out = foundation.unet.forward(bu, z_t, ts, Some(&control.residuals))?.eps;
    let z0 = recover_z0_var(g, z_t, foundation.epsilon_var(g, z_t, out, ts)?, ts, &foundation.schedule)?;
    Ok(ConditionedRestore { image: foundation.codec.decode_var(bcodec, z0), z0, control })
}
