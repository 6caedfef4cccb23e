//! Run configuration: one TOML document with `data`, `codec`, `model`,
//! `train`, `infer` and `eval` sections. Unknown keys are rejected and every
//! field has a default.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{CodecConfig, CodecPretrainConfig};
use crate::dataset::{Split, ToyDatasetConfig, FRAME_COUNT_CHOICES};
use crate::error::{Error, Result};
use crate::runtime::InferenceConfig;
use crate::train::{ModelConfig, TrainConfig};

/// Partially specified sections are merged key by key onto the defaults
/// below, so `[data.test]` keeps its own defaults rather than the train ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DataOverrides")]
pub struct DataConfig {
    pub train: ToyDatasetConfig,
    pub test: ToyDatasetConfig,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DataOverrides {
    train: Option<toml::Table>,
    test: Option<toml::Table>,
}

fn merge_section(base: &ToyDatasetConfig, overrides: Option<toml::Table>) -> std::result::Result<ToyDatasetConfig, String> {
    let Some(overrides) = overrides else { return Ok(base.clone()) };
    let mut table = toml::Table::try_from(base).map_err(|e| e.to_string())?;
    table.extend(overrides);
    table.try_into().map_err(|e: toml::de::Error| e.to_string())
}

impl TryFrom<DataOverrides> for DataConfig {
    type Error = String;

    fn try_from(o: DataOverrides) -> std::result::Result<Self, String> {
        let d = Self::default();
        Ok(Self { train: merge_section(&d.train, o.train)?, test: merge_section(&d.test, o.test)? })
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: ToyDatasetConfig::default(),
            test: ToyDatasetConfig {
                num_scenes: 16,
                n_frames_choices: FRAME_COUNT_CHOICES.to_vec(),
                split: Split::Test,
                seed: 1,
                ..Default::default()
            },
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecSection {
    pub arch: CodecConfig,
    pub pretrain: CodecPretrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub sweep_t: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { sweep_t: vec![80.0, 120.0, 160.0, 200.0, 240.0, 280.0] }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub codec: CodecSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub infer: InferenceConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.normalize();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Effective configuration, defaults merged.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Derived fields that must agree with the codec.
    fn normalize(&mut self) {
        self.model.unet.latent_channels = self.codec.arch.latent_channels();
        self.model.unet.t_max = self.model.schedule.t_max;
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.codec.arch.image_channels;
        for (what, v) in [
            ("data.train.channels", self.data.train.channels),
            ("data.test.channels", self.data.test.channels),
            ("model.control.image_channels", self.model.control.image_channels),
        ] {
            if v != c {
                return Err(Error::Config(format!("{what} = {v} but codec.arch.image_channels = {c}")));
            }
        }
        if self.data.train.split != Split::Train || self.data.test.split != Split::Test {
            return Err(Error::Config("data.train must use split 'train' and data.test split 'test'".into()));
        }
        self.train.validate()?;
        if self.eval.sweep_t.iter().any(|t| !(1.0..=crate::control::T_RANGE_MAX).contains(t)) {
            return Err(Error::Config("eval.sweep_t values must lie in [1, 280]".into()));
        }
        Ok(())
    }

    /// Short hash of the effective configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg.model.unet.latent_channels, 48);
        let again = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.hash(), again.hash());
    }

    #[test]
    fn overrides_and_rejections() {
        let cfg = RunConfig::from_toml("[train]\nseed = 7\n[train.stage1]\nsteps = 12\n[infer]\nt_mode = \"predicted\"\n").unwrap();
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.train.stage1.steps, 12);
        assert_eq!(cfg.infer.t_mode, crate::runtime::TMode::Predicted);
        assert_ne!(cfg.hash(), RunConfig::default().hash());
        let cfg = RunConfig::from_toml("[data.test]\nnum_scenes = 3\n").unwrap();
        assert_eq!(cfg.data.test, ToyDatasetConfig { num_scenes: 3, ..DataConfig::default().test });
        for bad in [
            "[train]\nsede = 1\n",
            "[nope]\n",
            "[infer]\nt_mode = \"sometimes\"\n",
            "[data.train]\nchannels = 1\n",
            "[data.test]\nscenes = 1\n",
        ] {
            assert!(matches!(RunConfig::from_toml(bad), Err(Error::Config(_))), "{bad}");
        }
    }
}
