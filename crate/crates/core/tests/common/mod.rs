#![allow(dead_code)]

use std::path::Path;

use deblur_core::codec::Codec;
use deblur_core::control::ControlConfig;
use deblur_core::dataset::{build_toy_dataset, LoadedDataset, Split, ToyDatasetConfig};
use deblur_core::train::{ModelConfig, StageConfig, TrainConfig};
use deblur_core::unet::UNetConfig;

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        unet: UNetConfig { widths: vec![8, 16], res_blocks: 1, time_dim: 16, groups: 4, ..Default::default() },
        control: ControlConfig { estimator_widths: vec![4, 8], condition_channels: 8, regressor_width: 8, ..Default::default() },
        ..Default::default()
    }
}

pub fn tiny_train(steps: usize) -> TrainConfig {
    let stage = StageConfig { steps, batch_size: 2, lr: 1e-3, checkpoint_every: 2 };
    TrainConfig { seed: 5, stage1: stage.clone(), stage2: stage.clone(), stage3: stage, ..Default::default() }
}

pub fn tiny_data(dir: &Path, split: Split, scenes: usize) -> LoadedDataset {
    let cfg = ToyDatasetConfig { num_scenes: scenes, height: 16, width: 16, split, seed: 11, ..Default::default() };
    LoadedDataset::load(build_toy_dataset(&cfg, dir).unwrap()).unwrap()
}

pub fn codec() -> Codec {
    Codec::exact(4, 3).unwrap()
}
