#![allow(dead_code)]

use ignet::attention::AttentionMode;
use ignet::data::{synth_generate, LabeledImages, SyntheticSpec};
use ignet::model::{Model, ModelConfig, StageSpec};

pub fn tiny_config(attention: &str, classes: usize, side: usize) -> ModelConfig {
    ModelConfig {
        stem_channels: 8,
        stages: vec![StageSpec { blocks: 1, channels: 8, stride: 1 }, StageSpec { blocks: 1, channels: 16, stride: 2 }],
        attention: attention.parse::<AttentionMode>().unwrap(),
        num_classes: classes,
        input_shape: [3, side, side],
        reduction: 4,
        bottleneck_bias: false,
    }
}

pub fn tiny_model(attention: &str, seed: u64) -> Model {
    Model::build(tiny_config(attention, 2, 16), seed).unwrap()
}

pub fn synth(n: usize, seed: u64) -> LabeledImages {
    synth_generate(&SyntheticSpec { n, hw: 16, border: 3, amplitude: 0.5, noise_sigma: 0.1, seed }).unwrap()
}
