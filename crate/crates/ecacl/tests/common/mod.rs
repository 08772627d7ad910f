#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use ecacl_core::data::{BatchShape, SyntheticSpec};
use ecacl_core::train::{ModelConfig, TrainConfig};

/// A run small enough for a debug build: 4 classes of 8×8 images.
pub fn small_config() -> TrainConfig {
    TrainConfig {
        batch: BatchShape {
            classes: 4,
            source_per_class: 3,
            target_per_class: 1,
            unlabeled: 8,
        },
        total_steps: 12,
        eval_every: 5,
        model: ModelConfig {
            hidden_dims: vec![16],
            embed_dim: 8,
            ..ModelConfig::default()
        },
        data: SyntheticSpec {
            num_classes: 4,
            per_class: 10,
            image_size: 8,
            ..SyntheticSpec::default()
        },
        ..TrainConfig::default()
    }
}

pub fn write_config(config: &TrainConfig, path: &Path) {
    std::fs::write(path, serde_json::to_string_pretty(config).unwrap()).unwrap();
}

pub fn ecacl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ecacl")).args(args).output().unwrap()
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}
