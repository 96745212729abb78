//! Tiny fixtures shared by the integration tests.

#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vimd::data::{toy_dataset, Dataset, ToySpec};
use vimd::network::{VimConfig, VimNet};
use vimd::sr::{SrConfig, SrGenerator};
use vimd::train::TrainConfig;

pub const HR_SIDE: usize = 32;
pub const LR_SIDE: usize = 8;

pub fn tiny_model() -> VimConfig {
    VimConfig {
        embed_dim: 8,
        depth: 2,
        num_classes: 2,
        input_side: HR_SIDE,
        ..VimConfig::toy()
    }
}

pub fn tiny_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        val_fraction: 0.25,
        ..TrainConfig::toy()
    }
}

/// Paired HR/LR toy data: two classes, `per_class` images each.
pub fn tiny_data(per_class: usize, seed: u64) -> (Dataset, Dataset) {
    let spec = ToySpec {
        classes: 2,
        per_class,
        side: HR_SIDE,
        ..ToySpec::default()
    };
    let hr = toy_dataset(&spec, seed).unwrap();
    let lr = hr.resized(LR_SIDE).unwrap();
    (hr, lr)
}

pub fn net(seed: u64) -> VimNet {
    VimNet::new(tiny_model(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

pub fn generator(seed: u64) -> SrGenerator {
    let cfg = SrConfig {
        channels: 4,
        res_blocks: 1,
        ..SrConfig::new(LR_SIDE)
    };
    SrGenerator::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}
