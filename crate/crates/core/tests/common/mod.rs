#![allow(dead_code)]

use ada_core::datasets::{Image, LabeledDataset};
use ada_core::dnn::{LayerSpec, Network, NetworkSpec, Shape, TrainConfig};
use ada_core::rng::rng_for;
use rand::Rng;

pub const K: usize = 3;
pub const SIDE: usize = 8;

/// Dark 8×8 images with a bright 3×3 square whose corner depends on the class.
pub fn toy_dataset(n: usize, seed: u64) -> LabeledDataset {
    let corners = [(1, 1), (1, 4), (4, 2)];
    let mut rng = rng_for(seed, &[]);
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % K;
        let mut px: Vec<f64> = (0..SIDE * SIDE).map(|_| rng.random_range(0.0..0.2)).collect();
        let (r0, c0) = corners[c];
        let (dr, dc) = (rng.random_range(0..2), rng.random_range(0..2));
        for y in 0..3 {
            for x in 0..3 {
                px[(r0 + dr + y) * SIDE + c0 + dc + x] = rng.random_range(0.7..1.0);
            }
        }
        images.push(Image::new(1, SIDE, SIDE, px).unwrap());
        labels.push(c);
    }
    LabeledDataset::new(images, labels, K).unwrap()
}

pub fn toy_spec() -> NetworkSpec {
    NetworkSpec::new(
        Shape::new(1, SIDE, SIDE),
        vec![
            LayerSpec::Conv { kernel: 3, stride: 1, out_channels: 4 },
            LayerSpec::Relu,
            LayerSpec::MaxPool { window: 2 },
            LayerSpec::Dense { out: 12 },
            LayerSpec::Relu,
            LayerSpec::Dense { out: K },
            LayerSpec::Softmax,
        ],
        K,
    )
    .unwrap()
}

pub fn toy_train_config() -> TrainConfig {
    TrainConfig {
        epochs: 15,
        batch_size: 16,
        learning_rate: 0.1,
        seed: 5,
    }
}

pub fn toy_network(train: &LabeledDataset) -> Network {
    Network::new(toy_spec(), 1).train(train, &toy_train_config()).unwrap().0
}
