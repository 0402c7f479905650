//! Fixtures shared by the criterion benches.

use calnet_core::data::{synth_generate, SynthDataset};
use calnet_core::model::ArchConfig;
use calnet_core::{Scalar, Tensor, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Uniform(-1, 1) entries from a fixed seed.
pub fn random_tensor<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// A small synthetic dataset and a one-epoch micro configuration whose
/// single batch covers all `n` records.
pub fn one_step_setup(n: usize, image_size: usize) -> (SynthDataset, TrainConfig) {
    let ds = synth_generate(n, 0, 0.5).expect("n is above the generator minimum");
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: n,
        augment: false,
        arch: ArchConfig {
            image_size,
            ..ArchConfig::micro()
        },
        ..TrainConfig::default()
    };
    (ds, cfg)
}
