//! Shared inputs for the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stnet_core::data::synth_channels;
use stnet_core::{build_model, DatasetContainer, ModelConfig, StnetParams, SynthConfig, Tensor};

pub fn uniform(shape: &[usize], seed: u64) -> Tensor<f32> {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Default architecture at the given compression ratio.
pub fn model(gamma_den: u64) -> StnetParams<f32> {
    build_model(ModelConfig::for_gamma(1, gamma_den).expect("supported ratio")).expect("valid config")
}

/// Synthetic 32×32 channels in the model's input layout.
pub fn dataset(samples: usize) -> DatasetContainer {
    synth_channels(&SynthConfig {
        samples,
        ..SynthConfig::default()
    })
    .expect("default synth config")
    .container
}
