//! The overfit smoke setup: 64 synthetic 16×16 channels, a small model at
//! `γ = 1/4` (so the codeword is wider than the sample count), and at most
//! 2000 Adam steps with an early stop at −20 dB training NMSE.

use super::train::TrainConfig;
use crate::data::SynthConfig;
use crate::model::ModelConfig;

pub const SMOKE_SAMPLES: usize = 64;
pub const SMOKE_GRID: usize = 16;
pub const SMOKE_MAX_STEPS: u64 = 2000;
pub const SMOKE_TARGET_DB: f64 = -20.0;

pub fn synth_config() -> SynthConfig {
    SynthConfig {
        samples: SMOKE_SAMPLES,
        subcarriers: 4 * SMOKE_GRID,
        n_c: SMOKE_GRID,
        n_t: SMOKE_GRID,
        max_delay: SMOKE_GRID / 2,
        decay: SMOKE_GRID as f64 / 4.0,
        ..SynthConfig::default()
    }
}

/// `d = 8`, `P = 2`, `W = 4` as in the gradient-check model, on the 16×16
/// grid with `M = 128`.
pub fn model_config() -> ModelConfig {
    ModelConfig {
        n_c: SMOKE_GRID,
        n_t: SMOKE_GRID,
        codeword: 2 * SMOKE_GRID * SMOKE_GRID / 4,
        ..ModelConfig::tiny()
    }
}

pub fn train_config() -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        epochs: 1000,
        max_steps: Some(SMOKE_MAX_STEPS),
        lr: 5e-3,
        validate_every: 10,
        target_train_nmse_db: Some(SMOKE_TARGET_DB),
        ..TrainConfig::default()
    }
}
