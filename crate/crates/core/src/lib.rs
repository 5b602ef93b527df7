//! Windowed-attention autoencoder for massive MIMO CSI feedback.
//!
//! The crate carries its own small reverse-mode autodiff engine
//! ([`autodiff`]), the layers and attention blocks built on it, the
//! autoencoder itself ([`model`]), the channel-domain transforms and
//! zero-forcing evaluation ([`domain`]), dataset plumbing ([`data`]) and the
//! training/evaluation harness ([`harness`]).

pub mod attention;
pub mod autodiff;
pub mod data;
pub mod domain;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod model;
pub mod nn;
pub mod optim;
pub mod tensor;

pub use data::{DatasetContainer, DatasetMeta, Normalization, Scenario, SynthConfig};
pub use domain::{AngularDelayChannel, CompressionRatio, FreqChannel};
pub use error::{Error, Result};
pub use harness::{FlopsReport, TrainConfig, TrainHistory};
pub use model::{build_model, ModelConfig, StnetParams};
pub use tensor::{Real, Tensor};
