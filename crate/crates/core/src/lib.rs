//! Speaker verification toolkit: log-mel front end, a small CNN trained as a
//! speaker classifier and fine-tuned as a weight-sharing Siamese network under
//! contrastive loss, d-vector enrollment with cosine scoring, EER evaluation,
//! and a GMM-UBM baseline.

pub mod audio_io;
pub mod dsp;
pub mod error;
pub mod gmm;
pub mod nn;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod training;
pub mod verification;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Network32 = nn::Network<f32>;
pub type Network64 = nn::Network<f64>;
pub type ModelParams32 = nn::ModelParams<f32>;
pub type ModelParams64 = nn::ModelParams<f64>;
pub type Checkpoint32 = nn::ModelCheckpoint<f32>;
pub type Frontend32 = dsp::Frontend<f32>;
pub type Frontend64 = dsp::Frontend<f64>;
pub type FeatureMap32 = dsp::FeatureMap<f32>;
pub type DiagGmm32 = gmm::DiagGmm<f32>;
pub type DiagGmm64 = gmm::DiagGmm<f64>;
pub type SpeakerModel32 = verification::SpeakerModel<f32>;
