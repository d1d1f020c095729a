//! Dense-tensor network engine: layers with exact backward passes, losses,
//! the verification CNN and momentum SGD.

pub mod activation;
pub mod batchnorm;
pub mod checkpoint;
pub mod conv;
pub mod fc;
pub mod linalg;
pub mod loss;
pub mod model;
pub mod optim;

pub use batchnorm::Mode;
pub use checkpoint::{EpochStats, ModelCheckpoint, Phase};
pub use loss::{contrastive_loss, embedding_distance, softmax_xent, ContrastiveConfig};
pub use model::{Head, ModelParams, ModelSpec, Network};
pub use optim::{sgd_step, Sgd};
