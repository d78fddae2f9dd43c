//! Haptic encoder, training, baselines, heads and metrics.

pub mod checkpoint;
pub mod encoder;
pub mod forest;
pub mod head;
pub mod metrics;
pub mod mlp;
pub mod params;
pub mod train;

pub use checkpoint::{encoder_checkpoint, encoder_from_checkpoint, Checkpoint};
pub use encoder::{encoder_forward, EncoderParams, HapticEncoderConfig, Profile};
pub use forest::{summary_features, train_forest, Forest, ForestConfig};
pub use head::{fit_compliance_head, train_latent_head, HeadTrainConfig, LatentHead};
pub use metrics::{evaluate, Metrics};
pub use mlp::Mlp;
pub use params::{Adam, AdamConfig, Parameters};
pub use train::{
    compute_class_weights, continue_training, train_encoder, weighted_ce_loss, worst_of_seeds, ClassWeights,
    EpochRecord, Example, TrainOutcome,
};
