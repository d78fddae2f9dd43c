//! Visual prior, fusion network, composite loss and uncertainty filtering.

pub mod head;
pub mod prior;
pub mod provider;
pub mod uncertainty;

pub use head::{
    composite_grad, composite_loss, finetune_fusion, fuse_forward, fused_gradient, fused_probs, fusion_checkpoint,
    fusion_from_checkpoint, predict_fused, pretrain_fusion, FinetuneConfig, FinetuneOutcome, FusionExample,
    FusionOutcome, FusionParams, FusionTrainConfig,
};
pub use prior::{model_vocabulary, vision_prior_from_logprobs, VisionPrior};
pub use provider::{
    collect_priors, query_prior, two_step_request_plan, FileReplayTransport, MockTransport, MockVision, PromptFixtures,
    Transport, VisualProviderRequest, VisualProviderResponse,
};
pub use uncertainty::{filtered_accuracy, uncertainty_filter, Decision, UncertaintyThresholds};
