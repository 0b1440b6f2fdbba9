//! Bipartite matching, detection losses, AdamW and the training loop.

mod hungarian;
mod loss;
mod optim;
mod trainer;

pub use hungarian::{hungarian_match, Assignment};
pub use loss::{detection_loss, focal_loss, layer_loss, match_cost, LayerLoss, LossBreakdown, LossWeights};
pub use optim::{adamw_step, AdamW};
pub use trainer::{
    evaluate_model, sample_loss_and_grads, train, EpochRecord, Sample, TrainConfig, TrainOutcome, TrainingSet,
};
