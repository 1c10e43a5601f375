//! The shared-backbone reward model: a Bradley–Terry head, a K-attribute
//! regression head and an optional gating network over the attribute heads.

mod checkpoint;
mod eval;
mod loss;
mod net;
mod scorer;
mod train;

pub use checkpoint::{CHECKPOINT_SCHEMA, CHECKPOINT_VERSION};
pub use eval::{held_out, mse_attributes, mse_overall, pairwise_accuracy, EvalSet, HeldOut};
pub use loss::{bt_loss, label_smooth_loss, margin_loss, mse_loss, LossConfig, TrainingMode};
pub use net::{
    HeadOutputs, HeadStandardizer, ModelConfig, SmormModel, Strategy, BACKBONE, GATE, HEAD_MULTI,
    HEAD_SINGLE,
};
pub use scorer::{ensemble_aggregate, EnsembleMode, InferenceStrategy, RewardFn, Scorer};
pub use train::{
    joint_loss, minimize, train, train_gating, JointLoss, StepRecord, TrainConfig, TrainingHistory,
};
