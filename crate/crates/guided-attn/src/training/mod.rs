//! Losses, the Adam optimizer, per-stage training with validation-based
//! early stopping, and the sequential stepwise runner.

mod adam;
mod loss;
mod stage;
mod stepwise;

pub use adam::{AdamConfig, AdamState, StepOutcome};
pub use loss::{
    composite_loss, cross_entropy_logits, cross_entropy_probs, loss_loc, make_target,
    mass_in_mask, CompositeLoss, LossReport,
};
pub use stage::{
    default_stage_configs, run_stage, stratified_val_split, EpochRecord, Split, StageConfig,
    StageRun, TrackedBatch, TrainTask,
};
pub use stepwise::{
    mean_train_mass, prepare_patients, run_stepwise, ImagingTask, PreparedPatient, StageSummary,
    StepwiseState,
};
