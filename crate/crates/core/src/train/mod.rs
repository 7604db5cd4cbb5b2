//! Patch handling, Adam and the synchronized multi-center training loop.

mod adam;
mod patches;
mod trainer;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use patches::{extract_patch, merge, patch_grid, unfold, PatchGrid};
pub use trainer::{
    average_gradients, batch_loss_and_grad, evaluate, infer_volume, known_centers, multi_center_step,
    patch_pool, train, train_with, CenterBatch, EpochEnd, HistoryRow, RecordMetrics, StepReport,
    TrainConfig,
};
