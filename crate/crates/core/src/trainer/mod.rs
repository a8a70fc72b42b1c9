//! Joint training loop: batches, the combined objective, optimizer updates,
//! checkpoints and logging.

mod batch;
mod checkpoint;
mod config;
mod gradcheck;
mod run;
mod step;

pub use batch::{assemble_batch, batch_from_samples, Batch};
pub use checkpoint::Checkpoint;
pub use gradcheck::{check_objectives, LossCheck};
pub use config::{
    AugmentationChoice, CutoffLevel, LambdaSchedule, LrSchedule, Supervision, TrainConfig, CONFIG_KEYS,
};
pub use run::{checkpoint_path, metrics_path, run, run_with, EvalRecord, Progress, RunOutcome};
pub use step::{
    build_objective, compute_gradients, content_view_map, draw_noise, frozen_groups, Objective, ObjectiveVars, StepGradients, StepMetrics,
    StepNoise, Trainer,
};
