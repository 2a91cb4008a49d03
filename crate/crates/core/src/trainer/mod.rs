//! Objective, optimizer, training loop, and gradient verification.

mod config;
mod gradcheck;
mod localization;
mod loss;
mod optim;
mod run;
mod step;

pub use config::TrainConfig;
pub use gradcheck::{
    finite_diff_compare, finite_diff_gradcheck, map_loss_gradcheck, objective_gradcheck,
    random_map_instance, ErrorSummary, FdComparison, DEFAULT_FLOOR, MIN_COORDS,
};
pub use localization::{
    attention_evolution, evaluate_localization, LocalizationReport, LocalizationRow, StepMap,
    PROBE_TIMESTEPS,
};
pub use loss::{total_loss, weighted_total, LossBreakdown};
pub use optim::{adam_step, AdamParams, AdamState};
pub use run::{
    draw_update, run_training, run_training_from_manifest, run_training_with, TrainOutcome,
    FINAL_CHECKPOINT, LOG_FILE,
};
pub use step::{
    init_model, prepare_samples, PreparedSample, StepReport, TrainItem, Trainer,
};
