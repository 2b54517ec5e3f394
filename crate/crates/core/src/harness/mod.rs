//! Training, evaluation, ablations and diagnostics.

mod config;
mod tools;
mod train;

pub use config::{LrSchedule, RunConfig};
pub use tools::{
    ablate, ablation_cells, export_attention, gradcheck_cmd, random_batch, AblationAxis,
    AblationRow, AblationTable, GradcheckConfig, GRADCHECK_MAX_ELEMENTS,
};
pub use train::{
    check_compatible, check_dataset, evaluate, objective, train, train_from, EvalResult, LogRecord,
    MetricsRecord, Objective, Split, Tally, TrainOutcome,
};
