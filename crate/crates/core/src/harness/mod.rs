//! Training, evaluation, sparsity tracing and sweeps.

pub mod data;
pub mod metrics;
pub mod optim;
pub mod sparsity;
pub mod sweep;
pub mod train;

pub use data::{load_dataset, load_split, Dataset};
pub use metrics::{Confusion, MetricsReport};
pub use optim::{Adam, GroupRates, LambdaState};
pub use sparsity::{EdgeTally, SparsityRow};
pub use sweep::{depth_grid, run_seeds, sweep_depth, DepthRow, SeedSummary};
pub use train::{
    evaluate, evaluate_best, evaluate_checkpoint, sparsity_report, train, write_artifacts, Evaluation, TrainOutcome,
};

#[cfg(test)]
mod tests;
