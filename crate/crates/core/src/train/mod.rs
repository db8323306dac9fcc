//! Seeded training, evaluation, run configuration and the scaling benchmark.

pub mod bench;
pub mod config;
pub mod learner;
pub mod run;
pub mod trainer;

pub use bench::{bench_scaling, log_log_slope, median, BenchReport, BenchRow};
pub use config::{RunConfig, RUN_KEYS};
pub use learner::Learner;
pub use run::{load_splits, run_training, AnyModel, RunOutcome, INIT_STREAM};
pub use trainer::{evaluate, train, EpochMetrics, EvalSplit, Metrics, TrainConfig, Trained, SHUFFLE_STREAM};
