//! Simulator and analysis toolkit for batch-sampling strategies in parallel
//! split learning.
//!
//! The crate covers the full pipeline: build IID or extended-Dirichlet client
//! partitions over a labeled pool ([`partition`]), derive per-step local
//! batch-size schedules with server-driven global sampling or the fixed-local
//! baselines ([`sampling`]), quantify how far global batches drift from the
//! pool's class distribution and bound that drift ([`deviation`]), train a
//! split neural network with the six-substep protocol ([`engine`]), and run
//! seeded experiment grids that persist machine-readable reports
//! ([`harness`]).

pub mod dataset;
pub mod deviation;
pub mod engine;
pub mod error;
pub mod harness;
pub mod io;
pub mod partition;
pub mod rng;
pub mod sampling;

pub use dataset::{LabeledDataset, SyntheticSpec};
pub use deviation::{
    analyze_schedule, empirical_deviation_tail, exact_composition_distribution, l1_deviation,
    rounding_bias, serfling_union_bound, BoundInputs, DeviationReport, RoundingBias, SerflingBound,
    TailEstimate,
};
pub use engine::{
    average_client_gradients, centralized_train_epoch, client_backward, client_forward,
    client_update, evaluate, server_backward, server_forward_loss, split_loss, train_epoch,
    train_epoch_with, Architecture, Checkpoint, GradientWeighting, LayerSpec, Matrix,
    OptimizerConfig, OptimizerState, SplitModel, StepTrace,
};
pub use error::{Error, Result};
pub use harness::{
    compare_strategies, run_experiment, ComparisonRow, ComparisonTable, ExperimentConfig,
    PartitionSettings, RunReport, SeedRun,
};
pub use partition::{
    class_distribution, extended_dirichlet_partition, iid_partition, ClassDistribution, Partition,
    PartitionFile, PartitionKind, PartitionSpec,
};
pub use sampling::{
    fls_schedule, fpls_schedule, gpsl_schedule, schedule, steps_per_epoch, BatchSchedule,
    DepletionState, Strategy,
};
