//! Training loop, retrieval evaluation, ablations and gradient checks.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod gradcheck;
pub mod optim;
pub mod train;

pub use ablate::{ablate, standard_grid, AblationTable, Setting, Variant};
pub use config::{DataConfig, TrainConfig};
pub use eval::{cmc_map, evaluate, evaluate_domain, Metric, Retrieval};
pub use train::{train, train_run, Checkpoint, MetricsReport};
