//! Sampling-parallel Bayesian neural network training engine.
//!
//! Training draws S weight (or dropout-mask) samples per batch. The
//! sample-parallel strategy distributes exactly those samples across P
//! workers, next to data-parallel sharding and a hybrid grid of both, over
//! deterministic star collectives. Losses that are nonlinear in the sample
//! statistics can aggregate approximately (gradient averaging) or exactly
//! (statistic allgather before backward).

pub mod checkpoint;
pub mod collectives;
pub mod config;
pub mod data;
pub mod dropout;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod seed;
pub mod tape;
pub mod tensor;
pub mod trainers;
pub mod variational;

pub use collectives::ProcessGroup;
pub use config::Config;
pub use data::{Dataset, SplitDataset};
pub use error::EngineError;
pub use losses::{AggregationMode, LossKind, LossSpec, SampleStatistics};
pub use metrics::MetricsRecord;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
pub use trainers::{Strategy, TrainConfig, TrainOutput};
pub use variational::BayesianModel;
