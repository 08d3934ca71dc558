//! Core of fedsilo: flat parameter vectors, server-side aggregation rules,
//! update privatisation, the built-in models with their local trainer, dataset
//! loaders, and the JSON types spoken over the REST API.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`). The server and the
//! agent use `f64` throughout; the aliases below name the concrete types.

pub mod aggregation;
pub mod api;
pub mod config;
pub mod data;
pub mod idx;
pub mod metrics;
pub mod model;
pub mod params;
pub mod privacy;
pub mod scalar;
pub mod train;

pub use aggregation::{
    aggregate, AggregationError, AggregatorHyper, AggregatorState, Algorithm, ClientUpdate,
};
pub use config::{ExperimentConfig, FieldError};
pub use data::{DataError, DataLoaderSpec, LocalDataset, Split};
pub use metrics::TrainingMetrics;
pub use model::{Loss, ModelError, ModelKind, ModelSpec};
pub use params::{ModelLayout, Parameters, ParamsError};
pub use privacy::{Mechanism, PrivacyConfig, PrivacyError};
pub use scalar::Scalar;
pub use train::{evaluate, gradient_check, local_train, GradientCheck, Evaluation, TrainOptions, TrainOutcome};

pub type ParameterVector = Parameters<f64>;
pub type ParameterVector32 = Parameters<f32>;
pub type Aggregator = AggregatorState<f64>;
pub type Aggregator32 = AggregatorState<f32>;
pub type Update = ClientUpdate<f64>;
pub type Update32 = ClientUpdate<f32>;
pub type Dataset = LocalDataset<f64>;
pub type Dataset32 = LocalDataset<f32>;
