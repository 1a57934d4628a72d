//! Federated feature-anchor training engine.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the `*64`
//! and `*32` aliases below fix the precision.

pub mod anchors;
pub mod checks;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod protocol;
pub mod rng;
pub mod scalar;

pub use anchors::{AnchorAggregation, LocalAnchorReport};
pub use data::{ClientSplit, LabeledDataset};
pub use error::{FedError, Result};
pub use losses::{AnchorSet, LossBreakdown, Matching};
pub use nn::{Matrix, MlpParams, ParamGrads, SgdConfig};
pub use protocol::{run_experiment, Algorithm, CommLedger, ExperimentOutcome, FedConfig, RoundRecord};
pub use scalar::Scalar;

pub type Matrix64 = Matrix<f64>;
pub type Matrix32 = Matrix<f32>;
pub type MlpParams64 = MlpParams<f64>;
pub type MlpParams32 = MlpParams<f32>;
pub type AnchorSet64 = AnchorSet<f64>;
pub type AnchorSet32 = AnchorSet<f32>;
pub type Dataset64 = LabeledDataset<f64>;
pub type Dataset32 = LabeledDataset<f32>;
