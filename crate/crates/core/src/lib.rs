//! Prototype classifier on the unit hypersphere with a learnable logit
//! temperature, plus the calibration, selective-prediction and OOD
//! evaluation machinery around it.

pub mod baselines;
pub mod calibration;
pub mod data;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod stats;
pub mod synth;
pub mod train;

pub use error::{Result, VoltaError};
pub use linalg::Mat64;
pub use model::{PredictiveOutput, VoltaModel};
