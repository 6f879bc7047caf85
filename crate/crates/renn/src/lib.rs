//! Evidential classification with uncertainty regularizers.
//!
//! The crate models class evidence as Dirichlet parameters, exposes the
//! subjective-logic uncertainty measures (vacuity and dissonance), trains a
//! small evidential network with vacuity and dissonance regularization
//! against out-of-distribution and boundary samples, and evaluates the
//! result as entropy CDFs and dense uncertainty grids.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod loss;
pub mod math;
pub mod net;
pub mod sl;

pub use config::{EvidenceActivation, TrainConfig, Variant};
pub use error::{Error, Result};
pub use loss::{LossBreakdown, LossConfig};
pub use net::{train, ModelParams, TrainOutcome};
pub use sl::{DirichletParams, Opinion};
