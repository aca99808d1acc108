//! Zeroth-order federated learning with shared-seed projections and
//! Byzantine-robust aggregation.

pub mod aggregation;
pub mod attacks;
pub mod config;
pub mod data;
pub mod error;
pub mod fedsim;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod vector;
pub mod verify;
pub mod zo;

pub use error::{Error, Result};
pub use rng::{derive_seed, DirectionKind, Seed64};
pub use vector::{DenseVector, Model};
