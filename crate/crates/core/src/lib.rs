//! Federated multi-task learning with multi-output Gaussian processes.
//!
//! Clients run Pólya-Gamma augmented mean-field inference over mixed
//! regression and binary classification tasks that share a coregionalized
//! prior. A server refines the prior hyperparameters by ascending the
//! client-averaged ELBO.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod elbo;
pub mod experiment;
pub mod federation;
pub mod error;
pub mod kernels;
pub mod linalg;
pub mod metrics;
pub mod mogp;
pub mod pg_inference;
pub mod prior;
pub mod rng;
pub mod sparse;

pub use error::{Error, Result};
