//! Deformation-compensated self-supervised reconstruction for undersampled
//! Cartesian MRI.
//!
//! A reconstruction network and a registration network are trained jointly
//! on pairs of unregistered, undersampled and noisy measurements of the same
//! object. Nothing in training touches a ground-truth image; ground truth is
//! only used by the evaluation code.

pub mod autodiff;
pub mod baselines;
pub mod config;
pub mod dataset;
pub mod deformation;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod models;
pub mod mri;
pub mod objectives;
pub mod phantom;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::{DType, Tensor};
