//! Lipschitz-regularized toy object detection (LROD) at desk scale.
//!
//! The crate bundles a higher-order reverse-mode autodiff core, analytic image
//! degradation models, a procedural scene generator, toy detector/restorer
//! networks sharing a backbone, the composite LROD loss, and an analysis suite
//! for input-space and parameter-space Lipschitz behaviour, loss landscapes,
//! and training dynamics.

pub mod analysis;
pub mod degrade;
pub mod error;
pub mod kernels;
pub mod landscape;
pub mod linalg;
pub mod lipschitz;
pub mod loss;
pub mod model;
pub mod refnet;
pub mod report;
pub mod rng;
pub mod scene;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{LrodError, Result};
pub use tape::{grad_check, Tape, VarId};
pub use tensor::Tensor;
