//! Multi-label chest radiograph classification at desk scale.
//!
//! The crate bundles a small reverse-mode tensor engine, a dense-block CNN
//! family with a sigmoid multi-label head, uncertain-label resolution
//! policies, a training loop with plateau decay and checkpoint averaging,
//! frontal/lateral max-probability fusion, AUROC and t-test evaluation, and
//! gradient-weighted class activation maps.

pub mod adam;
pub mod cam;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod labels;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
