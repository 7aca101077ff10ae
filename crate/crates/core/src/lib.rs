//! Class-imbalance bias auditing for small detection-style image models.
//!
//! The crate covers the whole loop: annotation manifests and their class
//! statistics ([`dataset`]), resampling and label-exact augmentation
//! ([`sampling`]), a tiny CNN / ViT engine with exact gradients ([`nn`]),
//! cost-sensitive losses ([`loss`]), detection metrics ([`metrics`]),
//! neuron/attention/relevance analysis ([`behavior`]) and the audit and
//! mitigation pipeline that ties them together ([`audit`]).

pub mod audit;
pub mod behavior;
pub mod dataset;
pub mod error;
pub mod image;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod sampling;

pub use error::{Error, Result};
