//! Supervised domain-adaptation change detection: image adaptation by
//! cross-domain translation, feature adaptation over three bi-temporal
//! pairs, multitask training and evaluation.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod domain;
pub mod experiments;
pub mod error;
pub mod feature_adaptation;
pub mod image_adaptation;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod raster;
pub mod trainer;

pub use error::{Error, Result};
pub use sdacd_grad as grad;
