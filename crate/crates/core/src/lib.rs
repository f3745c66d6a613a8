//! Constrained training of segmentation networks with class- and
//! region-adaptive logit constraints.

mod binio;
pub mod checkpoint;
pub mod config;
pub mod datagen;
mod error;
pub mod metrics;
pub mod model;
pub mod losses;
pub mod penalty;
pub mod priors;
pub mod scheduler;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
