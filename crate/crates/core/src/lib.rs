//! Multi-label recognition from partially labelled data via structured
//! semantic transfer: category-specific features, intra-image and
//! cross-image pseudo labels, and the evaluation protocol around them.

pub mod cli;
pub mod config;
pub mod cst;
pub mod datagen;
pub mod diagnose;
mod error;
pub mod ist;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
