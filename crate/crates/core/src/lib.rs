//! Weight-decay diagnostics for small neural networks.

pub mod datagen;
pub mod diagnostics;
pub mod error;
pub mod experiments;
pub mod inspect;
pub mod linalg;
pub mod merging;
pub mod model;
pub mod optimize;
pub mod rng;

pub use error::{Error, Result};
