//! Positional-encoding workbench for transformer-based sequential recommenders.

pub mod attention;
pub mod encodings;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod stability;

pub use error::{Error, Result};
