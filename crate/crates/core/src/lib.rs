//! Core library for the u-EIDG pipeline: corpus handling, retrieval,
//! evidence models, automatic evidence labeling, and evaluation.

pub mod aeg;
pub mod corpus;
pub mod error;
pub mod generator;
pub mod indicator;
pub mod metrics;
pub mod pipeline;
pub mod retrieval;

pub use error::{CoreError, Result};
