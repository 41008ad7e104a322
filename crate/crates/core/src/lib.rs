//! Adaptive multimodal sensing and inference.

pub mod amc;
pub mod checkpoint;
pub mod data;
pub mod energy;
pub mod error;
pub mod experiment;
pub mod fmpm;
pub mod objectives;
pub mod report;
pub mod sigma_delta;
pub mod trainer;

pub use error::{AmiError, Result};
