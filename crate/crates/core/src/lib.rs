//! Dual-domain JPEG artifact removal laboratory.

pub mod error;
pub mod imaging;
pub mod jpeg;
pub mod metrics;
pub mod net;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
