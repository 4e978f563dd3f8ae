//! Hybrid convolution / selective-scan classifier for 3D volumes.

pub mod arch;
pub mod diagnostics;
pub mod error;
pub mod metrics;
pub mod ssm;
pub mod tensor;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
