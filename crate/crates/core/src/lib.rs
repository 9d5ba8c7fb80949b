//! Secure distributed fine-tuning by model slicing, simulated at desk scale.

pub mod data;
pub mod error;
pub mod fed;
pub mod model;
pub mod otp;
pub mod partition;
pub mod tensor;

pub use error::{Error, Result};
