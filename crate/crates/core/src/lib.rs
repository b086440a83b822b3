//! Spoofing countermeasure toolkit built around feature genuinization: a
//! convolutional autoencoder trained only on bonafide speech features is used
//! to transform every input before an LCNN classifier scores it.

pub mod error;
pub mod frontend;
pub mod genuinizer;
pub mod lcnn;
pub mod metrics;
pub mod nn;
pub mod pipeline;

pub use error::{FgcmError, Result};
