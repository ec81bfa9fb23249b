//! Block-wise masked image modeling at desk scale.
//!
//! The encoder of a ViT masked autoencoder is split into gradient-isolated
//! blocks, each trained against its own lightweight decoder. Activations are
//! accounted byte-for-byte so peak-memory behaviour can be compared against
//! the end-to-end baseline.

pub mod engine;
pub mod error;
pub mod harness;
pub mod memory;
pub mod ofa;
pub mod rng;
pub mod tensor;
pub mod vit;

pub use error::{BimError, Result};
