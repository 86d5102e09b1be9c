//! Minimal CPU neural-network engine: convolution, pooling, upsampling and
//! concatenation with explicit backward passes, plus the Adam optimizer.

pub mod ops;
mod optim;

pub use optim::{Adam, AdamState};
