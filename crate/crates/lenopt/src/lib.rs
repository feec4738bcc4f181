//! Length-adaptive transformer inference at desk scale.
//!
//! The crate trains a small encoder so that any per-layer sequence-length
//! schedule chosen at inference time yields a usable model, then searches the
//! schedule space for accuracy-vs-compute trade-offs.

pub mod cli;
pub mod distill;
pub mod encoder;
pub mod eval;
pub mod hpo;
pub mod tensor;

pub use tensor::{Gradients, Tape, Tensor, TensorError, Val};
