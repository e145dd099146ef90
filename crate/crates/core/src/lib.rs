//! Fragment reassembly toolkit.
//!
//! Learns the relative position of two image fragments with a small
//! convolutional network and a combination layer (feature concatenation or
//! Kronecker product), then solves 3x3 jigsaw puzzles by greedy assignment
//! over the resulting 8x8 location-probability matrix.

pub mod checkpoint;
pub mod error;
pub mod fen;
pub mod fusion;
pub mod gradcheck;
pub mod image;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod sampler;
pub mod solver;
pub mod synthetic;
pub mod trainer;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{BnState, Gradients, Mode, Tape, Tensor, Var};
