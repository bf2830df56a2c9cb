//! Tile-streamed execution of convolutional networks.
//!
//! The early, spatially local layers of a network are run tile by tile and
//! their outputs concatenated, so the full-resolution intermediate
//! activations never exist at once. Backpropagation recomputes each tile
//! from the checkpointed concatenation point and reconstructs the exact
//! kernel and input gradients a whole-image pass would produce.

pub mod context;
pub mod error;
pub mod ledger;
pub mod network;
pub mod ops;
pub mod parallel;
pub mod probe;
pub mod sten;
pub mod stream;
pub mod tensor;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use tensor::{DType, Element, Region, Tensor};
