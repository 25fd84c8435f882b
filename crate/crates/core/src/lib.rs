//! Neural spike-train transformer with multi-group rotary positional
//! embeddings, context-generated convolutional attention, and causal masked
//! Poisson pretraining, built on a minimal f64 reverse-mode autodiff engine.

pub mod error;
pub mod attention;
pub mod gradcheck;
mod kernels;
pub mod checkpoint;
pub mod data;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod oracle;
pub mod posenc;
pub mod tape;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{Tape, TensorId};
pub use tensor::Tensor;
