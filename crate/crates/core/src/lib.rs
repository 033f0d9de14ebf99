//! Supernet sub-network search, extraction, and training at toy scale.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] and [`autodiff`]: dense tensors and a reverse-mode tape.
//! * [`data`]: byte-level corpora and batch sampling.
//! * [`model`]: the supernet, sub-network configurations, masking,
//!   extraction, and parameter counting.
//! * [`checkpoint`]: the named-tensor archive format.
//! * [`space`]: the four search spaces and their cardinalities.
//! * [`search`]: bin-constrained evolutionary search.
//! * [`importance`]: activation and weight-magnitude importance tables.
//! * [`train`]: pretraining and distillation loops.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod exec;
pub mod importance;
pub mod model;
pub mod search;
pub mod space;
pub mod tensor;
pub mod train;

pub use error::{Error, Result, Violation};
pub use exec::Execution;
pub use tensor::{Element, Tensor};
