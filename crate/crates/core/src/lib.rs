//! Entity-anchored background retrieval and input packing for extractive
//! question answering, with a small Transformer encoder trained by span
//! masked language modelling and span extraction.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod masking;
pub mod model;
pub mod packer;
pub mod retrieval;
pub mod synthetic;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
