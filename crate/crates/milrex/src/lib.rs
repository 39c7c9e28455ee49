//! Bag-level relation extraction with a small decoder-only language model.
//!
//! Everything needed to run the pipeline end to end at desk scale:
//! a byte-pair-encoding tokenizer ([`bpe`]), a tensor library with
//! reverse-mode differentiation ([`tensor`]), the language model itself
//! ([`model`]) with bag-level selective attention on top ([`mil`]),
//! data plumbing for distantly supervised corpora ([`data`]), the
//! optimizer and training loops ([`train`]), and a precision/recall
//! evaluation harness ([`eval`]).

pub mod bpe;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod mil;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
