//! Token-level cleaning of supervised fine-tuning data.
//!
//! Response tokens are scored by the loss change between a base and a
//! reference model, the top k% are kept, and the kept tokens form the
//! training mask. The crate also ships an embedded count language model so
//! whole cleaning runs can execute without an external trainer, and a small
//! simulation lab for the accompanying noisy-label error bounds.

pub mod desk_lm;
pub mod error;
pub mod orchestrator;
pub mod records;
pub mod report;
pub mod scoring;
pub mod selection;
pub mod synth;
pub mod theory;
pub mod wire;

pub use error::{Error, ErrorClass, Result};
