//! Few-shot classification with task-specific adapters.
//!
//! A frozen backbone is shared across tasks; for each task small adapter
//! weights attached to its convolutions, plus a linear map before the
//! classifier, are learned from the support set alone.

pub mod adaptation;
pub mod adapters;
pub mod backbone;
pub mod classifiers;
pub mod episodes;
pub mod harness;
pub mod error;
pub mod rng;

pub use error::{Error, Result};
