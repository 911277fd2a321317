//! Three-stream tangled transformer for joint video-text modeling, with
//! masked language, masked action, masked object and cross-modal matching
//! objectives.

// Row groups are `Vec<Range>`; a batch of one is a single range.
#![allow(clippy::single_range_in_vec_init)]

pub mod error;
pub mod fsutil;
pub mod model;
pub mod numerics;
pub mod sequence;

pub use error::{Error, Result};
pub mod objectives;
pub mod corpus;
pub mod eval;
