// `!(x > 0.0)` style checks are deliberate: they reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Location-aware RIS beam selection: a geometric wideband channel
//! simulator, an exhaustive-search rate oracle, and a convolutional
//! surrogate that predicts the achievable rate of each codeword from the
//! receiver's location alone.

pub mod binio;
pub mod channel;
pub mod codebook;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod hash;
pub mod oracle;
pub mod pipeline;
pub mod presets;
pub mod surrogate;

pub use error::{Error, Result};
