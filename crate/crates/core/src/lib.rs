// SPDX-License-Identifier: MIT OR Apache-2.0

//! Desk-scale laboratory for attention short-circuiting in a decoder-only
//! transformer.
//!
//! - [`tensor`]: dense f64 kernel.
//! - [`model`]: forward pass, interventions, greedy and temperature sampling.
//! - [`checkpoint`]: binary checkpoint and token-stream formats.
//! - [`corpus`], [`trainer`]: synthetic corpus with planted canaries, backprop and Adam.
//! - [`metrics`]: exact match, token accuracy, completion entropy, perplexity.
//! - [`bounds`]: numeric verification of the single-block and two-block
//!   output-difference bounds.
//! - [`harness`]: intervention sweeps and reporting tables.

mod backprop;
pub mod bounds;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod seed;
pub mod tensor;
pub mod trainer;

pub use error::{AscError, Result};
