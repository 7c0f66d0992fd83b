// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use thiserror::Error;

/// Errors produced by the laboratory.
#[derive(Debug, Error)]
pub enum AscError {
    /// Operand shapes do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// Caller-supplied data violates an operation's precondition.
    #[error("input error: {0}")]
    Input(String),

    /// A configuration invariant is violated. `fields` names the offending fields.
    #[error("config error ({}): {message}", fields.join(", "))]
    Config {
        /// Names of the offending configuration fields.
        fields: Vec<String>,
        /// Human-readable description.
        message: String,
    },

    /// An iterative numeric routine failed to converge.
    #[error("numeric error: {message} (last iterate {last_iterate})")]
    Numeric {
        /// What went wrong.
        message: String,
        /// The value of the final iterate before giving up.
        last_iterate: f64,
    },

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence {
        /// Optimizer step at which the loss became non-finite.
        step: usize,
        /// The offending loss value.
        loss: f64,
    },

    /// A persisted artifact could not be decoded.
    #[error("load error: {0}")]
    Load(String),

    /// A sweep plan is invalid for the loaded model.
    #[error("plan error: {0}")]
    Plan(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl AscError {
    pub(crate) fn config(fields: &[&str], message: impl Into<String>) -> Self {
        AscError::Config {
            fields: fields.iter().map(|f| (*f).to_string()).collect(),
            message: message.into(),
        }
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, AscError>;
