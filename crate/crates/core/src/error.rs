// Copyright 2026 The fl-sampling Authors
// SPDX-License-Identifier: Apache-2.0

use thiserror::Error;

use crate::sampling::SchemeKind;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid importance vector: {0}")]
    InvalidImportance(String),

    #[error("invalid scheme: {0}")]
    InvalidScheme(String),

    #[error("support too large to enumerate: {count} outcomes (limit {limit})")]
    SupportTooLarge { count: u128, limit: u128 },

    #[error("{0} sampling has no scalar covariance parameter")]
    NoScalarAlpha(SchemeKind),

    #[error("participant {0} has no local model")]
    MissingContribution(usize),

    #[error("non-finite iterate for client {client} at local step {step}")]
    NonFiniteIterate { client: usize, step: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid config at {path}: {message}")]
    InvalidConfig { path: String, message: String },
}
