// Copyright 2026 The fl-sampling Authors
// SPDX-License-Identifier: Apache-2.0

//! Unbiased client sampling for federated averaging.
//!
//! The crate is organised bottom-up:
//!
//! * [`sampling`] draws aggregation-weight realizations for each scheme.
//! * [`stats`] holds the closed-form weight statistics and the
//!   convergence quantities derived from them.
//! * [`oracle`] verifies the closed forms by exact enumeration of the
//!   sampling support and by seeded Monte-Carlo estimation.
//! * [`fedsim`] is a small FedAvg engine with quadratic and SGD clients.
//! * [`harness`] runs config-driven scenarios and the verification suite.
//! * [`cli`] is the command-line surface (`stats`, `verify`, `simulate`).

pub mod cli;
pub mod error;
pub mod fedsim;
pub mod harness;
pub mod importance;
pub mod oracle;
pub mod rng;
pub mod sampling;
pub mod stats;

pub use error::{Error, Result};
pub use importance::ClientImportance;
pub use sampling::{build_clustered_matrix, draw, ClusterMatrix, SchemeKind, SchemeSpec, WeightRealization};
pub use stats::{closed_form_stats, corollary_compare, theorem_quantities, ComparisonVerdict, SamplingStats};
