// Copyright 2026 The fl-sampling Authors
// SPDX-License-Identifier: Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `Σ p_i = 1`.
pub const NORMALIZATION_TOL: f64 = 1e-12;

/// Client importance vector `p`: strictly positive and summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ClientImportance {
    p: Vec<f64>,
}

impl ClientImportance {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::InvalidImportance("at least one client is required".into()));
        }
        if let Some((i, v)) = p.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::InvalidImportance(format!("p[{i}] = {v} is not strictly positive")));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::InvalidImportance(format!("entries sum to {total}, not 1")));
        }
        Ok(Self { p })
    }

    /// Normalizes non-negative weights, rejecting zero or non-finite entries.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        if let Some((i, v)) = weights.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::InvalidImportance(format!("weight[{i}] = {v} is not strictly positive")));
        }
        let total: f64 = weights.iter().sum();
        if !(total.is_finite() && total > 0.0) {
            return Err(Error::InvalidImportance("weights are not normalizable".into()));
        }
        Self::new(weights.iter().map(|w| w / total).collect())
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidImportance("at least one client is required".into()));
        }
        Ok(Self { p: vec![1.0 / n as f64; n] })
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.p
    }

    pub fn sum_sq(&self) -> f64 {
        self.p.iter().map(|v| v * v).sum()
    }

    pub fn max(&self) -> f64 {
        self.p.iter().copied().fold(f64::MIN, f64::max)
    }
}

impl std::ops::Index<usize> for ClientImportance {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.p[i]
    }
}

impl TryFrom<Vec<f64>> for ClientImportance {
    type Error = Error;
    fn try_from(p: Vec<f64>) -> Result<Self> {
        Self::new(p)
    }
}

impl From<ClientImportance> for Vec<f64> {
    fn from(value: ClientImportance) -> Self {
        value.p
    }
}
