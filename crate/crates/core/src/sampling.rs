// Copyright 2026 The fl-sampling Authors
// SPDX-License-Identifier: Apache-2.0

//! Client-sampling schemes and their aggregation-weight realizations.
//!
//! A scheme turns the importance vector `p` into a random weight vector
//! `ω(S)` with `E[ω_i] = p_i`. The server update is then
//! `θ + η_g Σ ω_i (θ_i − θ)`, so a realization fully determines how each
//! sampled client contributes to a round.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::ClientImportance;

/// Tolerance on the row and column constraints of a cluster matrix.
pub const CLUSTER_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    Full,
    Md,
    Uniform,
    Binomial,
    #[serde(alias = "poisson")]
    PoissonBinomial,
    Clustered,
    Optimal,
    PoissonReweighted,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 8] = [
        SchemeKind::Full,
        SchemeKind::Md,
        SchemeKind::Uniform,
        SchemeKind::Binomial,
        SchemeKind::PoissonBinomial,
        SchemeKind::Clustered,
        SchemeKind::Optimal,
        SchemeKind::PoissonReweighted,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SchemeKind::Full => "full",
            SchemeKind::Md => "md",
            SchemeKind::Uniform => "uniform",
            SchemeKind::Binomial => "binomial",
            SchemeKind::PoissonBinomial => "poisson_binomial",
            SchemeKind::Clustered => "clustered",
            SchemeKind::Optimal => "optimal",
            SchemeKind::PoissonReweighted => "poisson_reweighted",
        }
    }

    /// Whether `Cov(ω_i, ω_j) = −α p_i p_j` holds with one scalar `α`.
    pub fn has_scalar_alpha(self) -> bool {
        self != SchemeKind::Clustered
    }

    /// Schemes whose participants are independent Bernoulli draws.
    pub fn is_bernoulli(self) -> bool {
        matches!(
            self,
            SchemeKind::Binomial | SchemeKind::PoissonBinomial | SchemeKind::Optimal | SchemeKind::PoissonReweighted
        )
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let kind = match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "full" | "none" => SchemeKind::Full,
            "md" | "multinomial" => SchemeKind::Md,
            "uniform" => SchemeKind::Uniform,
            "binomial" => SchemeKind::Binomial,
            "poisson" | "poisson_binomial" => SchemeKind::PoissonBinomial,
            "clustered" => SchemeKind::Clustered,
            "optimal" => SchemeKind::Optimal,
            "poisson_reweighted" => SchemeKind::PoissonReweighted,
            other => return Err(Error::InvalidScheme(format!("unknown scheme `{other}`"))),
        };
        Ok(kind)
    }
}

/// Row-stochastic `m × n` matrix of per-slot client distributions whose
/// column sums are `m p_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClusterMatrix {
    rows: Vec<Vec<f64>>,
}

impl ClusterMatrix {
    /// Wraps rows without checking them against an importance vector; see
    /// [`ClusterMatrix::validate`].
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        Self { rows }
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn m(&self) -> usize {
        self.rows.len()
    }

    pub fn n(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn get(&self, k: usize, i: usize) -> f64 {
        self.rows[k][i]
    }

    pub fn validate(&self, p: &ClientImportance) -> Result<()> {
        let n = p.len();
        let m = self.m();
        if m == 0 || m > n {
            return Err(Error::InvalidScheme(format!("cluster matrix has {m} rows; need 1 ≤ m ≤ n = {n}")));
        }
        for (k, row) in self.rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::InvalidScheme(format!("cluster row {k} has {} entries, expected {n}", row.len())));
            }
            if let Some(v) = row.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
                return Err(Error::InvalidScheme(format!("cluster row {k} has invalid entry {v}")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > CLUSTER_TOL {
                return Err(Error::InvalidScheme(format!("cluster row {k} sums to {s}, not 1")));
            }
        }
        for i in 0..n {
            let s: f64 = self.rows.iter().map(|r| r[i]).sum();
            let target = m as f64 * p[i];
            if (s - target).abs() > CLUSTER_TOL {
                return Err(Error::InvalidScheme(format!("cluster column {i} sums to {s}, expected m·p_i = {target}")));
            }
        }
        Ok(())
    }
}

/// A sampling scheme with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum SchemeSpec {
    /// Every client participates with weight `p_i`.
    Full,
    /// `m` iid categorical draws from `p`; `ω_i = count_i / m`.
    Md { m: usize },
    /// `m` distinct clients uniformly without replacement; `ω_i = (n/m) p_i`.
    Uniform { m: usize },
    /// Independent Bernoulli(m/n); `ω_i = (n/m) p_i`.
    Binomial { m: usize },
    /// Independent Bernoulli(m p_i); `ω_i = 1/m`.
    PoissonBinomial { m: usize },
    /// One categorical draw per row of the cluster matrix; `ω_i = count_i / m`.
    Clustered { matrix: ClusterMatrix },
    /// Independent Bernoulli(q_i); `ω_i = p_i / q_i`.
    Optimal { q: Vec<f64> },
    /// Same law as [`SchemeSpec::Binomial`], phrased as a per-client
    /// learning rate `η (n/m) p_i` on a uniform inclusion rate `m/n`.
    PoissonReweighted { m: usize },
}

impl SchemeSpec {
    pub fn kind(&self) -> SchemeKind {
        match self {
            SchemeSpec::Full => SchemeKind::Full,
            SchemeSpec::Md { .. } => SchemeKind::Md,
            SchemeSpec::Uniform { .. } => SchemeKind::Uniform,
            SchemeSpec::Binomial { .. } => SchemeKind::Binomial,
            SchemeSpec::PoissonBinomial { .. } => SchemeKind::PoissonBinomial,
            SchemeSpec::Clustered { .. } => SchemeKind::Clustered,
            SchemeSpec::Optimal { .. } => SchemeKind::Optimal,
            SchemeSpec::PoissonReweighted { .. } => SchemeKind::PoissonReweighted,
        }
    }

    /// Sampled-client budget, when the scheme has one.
    pub fn m(&self) -> Option<usize> {
        match self {
            SchemeSpec::Md { m }
            | SchemeSpec::Uniform { m }
            | SchemeSpec::Binomial { m }
            | SchemeSpec::PoissonBinomial { m }
            | SchemeSpec::PoissonReweighted { m } => Some(*m),
            SchemeSpec::Clustered { matrix } => Some(matrix.m()),
            SchemeSpec::Full | SchemeSpec::Optimal { .. } => None,
        }
    }

    /// Builds a scheme of `kind` with budget `m`. Clustered uses the
    /// water-filled matrix; Optimal needs [`SchemeSpec::Optimal`] directly.
    pub fn with_budget(kind: SchemeKind, m: usize, p: &ClientImportance) -> Result<Self> {
        let spec = match kind {
            SchemeKind::Full => SchemeSpec::Full,
            SchemeKind::Md => SchemeSpec::Md { m },
            SchemeKind::Uniform => SchemeSpec::Uniform { m },
            SchemeKind::Binomial => SchemeSpec::Binomial { m },
            SchemeKind::PoissonBinomial => SchemeSpec::PoissonBinomial { m },
            SchemeKind::PoissonReweighted => SchemeSpec::PoissonReweighted { m },
            SchemeKind::Clustered => {
                if m == 0 || m > p.len() {
                    return Err(Error::InvalidScheme(format!("clustered needs 1 ≤ m ≤ n, got m = {m}")));
                }
                SchemeSpec::Clustered { matrix: build_clustered_matrix(p, m) }
            }
            SchemeKind::Optimal => {
                return Err(Error::InvalidScheme("optimal sampling needs an explicit q vector".into()))
            }
        };
        spec.validate(p)?;
        Ok(spec)
    }

    pub fn validate(&self, p: &ClientImportance) -> Result<()> {
        let n = p.len();
        let need_budget = |m: usize, capped: bool| -> Result<()> {
            if m == 0 {
                return Err(Error::InvalidScheme(format!("{} needs m ≥ 1", self.kind())));
            }
            if capped && m > n {
                return Err(Error::InvalidScheme(format!("{} needs m ≤ n, got m = {m} > n = {n}", self.kind())));
            }
            Ok(())
        };
        match self {
            SchemeSpec::Full => Ok(()),
            SchemeSpec::Md { m } | SchemeSpec::Uniform { m } => need_budget(*m, true),
            // Bernoulli(m/n) must be a probability.
            SchemeSpec::Binomial { m } | SchemeSpec::PoissonReweighted { m } => need_budget(*m, true),
            SchemeSpec::PoissonBinomial { m } => {
                need_budget(*m, false)?;
                let top = *m as f64 * p.max();
                if top > 1.0 + 1e-12 {
                    return Err(Error::InvalidScheme(format!(
                        "poisson_binomial needs m·max p_i ≤ 1, got {m}·{} = {top}",
                        p.max()
                    )));
                }
                Ok(())
            }
            SchemeSpec::Clustered { matrix } => matrix.validate(p),
            SchemeSpec::Optimal { q } => {
                if q.len() != n {
                    return Err(Error::InvalidScheme(format!("optimal q has {} entries, expected {n}", q.len())));
                }
                if let Some((i, v)) = q.iter().enumerate().find(|(_, v)| !(**v > 0.0 && **v <= 1.0)) {
                    return Err(Error::InvalidScheme(format!("optimal q[{i}] = {v} is outside (0, 1]")));
                }
                Ok(())
            }
        }
    }

    /// Inclusion probability of each client under a Bernoulli scheme.
    pub fn bernoulli_rates(&self, p: &ClientImportance) -> Option<Vec<f64>> {
        let n = p.len() as f64;
        match self {
            SchemeSpec::Binomial { m } | SchemeSpec::PoissonReweighted { m } => {
                Some(vec![(*m as f64 / n).min(1.0); p.len()])
            }
            SchemeSpec::PoissonBinomial { m } => {
                Some(p.as_slice().iter().map(|pi| (*m as f64 * pi).min(1.0)).collect())
            }
            SchemeSpec::Optimal { q } => Some(q.clone()),
            _ => None,
        }
    }

    /// Weight assigned to a sampled client `i` under a Bernoulli scheme.
    pub fn bernoulli_weight(&self, p: &ClientImportance, i: usize) -> f64 {
        let n = p.len() as f64;
        match self {
            SchemeSpec::Binomial { m } | SchemeSpec::PoissonReweighted { m } => n / *m as f64 * p[i],
            SchemeSpec::PoissonBinomial { m } => 1.0 / *m as f64,
            SchemeSpec::Optimal { q } => p[i] / q[i],
            _ => unreachable!("not a Bernoulli scheme"),
        }
    }
}

impl fmt::Display for SchemeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.m() {
            Some(m) => write!(f, "{}(m={m})", self.kind()),
            None => write!(f, "{}", self.kind()),
        }
    }
}

/// One drawn aggregation-weight vector.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightRealization {
    omega: Vec<f64>,
    sampled: Vec<bool>,
}

impl WeightRealization {
    pub fn new(omega: Vec<f64>, sampled: Vec<bool>) -> Self {
        debug_assert_eq!(omega.len(), sampled.len());
        Self { omega, sampled }
    }

    pub fn omega(&self) -> &[f64] {
        &self.omega
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.omega[i]
    }

    pub fn is_sampled(&self, i: usize) -> bool {
        self.sampled[i]
    }

    pub fn len(&self) -> usize {
        self.omega.len()
    }

    pub fn is_empty(&self) -> bool {
        self.omega.is_empty()
    }

    pub fn participants(&self) -> impl Iterator<Item = usize> + '_ {
        self.sampled.iter().enumerate().filter(|(_, s)| **s).map(|(i, _)| i)
    }

    /// Number `N` of distinct clients the server talks to.
    pub fn participants_count(&self) -> usize {
        self.sampled.iter().filter(|s| **s).count()
    }

    pub fn weight_sum(&self) -> f64 {
        self.omega.iter().sum()
    }
}

/// Free-function form of [`WeightRealization::participants_count`].
pub fn participants_count(w: &WeightRealization) -> usize {
    w.participants_count()
}

/// Cumulative table for inversion sampling from a discrete distribution.
#[derive(Debug, Clone)]
struct Categorical {
    cdf: Vec<f64>,
}

impl Categorical {
    fn new(weights: &[f64]) -> Self {
        let mut acc = 0.0;
        let cdf = weights
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        Self { cdf }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let total = *self.cdf.last().expect("non-empty distribution");
        let u = rng.random::<f64>() * total;
        self.cdf.partition_point(|&c| c <= u).min(self.cdf.len() - 1)
    }
}

/// A validated scheme with its sampling tables built once.
#[derive(Debug, Clone)]
pub struct Sampler<'a> {
    scheme: &'a SchemeSpec,
    p: &'a ClientImportance,
    tables: Vec<Categorical>,
    rates: Option<Vec<f64>>,
}

impl<'a> Sampler<'a> {
    pub fn new(scheme: &'a SchemeSpec, p: &'a ClientImportance) -> Result<Self> {
        scheme.validate(p)?;
        let tables = match scheme {
            SchemeSpec::Md { .. } => vec![Categorical::new(p.as_slice())],
            SchemeSpec::Clustered { matrix } => matrix.rows().iter().map(|r| Categorical::new(r)).collect(),
            _ => Vec::new(),
        };
        Ok(Self { scheme, p, tables, rates: scheme.bernoulli_rates(p) })
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> WeightRealization {
        let n = self.p.len();
        let mut omega = vec![0.0; n];
        let mut sampled = vec![false; n];
        match self.scheme {
            SchemeSpec::Full => {
                omega.copy_from_slice(self.p.as_slice());
                sampled.fill(true);
            }
            SchemeSpec::Md { m } => {
                for _ in 0..*m {
                    let i = self.tables[0].sample(rng);
                    omega[i] += 1.0;
                    sampled[i] = true;
                }
                normalize_counts(&mut omega, *m);
            }
            SchemeSpec::Clustered { matrix } => {
                for table in &self.tables {
                    let i = table.sample(rng);
                    omega[i] += 1.0;
                    sampled[i] = true;
                }
                normalize_counts(&mut omega, matrix.m());
            }
            SchemeSpec::Uniform { m } => {
                let scale = n as f64 / *m as f64;
                for i in partial_shuffle(n, *m, rng) {
                    omega[i] = scale * self.p[i];
                    sampled[i] = true;
                }
            }
            SchemeSpec::Binomial { .. }
            | SchemeSpec::PoissonBinomial { .. }
            | SchemeSpec::Optimal { .. }
            | SchemeSpec::PoissonReweighted { .. } => {
                let rates = self.rates.as_ref().expect("bernoulli rates");
                for i in 0..n {
                    if rng.random::<f64>() < rates[i] {
                        omega[i] = self.scheme.bernoulli_weight(self.p, i);
                        sampled[i] = true;
                    }
                }
            }
        }
        WeightRealization { omega, sampled }
    }
}

/// Draws one realization of `scheme`.
pub fn draw<R: Rng + ?Sized>(scheme: &SchemeSpec, p: &ClientImportance, rng: &mut R) -> Result<WeightRealization> {
    Ok(Sampler::new(scheme, p)?.draw(rng))
}

// Integer counts → count / m.
fn normalize_counts(omega: &mut [f64], m: usize) {
    let m = m as f64;
    for w in omega.iter_mut() {
        *w /= m;
    }
}

/// First `m` positions of a partial Fisher–Yates shuffle of `0..n`.
fn partial_shuffle<R: Rng + ?Sized>(n: usize, m: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for k in 0..m {
        let j = rng.random_range(k..n);
        idx.swap(k, j);
    }
    idx.truncate(m);
    idx
}

/// Water-filled cluster matrix: the masses `m p_1, …, m p_n` are laid end
/// to end on `[0, m]` and row `k` receives whatever falls in `[k, k + 1]`.
///
/// Panics if `m` is zero or exceeds `n`.
pub fn build_clustered_matrix(p: &ClientImportance, m: usize) -> ClusterMatrix {
    let n = p.len();
    assert!(m >= 1 && m <= n, "need 1 ≤ m ≤ n");
    let mf = m as f64;
    let mut bounds = Vec::with_capacity(n + 1);
    bounds.push(0.0);
    let mut acc = 0.0;
    for &pi in p.as_slice() {
        acc += pi;
        let mut c = mf * acc;
        // snap cut points that should be integers
        if (c - c.round()).abs() < 1e-12 {
            c = c.round();
        }
        bounds.push(c);
    }
    bounds[n] = mf;
    let mut rows = vec![vec![0.0; n]; m];
    for i in 0..n {
        let (lo, hi) = (bounds[i], bounds[i + 1]);
        if hi <= lo {
            continue;
        }
        let first = (lo.floor() as usize).min(m - 1);
        let last = (hi.ceil() as usize).clamp(1, m) - 1;
        for (k, row) in rows.iter_mut().enumerate().take(last + 1).skip(first) {
            let overlap = hi.min(k as f64 + 1.0) - lo.max(k as f64);
            if overlap > 0.0 {
                row[i] = overlap;
            }
        }
    }
    ClusterMatrix { rows }
}
