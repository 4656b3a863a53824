// Copyright 2026 The fl-sampling Authors
// SPDX-License-Identifier: Apache-2.0

//! Independent oracles for the closed forms.
//!
//! [`for_each_outcome`] walks the finite support of a scheme and hands
//! each weight vector to a visitor together with its probability. Weights
//! and probabilities are computed here from the sampling law directly and
//! do not go through [`crate::sampling::Sampler`]. [`mc_estimate`] is the
//! Monte-Carlo counterpart that does use the sampler, with a fixed block
//! decomposition so parallel runs reproduce serial ones bit for bit.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::importance::ClientImportance;
use crate::rng::{stream, tag};
use crate::sampling::{ClusterMatrix, Sampler, SchemeKind, SchemeSpec, WeightRealization};
use crate::stats::{closed_form_stats, clustered_covariance};

/// Ordered draw tuples for MD and clustered sampling.
pub const MAX_DRAW_TUPLES: u128 = 10_000_000;
/// Subsets for uniform sampling.
pub const MAX_SUBSETS: u128 = 10_000_000;
/// Clients for the Bernoulli families (2^n outcomes).
pub const MAX_BERNOULLI_CLIENTS: usize = 24;
/// Above this budget MD is enumerated by count vectors instead of tuples.
pub const MD_TUPLE_MAX_M: usize = 6;

/// Agreement tolerance between an enumerated value and a closed form.
pub const EXACT_TOL: f64 = 1e-10;
/// Width of the Monte-Carlo acceptance band, in standard errors.
pub const MC_SIGMAS: f64 = 4.0;
/// Draws per Monte-Carlo block; each block has its own stream.
pub const MC_BLOCK: usize = 4096;

fn too_large(count: u128, limit: u128) -> Error {
    Error::SupportTooLarge { count, limit }
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i as u128 + 1))
}

fn checked_pow(base: usize, exp: usize) -> u128 {
    (0..exp).try_fold(1u128, |acc, _| acc.checked_mul(base as u128)).unwrap_or(u128::MAX)
}

/// Number of outcomes [`for_each_outcome`] would visit, checked against
/// the enumeration limits.
pub fn support_size(scheme: &SchemeSpec, p: &ClientImportance) -> Result<u128> {
    let n = p.len();
    match scheme {
        SchemeSpec::Full => Ok(1),
        SchemeSpec::Md { m } => {
            let tuples = checked_pow(n, *m);
            if tuples > MAX_DRAW_TUPLES {
                return Err(too_large(tuples, MAX_DRAW_TUPLES));
            }
            Ok(if *m > MD_TUPLE_MAX_M { binomial(n + m - 1, *m) } else { tuples })
        }
        SchemeSpec::Clustered { matrix } => {
            let tuples = checked_pow(n, matrix.m());
            if tuples > MAX_DRAW_TUPLES {
                return Err(too_large(tuples, MAX_DRAW_TUPLES));
            }
            Ok(matrix.rows().iter().map(|r| r.iter().filter(|v| **v > 0.0).count() as u128).product())
        }
        SchemeSpec::Uniform { m } => {
            let c = binomial(n, *m);
            if c > MAX_SUBSETS {
                return Err(too_large(c, MAX_SUBSETS));
            }
            Ok(c)
        }
        _ => {
            if n > MAX_BERNOULLI_CLIENTS {
                return Err(too_large(1u128 << n.min(127), 1u128 << MAX_BERNOULLI_CLIENTS));
            }
            Ok(1u128 << n)
        }
    }
}

/// Visits every outcome of `scheme` with its probability.
pub fn for_each_outcome<F>(scheme: &SchemeSpec, p: &ClientImportance, mut visit: F) -> Result<()>
where
    F: FnMut(f64, &WeightRealization),
{
    scheme.validate(p)?;
    support_size(scheme, p)?;
    let n = p.len();
    let ps = p.as_slice();
    match scheme {
        SchemeSpec::Full => visit(1.0, &WeightRealization::new(ps.to_vec(), vec![true; n])),
        SchemeSpec::Md { m } if *m <= MD_TUPLE_MAX_M => {
            let rows = vec![ps.to_vec(); *m];
            ordered_draws(&rows, n, &mut visit);
        }
        SchemeSpec::Md { m } => count_vectors(ps, *m, &mut visit),
        SchemeSpec::Clustered { matrix } => ordered_draws(matrix.rows(), n, &mut visit),
        SchemeSpec::Uniform { m } => {
            let prob = 1.0 / binomial(n, *m) as f64;
            let scale = n as f64 / *m as f64;
            let mut idx: Vec<usize> = (0..*m).collect();
            loop {
                let mut omega = vec![0.0; n];
                let mut sampled = vec![false; n];
                for &i in &idx {
                    omega[i] = scale * ps[i];
                    sampled[i] = true;
                }
                visit(prob, &WeightRealization::new(omega, sampled));
                if !next_combination(&mut idx, n) {
                    break;
                }
            }
        }
        _ => {
            let (rates, weights) = bernoulli_law(scheme, ps);
            for mask in 0u64..(1u64 << n) {
                let mut prob = 1.0;
                let mut omega = vec![0.0; n];
                let mut sampled = vec![false; n];
                for i in 0..n {
                    if mask >> i & 1 == 1 {
                        prob *= rates[i];
                        omega[i] = weights[i];
                        sampled[i] = true;
                    } else {
                        prob *= 1.0 - rates[i];
                    }
                }
                if prob > 0.0 {
                    visit(prob, &WeightRealization::new(omega, sampled));
                }
            }
        }
    }
    Ok(())
}

// (inclusion rate, weight when included) per client.
fn bernoulli_law(scheme: &SchemeSpec, p: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = p.len() as f64;
    match scheme {
        SchemeSpec::Binomial { m } | SchemeSpec::PoissonReweighted { m } => {
            let r = *m as f64 / n;
            (vec![r; p.len()], p.iter().map(|pi| pi / r).collect())
        }
        SchemeSpec::PoissonBinomial { m } => {
            let mf = *m as f64;
            (p.iter().map(|pi| mf * pi).collect(), vec![1.0 / mf; p.len()])
        }
        SchemeSpec::Optimal { q } => (q.clone(), p.iter().zip(q).map(|(pi, qi)| pi / qi).collect()),
        _ => unreachable!("not a Bernoulli scheme"),
    }
}

// Every tuple (l_1, …, l_m) with l_k drawn from row k; zero-probability
// entries are skipped.
fn ordered_draws<F: FnMut(f64, &WeightRealization)>(rows: &[Vec<f64>], n: usize, visit: &mut F) {
    let m = rows.len();
    let support: Vec<Vec<usize>> =
        rows.iter().map(|r| (0..n).filter(|&i| r[i] > 0.0).collect()).collect();
    if support.iter().any(Vec::is_empty) {
        return;
    }
    let mut pos = vec![0usize; m];
    loop {
        let mut prob = 1.0;
        let mut counts = vec![0usize; n];
        for k in 0..m {
            let i = support[k][pos[k]];
            prob *= rows[k][i];
            counts[i] += 1;
        }
        visit(prob, &realization_from_counts(&counts, m));
        // odometer
        let mut k = m;
        loop {
            if k == 0 {
                return;
            }
            k -= 1;
            pos[k] += 1;
            if pos[k] < support[k].len() {
                break;
            }
            pos[k] = 0;
        }
    }
}

fn realization_from_counts(counts: &[usize], m: usize) -> WeightRealization {
    let omega = counts.iter().map(|&c| c as f64 / m as f64).collect();
    let sampled = counts.iter().map(|&c| c > 0).collect();
    WeightRealization::new(omega, sampled)
}

fn ln_factorial(k: usize) -> f64 {
    (2..=k).map(|v| (v as f64).ln()).sum()
}

// Every composition of m into n non-negative counts, weighted by the
// multinomial probability computed in log space.
fn count_vectors<F: FnMut(f64, &WeightRealization)>(p: &[f64], m: usize, visit: &mut F) {
    let n = p.len();
    let ln_fact: Vec<f64> = (0..=m).map(ln_factorial).collect();
    let ln_p: Vec<f64> = p.iter().map(|v| v.ln()).collect();
    let mut counts = vec![0usize; n];
    fn recurse<F: FnMut(f64, &WeightRealization)>(
        i: usize,
        left: usize,
        m: usize,
        counts: &mut [usize],
        ln_fact: &[f64],
        ln_p: &[f64],
        visit: &mut F,
    ) {
        let n = counts.len();
        if i == n - 1 {
            counts[i] = left;
            let log_prob = ln_fact[m]
                + counts.iter().zip(ln_p).map(|(&c, lp)| c as f64 * lp - ln_fact[c]).sum::<f64>();
            visit(log_prob.exp(), &realization_from_counts(counts, m));
            return;
        }
        for c in 0..=left {
            counts[i] = c;
            recurse(i + 1, left - c, m, counts, ln_fact, ln_p, visit);
        }
    }
    recurse(0, m, m, &mut counts, &ln_fact, &ln_p, visit);
}

// Lexicographic successor of a sorted m-subset of 0..n.
fn next_combination(idx: &mut [usize], n: usize) -> bool {
    let m = idx.len();
    let mut k = m;
    while k > 0 {
        k -= 1;
        if idx[k] < n - m + k {
            idx[k] += 1;
            for j in (k + 1)..m {
                idx[j] = idx[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Exact `E[f(ω)]` over the support of `scheme`.
pub fn enumerate_expectation<F>(scheme: &SchemeSpec, p: &ClientImportance, f: F) -> Result<f64>
where
    F: Fn(&WeightRealization) -> f64,
{
    let mut acc = 0.0;
    for_each_outcome(scheme, p, |prob, w| acc += prob * f(w))?;
    Ok(acc)
}

/// First and second moments of the weights and of `N`, by enumeration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnumeratedMoments {
    pub total_probability: f64,
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
    pub var_weight_sum: f64,
    pub mean_clients: f64,
    pub var_clients: f64,
}

pub fn enumerate_moments(scheme: &SchemeSpec, p: &ClientImportance) -> Result<EnumeratedMoments> {
    let n = p.len();
    let mut total = 0.0;
    let mut mean = vec![0.0; n];
    let mut second = vec![vec![0.0; n]; n];
    let mut sum_sq = 0.0;
    let mut sum_mean = 0.0;
    let mut n1 = 0.0;
    let mut n2 = 0.0;
    for_each_outcome(scheme, p, |prob, w| {
        total += prob;
        let om = w.omega();
        for i in 0..n {
            if om[i] == 0.0 {
                continue;
            }
            mean[i] += prob * om[i];
            for j in 0..n {
                second[i][j] += prob * om[i] * om[j];
            }
        }
        let s = w.weight_sum();
        sum_mean += prob * s;
        sum_sq += prob * s * s;
        let count = w.participants_count() as f64;
        n1 += prob * count;
        n2 += prob * count * count;
    })?;
    let cov = (0..n).map(|i| (0..n).map(|j| second[i][j] - mean[i] * mean[j]).collect()).collect();
    Ok(EnumeratedMoments {
        total_probability: total,
        mean,
        cov,
        var_weight_sum: sum_sq - sum_mean * sum_mean,
        mean_clients: n1,
        var_clients: n2 - n1 * n1,
    })
}

/// Running count, mean and central moment sums up to order four.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Moments {
    pub count: f64,
    pub mean: f64,
    m2: f64,
    m3: f64,
    m4: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        *self = self.merge(&Moments { count: 1.0, mean: x, ..Default::default() });
    }

    pub fn merge(&self, other: &Moments) -> Moments {
        if self.count == 0.0 {
            return *other;
        }
        if other.count == 0.0 {
            return *self;
        }
        let (na, nb) = (self.count, other.count);
        let n = na + nb;
        let d = other.mean - self.mean;
        let d2 = d * d;
        let mean = self.mean + d * nb / n;
        let m2 = self.m2 + other.m2 + d2 * na * nb / n;
        let m3 = self.m3 + other.m3 + d2 * d * na * nb * (na - nb) / (n * n)
            + 3.0 * d * (na * other.m2 - nb * self.m2) / n;
        let m4 = self.m4
            + other.m4
            + d2 * d2 * na * nb * (na * na - na * nb + nb * nb) / (n * n * n)
            + 6.0 * d2 * (na * na * other.m2 + nb * nb * self.m2) / (n * n)
            + 4.0 * d * (na * other.m3 - nb * self.m3) / n;
        Moments { count: n, mean, m2, m3, m4 }
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.count < 2.0 {
            0.0
        } else {
            self.m2 / (self.count - 1.0)
        }
    }

    pub fn stderr(&self) -> f64 {
        if self.count < 2.0 {
            0.0
        } else {
            (self.variance() / self.count).sqrt()
        }
    }

    /// Large-sample standard error of [`Moments::variance`].
    pub fn variance_stderr(&self) -> f64 {
        let n = self.count;
        if n < 4.0 {
            return 0.0;
        }
        let s2 = self.variance();
        let m4 = self.m4 / n;
        ((m4 - (n - 3.0) / (n - 1.0) * s2 * s2) / n).max(0.0).sqrt()
    }
}

/// Pairwise reduction in index order.
pub fn merge_ordered(parts: &[Moments]) -> Moments {
    match parts.len() {
        0 => Moments::default(),
        1 => parts[0],
        len => {
            let (a, b) = parts.split_at(len / 2);
            merge_ordered(a).merge(&merge_ordered(b))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub variance: f64,
    pub variance_stderr: f64,
    pub trials: usize,
}

impl McEstimate {
    fn from_moments(m: &Moments) -> Self {
        McEstimate {
            mean: m.mean,
            stderr: m.stderr(),
            variance: m.variance(),
            variance_stderr: m.variance_stderr(),
            trials: m.count as usize,
        }
    }

    /// `|mean − target| < MC_SIGMAS · stderr`, with equality allowed when
    /// the estimator is degenerate.
    pub fn agrees(&self, target: f64) -> bool {
        let d = (self.mean - target).abs();
        d < MC_SIGMAS * self.stderr || d <= 1e-12 * target.abs().max(1.0)
    }

    pub fn variance_agrees(&self, target: f64) -> bool {
        let d = (self.variance - target).abs();
        d < MC_SIGMAS * self.variance_stderr || d <= 1e-12 * target.abs().max(1.0)
    }
}

/// Sample mean and standard error of `f(ω)` over `trials` draws.
pub fn mc_estimate<F>(scheme: &SchemeSpec, p: &ClientImportance, f: F, trials: usize, seed: u64) -> Result<McEstimate>
where
    F: Fn(&WeightRealization) -> f64 + Sync,
{
    let est = mc_estimate_many(scheme, p, |w, out| out[0] = f(w), 1, trials, seed)?;
    Ok(est[0])
}

/// Several statistics of the same draws at once.
pub fn mc_estimate_many<F>(
    scheme: &SchemeSpec,
    p: &ClientImportance,
    f: F,
    arity: usize,
    trials: usize,
    seed: u64,
) -> Result<Vec<McEstimate>>
where
    F: Fn(&WeightRealization, &mut [f64]) + Sync,
{
    if trials < 2 {
        return Err(Error::InvalidScheme(format!("Monte-Carlo needs at least 2 trials, got {trials}")));
    }
    let sampler = Sampler::new(scheme, p)?;
    let blocks = trials.div_ceil(MC_BLOCK);
    let per_block: Vec<Vec<Moments>> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream(seed, &[tag::MONTE_CARLO, b as u64]);
            let len = MC_BLOCK.min(trials - b * MC_BLOCK);
            let mut acc = vec![Moments::default(); arity];
            let mut out = vec![0.0; arity];
            for _ in 0..len {
                let w = sampler.draw(&mut rng);
                f(&w, &mut out);
                for (a, x) in acc.iter_mut().zip(&out) {
                    a.push(*x);
                }
            }
            acc
        })
        .collect();
    Ok((0..arity)
        .map(|k| {
            let parts: Vec<Moments> = per_block.iter().map(|b| b[k]).collect();
            McEstimate::from_moments(&merge_ordered(&parts))
        })
        .collect())
}

/// An enumerated and/or simulated expectation next to its closed form.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExpectationReport {
    pub exact: Option<f64>,
    pub mc: Option<McEstimate>,
    pub closed_form: f64,
    pub agrees_exact: Option<bool>,
    pub agrees_mc: Option<bool>,
}

impl ExpectationReport {
    pub fn exact(exact: f64, closed_form: f64) -> Self {
        Self {
            exact: Some(exact),
            mc: None,
            closed_form,
            agrees_exact: Some((exact - closed_form).abs() < EXACT_TOL),
            agrees_mc: None,
        }
    }

    pub fn with_mc(mut self, mc: McEstimate) -> Self {
        self.agrees_mc = Some(mc.agrees(self.closed_form));
        self.mc = Some(mc);
        self
    }

    /// `|exact − closed_form|`, or infinity without an exact value.
    pub fn abs_error(&self) -> f64 {
        self.exact.map_or(f64::INFINITY, |e| (e - self.closed_form).abs())
    }

    pub fn passed(&self) -> bool {
        self.agrees_exact.unwrap_or(true) && self.agrees_mc.unwrap_or(true)
    }
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

/// `E[Σ_{i∈S} y_i Σ_{k∈S} z_k]` for `m` multinomial draws, with repeated
/// indices counted once per draw.
pub fn check_lemma_md_bilinear(y: &[f64], z: &[f64], p: &ClientImportance, m: usize) -> Result<ExpectationReport> {
    check_len(p.len(), y.len())?;
    check_len(p.len(), z.len())?;
    let mf = m as f64;
    // Σ over draws of y_l = m Σ_i ω_i y_i
    let exact = enumerate_expectation(&SchemeSpec::Md { m }, p, |w| {
        let sy: f64 = w.omega().iter().zip(y).map(|(o, v)| o * v).sum();
        let sz: f64 = w.omega().iter().zip(z).map(|(o, v)| o * v).sum();
        mf * mf * sy * sz
    })?;
    let ps = p.as_slice();
    let diag: f64 = (0..ps.len()).map(|i| ps[i] * y[i] * z[i]).sum();
    let py: f64 = ps.iter().zip(y).map(|(a, b)| a * b).sum();
    let pz: f64 = ps.iter().zip(z).map(|(a, b)| a * b).sum();
    let closed_form = mf * diag + mf * (mf - 1.0) * py * pz;
    Ok(ExpectationReport::exact(exact, closed_form))
}

/// `E[Σ_{i∈S} y_i Σ_{j∈S} z_j]` for independent inclusions with rates `r`.
pub fn check_lemma_poisson_bilinear(y: &[f64], z: &[f64], r: &[f64]) -> Result<ExpectationReport> {
    let n = r.len();
    check_len(n, y.len())?;
    check_len(n, z.len())?;
    if n > MAX_BERNOULLI_CLIENTS {
        return Err(too_large(1u128 << n.min(127), 1u128 << MAX_BERNOULLI_CLIENTS));
    }
    if let Some(v) = r.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidScheme(format!("inclusion rate {v} outside [0, 1]")));
    }
    let mut exact = 0.0;
    for mask in 0u64..(1u64 << n) {
        let mut prob = 1.0;
        let (mut sy, mut sz) = (0.0, 0.0);
        for i in 0..n {
            if mask >> i & 1 == 1 {
                prob *= r[i];
                sy += y[i];
                sz += z[i];
            } else {
                prob *= 1.0 - r[i];
            }
        }
        exact += prob * sy * sz;
    }
    let diag: f64 = (0..n).map(|i| r[i] * (1.0 - r[i]) * y[i] * z[i]).sum();
    let ry: f64 = r.iter().zip(y).map(|(a, b)| a * b).sum();
    let rz: f64 = r.iter().zip(z).map(|(a, b)| a * b).sum();
    Ok(ExpectationReport::exact(exact, diag + ry * rz))
}

fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// `E‖Σ ω_i x_i‖²` against `Σ γ_i ‖x_i‖² + (1 − α) ‖Σ p_i x_i‖²`.
pub fn check_decomposition(scheme: &SchemeSpec, p: &ClientImportance, x: &[Vec<f64>]) -> Result<ExpectationReport> {
    if !scheme.kind().has_scalar_alpha() {
        return Err(Error::NoScalarAlpha(scheme.kind()));
    }
    check_len(p.len(), x.len())?;
    let d = x.first().map_or(0, Vec::len);
    for xi in x {
        check_len(d, xi.len())?;
    }
    let exact = enumerate_expectation(scheme, p, |w| {
        let mut acc = vec![0.0; d];
        for (wi, xi) in w.omega().iter().zip(x) {
            for (a, v) in acc.iter_mut().zip(xi) {
                *a += wi * v;
            }
        }
        norm_sq(&acc)
    })?;
    let stats = closed_form_stats(scheme, p)?;
    let mut mean = vec![0.0; d];
    for (pi, xi) in p.as_slice().iter().zip(x) {
        for (a, v) in mean.iter_mut().zip(xi) {
            *a += pi * v;
        }
    }
    let closed_form = stats.gamma_i.iter().zip(x).map(|(g, xi)| g * norm_sq(xi)).sum::<f64>()
        + (1.0 - stats.alpha) * norm_sq(&mean);
    Ok(ExpectationReport::exact(exact, closed_form))
}

/// Enumerated clustered-sampling second moments next to their closed forms.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusteredVarianceReport {
    pub max_var_error: f64,
    pub max_cov_error: f64,
    pub sigma_clustered: f64,
    pub sigma_md: f64,
}

impl ClusteredVarianceReport {
    pub fn holds(&self, tol: f64) -> bool {
        self.max_var_error <= tol && self.max_cov_error <= tol && self.sigma_clustered <= self.sigma_md + tol
    }
}

pub fn clustered_variance_report(p: &ClientImportance, matrix: &ClusterMatrix) -> Result<ClusteredVarianceReport> {
    let scheme = SchemeSpec::Clustered { matrix: matrix.clone() };
    let mom = enumerate_moments(&scheme, p)?;
    let n = p.len();
    let m = matrix.m() as f64;
    let mut max_var_error: f64 = 0.0;
    let mut max_cov_error: f64 = 0.0;
    for i in 0..n {
        let var = p[i] / m - matrix.rows().iter().map(|r| r[i] * r[i]).sum::<f64>() / (m * m);
        max_var_error = max_var_error.max((mom.cov[i][i] - var).abs());
        for j in 0..n {
            if i != j {
                max_cov_error = max_cov_error.max((mom.cov[i][j] - clustered_covariance(matrix, i, j)).abs());
            }
        }
    }
    let sigma_clustered = (0..n).map(|i| mom.cov[i][i]).sum();
    let sigma_md = (1.0 - p.sum_sq()) / m;
    Ok(ClusteredVarianceReport { max_var_error, max_cov_error, sigma_clustered, sigma_md })
}

/// Whether enumerated clustered moments match their closed forms within
/// `1e-12` and the total variance does not exceed MD's.
pub fn check_clustered_variance_reduction(p: &ClientImportance, matrix: &ClusterMatrix) -> Result<bool> {
    Ok(clustered_variance_report(p, matrix)?.holds(1e-12))
}

/// Kinds whose support [`for_each_outcome`] can walk for `n` clients at budget `m`.
pub fn enumerable(kind: SchemeKind, n: usize, m: usize) -> bool {
    match kind {
        SchemeKind::Full => true,
        SchemeKind::Md | SchemeKind::Clustered => checked_pow(n, m) <= MAX_DRAW_TUPLES,
        SchemeKind::Uniform => m <= n && binomial(n, m) <= MAX_SUBSETS,
        _ => n <= MAX_BERNOULLI_CLIENTS,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::sampling::build_clustered_matrix;
    use rand::Rng;

    fn p4() -> ClientImportance {
        ClientImportance::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap()
    }

    fn random_p(n: usize, seed: u64) -> ClientImportance {
        let mut rng = stream(seed, &[]);
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
        ClientImportance::from_weights(&w).unwrap()
    }

    #[test]
    fn md_second_moment_two_clients() {
        let p = ClientImportance::uniform(2).unwrap();
        let e = enumerate_expectation(&SchemeSpec::Md { m: 2 }, &p, |w| w.weight(0).powi(2)).unwrap();
        assert!((e - 0.375).abs() < 1e-15);
        let mut law = Vec::new();
        for_each_outcome(&SchemeSpec::Md { m: 2 }, &p, |prob, w| law.push((w.weight(0), prob))).unwrap();
        let mass = |v: f64| law.iter().filter(|(w, _)| *w == v).map(|(_, pr)| pr).sum::<f64>();
        assert_eq!((mass(0.0), mass(0.5), mass(1.0)), (0.25, 0.5, 0.25));
    }

    #[test]
    fn unbiased_for_every_scheme() {
        let p = random_p(5, 11);
        let mut schemes = vec![
            SchemeSpec::Full,
            SchemeSpec::Md { m: 3 },
            SchemeSpec::Uniform { m: 3 },
            SchemeSpec::Binomial { m: 2 },
            SchemeSpec::PoissonReweighted { m: 2 },
            SchemeSpec::Optimal { q: vec![0.2, 0.4, 0.6, 0.8, 1.0] },
            SchemeSpec::Clustered { matrix: build_clustered_matrix(&p, 3) },
        ];
        let m_pb = (1.0 / p.max()).floor() as usize;
        schemes.push(SchemeSpec::PoissonBinomial { m: m_pb });
        for s in &schemes {
            let mom = enumerate_moments(s, &p).unwrap();
            assert!((mom.total_probability - 1.0).abs() < 1e-12, "{s}");
            for i in 0..5 {
                assert!((mom.mean[i] - p[i]).abs() < 1e-12, "{s} client {i}");
            }
        }
    }

    #[test]
    fn md_weight_sum_is_one() {
        let p = random_p(4, 3);
        let e = enumerate_expectation(&SchemeSpec::Md { m: 3 }, &p, |w| w.weight_sum()).unwrap();
        assert!((e - 1.0).abs() < 1e-14);
    }

    #[test]
    fn md_count_vectors_agree_with_tuples() {
        // m = 7 goes through count vectors; compare against the closed forms
        let p = random_p(8, 5);
        let mom = enumerate_moments(&SchemeSpec::Md { m: 7 }, &p).unwrap();
        let st = closed_form_stats(&SchemeSpec::Md { m: 7 }, &p).unwrap();
        assert!((mom.total_probability - 1.0).abs() < 1e-10);
        for i in 0..8 {
            assert!((mom.cov[i][i] - st.var_weight[i]).abs() < 1e-10);
        }
        assert!((mom.mean_clients - st.expected_clients).abs() < 1e-10);
        assert!((mom.var_clients - st.var_clients.unwrap()).abs() < 1e-10);
    }

    #[test]
    fn support_limits() {
        let p = ClientImportance::uniform(30).unwrap();
        assert!(matches!(
            enumerate_expectation(&SchemeSpec::Binomial { m: 3 }, &p, |_| 0.0),
            Err(Error::SupportTooLarge { .. })
        ));
        assert!(matches!(
            enumerate_expectation(&SchemeSpec::Md { m: 6 }, &p, |_| 0.0),
            Err(Error::SupportTooLarge { .. })
        ));
        assert!(support_size(&SchemeSpec::Uniform { m: 3 }, &p).unwrap() == 4060);
        assert!(!enumerable(SchemeKind::Md, 30, 6));
        assert!(enumerable(SchemeKind::Uniform, 30, 3));
    }

    #[test]
    fn md_bilinear_examples() {
        let p = random_p(4, 8);
        let y = [0.3, -0.2, 0.9, 0.1];
        let z = [-0.5, 0.4, 0.2, 0.7];
        let r = check_lemma_md_bilinear(&y, &z, &p, 1).unwrap();
        let diag: f64 = (0..4).map(|i| p[i] * y[i] * z[i]).sum();
        assert!((r.closed_form - diag).abs() < 1e-15);
        assert!(r.abs_error() < 1e-12);
        let ones = [1.0; 4];
        let r = check_lemma_md_bilinear(&ones, &ones, &p, 3).unwrap();
        assert!((r.closed_form - 9.0).abs() < 1e-12);
        assert!((r.exact.unwrap() - 9.0).abs() < 1e-12);
    }

    #[test]
    fn poisson_bilinear_examples() {
        let y = [0.3, -0.2, 0.9, 0.1];
        let z = [-0.5, 0.4, 0.2, 0.7];
        let r = check_lemma_poisson_bilinear(&y, &z, &[1.0; 4]).unwrap();
        let full: f64 = y.iter().sum::<f64>() * z.iter().sum::<f64>();
        assert!((r.closed_form - full).abs() < 1e-15);
        assert!((r.exact.unwrap() - full).abs() < 1e-15);
        let r = check_lemma_poisson_bilinear(&y, &z, &[0.0; 4]).unwrap();
        assert_eq!((r.exact.unwrap(), r.closed_form), (0.0, 0.0));
        assert!(check_lemma_poisson_bilinear(&y, &z, &[1.5, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn decomposition_trivial_cases() {
        let p = p4();
        let x: Vec<Vec<f64>> = vec![vec![1.0, -2.0], vec![0.5, 0.5], vec![3.0, 1.0], vec![-1.0, 0.0]];
        let r = check_decomposition(&SchemeSpec::Full, &p, &x).unwrap();
        let mean: Vec<f64> = (0..2).map(|c| (0..4).map(|i| p[i] * x[i][c]).sum()).collect();
        assert!((r.closed_form - norm_sq(&mean)).abs() < 1e-14);
        assert!(r.abs_error() < 1e-14);
        let same = vec![vec![2.0, -1.0]; 4];
        let r = check_decomposition(&SchemeSpec::Md { m: 2 }, &p, &same).unwrap();
        assert!((r.exact.unwrap() - 5.0).abs() < 1e-12 && (r.closed_form - 5.0).abs() < 1e-12);
        let cl = SchemeSpec::Clustered { matrix: build_clustered_matrix(&p, 2) };
        assert!(matches!(check_decomposition(&cl, &p, &x), Err(Error::NoScalarAlpha(SchemeKind::Clustered))));
    }

    #[test]
    fn clustered_examples() {
        let p = p4();
        let rows_p = ClusterMatrix::from_rows(vec![p.as_slice().to_vec(); 2]);
        let r = clustered_variance_report(&p, &rows_p).unwrap();
        assert!(r.holds(1e-12));
        assert!((r.sigma_clustered - r.sigma_md).abs() < 1e-12);

        let wf = build_clustered_matrix(&p, 2);
        let r = clustered_variance_report(&p, &wf).unwrap();
        assert!(r.holds(1e-12));
        assert!(r.sigma_clustered < r.sigma_md - 1e-3);

        let u = ClientImportance::uniform(4).unwrap();
        let pm = build_clustered_matrix(&u, 4);
        let mom = enumerate_moments(&SchemeSpec::Clustered { matrix: pm.clone() }, &u).unwrap();
        assert!((0..4).all(|i| mom.cov[i][i].abs() < 1e-15));
        assert!(check_clustered_variance_reduction(&u, &pm).unwrap());
    }

    #[test]
    fn moments_merge_matches_two_pass() {
        let xs: Vec<f64> = (0..1000).map(|i| ((i * 37 % 101) as f64).sqrt()).collect();
        let parts: Vec<Moments> = xs
            .chunks(77)
            .map(|c| {
                let mut m = Moments::default();
                c.iter().for_each(|x| m.push(*x));
                m
            })
            .collect();
        let all = merge_ordered(&parts);
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>();
        assert!((all.mean - mean).abs() < 1e-12);
        assert!((all.variance() - var).abs() < 1e-10);
        assert!((all.m4 - m4).abs() < 1e-8 * m4);
    }

    #[test]
    fn mc_is_seed_deterministic_and_thread_independent() {
        let p = p4();
        let s = SchemeSpec::Md { m: 2 };
        let f = |w: &WeightRealization| w.weight(3);
        let a = mc_estimate(&s, &p, f, 20_000, 9).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| mc_estimate(&s, &p, f, 20_000, 9).unwrap());
        assert_eq!(a, b);
        assert!(a.agrees(0.4));
        assert!(mc_estimate(&s, &p, f, 1, 9).is_err());
    }

    #[test]
    fn mc_variance_matches_closed_forms() {
        let p = p4();
        let md = SchemeSpec::Md { m: 2 };
        let st = closed_form_stats(&md, &p).unwrap();
        let e = mc_estimate(&md, &p, |w| (w.weight(1) - 0.2).powi(2), 100_000, 1).unwrap();
        assert!(e.agrees(st.var_weight[1]), "{e:?} vs {}", st.var_weight[1]);
        let pb = SchemeSpec::PoissonBinomial { m: 2 };
        let e = mc_estimate(&pb, &p, |w| w.participants_count() as f64, 100_000, 2).unwrap();
        assert!(e.agrees(2.0));
        assert!(e.variance_agrees(2.0 - 4.0 * p.sum_sq()));
    }

    #[test]
    fn mc_stderr_scales_with_trials() {
        let p = p4();
        let s = SchemeSpec::Uniform { m: 2 };
        let f = |w: &WeightRealization| w.weight(0);
        let a = mc_estimate(&s, &p, f, 40_000, 4).unwrap();
        let b = mc_estimate(&s, &p, f, 160_000, 4).unwrap();
        let ratio = a.stderr / b.stderr;
        assert!((ratio - 2.0).abs() < 0.4, "ratio {ratio}");
    }
}
