// Copyright 2026 The fl-sampling Authors
// SPDX-License-Identifier: Apache-2.0

//! FedAvg with client sampling.
//!
//! Each round draws a weight realization, runs local updates for the
//! sampled clients only, and applies
//! `θ ← θ + η_g Σ_{i∈S} ω_i (θ_i − θ)`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::ClientImportance;
use crate::rng::{stream, tag, SimRng};
use crate::sampling::{Sampler, SchemeSpec, WeightRealization};
use crate::stats::SamplingStats;

/// Global model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GlobalModel(pub Vec<f64>);

impl GlobalModel {
    pub fn zeros(d: usize) -> Self {
        Self(vec![0.0; d])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundConfig {
    /// Local SGD steps per round.
    pub local_steps: usize,
    pub eta_l: f64,
    pub eta_g: f64,
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local_steps == 0 {
            return Err(Error::InvalidConfig { path: "/round/local_steps".into(), message: "must be ≥ 1".into() });
        }
        if !(self.eta_l > 0.0 && self.eta_l.is_finite()) {
            return Err(Error::InvalidConfig { path: "/round/eta_l".into(), message: "must be > 0".into() });
        }
        if !(self.eta_g > 0.0 && self.eta_g.is_finite()) {
            return Err(Error::InvalidConfig { path: "/round/eta_g".into(), message: "must be > 0".into() });
        }
        Ok(())
    }

    /// Contraction of `K` gradient steps on a unit quadratic:
    /// `φ = 1 − (1 − η_l)^K`.
    pub fn phi(&self) -> f64 {
        1.0 - (1.0 - self.eta_l).powi(self.local_steps as i32)
    }

    /// Effective rate `η_g · η_l`.
    pub fn effective_rate(&self) -> f64 {
        self.eta_g * self.eta_l
    }
}

/// A differentiable local objective.
pub trait LocalObjective: Send + Sync {
    fn dim(&self) -> usize;
    fn loss(&self, theta: &[f64]) -> f64;
    fn gradient(&self, theta: &[f64], grad: &mut [f64]);
    /// Known minimizer, if any.
    fn minimizer(&self) -> Option<&[f64]> {
        None
    }
}

/// `L_i(θ) = ½ ‖θ − θ_i*‖²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticClient {
    pub theta_star: Vec<f64>,
}

impl QuadraticClient {
    pub fn new(theta_star: Vec<f64>) -> Self {
        Self { theta_star }
    }
}

impl LocalObjective for QuadraticClient {
    fn dim(&self) -> usize {
        self.theta_star.len()
    }

    fn loss(&self, theta: &[f64]) -> f64 {
        0.5 * dist_sq(theta, &self.theta_star)
    }

    fn gradient(&self, theta: &[f64], grad: &mut [f64]) {
        for ((g, t), s) in grad.iter_mut().zip(theta).zip(&self.theta_star) {
            *g = t - s;
        }
    }

    fn minimizer(&self) -> Option<&[f64]> {
        Some(&self.theta_star)
    }
}

/// A local objective optimized by noisy gradient steps; the noise is iid
/// `N(0, σ²)` per coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdClient<O> {
    pub objective: O,
    pub noise_sigma: f64,
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Closed-form result of `K` gradient steps on a quadratic client:
/// `θ + φ (θ_i* − θ)`.
pub fn local_update_quadratic(theta: &GlobalModel, client: &QuadraticClient, cfg: &RoundConfig) -> Vec<f64> {
    let phi = cfg.phi();
    theta.0.iter().zip(&client.theta_star).map(|(t, s)| t + phi * (s - t)).collect()
}

/// `K` steps of `y ← y − η_l (∇L(y) + ξ)` starting from `θ`.
pub fn local_update_sgd<O: LocalObjective, R: Rng + ?Sized>(
    theta: &GlobalModel,
    client: &SgdClient<O>,
    cfg: &RoundConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let d = client.objective.dim();
    if theta.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: theta.dim() });
    }
    let noise = if client.noise_sigma > 0.0 {
        Some(Normal::new(0.0, client.noise_sigma).map_err(|e| Error::InvalidScheme(e.to_string()))?)
    } else {
        None
    };
    let mut y = theta.0.clone();
    let mut grad = vec![0.0; d];
    for step in 0..cfg.local_steps {
        client.objective.gradient(&y, &mut grad);
        for (yi, gi) in y.iter_mut().zip(&grad) {
            let xi = noise.as_ref().map_or(0.0, |n| n.sample(rng));
            *yi -= cfg.eta_l * (gi + xi);
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteIterate { client: usize::MAX, step });
        }
    }
    Ok(y)
}

/// A client the simulator can run a round on.
pub trait Client: Send + Sync {
    fn dim(&self) -> usize;
    fn loss(&self, theta: &[f64]) -> f64;
    fn local_minimum(&self) -> Option<&[f64]>;
    fn local_update(&self, theta: &GlobalModel, cfg: &RoundConfig, rng: &mut SimRng) -> Result<Vec<f64>>;
}

impl Client for QuadraticClient {
    fn dim(&self) -> usize {
        LocalObjective::dim(self)
    }

    fn loss(&self, theta: &[f64]) -> f64 {
        LocalObjective::loss(self, theta)
    }

    fn local_minimum(&self) -> Option<&[f64]> {
        Some(&self.theta_star)
    }

    fn local_update(&self, theta: &GlobalModel, cfg: &RoundConfig, _rng: &mut SimRng) -> Result<Vec<f64>> {
        Ok(local_update_quadratic(theta, self, cfg))
    }
}

impl<O: LocalObjective> Client for SgdClient<O> {
    fn dim(&self) -> usize {
        self.objective.dim()
    }

    fn loss(&self, theta: &[f64]) -> f64 {
        self.objective.loss(theta)
    }

    fn local_minimum(&self) -> Option<&[f64]> {
        self.objective.minimizer()
    }

    fn local_update(&self, theta: &GlobalModel, cfg: &RoundConfig, rng: &mut SimRng) -> Result<Vec<f64>> {
        local_update_sgd(theta, self, cfg, rng)
    }
}

/// Server step `θ + η_g Σ_{i∈S} ω_i (θ_i − θ)`, reduced in client-index
/// order.
pub fn aggregate(
    theta: &GlobalModel,
    contributions: &[(usize, Vec<f64>)],
    weights: &WeightRealization,
    eta_g: f64,
) -> Result<GlobalModel> {
    let mut by_client: Vec<Option<&[f64]>> = vec![None; weights.len()];
    for (i, local) in contributions {
        if local.len() != theta.dim() {
            return Err(Error::DimensionMismatch { expected: theta.dim(), got: local.len() });
        }
        if let Some(slot) = by_client.get_mut(*i) {
            *slot = Some(local);
        }
    }
    let mut next = theta.0.clone();
    for i in weights.participants() {
        let local = by_client[i].ok_or(Error::MissingContribution(i))?;
        let w = eta_g * weights.weight(i);
        if w == 0.0 {
            continue;
        }
        for ((out, t), l) in next.iter_mut().zip(&theta.0).zip(local) {
            *out += w * (l - t);
        }
    }
    Ok(GlobalModel(next))
}

/// `θ* = Σ p_i θ_i*`.
pub fn global_optimum_quadratic(p: &ClientImportance, clients: &[QuadraticClient]) -> Result<Vec<f64>> {
    let minima: Vec<&[f64]> = clients.iter().map(|c| c.theta_star.as_slice()).collect();
    weighted_mean(p, &minima)
}

fn weighted_mean(p: &ClientImportance, points: &[&[f64]]) -> Result<Vec<f64>> {
    if points.len() != p.len() {
        return Err(Error::DimensionMismatch { expected: p.len(), got: points.len() });
    }
    let d = points.first().map_or(0, |v| v.len());
    let mut out = vec![0.0; d];
    for (pi, x) in p.as_slice().iter().zip(points) {
        if x.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: x.len() });
        }
        for (o, v) in out.iter_mut().zip(x.iter()) {
            *o += pi * v;
        }
    }
    Ok(out)
}

/// Exact `E[‖θ⁺ − θ*‖² | θ]` after one round with noiseless quadratic
/// clients:
///
/// `(1 − 2η_gφ) ‖θ − θ*‖² + η_g²φ² [Σ γ_i ‖θ − θ_i*‖² + (1 − α) ‖θ − θ*‖²]`.
pub fn expected_distance_recursion(
    theta: &GlobalModel,
    p: &ClientImportance,
    clients: &[QuadraticClient],
    cfg: &RoundConfig,
    stats: &SamplingStats,
) -> Result<f64> {
    if !stats.alpha_exact {
        return Err(Error::NoScalarAlpha(stats.scheme));
    }
    let opt = global_optimum_quadratic(p, clients)?;
    let c = cfg.eta_g * cfg.phi();
    let base = dist_sq(&theta.0, &opt);
    let spread: f64 = stats.gamma_i.iter().zip(clients).map(|(g, cl)| g * dist_sq(&theta.0, &cl.theta_star)).sum();
    Ok((1.0 - 2.0 * c) * base + c * c * (spread + (1.0 - stats.alpha) * base))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// `Σ p_i L_i(θ)`.
    pub loss: f64,
    /// `‖θ − θ*‖²`; NaN when the clients have no known minima.
    pub dist_sq: f64,
    pub n_participants: usize,
    pub weight_sum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub scheme: String,
    pub seed: u64,
    pub records: Vec<RoundRecord>,
}

impl Trajectory {
    pub fn final_record(&self) -> &RoundRecord {
        self.records.last().expect("trajectory always holds round 0")
    }
}

/// Runs `rounds` rounds of FedAvg from `theta0`.
///
/// Sampling for round `t` uses stream `(seed, SAMPLING, t)` and local
/// noise for client `i` uses `(seed, GRADIENT_NOISE, t, i)`. Round 0 is the
/// initial state, recorded with all clients and unit weight sum.
pub fn run<C: Client>(
    scheme: &SchemeSpec,
    p: &ClientImportance,
    clients: &[C],
    cfg: &RoundConfig,
    rounds: usize,
    seed: u64,
    theta0: GlobalModel,
) -> Result<Trajectory> {
    cfg.validate()?;
    if clients.len() != p.len() {
        return Err(Error::DimensionMismatch { expected: p.len(), got: clients.len() });
    }
    for c in clients {
        if c.dim() != theta0.dim() {
            return Err(Error::DimensionMismatch { expected: theta0.dim(), got: c.dim() });
        }
    }
    let sampler = Sampler::new(scheme, p)?;
    let minima: Option<Vec<&[f64]>> = clients.iter().map(|c| c.local_minimum()).collect();
    let optimum = minima.map(|m| weighted_mean(p, &m)).transpose()?;

    let record = |round: usize, theta: &GlobalModel, n_participants: usize, weight_sum: f64| RoundRecord {
        round,
        loss: clients.iter().zip(p.as_slice()).map(|(c, pi)| pi * c.loss(&theta.0)).sum(),
        dist_sq: optimum.as_ref().map_or(f64::NAN, |o| dist_sq(&theta.0, o)),
        n_participants,
        weight_sum,
    };

    let mut theta = theta0;
    let mut records = Vec::with_capacity(rounds + 1);
    records.push(record(0, &theta, clients.len(), 1.0));
    for t in 0..rounds {
        let round_tag = t as u64 + 1;
        let weights = sampler.draw(&mut stream(seed, &[tag::SAMPLING, round_tag]));
        let mut contributions = Vec::with_capacity(weights.participants_count());
        for i in weights.participants() {
            let mut rng = stream(seed, &[tag::GRADIENT_NOISE, round_tag, i as u64]);
            let local = clients[i].local_update(&theta, cfg, &mut rng).map_err(|e| match e {
                Error::NonFiniteIterate { step, .. } => Error::NonFiniteIterate { client: i, step },
                other => other,
            })?;
            contributions.push((i, local));
        }
        theta = aggregate(&theta, &contributions, &weights, cfg.eta_g)?;
        records.push(record(t + 1, &theta, weights.participants_count(), weights.weight_sum()));
    }
    Ok(Trajectory { scheme: scheme.kind().name().to_string(), seed, records })
}
