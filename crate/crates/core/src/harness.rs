// Copyright 2026 The fl-sampling Authors
// SPDX-License-Identifier: Apache-2.0

//! Config-driven experiments and the verification suite.
//!
//! A [`Scenario`] fixes the clients, the importance vector and a list of
//! schemes; [`run_scenario`] runs every (scheme, seed) cell as an
//! independent job. Cell seeds are `derive_seed(master_seed, [scheme, trial])`
//! so results do not depend on the worker count.

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fedsim::{self, Client, GlobalModel, QuadraticClient, RoundConfig, SgdClient, Trajectory};
use crate::importance::ClientImportance;
use crate::oracle::{self, EXACT_TOL, MC_SIGMAS};
use crate::rng::{derive_seed, stream, tag, SimRng};
use crate::sampling::{build_clustered_matrix, ClusterMatrix, SchemeKind, SchemeSpec};
use crate::stats::{self, closed_form_stats, corollary_compare, theorem_quantities, ComparisonVerdict, SamplingStats, TheoremQuantities};

pub const SCHEMA_VERSION: u32 = 1;

/// Floor applied to Dirichlet draws before renormalizing.
pub const DIRICHLET_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ImportanceMode {
    /// `p_i = 1/n`.
    Equal,
    /// `p_i = n_i / Σ n_j` from per-client sample counts.
    Proportional { counts: Vec<f64> },
    /// One symmetric Dirichlet draw.
    Dirichlet { concentration: f64, seed: u64 },
    Explicit { p: Vec<f64> },
}

pub fn build_importance(mode: &ImportanceMode, n: usize) -> Result<ClientImportance> {
    let check_len = |len: usize| {
        if len != n {
            Err(Error::InvalidImportance(format!("expected {n} entries, got {len}")))
        } else {
            Ok(())
        }
    };
    match mode {
        ImportanceMode::Equal => ClientImportance::uniform(n),
        ImportanceMode::Proportional { counts } => {
            check_len(counts.len())?;
            ClientImportance::from_weights(counts)
        }
        ImportanceMode::Dirichlet { concentration, seed } => {
            let gamma = Gamma::new(*concentration, 1.0)
                .map_err(|e| Error::InvalidImportance(format!("dirichlet concentration {concentration}: {e}")))?;
            let mut rng = stream(*seed, &[tag::CLIENTS]);
            let draws: Vec<f64> = (0..n).map(|_| gamma.sample(&mut rng)).collect();
            let total: f64 = draws.iter().sum();
            if !(total > 0.0 && total.is_finite()) {
                return Err(Error::InvalidImportance("dirichlet draw is not normalizable".into()));
            }
            let floored: Vec<f64> = draws.iter().map(|g| (g / total).max(DIRICHLET_FLOOR)).collect();
            ClientImportance::from_weights(&floored)
        }
        ImportanceMode::Explicit { p } => {
            check_len(p.len())?;
            ClientImportance::new(p.clone())
        }
    }
}

/// Where the local minima `θ_i*` come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ThetaStarMode {
    /// iid `N(0, scale²)` coordinates drawn from the master seed.
    Gaussian { scale: f64 },
    Explicit { points: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ObjectiveSpec {
    /// Noiseless quadratic clients updated in closed form.
    Quadratic { d: usize, theta_star: ThetaStarMode },
    /// Quadratic objectives optimized by SGD with Gaussian gradient noise.
    Sgd { d: usize, theta_star: ThetaStarMode, noise_sigma: f64 },
}

impl ObjectiveSpec {
    pub fn dim(&self) -> usize {
        match self {
            ObjectiveSpec::Quadratic { d, .. } | ObjectiveSpec::Sgd { d, .. } => *d,
        }
    }

    fn theta_star(&self) -> &ThetaStarMode {
        match self {
            ObjectiveSpec::Quadratic { theta_star, .. } | ObjectiveSpec::Sgd { theta_star, .. } => theta_star,
        }
    }
}

/// A scheme entry: either a bare name or an object with parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SchemeChoice {
    Name(SchemeKind),
    Detailed(SchemeParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeParams {
    pub kind: SchemeKind,
    /// Overrides the scenario budget.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster_matrix: Option<Vec<Vec<f64>>>,
}

impl SchemeChoice {
    pub fn kind(&self) -> SchemeKind {
        match self {
            SchemeChoice::Name(k) => *k,
            SchemeChoice::Detailed(d) => d.kind,
        }
    }

    pub fn resolve(&self, p: &ClientImportance, m: usize) -> Result<SchemeSpec> {
        let params = match self {
            SchemeChoice::Name(kind) => SchemeParams { kind: *kind, m: None, q: None, cluster_matrix: None },
            SchemeChoice::Detailed(d) => d.clone(),
        };
        let m = params.m.unwrap_or(m);
        let spec = match (params.kind, params.q, params.cluster_matrix) {
            (SchemeKind::Optimal, Some(q), None) => SchemeSpec::Optimal { q },
            (SchemeKind::Optimal, None, None) => {
                return Err(Error::InvalidScheme("optimal sampling needs `q`".into()));
            }
            (SchemeKind::Clustered, None, Some(rows)) => SchemeSpec::Clustered { matrix: ClusterMatrix::from_rows(rows) },
            (kind, None, None) => SchemeSpec::with_budget(kind, m, p)?,
            (kind, _, _) => {
                return Err(Error::InvalidScheme(format!("`q`/`cluster_matrix` do not apply to {kind}")));
            }
        };
        spec.validate(p)?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    pub n: usize,
    pub m: usize,
    pub importance: ImportanceMode,
    pub schemes: Vec<SchemeChoice>,
    pub objective: ObjectiveSpec,
    pub round: RoundConfig,
    pub rounds: usize,
    pub seeds: usize,
    pub master_seed: u64,
    /// Initial model; zeros when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta0: Option<Vec<f64>>,
}

fn config_err(path: &str, message: impl Into<String>) -> Error {
    Error::InvalidConfig { path: path.into(), message: message.into() }
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(config_err("/schema_version", format!("unsupported version {}", self.schema_version)));
        }
        if self.n == 0 {
            return Err(config_err("/n", "must be ≥ 1"));
        }
        if self.m == 0 || self.m > self.n {
            return Err(config_err("/m", format!("need 1 ≤ m ≤ n = {}", self.n)));
        }
        if self.seeds == 0 {
            return Err(config_err("/seeds", "must be ≥ 1"));
        }
        if self.schemes.is_empty() {
            return Err(config_err("/schemes", "at least one scheme is required"));
        }
        let d = self.objective.dim();
        let obj = match self.objective {
            ObjectiveSpec::Quadratic { .. } => "/objective/quadratic",
            ObjectiveSpec::Sgd { .. } => "/objective/sgd",
        };
        if d == 0 {
            return Err(config_err(&format!("{obj}/d"), "must be ≥ 1"));
        }
        match self.objective.theta_star() {
            ThetaStarMode::Gaussian { scale } if !(scale.is_finite() && *scale >= 0.0) => {
                return Err(config_err(&format!("{obj}/theta_star/gaussian/scale"), "must be finite and ≥ 0"));
            }
            ThetaStarMode::Explicit { points } => {
                if points.len() != self.n {
                    return Err(config_err(&format!("{obj}/theta_star/explicit/points"), format!("expected {} points", self.n)));
                }
                if let Some(i) = points.iter().position(|pt| pt.len() != d || pt.iter().any(|v| !v.is_finite())) {
                    return Err(config_err(&format!("{obj}/theta_star/explicit/points/{i}"), format!("need {d} finite entries")));
                }
            }
            _ => {}
        }
        if let ObjectiveSpec::Sgd { noise_sigma, .. } = &self.objective {
            if !(noise_sigma.is_finite() && *noise_sigma >= 0.0) {
                return Err(config_err("/objective/sgd/noise_sigma", "must be finite and ≥ 0"));
            }
        }
        if let Some(t0) = &self.theta0 {
            if t0.len() != d {
                return Err(config_err("/theta0", format!("expected {d} entries")));
            }
        }
        self.round.validate()?;
        let p = build_importance(&self.importance, self.n).map_err(|e| config_err("/importance", e.to_string()))?;
        for (i, s) in self.schemes.iter().enumerate() {
            s.resolve(&p, self.m).map_err(|e| config_err(&format!("/schemes/{i}"), e.to_string()))?;
        }
        Ok(())
    }
}

/// A client built from an [`ObjectiveSpec`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum ScenarioClient {
    Quadratic(QuadraticClient),
    Sgd(SgdClient<QuadraticClient>),
}

impl Client for ScenarioClient {
    fn dim(&self) -> usize {
        match self {
            ScenarioClient::Quadratic(c) => Client::dim(c),
            ScenarioClient::Sgd(c) => c.dim(),
        }
    }

    fn loss(&self, theta: &[f64]) -> f64 {
        match self {
            ScenarioClient::Quadratic(c) => Client::loss(c, theta),
            ScenarioClient::Sgd(c) => c.loss(theta),
        }
    }

    fn local_minimum(&self) -> Option<&[f64]> {
        match self {
            ScenarioClient::Quadratic(c) => c.local_minimum(),
            ScenarioClient::Sgd(c) => c.local_minimum(),
        }
    }

    fn local_update(&self, theta: &GlobalModel, cfg: &RoundConfig, rng: &mut SimRng) -> Result<Vec<f64>> {
        match self {
            ScenarioClient::Quadratic(c) => c.local_update(theta, cfg, rng),
            ScenarioClient::Sgd(c) => c.local_update(theta, cfg, rng),
        }
    }
}

pub fn build_clients(s: &Scenario) -> Vec<ScenarioClient> {
    let d = s.objective.dim();
    let points: Vec<Vec<f64>> = match s.objective.theta_star() {
        ThetaStarMode::Gaussian { scale } => {
            let mut rng = stream(s.master_seed, &[tag::CLIENTS]);
            (0..s.n)
                .map(|_| (0..d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect())
                .collect()
        }
        ThetaStarMode::Explicit { points } => points.clone(),
    };
    points
        .into_iter()
        .map(|pt| match &s.objective {
            ObjectiveSpec::Quadratic { .. } => ScenarioClient::Quadratic(QuadraticClient::new(pt)),
            ObjectiveSpec::Sgd { noise_sigma, .. } => {
                ScenarioClient::Sgd(SgdClient { objective: QuadraticClient::new(pt), noise_sigma: *noise_sigma })
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SchemeRun {
    pub label: String,
    pub scheme: String,
    pub stats: SamplingStats,
    pub theorem: TheoremQuantities,
    pub trajectories: Vec<Trajectory>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioResult {
    pub importance: ClientImportance,
    pub optimum: Option<Vec<f64>>,
    pub schemes: Vec<SchemeRun>,
    /// Uniform-vs-MD verdict at the scenario budget; absent when `n = 1`.
    pub verdict: Option<ComparisonVerdict>,
}

impl ScenarioResult {
    pub fn scheme(&self, label: &str) -> Option<&SchemeRun> {
        self.schemes.iter().find(|s| s.label == label)
    }
}

/// Labels are scheme names, suffixed with the position when a kind repeats.
pub fn scheme_labels(schemes: &[SchemeChoice]) -> Vec<String> {
    schemes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let kind = s.kind();
            if schemes.iter().filter(|o| o.kind() == kind).count() > 1 {
                format!("{}_{i}", kind.name())
            } else {
                kind.name().to_string()
            }
        })
        .collect()
}

/// Seed of cell `(scheme_index, trial)`.
pub fn cell_seed(master_seed: u64, scheme_index: usize, trial: usize) -> u64 {
    derive_seed(master_seed, &[scheme_index as u64, trial as u64])
}

pub fn run_scenario(s: &Scenario) -> Result<ScenarioResult> {
    s.validate()?;
    let p = build_importance(&s.importance, s.n)?;
    let clients = build_clients(s);
    let specs: Vec<SchemeSpec> = s.schemes.iter().map(|c| c.resolve(&p, s.m)).collect::<Result<_>>()?;
    let theta0 = GlobalModel(s.theta0.clone().unwrap_or_else(|| vec![0.0; s.objective.dim()]));

    let cells: Vec<(usize, usize)> =
        (0..specs.len()).flat_map(|k| (0..s.seeds).map(move |t| (k, t))).collect();
    let runs: Vec<Trajectory> = cells
        .par_iter()
        .map(|&(k, t)| {
            fedsim::run(&specs[k], &p, &clients, &s.round, s.rounds, cell_seed(s.master_seed, k, t), theta0.clone())
        })
        .collect::<Result<_>>()?;

    let labels = scheme_labels(&s.schemes);
    let mut runs = runs.into_iter();
    let mut schemes = Vec::with_capacity(specs.len());
    for (spec, label) in specs.iter().zip(labels) {
        let stats = closed_form_stats(spec, &p)?;
        let theorem = theorem_quantities(&stats, &p);
        let mut trajectories: Vec<Trajectory> = runs.by_ref().take(s.seeds).collect();
        for tr in &mut trajectories {
            tr.scheme = label.clone();
        }
        schemes.push(SchemeRun { label, scheme: spec.to_string(), stats, theorem, trajectories });
    }
    let minima: Option<Vec<&[f64]>> = clients.iter().map(|c| c.local_minimum()).collect();
    let optimum = minima.map(|mins| {
        let d = s.objective.dim();
        (0..d).map(|c| mins.iter().zip(p.as_slice()).map(|(x, pi)| pi * x[c]).sum()).collect()
    });
    let verdict = if s.n >= 2 { Some(corollary_compare(&p, s.m)?) } else { None };
    Ok(ScenarioResult { importance: p, optimum, schemes, verdict })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RoundSummary {
    pub round: usize,
    pub loss_mean: f64,
    pub loss_stderr: f64,
    pub dist_sq_mean: f64,
    pub dist_sq_stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SchemeSummary {
    pub label: String,
    pub seeds: usize,
    pub rounds: Vec<RoundSummary>,
    pub final_loss_mean: f64,
    pub final_loss_stderr: f64,
    pub final_dist_sq_mean: f64,
    pub final_dist_sq_stderr: f64,
    /// Trapezoidal area under the mean loss curve.
    pub loss_auc: f64,
}

fn mean_stderr(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let mut acc = oracle::Moments::default();
    xs.for_each(|x| acc.push(x));
    (acc.mean, acc.stderr())
}

/// Pointwise mean and standard error over seeds.
pub fn summarize(label: &str, trajectories: &[Trajectory]) -> Result<SchemeSummary> {
    let Some(first) = trajectories.first() else {
        return Err(Error::InvalidConfig { path: label.into(), message: "no trajectories to summarize".into() });
    };
    let len = first.records.len();
    if trajectories.iter().any(|t| t.records.len() != len) {
        return Err(Error::InvalidConfig { path: label.into(), message: "trajectories differ in length".into() });
    }
    let rounds: Vec<RoundSummary> = (0..len)
        .map(|r| {
            let (loss_mean, loss_stderr) = mean_stderr(trajectories.iter().map(move |t| t.records[r].loss));
            let (dist_sq_mean, dist_sq_stderr) = mean_stderr(trajectories.iter().map(move |t| t.records[r].dist_sq));
            RoundSummary { round: first.records[r].round, loss_mean, loss_stderr, dist_sq_mean, dist_sq_stderr }
        })
        .collect();
    let last = *rounds.last().expect("non-empty");
    let loss_auc = rounds.windows(2).map(|w| 0.5 * (w[0].loss_mean + w[1].loss_mean)).sum();
    Ok(SchemeSummary {
        label: label.to_string(),
        seeds: trajectories.len(),
        final_loss_mean: last.loss_mean,
        final_loss_stderr: last.loss_stderr,
        final_dist_sq_mean: last.dist_sq_mean,
        final_dist_sq_stderr: last.dist_sq_stderr,
        loss_auc,
        rounds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DifferenceCurve {
    pub minuend: String,
    pub subtrahend: String,
    pub rounds: Vec<RoundSummary>,
}

/// `a − b` per round, paired by seed position.
pub fn difference_curve(a_label: &str, a: &[Trajectory], b_label: &str, b: &[Trajectory]) -> Result<DifferenceCurve> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::InvalidConfig {
            path: format!("{a_label}-{b_label}"),
            message: "difference curves need the same non-zero number of seeds".into(),
        });
    }
    let paired: Vec<Trajectory> = a
        .iter()
        .zip(b)
        .map(|(x, y)| Trajectory {
            scheme: format!("{a_label}-{b_label}"),
            seed: x.seed,
            records: x
                .records
                .iter()
                .zip(&y.records)
                .map(|(rx, ry)| fedsim::RoundRecord {
                    round: rx.round,
                    loss: rx.loss - ry.loss,
                    dist_sq: rx.dist_sq - ry.dist_sq,
                    n_participants: 0,
                    weight_sum: 0.0,
                })
                .collect(),
        })
        .collect();
    let s = summarize(&format!("{a_label}-{b_label}"), &paired)?;
    Ok(DifferenceCurve { minuend: a_label.into(), subtrahend: b_label.into(), rounds: s.rounds })
}

/// Bounds for [`verify_all`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerificationBudget {
    pub max_n: usize,
    pub max_m: usize,
    /// Fuzzed cases per family.
    pub cases: usize,
    /// Monte-Carlo draws per estimate.
    pub trials: usize,
    pub seed: u64,
}

impl Default for VerificationBudget {
    fn default() -> Self {
        Self { max_n: 6, max_m: 3, cases: 20, trials: 100_000, seed: 0x5EED }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub cases: usize,
    /// Largest absolute error, or largest |z|-score for Monte-Carlo checks.
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationReport {
    pub checks: Vec<CheckResult>,
}

impl VerificationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

#[derive(Default)]
struct Tally {
    cases: usize,
    max_error: f64,
    failed: bool,
}

impl Tally {
    fn record(&mut self, err: f64) {
        self.cases += 1;
        if err.is_nan() {
            self.failed = true;
        } else {
            self.max_error = self.max_error.max(err);
        }
    }

    fn flag(&mut self) {
        self.failed = true;
    }

    fn finish(self, name: impl Into<String>, tolerance: f64) -> CheckResult {
        CheckResult {
            name: name.into(),
            cases: self.cases,
            passed: !self.failed && self.cases > 0 && self.max_error <= tolerance,
            max_error: self.max_error,
            tolerance,
        }
    }
}

/// Source of closed-form statistics; swapped in tests to inject faults.
pub type StatsProvider<'a> = &'a (dyn Fn(&SchemeSpec, &ClientImportance) -> Result<SamplingStats> + Sync);

pub fn random_importance<R: Rng>(n: usize, rng: &mut R) -> ClientImportance {
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    ClientImportance::from_weights(&w).expect("positive weights")
}

/// The scalar-α schemes exercised by the closed-form table, for a given
/// importance vector and budget.
pub fn table_schemes<R: Rng>(p: &ClientImportance, m: usize, rng: &mut R) -> Vec<SchemeSpec> {
    let n = p.len();
    let q: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..=1.0)).collect();
    let m_pb = m.min((1.0 / p.max()).floor() as usize).max(1);
    vec![
        SchemeSpec::Full,
        SchemeSpec::Md { m },
        SchemeSpec::Uniform { m },
        SchemeSpec::Binomial { m },
        SchemeSpec::PoissonBinomial { m: m_pb },
        SchemeSpec::Optimal { q },
        SchemeSpec::PoissonReweighted { m },
    ]
}

pub fn verify_all(budget: &VerificationBudget) -> VerificationReport {
    verify_with(budget, &closed_form_stats)
}

/// Runs the suite, comparing enumerated and simulated moments against
/// whatever `provider` claims.
pub fn verify_with(budget: &VerificationBudget, provider: StatsProvider<'_>) -> VerificationReport {
    let mut checks = Vec::new();
    let mut rng = stream(budget.seed, &[tag::FUZZ]);
    let max_n = budget.max_n.max(2);
    let max_m = budget.max_m.max(1);
    let bernoulli_n = max_n.min(oracle::MAX_BERNOULLI_CLIENTS);

    // Closed-form table and the sum-of-weights identity.
    let kinds = [
        SchemeKind::Full,
        SchemeKind::Md,
        SchemeKind::Uniform,
        SchemeKind::Binomial,
        SchemeKind::PoissonBinomial,
        SchemeKind::Optimal,
        SchemeKind::PoissonReweighted,
    ];
    let fields = ["mean", "variance", "covariance", "weight_sum_variance", "expected_clients", "clients_variance"];
    let mut table: Vec<Vec<Tally>> = kinds.iter().map(|_| fields.iter().map(|_| Tally::default()).collect()).collect();
    let mut identity: Vec<Tally> = kinds.iter().map(|_| Tally::default()).collect();
    for _ in 0..budget.cases {
        let n = rng.random_range(2..=max_n);
        let m = rng.random_range(1..=max_m.min(n));
        let p = random_importance(n, &mut rng);
        for (k, spec) in table_schemes(&p, m, &mut rng).iter().enumerate() {
            if !oracle::enumerable(spec.kind(), n, spec.m().unwrap_or(1)) {
                continue;
            }
            let tallies = &mut table[k];
            let (mom, st) = match (oracle::enumerate_moments(spec, &p), provider(spec, &p)) {
                (Ok(mom), Ok(st)) => (mom, st),
                _ => {
                    tallies.iter_mut().for_each(Tally::flag);
                    continue;
                }
            };
            tallies[0].record((0..n).map(|i| (mom.mean[i] - p[i]).abs()).fold(0.0, f64::max));
            tallies[1].record((0..n).map(|i| (mom.cov[i][i] - st.var_weight[i]).abs()).fold(0.0, f64::max));
            let mut cov_err: f64 = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        cov_err = cov_err.max((mom.cov[i][j] + st.alpha * p[i] * p[j]).abs());
                    }
                }
            }
            tallies[2].record(cov_err);
            tallies[3].record((mom.var_weight_sum - st.var_weight_sum).abs());
            tallies[4].record((mom.mean_clients - st.expected_clients).abs());
            tallies[5].record(st.var_clients.map_or(0.0, |v| (mom.var_clients - v).abs()));

            let alpha_ok = (0.0..=1.0).contains(&st.alpha);
            let gap = (st.var_weight_sum - (st.sigma_q - st.alpha * (1.0 - p.sum_sq()))).abs();
            identity[k].record(if alpha_ok { gap } else { f64::NAN });
        }
    }
    for ((kind, tallies), ident) in kinds.iter().zip(table).zip(identity) {
        for (field, tally) in fields.iter().zip(tallies) {
            checks.push(tally.finish(format!("table/{}/{field}", kind.name()), EXACT_TOL));
        }
        checks.push(ident.finish(format!("sum_identity/{}", kind.name()), EXACT_TOL));
    }

    // Bilinear identities.
    let mut md_bilinear = Tally::default();
    let (n5, m3) = (max_n.min(5), max_m.min(3));
    for _ in 0..budget.cases {
        let p = random_importance(n5, &mut rng);
        let y: Vec<f64> = (0..n5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let z: Vec<f64> = (0..n5).map(|_| rng.random_range(-1.0..1.0)).collect();
        match oracle::check_lemma_md_bilinear(&y, &z, &p, m3) {
            Ok(r) => md_bilinear.record(r.abs_error()),
            Err(_) => md_bilinear.flag(),
        }
    }
    checks.push(md_bilinear.finish("bilinear/md", 1e-12));
    let mut pb_bilinear = Tally::default();
    for _ in 0..budget.cases {
        let r: Vec<f64> = (0..bernoulli_n).map(|_| rng.random_range(0.0..=1.0)).collect();
        let y: Vec<f64> = (0..bernoulli_n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let z: Vec<f64> = (0..bernoulli_n).map(|_| rng.random_range(-1.0..1.0)).collect();
        match oracle::check_lemma_poisson_bilinear(&y, &z, &r) {
            Ok(rep) => pb_bilinear.record(rep.abs_error()),
            Err(_) => pb_bilinear.flag(),
        }
    }
    checks.push(pb_bilinear.finish("bilinear/poisson", 1e-12));

    // Decomposition identity, through the provider's γ_i and α.
    let (n4, m2) = (max_n.min(4), max_m.min(2));
    for kind in [SchemeKind::Md, SchemeKind::Uniform, SchemeKind::Binomial, SchemeKind::PoissonBinomial] {
        let mut tally = Tally::default();
        for _ in 0..budget.cases {
            let p = random_importance(n4, &mut rng);
            let m = if kind == SchemeKind::PoissonBinomial { m2.min((1.0 / p.max()).floor() as usize).max(1) } else { m2 };
            let x: Vec<Vec<f64>> = (0..n4).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let Ok(spec) = SchemeSpec::with_budget(kind, m, &p) else {
                tally.flag();
                continue;
            };
            match decomposition_error(&spec, &p, &x, provider) {
                Ok(e) => tally.record(e),
                Err(_) => tally.flag(),
            }
        }
        checks.push(tally.finish(format!("decomposition/{}", kind.name()), 1e-12));
    }

    // Clustered moments and dominance over MD.
    let mut clustered = Tally::default();
    let mut clustered_equal = Tally::default();
    for _ in 0..budget.cases {
        let n = rng.random_range(2..=max_n);
        let m = rng.random_range(1..=max_m.min(n));
        let p = random_importance(n, &mut rng);
        let wf = build_clustered_matrix(&p, m);
        match oracle::clustered_variance_report(&p, &wf) {
            Ok(r) => {
                let excess = (r.sigma_clustered - r.sigma_md).max(0.0);
                clustered.record(r.max_var_error.max(r.max_cov_error).max(excess));
            }
            Err(_) => clustered.flag(),
        }
        let rows_p = ClusterMatrix::from_rows(vec![p.as_slice().to_vec(); m]);
        match oracle::clustered_variance_report(&p, &rows_p) {
            Ok(r) => clustered_equal.record((r.sigma_clustered - r.sigma_md).abs().max(r.max_cov_error)),
            Err(_) => clustered_equal.flag(),
        }
    }
    checks.push(clustered.finish("clustered/water_filled", 1e-12));
    checks.push(clustered_equal.finish("clustered/rows_equal_p", 1e-12));

    // Uniform-vs-MD threshold against the Σ/γ ordering.
    let mut threshold = Tally::default();
    for _ in 0..budget.cases.max(1) * 10 {
        let n = rng.random_range(2..=20usize);
        let m = rng.random_range(1..n);
        let p = skewed_importance(n, &mut rng);
        let (md, un) = (SchemeSpec::Md { m }, SchemeSpec::Uniform { m });
        match (provider(&md, &p), provider(&un, &p)) {
            (Ok(a), Ok(b)) => {
                let (tm, tu) = (theorem_quantities(&a, &p), theorem_quantities(&b, &p));
                let ordered = tu.sigma <= tm.sigma + stats::COMPARISON_SLACK && tu.gamma <= tm.gamma + stats::COMPARISON_SLACK;
                let predicate = p.sum_sq() <= 1.0 / (n - m + 1) as f64 + stats::COMPARISON_SLACK;
                threshold.record(if ordered == predicate { 0.0 } else { 1.0 });
            }
            _ => threshold.flag(),
        }
    }
    checks.push(threshold.finish("threshold/uniform_vs_md", 0.0));

    // One-round quadratic recursion.
    for kind in [SchemeKind::Md, SchemeKind::Uniform, SchemeKind::Binomial, SchemeKind::PoissonBinomial] {
        let mut tally = Tally::default();
        for _ in 0..budget.cases.div_ceil(2) {
            let p = random_importance(n4, &mut rng);
            let m = if kind == SchemeKind::PoissonBinomial { m2.min((1.0 / p.max()).floor() as usize).max(1) } else { m2 };
            let Ok(spec) = SchemeSpec::with_budget(kind, m, &p) else {
                tally.flag();
                continue;
            };
            let clients: Vec<QuadraticClient> =
                (0..n4).map(|_| QuadraticClient::new((0..2).map(|_| rng.random_range(-2.0..2.0)).collect())).collect();
            let theta = GlobalModel((0..2).map(|_| rng.random_range(-2.0..2.0)).collect());
            let cfg = RoundConfig {
                local_steps: rng.random_range(1..=10),
                eta_l: rng.random_range(0.05..1.0),
                eta_g: rng.random_range(0.5..1.5),
            };
            match (enumerated_next_distance(&spec, &p, &clients, &cfg, &theta), provider(&spec, &p)) {
                (Ok(exact), Ok(st)) => match fedsim::expected_distance_recursion(&theta, &p, &clients, &cfg, &st) {
                    Ok(pred) => tally.record((exact - pred).abs()),
                    Err(_) => tally.flag(),
                },
                _ => tally.flag(),
            }
        }
        checks.push(tally.finish(format!("quadratic_recursion/{}", kind.name()), 1e-12));
    }

    // Monte-Carlo: unbiasedness, weight variances and participant counts.
    if budget.trials >= 2 {
        checks.extend(monte_carlo_checks(budget, provider, &mut rng));
    }
    VerificationReport { checks }
}

/// Spread-out importance vectors so both sides of the threshold occur.
fn skewed_importance<R: Rng>(n: usize, rng: &mut R) -> ClientImportance {
    let power = rng.random_range(0.0..4.0);
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.01f64..1.0).powf(power)).collect();
    ClientImportance::from_weights(&w).expect("positive weights")
}

fn decomposition_error(spec: &SchemeSpec, p: &ClientImportance, x: &[Vec<f64>], provider: StatsProvider<'_>) -> Result<f64> {
    let st = provider(spec, p)?;
    let d = x[0].len();
    let exact = oracle::enumerate_expectation(spec, p, |w| {
        let mut acc = vec![0.0; d];
        for (wi, xi) in w.omega().iter().zip(x) {
            for (a, v) in acc.iter_mut().zip(xi) {
                *a += wi * v;
            }
        }
        acc.iter().map(|v| v * v).sum()
    })?;
    let mut mean = vec![0.0; d];
    for (pi, xi) in p.as_slice().iter().zip(x) {
        for (a, v) in mean.iter_mut().zip(xi) {
            *a += pi * v;
        }
    }
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
    let closed = st.gamma_i.iter().zip(x).map(|(g, xi)| g * norm(xi)).sum::<f64>() + (1.0 - st.alpha) * norm(&mean);
    Ok((exact - closed).abs())
}

/// `E[‖θ⁺ − θ*‖²]` by enumerating every sampling outcome of one round.
pub fn enumerated_next_distance(
    spec: &SchemeSpec,
    p: &ClientImportance,
    clients: &[QuadraticClient],
    cfg: &RoundConfig,
    theta: &GlobalModel,
) -> Result<f64> {
    let opt = fedsim::global_optimum_quadratic(p, clients)?;
    let locals: Vec<(usize, Vec<f64>)> =
        clients.iter().enumerate().map(|(i, c)| (i, fedsim::local_update_quadratic(theta, c, cfg))).collect();
    let mut acc = 0.0;
    let mut failure = None;
    oracle::for_each_outcome(spec, p, |prob, w| match fedsim::aggregate(theta, &locals, w, cfg.eta_g) {
        Ok(next) => acc += prob * next.0.iter().zip(&opt).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(),
        Err(e) => failure = Some(e),
    })?;
    match failure {
        Some(e) => Err(e),
        None => Ok(acc),
    }
}

fn z_score(estimate: f64, stderr: f64, target: f64) -> f64 {
    let d = (estimate - target).abs();
    if d <= 1e-12 * target.abs().max(1.0) {
        0.0
    } else if stderr > 0.0 {
        d / stderr
    } else {
        f64::INFINITY
    }
}

fn monte_carlo_checks<R: Rng>(budget: &VerificationBudget, provider: StatsProvider<'_>, rng: &mut R) -> Vec<CheckResult> {
    let n = budget.max_n.clamp(2, 12);
    let m = budget.max_m.clamp(1, n);
    let p = random_importance(n, rng);
    let mut out = Vec::new();
    let mut specs = table_schemes(&p, m, rng);
    specs.push(SchemeSpec::Clustered { matrix: build_clustered_matrix(&p, m) });
    for (k, spec) in specs.iter().enumerate() {
        let Ok(st) = provider(spec, &p) else {
            let mut t = Tally::default();
            t.flag();
            out.push(t.finish(format!("mc/{}", spec.kind().name()), MC_SIGMAS));
            continue;
        };
        // ω_i, (ω_i − p_i)², and N
        let arity = 2 * n + 1;
        let seed = derive_seed(budget.seed, &[tag::MONTE_CARLO, k as u64]);
        let est = oracle::mc_estimate_many(
            spec,
            &p,
            |w, buf| {
                for i in 0..n {
                    buf[i] = w.weight(i);
                    buf[n + i] = (w.weight(i) - p[i]).powi(2);
                }
                buf[2 * n] = w.participants_count() as f64;
            },
            arity,
            budget.trials,
            seed,
        );
        let Ok(est) = est else {
            let mut t = Tally::default();
            t.flag();
            out.push(t.finish(format!("mc/{}", spec.kind().name()), MC_SIGMAS));
            continue;
        };
        let mut unbiased = Tally::default();
        let mut variance = Tally::default();
        for i in 0..n {
            unbiased.record(z_score(est[i].mean, est[i].stderr, p[i]));
            variance.record(z_score(est[n + i].mean, est[n + i].stderr, st.var_weight[i]));
        }
        let mut clients = Tally::default();
        let count = est[2 * n];
        clients.record(z_score(count.mean, count.stderr, st.expected_clients));
        if let Some(v) = st.var_clients {
            clients.record(z_score(count.variance, count.variance_stderr, v));
        }
        let name = spec.kind().name();
        out.push(unbiased.finish(format!("mc/{name}/mean"), MC_SIGMAS));
        out.push(variance.finish(format!("mc/{name}/variance"), MC_SIGMAS));
        out.push(clients.finish(format!("mc/{name}/clients"), MC_SIGMAS));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scenario(schemes: Vec<SchemeChoice>, importance: ImportanceMode, seeds: usize) -> Scenario {
        Scenario {
            schema_version: SCHEMA_VERSION,
            n: 4,
            m: 2,
            importance,
            schemes,
            objective: ObjectiveSpec::Quadratic { d: 2, theta_star: ThetaStarMode::Gaussian { scale: 1.0 } },
            round: RoundConfig { local_steps: 5, eta_l: 0.1, eta_g: 1.0 },
            rounds: 6,
            seeds,
            master_seed: 17,
            theta0: None,
        }
    }

    #[test]
    fn importance_modes() {
        assert_eq!(build_importance(&ImportanceMode::Equal, 4).unwrap().as_slice(), &[0.25; 4]);
        let counts = vec![100.0, 250.0, 500.0, 750.0, 1000.0];
        let p = build_importance(&ImportanceMode::Proportional { counts: counts.clone() }, 5).unwrap();
        for (pi, c) in p.as_slice().iter().zip(&counts) {
            assert!((pi - c / 2600.0).abs() < 1e-15);
        }
        assert!((p[0] - 0.0385).abs() < 5e-5 && (p[4] - 0.3846).abs() < 5e-5);
        assert!(matches!(
            build_importance(&ImportanceMode::Explicit { p: vec![0.5, 0.5, 0.0] }, 3),
            Err(Error::InvalidImportance(_))
        ));
        assert!(build_importance(&ImportanceMode::Proportional { counts }, 4).is_err());
    }

    #[test]
    fn dirichlet_is_seeded_and_floored() {
        let mode = ImportanceMode::Dirichlet { concentration: 0.01, seed: 3 };
        let a = build_importance(&mode, 50).unwrap();
        let b = build_importance(&mode, 50).unwrap();
        assert_eq!(a, b);
        assert!(a.as_slice().iter().all(|v| *v >= DIRICHLET_FLOOR * 0.5));
        assert!(build_importance(&ImportanceMode::Dirichlet { concentration: -1.0, seed: 3 }, 5).is_err());
    }

    #[test]
    fn full_participation_is_seed_independent() {
        let s = scenario(vec![SchemeChoice::Name(SchemeKind::Full)], ImportanceMode::Equal, 5);
        let r = run_scenario(&s).unwrap();
        let trs = &r.schemes[0].trajectories;
        for t in trs {
            assert_eq!(t.records, trs[0].records);
        }
        let sum = summarize("full", trs).unwrap();
        assert!(sum.rounds.iter().all(|x| x.loss_stderr == 0.0 && x.dist_sq_stderr == 0.0));
        let diff = difference_curve("full", trs, "full", trs).unwrap();
        assert!(diff.rounds.iter().all(|x| x.loss_mean == 0.0 && x.dist_sq_mean == 0.0));
    }

    #[test]
    fn equal_importance_verdict() {
        let s = scenario(
            vec![SchemeChoice::Name(SchemeKind::Md), SchemeChoice::Name(SchemeKind::Uniform)],
            ImportanceMode::Equal,
            2,
        );
        let r = run_scenario(&s).unwrap();
        assert!(r.verdict.unwrap().uniform_better);
        assert_eq!(r.schemes.len(), 2);
        assert_eq!(r.schemes[0].trajectories.len(), 2);
        assert_eq!(r.schemes[1].trajectories[0].records.len(), 7);
    }

    #[test]
    fn lognormal_counts_flip_the_verdict() {
        use rand_distr::LogNormal;
        let mut rng = stream(2024, &[]);
        let ln = LogNormal::new(0.0, 1.5).unwrap();
        let p = loop {
            let counts: Vec<f64> = (0..10).map(|_| Distribution::<f64>::sample(&ln, &mut rng).ceil()).collect();
            let p = build_importance(&ImportanceMode::Proportional { counts }, 10).unwrap();
            if p.sum_sq() > 1.0 / 6.0 {
                break p;
            }
        };
        let mut s = scenario(
            vec![SchemeChoice::Name(SchemeKind::Md), SchemeChoice::Name(SchemeKind::Uniform)],
            ImportanceMode::Explicit { p: p.as_slice().to_vec() },
            1,
        );
        s.n = 10;
        s.m = 5;
        let v = run_scenario(&s).unwrap().verdict.unwrap();
        assert!(!v.uniform_better);
        assert!(v.sum_p_sq > v.threshold);
    }

    #[test]
    fn reproducible_across_runs() {
        let s = scenario(
            vec![SchemeChoice::Name(SchemeKind::Md), SchemeChoice::Name(SchemeKind::Clustered)],
            ImportanceMode::Proportional { counts: vec![1.0, 2.0, 3.0, 4.0] },
            4,
        );
        let a = run_scenario(&s).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| run_scenario(&s).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn weight_sum_diagnostic() {
        let mut s = scenario(
            vec![
                SchemeChoice::Name(SchemeKind::Md),
                SchemeChoice::Name(SchemeKind::Clustered),
                SchemeChoice::Name(SchemeKind::Uniform),
            ],
            ImportanceMode::Proportional { counts: vec![1.0, 2.0, 3.0, 4.0] },
            400,
        );
        s.rounds = 50;
        let r = run_scenario(&s).unwrap();
        for label in ["md", "clustered"] {
            for t in &r.scheme(label).unwrap().trajectories {
                assert!(t.records.iter().all(|x| (x.weight_sum - 1.0).abs() < 1e-15));
            }
        }
        let uni = r.scheme("uniform").unwrap();
        let mut acc = oracle::Moments::default();
        for t in &uni.trajectories {
            t.records[1..].iter().for_each(|x| acc.push(x.weight_sum));
        }
        let target = uni.stats.var_weight_sum;
        assert!((acc.variance() - target).abs() < MC_SIGMAS * acc.variance_stderr(), "{} vs {target}", acc.variance());
    }

    #[test]
    fn sgd_objective_runs() {
        let mut s = scenario(vec![SchemeChoice::Name(SchemeKind::Uniform)], ImportanceMode::Equal, 2);
        s.objective = ObjectiveSpec::Sgd { d: 2, theta_star: ThetaStarMode::Gaussian { scale: 1.0 }, noise_sigma: 0.1 };
        let r = run_scenario(&s).unwrap();
        let tr = &r.schemes[0].trajectories;
        assert_ne!(tr[0].records, tr[1].records);
        assert!(tr[0].records.iter().all(|x| x.loss.is_finite() && x.dist_sq.is_finite()));
    }

    #[test]
    fn scenario_validation_paths() {
        let mut s = scenario(vec![SchemeChoice::Name(SchemeKind::Md)], ImportanceMode::Equal, 1);
        s.m = 5;
        assert!(matches!(s.validate(), Err(Error::InvalidConfig { ref path, .. }) if path == "/m"));
        let mut s = scenario(vec![SchemeChoice::Name(SchemeKind::PoissonBinomial)], ImportanceMode::Explicit { p: vec![0.7, 0.1, 0.1, 0.1] }, 1);
        assert!(matches!(s.validate(), Err(Error::InvalidConfig { ref path, .. }) if path == "/schemes/0"));
        s.schemes = vec![SchemeChoice::Name(SchemeKind::Optimal)];
        assert!(s.validate().is_err());
        s.schemes = vec![SchemeChoice::Detailed(SchemeParams {
            kind: SchemeKind::Optimal,
            m: None,
            q: Some(vec![0.5; 4]),
            cluster_matrix: None,
        })];
        s.validate().unwrap();
    }

    #[test]
    fn labels_disambiguate_repeats() {
        let schemes = vec![
            SchemeChoice::Name(SchemeKind::Md),
            SchemeChoice::Detailed(SchemeParams { kind: SchemeKind::Md, m: Some(3), q: None, cluster_matrix: None }),
            SchemeChoice::Name(SchemeKind::Uniform),
        ];
        assert_eq!(scheme_labels(&schemes), vec!["md_0", "md_1", "uniform"]);
    }

    #[test]
    fn summarize_duplicates() {
        let s = scenario(vec![SchemeChoice::Name(SchemeKind::Md)], ImportanceMode::Equal, 1);
        let r = run_scenario(&s).unwrap();
        let one = &r.schemes[0].trajectories[0];
        let dup = vec![one.clone(); 5];
        let sum = summarize("md", &dup).unwrap();
        for (row, rec) in sum.rounds.iter().zip(&one.records) {
            assert_eq!(row.loss_stderr, 0.0);
            assert!((row.loss_mean - rec.loss).abs() < 1e-15);
        }
        assert!(summarize("md", &[]).is_err());
    }

    #[test]
    fn verify_default_budget_passes() {
        let budget = VerificationBudget { trials: 20_000, ..Default::default() };
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let start = std::time::Instant::now();
        let report = pool.install(|| verify_all(&budget));
        assert!(start.elapsed() < std::time::Duration::from_secs(60));
        for c in &report.checks {
            assert!(c.passed, "{c:?}");
        }
    }

    #[test]
    fn verify_catches_wrong_uniform_alpha() {
        let wrong = |s: &SchemeSpec, p: &ClientImportance| {
            let mut st = closed_form_stats(s, p)?;
            if let SchemeSpec::Uniform { m } = s {
                let (n, m) = (p.len() as f64, *m as f64);
                st.alpha = (n - m) / (m * n);
            }
            Ok(st)
        };
        let budget = VerificationBudget { trials: 0, ..Default::default() };
        let report = verify_with(&budget, &wrong);
        assert!(!report.check("table/uniform/covariance").unwrap().passed);
        assert!(report.check("table/md/covariance").unwrap().passed);
        assert!(!report.all_passed());
    }
}
