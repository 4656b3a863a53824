// Copyright 2026 The fl-sampling Authors
// SPDX-License-Identifier: Apache-2.0

//! Closed-form aggregation-weight statistics.
//!
//! For a scheme with `E[ω_i] = p_i` the quantities that drive FedAvg
//! convergence are the weight variances, the covariance parameter `α`
//! (`Cov(ω_i, ω_j) = −α p_i p_j`), and their combinations
//! `Σ = Σ_i Var[ω_i]` and `γ = Σ + α Σ_i p_i²`. The variance of the weight
//! sum follows from them: `Var[Σω] = Σ − α (1 − Σ p_i²)`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::importance::ClientImportance;
use crate::sampling::{ClusterMatrix, SchemeKind, SchemeSpec};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SamplingStats {
    pub scheme: SchemeKind,
    /// `Var[ω_i]` per client.
    pub var_weight: Vec<f64>,
    /// Covariance parameter. For clustered sampling this is the MD value
    /// `1/m` and `alpha_exact` is false.
    pub alpha: f64,
    pub alpha_exact: bool,
    /// `Var[Σ_i ω_i]`.
    pub var_weight_sum: f64,
    /// `Σ = Σ_i Var[ω_i]`.
    pub sigma_q: f64,
    /// `γ = Σ + α Σ_i p_i²`.
    pub gamma_q: f64,
    /// `γ_i = Var[ω_i] + α p_i²`.
    pub gamma_i: Vec<f64>,
    /// `E[N]`, the expected number of distinct participants.
    pub expected_clients: f64,
    pub var_clients: Option<f64>,
}

impl SamplingStats {
    #[allow(clippy::too_many_arguments)]
    fn assemble(
        scheme: SchemeKind,
        p: &ClientImportance,
        var_weight: Vec<f64>,
        alpha: f64,
        alpha_exact: bool,
        var_weight_sum: f64,
        expected_clients: f64,
        var_clients: Option<f64>,
    ) -> Self {
        let sigma_q: f64 = var_weight.iter().sum();
        let gamma_q = sigma_q + alpha * p.sum_sq();
        let gamma_i = var_weight.iter().zip(p.as_slice()).map(|(v, pi)| v + alpha * pi * pi).collect();
        Self {
            scheme,
            var_weight,
            alpha,
            alpha_exact,
            var_weight_sum,
            sigma_q,
            gamma_q,
            gamma_i,
            expected_clients,
            var_clients,
        }
    }

    /// Checks the sum-of-weights identity; schemes without an exact scalar
    /// `α` are skipped.
    pub fn satisfies_sum_identity(&self, p: &ClientImportance, tol: f64) -> bool {
        !self.alpha_exact || (self.var_weight_sum - (self.sigma_q - self.alpha * (1.0 - p.sum_sq()))).abs() <= tol
    }
}

pub fn closed_form_stats(scheme: &SchemeSpec, p: &ClientImportance) -> Result<SamplingStats> {
    scheme.validate(p)?;
    let n = p.len();
    let nf = n as f64;
    let ps = p.as_slice();
    let sum_sq = p.sum_sq();
    let kind = scheme.kind();
    let stats = match scheme {
        SchemeSpec::Full => SamplingStats::assemble(kind, p, vec![0.0; n], 0.0, true, 0.0, nf, Some(0.0)),
        SchemeSpec::Md { m } => {
            let mf = *m as f64;
            let var = ps.iter().map(|pi| (pi - pi * pi) / mf).collect();
            let miss: Vec<f64> = ps.iter().map(|pi| (1.0 - pi).powi(*m as i32)).collect();
            let expected = nf - miss.iter().sum::<f64>();
            let var_n = inclusion_count_variance(n, &miss, |i, j| (1.0 - ps[i] - ps[j]).max(0.0).powi(*m as i32));
            SamplingStats::assemble(kind, p, var, 1.0 / mf, true, 0.0, expected, Some(var_n))
        }
        SchemeSpec::Uniform { m } => {
            let mf = *m as f64;
            let var = ps.iter().map(|pi| (nf / mf - 1.0) * pi * pi).collect();
            let alpha = uniform_alpha(n, *m);
            let var_sum = alpha * (nf * sum_sq - 1.0);
            SamplingStats::assemble(kind, p, var, alpha, true, var_sum, mf, Some(0.0))
        }
        SchemeSpec::Binomial { m } | SchemeSpec::PoissonReweighted { m } => {
            let mf = *m as f64;
            let c = (nf - mf) / mf;
            let var = ps.iter().map(|pi| c * pi * pi).collect();
            SamplingStats::assemble(kind, p, var, 0.0, true, c * sum_sq, mf, Some(mf - mf * mf / nf))
        }
        SchemeSpec::PoissonBinomial { m } => {
            let mf = *m as f64;
            let var = ps.iter().map(|pi| pi * (1.0 - mf * pi) / mf).collect();
            SamplingStats::assemble(kind, p, var, 0.0, true, 1.0 / mf - sum_sq, mf, Some(mf - mf * mf * sum_sq))
        }
        SchemeSpec::Optimal { q } => {
            let var = ps.iter().zip(q).map(|(pi, qi)| (1.0 - qi) / qi * pi * pi).collect::<Vec<_>>();
            let var_sum = var.iter().sum();
            let expected = q.iter().sum();
            let var_n = q.iter().map(|qi| qi * (1.0 - qi)).sum();
            SamplingStats::assemble(kind, p, var, 0.0, true, var_sum, expected, Some(var_n))
        }
        SchemeSpec::Clustered { matrix } => {
            let mf = matrix.m() as f64;
            let var = (0..n)
                .map(|i| ps[i] / mf - matrix.rows().iter().map(|r| r[i] * r[i]).sum::<f64>() / (mf * mf))
                .collect();
            let miss: Vec<f64> = (0..n).map(|i| matrix.rows().iter().map(|r| 1.0 - r[i]).product()).collect();
            let expected = nf - miss.iter().sum::<f64>();
            let var_n = inclusion_count_variance(n, &miss, |i, j| {
                matrix.rows().iter().map(|r| (1.0 - r[i] - r[j]).max(0.0)).product()
            });
            SamplingStats::assemble(kind, p, var, 1.0 / mf, false, 0.0, expected, Some(var_n))
        }
    };
    Ok(stats)
}

/// `α` for uniform sampling without replacement; zero when `n = 1`.
pub fn uniform_alpha(n: usize, m: usize) -> f64 {
    if n <= 1 {
        return 0.0;
    }
    (n - m) as f64 / (m as f64 * (n as f64 - 1.0))
}

// Var[N] for N = Σ 1{i ∈ S} given P(i ∉ S) and P(i ∉ S, j ∉ S).
fn inclusion_count_variance(n: usize, miss: &[f64], miss_both: impl Fn(usize, usize) -> f64) -> f64 {
    let mut var = 0.0;
    for i in 0..n {
        var += miss[i] * (1.0 - miss[i]);
        for j in (i + 1)..n {
            var += 2.0 * (miss_both(i, j) - miss[i] * miss[j]);
        }
    }
    var
}

/// Full `n × n` covariance matrix of the weights.
pub fn closed_form_covariance(scheme: &SchemeSpec, p: &ClientImportance) -> Result<Vec<Vec<f64>>> {
    let stats = closed_form_stats(scheme, p)?;
    let n = p.len();
    let mut cov = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            cov[i][j] = if i == j {
                stats.var_weight[i]
            } else {
                match scheme {
                    SchemeSpec::Clustered { matrix } => clustered_covariance(matrix, i, j),
                    _ => -stats.alpha * p[i] * p[j],
                }
            };
        }
    }
    Ok(cov)
}

/// `Cov(ω_i, ω_j) = −(1/m²) Σ_k r_{k,i} r_{k,j}` for `i ≠ j`.
pub fn clustered_covariance(matrix: &ClusterMatrix, i: usize, j: usize) -> f64 {
    let m = matrix.m() as f64;
    -matrix.rows().iter().map(|r| r[i] * r[j]).sum::<f64>() / (m * m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TheoremQuantities {
    pub sigma: f64,
    pub gamma: f64,
}

pub fn theorem_quantities(stats: &SamplingStats, p: &ClientImportance) -> TheoremQuantities {
    let sigma = stats.var_weight.iter().sum();
    TheoremQuantities { sigma, gamma: sigma + stats.alpha * p.sum_sq() }
}

/// Outcome of the uniform-vs-MD comparison at budget `m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ComparisonVerdict {
    pub uniform_better: bool,
    /// `1 / (n − m + 1)`.
    pub threshold: f64,
    pub sum_p_sq: f64,
    /// Set when `m = n`: the threshold is 1 and the verdict is vacuous.
    pub degenerate: bool,
    pub sigma_md: f64,
    pub gamma_md: f64,
    pub sigma_uniform: f64,
    pub gamma_uniform: f64,
}

/// Slack used when comparing Σ and γ across schemes.
pub const COMPARISON_SLACK: f64 = 1e-12;

pub fn corollary_compare(p: &ClientImportance, m: usize) -> Result<ComparisonVerdict> {
    let n = p.len();
    if n < 2 || m == 0 || m > n {
        return Err(Error::InvalidScheme(format!("comparison needs n ≥ 2 and 1 ≤ m ≤ n, got n = {n}, m = {m}")));
    }
    let (nf, mf) = (n as f64, m as f64);
    let sum_p_sq = p.sum_sq();
    let threshold = 1.0 / (nf - mf + 1.0);
    let sigma_md = (1.0 - sum_p_sq) / mf;
    let gamma_md = 1.0 / mf;
    let sigma_uniform = (nf / mf - 1.0) * sum_p_sq;
    let gamma_uniform = sigma_uniform + uniform_alpha(n, m) * sum_p_sq;

    let uniform_better = sum_p_sq <= threshold + COMPARISON_SLACK;

    // Difference identities, as a cross-check on the direct closed forms.
    let d_sigma = -((nf - mf + 1.0) * sum_p_sq - 1.0) / mf;
    let d_gamma = 1.0 / mf - (nf - mf) / (mf * (nf - 1.0)) * nf * sum_p_sq;
    debug_assert!((d_sigma - (sigma_md - sigma_uniform)).abs() < 1e-10);
    debug_assert!((d_gamma - (gamma_md - gamma_uniform)).abs() < 1e-10);
    debug_assert_eq!(
        uniform_better,
        d_sigma >= -COMPARISON_SLACK && d_gamma >= -COMPARISON_SLACK,
        "threshold predicate disagrees with Σ/γ ordering at Σp² = {sum_p_sq}"
    );

    Ok(ComparisonVerdict {
        uniform_better,
        threshold,
        sum_p_sq,
        degenerate: m == n,
        sigma_md,
        gamma_md,
        sigma_uniform,
        gamma_uniform,
    })
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::sampling::build_clustered_matrix;

    fn p4() -> ClientImportance {
        ClientImportance::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap()
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    // All C(4,2) subsets with probability 1/6, ω_i = 2 p_i on the subset.
    fn brute_uniform_4_2(p: &[f64]) -> (Vec<f64>, f64) {
        let mut second = [0.0; 4];
        let mut sum_sq = 0.0;
        for a in 0..4 {
            for b in (a + 1)..4 {
                let mut w = [0.0; 4];
                w[a] = 2.0 * p[a];
                w[b] = 2.0 * p[b];
                for i in 0..4 {
                    second[i] += w[i] * w[i] / 6.0;
                }
                let s: f64 = w.iter().sum();
                sum_sq += s * s / 6.0;
            }
        }
        let var = (0..4).map(|i| second[i] - p[i] * p[i]).collect();
        (var, sum_sq - 1.0)
    }

    #[test]
    fn md_alpha_and_sum() {
        for m in 1..=4 {
            let s = closed_form_stats(&SchemeSpec::Md { m }, &p4()).unwrap();
            assert!(close(s.alpha, 1.0 / m as f64));
            assert_eq!(s.var_weight_sum, 0.0);
            assert!(s.expected_clients <= m as f64 + 1e-12);
        }
    }

    #[test]
    fn uniform_matches_brute_force() {
        let p = p4();
        let s = closed_form_stats(&SchemeSpec::Uniform { m: 2 }, &p).unwrap();
        let (var, var_sum) = brute_uniform_4_2(p.as_slice());
        assert!(close(s.alpha, 1.0 / 3.0));
        assert!(close(s.var_weight[0], 0.01));
        for i in 0..4 {
            assert!(close(s.var_weight[i], var[i]));
        }
        assert!(close(s.var_weight_sum, var_sum));
        assert!(close(s.var_weight_sum, (4.0 * 0.30 - 1.0) / 3.0));
    }

    #[test]
    fn poisson_binomial_variance() {
        let s = closed_form_stats(&SchemeSpec::PoissonBinomial { m: 2 }, &p4()).unwrap();
        // Bernoulli(0.8) scaled by 1/2: 0.25 · 0.8 · 0.2
        assert!(close(s.var_weight[3], 0.04));
        assert!(close(s.expected_clients, 2.0));
        assert!(close(s.var_clients.unwrap(), 2.0 - 4.0 * 0.30));
    }

    #[test]
    fn theorem_quantities_md_two_equal() {
        let p = ClientImportance::uniform(2).unwrap();
        let s = closed_form_stats(&SchemeSpec::Md { m: 2 }, &p).unwrap();
        let tq = theorem_quantities(&s, &p);
        assert!(close(tq.sigma, 0.25));
        assert!(close(tq.gamma, 0.5));
        let full = theorem_quantities(&closed_form_stats(&SchemeSpec::Full, &p).unwrap(), &p);
        assert_eq!((full.sigma, full.gamma), (0.0, 0.0));
    }

    #[test]
    fn uniform_gamma_equal_importance() {
        let p = ClientImportance::uniform(4).unwrap();
        let s = closed_form_stats(&SchemeSpec::Uniform { m: 2 }, &p).unwrap();
        let tq = theorem_quantities(&s, &p);
        assert!(close(tq.gamma, 1.0 / 3.0));
        assert!(tq.gamma < 0.5);
    }

    #[test]
    fn closed_forms_for_md_and_uniform_sigma_gamma() {
        let p = ClientImportance::new(vec![0.05, 0.15, 0.2, 0.25, 0.35]).unwrap();
        let s2 = p.sum_sq();
        let md = theorem_quantities(&closed_form_stats(&SchemeSpec::Md { m: 3 }, &p).unwrap(), &p);
        assert!(close(md.sigma, (1.0 - s2) / 3.0));
        assert!(close(md.gamma, 1.0 / 3.0));
        let u = theorem_quantities(&closed_form_stats(&SchemeSpec::Uniform { m: 3 }, &p).unwrap(), &p);
        assert!(close(u.sigma, (5.0 / 3.0 - 1.0) * s2));
        assert!(close(u.gamma, (1.0 + 1.0 / 4.0) * (5.0 / 3.0 - 1.0) * s2));
    }

    #[test]
    fn uniform_full_budget_is_deterministic() {
        let p = p4();
        let s = closed_form_stats(&SchemeSpec::Uniform { m: 4 }, &p).unwrap();
        assert!(s.var_weight.iter().all(|v| *v == 0.0));
        assert_eq!((s.alpha, s.var_weight_sum, s.sigma_q, s.gamma_q), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn single_client_uniform() {
        let p = ClientImportance::uniform(1).unwrap();
        let s = closed_form_stats(&SchemeSpec::Uniform { m: 1 }, &p).unwrap();
        assert_eq!(s.alpha, 0.0);
        assert_eq!(s.var_weight, vec![0.0]);
    }

    #[test]
    fn binomial_has_no_covariance_but_sum_varies() {
        let p = p4();
        let b = closed_form_stats(&SchemeSpec::Binomial { m: 2 }, &p).unwrap();
        let md = closed_form_stats(&SchemeSpec::Md { m: 2 }, &p).unwrap();
        assert_eq!(b.alpha, 0.0);
        assert!(md.alpha > 0.0);
        assert!(b.var_weight_sum > 0.0);
        let r = closed_form_stats(&SchemeSpec::PoissonReweighted { m: 2 }, &p).unwrap();
        assert_eq!(r.var_weight, b.var_weight);
    }

    #[test]
    fn clustered_flags_non_exact_alpha() {
        let p = p4();
        let m = 2;
        let s = closed_form_stats(&SchemeSpec::Clustered { matrix: build_clustered_matrix(&p, m) }, &p).unwrap();
        assert!(!s.alpha_exact);
        assert_eq!(s.alpha, 0.5);
        assert_eq!(s.var_weight_sum, 0.0);
        let md = closed_form_stats(&SchemeSpec::Md { m }, &p).unwrap();
        assert!(s.sigma_q < md.sigma_q);
    }

    #[test]
    fn clustered_with_rows_equal_p_is_md() {
        let p = p4();
        let rows = vec![p.as_slice().to_vec(); 3];
        let cl = closed_form_stats(&SchemeSpec::Clustered { matrix: ClusterMatrix::from_rows(rows) }, &p).unwrap();
        let md = closed_form_stats(&SchemeSpec::Md { m: 3 }, &p).unwrap();
        for i in 0..4 {
            assert!(close(cl.var_weight[i], md.var_weight[i]));
        }
        assert!(close(cl.expected_clients, md.expected_clients));
        assert!(close(cl.var_clients.unwrap(), md.var_clients.unwrap()));
    }

    #[test]
    fn corollary_examples() {
        let eq = corollary_compare(&ClientImportance::uniform(6).unwrap(), 3).unwrap();
        assert!(eq.uniform_better);
        let v = corollary_compare(&p4(), 2).unwrap();
        assert!(v.uniform_better);
        assert!(close(v.sum_p_sq, 0.30));
        assert!(close(v.threshold, 1.0 / 3.0));
        assert!(v.sigma_uniform <= v.sigma_md && v.gamma_uniform <= v.gamma_md);
        let skew = ClientImportance::new(vec![0.7, 0.1, 0.1, 0.1]).unwrap();
        let v = corollary_compare(&skew, 2).unwrap();
        assert!(!v.uniform_better);
        assert!(close(v.sum_p_sq, 0.52));
        assert!(v.sigma_uniform > v.sigma_md);
    }

    #[test]
    fn corollary_degenerate_flag() {
        let v = corollary_compare(&p4(), 4).unwrap();
        assert!(v.degenerate && v.uniform_better);
        assert_eq!(v.threshold, 1.0);
        assert!(corollary_compare(&ClientImportance::uniform(1).unwrap(), 1).is_err());
    }

    #[test]
    fn rejects_invalid_scheme() {
        assert!(matches!(
            closed_form_stats(&SchemeSpec::PoissonBinomial { m: 3 }, &p4()),
            Err(Error::InvalidScheme(_))
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn case() -> impl Strategy<Value = (ClientImportance, usize, Vec<f64>)> {
            (2usize..9).prop_flat_map(|n| {
                (
                    prop::collection::vec(0.01f64..1.0, n),
                    1..=n,
                    prop::collection::vec(0.05f64..=1.0, n),
                )
                    .prop_map(|(w, m, q)| (ClientImportance::from_weights(&w).unwrap(), m, q))
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(100))]

            #[test]
            fn sum_identity_and_alpha_range((p, m, q) in case()) {
                let mut schemes = vec![
                    SchemeSpec::Full,
                    SchemeSpec::Md { m },
                    SchemeSpec::Uniform { m },
                    SchemeSpec::Binomial { m },
                    SchemeSpec::PoissonReweighted { m },
                    SchemeSpec::Optimal { q },
                ];
                let m_poisson = (1.0 / p.max()).floor() as usize;
                if m_poisson >= 1 {
                    schemes.push(SchemeSpec::PoissonBinomial { m: m_poisson.min(m) });
                }
                for s in &schemes {
                    let st = closed_form_stats(s, &p).unwrap();
                    prop_assert!((0.0..=1.0).contains(&st.alpha));
                    prop_assert!(st.satisfies_sum_identity(&p, 1e-10), "{s}");
                    // direct covariance route
                    let cov = closed_form_covariance(s, &p).unwrap();
                    let direct: f64 = cov.iter().flatten().sum();
                    prop_assert!((direct - st.var_weight_sum).abs() < 1e-10, "{s}");
                    prop_assert!(st.var_weight.iter().all(|v| *v >= -1e-12));
                    prop_assert!(st.var_weight_sum >= -1e-12);
                }
            }

            #[test]
            fn clustered_never_exceeds_md((p, m, _q) in case()) {
                let r = build_clustered_matrix(&p, m);
                let cl = closed_form_stats(&SchemeSpec::Clustered { matrix: r }, &p).unwrap();
                let md = closed_form_stats(&SchemeSpec::Md { m }, &p).unwrap();
                prop_assert!(cl.sigma_q <= md.sigma_q + 1e-12);
            }
        }
    }
}
