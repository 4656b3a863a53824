// Copyright 2026 The fl-sampling Authors
// SPDX-License-Identifier: Apache-2.0

//! Command-line surface.
//!
//! Exit codes: 0 on success, 1 when a verification check fails, 2 on a
//! usage or config error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::harness::{
    self, build_importance, difference_curve, run_scenario, summarize, DifferenceCurve, ImportanceMode, Scenario,
    ScenarioResult, SchemeSummary, VerificationBudget, VerificationReport, SCHEMA_VERSION,
};
use crate::importance::ClientImportance;
use crate::sampling::{SchemeKind, SchemeSpec};
use crate::stats::{closed_form_stats, corollary_compare, theorem_quantities, ComparisonVerdict, SamplingStats, TheoremQuantities};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const ROUNDS_CSV: &str = "rounds.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const MANIFEST_JSON: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "fl-sampling", version, about = "Client sampling statistics, verification and FedAvg simulation")]
pub struct Cli {
    /// Master seed (overrides the config or budget seed).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to the available cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output file (stats, verify) or directory (simulate).
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Closed-form weight statistics for one scheme.
    Stats(StatsArgs),
    /// Exact and Monte-Carlo verification of every closed form.
    Verify(VerifyArgs),
    /// Run a scenario config and write rounds.csv, summary.json, manifest.json.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("importance").required(true).args(["equal", "p", "counts", "dirichlet"])))]
pub struct StatsArgs {
    #[arg(long)]
    pub scheme: SchemeKind,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub m: Option<usize>,
    /// Equal importance `1/n`.
    #[arg(long)]
    pub equal: bool,
    /// Explicit importance vector.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub p: Option<Vec<f64>>,
    /// Importance proportional to sample counts.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub counts: Option<Vec<f64>>,
    /// Symmetric Dirichlet concentration (seeded by `--seed`).
    #[arg(long)]
    pub dirichlet: Option<f64>,
    /// Inclusion probabilities for optimal sampling.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub q: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 6)]
    pub max_n: usize,
    #[arg(long, default_value_t = 3)]
    pub max_m: usize,
    #[arg(long, default_value_t = 20)]
    pub cases: usize,
    /// Monte-Carlo draws per estimate; small values may fail statistically.
    #[arg(long, default_value_t = 200_000)]
    pub trials: usize,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scenario config (JSON).
    pub config: PathBuf,
}

/// A failure carrying its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::usage(e.to_string())
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::usage(format!("{}: {e}", path.display()))
}

/// Entry point used by the binary; returns the process exit code.
pub fn main_with_args<I, T>(args: I, out: &mut (dyn Write + Send), err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            if code == EXIT_OK {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return code;
        }
    };
    match execute(&cli, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message);
            e.code
        }
    }
}

pub fn execute(cli: &Cli, out: &mut (dyn Write + Send)) -> Result<i32, CliError> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::usage("--threads must be ≥ 1"));
        }
        pool = pool.num_threads(t);
    }
    let pool = pool.build().map_err(|e| CliError::usage(format!("thread pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Stats(a) => cmd_stats(a, cli.seed, cli.output.as_deref(), out),
        Command::Verify(a) => cmd_verify(a, cli.seed, cli.output.as_deref(), out),
        Command::Simulate(a) => cmd_simulate(&a.config, cli.seed, cli.threads, cli.output.as_deref(), out),
    })
}

#[derive(Debug, Serialize)]
pub struct StatsOutput {
    pub schema_version: u32,
    pub scheme: String,
    pub n: usize,
    pub m: Option<usize>,
    pub p: ClientImportance,
    pub stats: SamplingStats,
    pub theorem: TheoremQuantities,
    pub verdict: Option<ComparisonVerdict>,
}

fn stats_importance(a: &StatsArgs, seed: Option<u64>) -> Result<ClientImportance> {
    let mode = if a.equal {
        ImportanceMode::Equal
    } else if let Some(p) = &a.p {
        ImportanceMode::Explicit { p: p.clone() }
    } else if let Some(counts) = &a.counts {
        ImportanceMode::Proportional { counts: counts.clone() }
    } else {
        ImportanceMode::Dirichlet { concentration: a.dirichlet.unwrap_or(1.0), seed: seed.unwrap_or(0) }
    };
    build_importance(&mode, a.n)
}

pub fn cmd_stats(a: &StatsArgs, seed: Option<u64>, output: Option<&Path>, out: &mut (dyn Write + Send)) -> Result<i32, CliError> {
    let p = stats_importance(a, seed)?;
    let spec = match (a.scheme, &a.q) {
        (SchemeKind::Optimal, Some(q)) => SchemeSpec::Optimal { q: q.clone() },
        (SchemeKind::Optimal, None) => return Err(CliError::usage("optimal sampling needs --q")),
        (_, Some(_)) => return Err(CliError::usage("--q only applies to optimal sampling")),
        (SchemeKind::Full, None) => SchemeSpec::Full,
        (kind, None) => {
            let m = a.m.ok_or_else(|| CliError::usage(format!("{kind} sampling needs --m")))?;
            SchemeSpec::with_budget(kind, m, &p)?
        }
    };
    spec.validate(&p)?;
    let stats = closed_form_stats(&spec, &p)?;
    let theorem = theorem_quantities(&stats, &p);
    let budget = a.m.or(spec.m());
    let verdict = match budget {
        Some(m) if p.len() >= 2 && m <= p.len() => Some(corollary_compare(&p, m)?),
        _ => None,
    };
    let report = StatsOutput { schema_version: SCHEMA_VERSION, scheme: spec.to_string(), n: p.len(), m: budget, p, stats, theorem, verdict };
    write_stats_table(&report, out).map_err(|e| CliError::usage(e.to_string()))?;
    if let Some(path) = output {
        write_json(path, &report)?;
    }
    Ok(EXIT_OK)
}

fn write_stats_table(r: &StatsOutput, out: &mut (dyn Write + Send)) -> std::io::Result<()> {
    let s = &r.stats;
    let (lo, hi) = s.var_weight.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    writeln!(out, "scheme            {}", r.scheme)?;
    writeln!(out, "n                 {}", r.n)?;
    writeln!(out, "sum p^2           {:.6e}", r.p.sum_sq())?;
    writeln!(out, "Var[w_i] min      {lo:.6e}")?;
    writeln!(out, "Var[w_i] max      {hi:.6e}")?;
    writeln!(out, "Var[w_i] sum      {:.6e}", s.sigma_q)?;
    let exact = if s.alpha_exact { "" } else { "  (not a scalar covariance)" };
    writeln!(out, "alpha             {:.6e}{exact}", s.alpha)?;
    writeln!(out, "Var[sum w]        {:.6e}", s.var_weight_sum)?;
    writeln!(out, "Sigma             {:.6e}", r.theorem.sigma)?;
    writeln!(out, "gamma             {:.6e}", r.theorem.gamma)?;
    writeln!(out, "E[N]              {:.6e}", s.expected_clients)?;
    match s.var_clients {
        Some(v) => writeln!(out, "Var[N]            {v:.6e}")?,
        None => writeln!(out, "Var[N]            n/a")?,
    }
    match &r.verdict {
        Some(v) => writeln!(
            out,
            "uniform vs md     {} (sum p^2 = {:.6e}, threshold 1/(n-m+1) = {:.6e}{})",
            if v.uniform_better { "uniform" } else { "md" },
            v.sum_p_sq,
            v.threshold,
            if v.degenerate { ", m = n" } else { "" }
        )?,
        None => writeln!(out, "uniform vs md     n/a")?,
    }
    Ok(())
}

pub fn cmd_verify(a: &VerifyArgs, seed: Option<u64>, output: Option<&Path>, out: &mut (dyn Write + Send)) -> Result<i32, CliError> {
    if a.max_n < 2 || a.max_m < 1 || a.max_m > a.max_n {
        return Err(CliError::usage("need max-n ≥ 2 and 1 ≤ max-m ≤ max-n"));
    }
    let budget = VerificationBudget {
        max_n: a.max_n,
        max_m: a.max_m,
        cases: a.cases,
        trials: a.trials,
        seed: seed.unwrap_or(VerificationBudget::default().seed),
    };
    let report = harness::verify_all(&budget);
    write_verify_table(&report, out).map_err(|e| CliError::usage(e.to_string()))?;
    if let Some(path) = output {
        #[derive(Serialize)]
        struct Doc<'a> {
            schema_version: u32,
            budget: VerificationBudget,
            passed: bool,
            checks: &'a VerificationReport,
        }
        write_json(path, &Doc { schema_version: SCHEMA_VERSION, budget, passed: report.all_passed(), checks: &report })?;
    }
    Ok(if report.all_passed() { EXIT_OK } else { EXIT_VERIFY_FAILED })
}

fn write_verify_table(r: &VerificationReport, out: &mut (dyn Write + Send)) -> std::io::Result<()> {
    for c in &r.checks {
        writeln!(
            out,
            "{} {:<40} cases={:<4} max_err={:.3e} tol={:.1e}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.cases,
            c.max_error,
            c.tolerance
        )?;
    }
    let failed = r.checks.iter().filter(|c| !c.passed).count();
    writeln!(out, "{} checks, {failed} failed", r.checks.len())
}

/// Reads a scenario config, reporting schema errors with a JSON pointer.
pub fn load_scenario(path: &Path) -> Result<Scenario, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_scenario(&text)
}

pub fn parse_scenario(text: &str) -> Result<Scenario, CliError> {
    let mut de = serde_json::Deserializer::from_str(text);
    let scenario: Scenario = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let pointer = json_pointer(e.path());
        CliError::usage(format!("config error at {pointer}: {}", e.inner()))
    })?;
    de.end().map_err(|e| CliError::usage(format!("config error: {e}")))?;
    scenario.validate()?;
    Ok(scenario)
}

fn json_pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut s = String::new();
    for seg in path.iter() {
        match seg {
            Segment::Seq { index } => s.push_str(&format!("/{index}")),
            Segment::Map { key } => s.push_str(&format!("/{}", key.replace('~', "~0").replace('/', "~1"))),
            Segment::Enum { variant } => s.push_str(&format!("/{variant}")),
            Segment::Unknown => s.push_str("/?"),
        }
    }
    if s.is_empty() {
        "/".into()
    } else {
        s
    }
}

#[derive(Debug, Serialize)]
pub struct SchemeReport {
    pub label: String,
    pub scheme: String,
    pub stats: SamplingStats,
    pub theorem: TheoremQuantities,
    pub summary: SchemeSummary,
}

#[derive(Debug, Serialize)]
pub struct SummaryDoc {
    pub schema_version: u32,
    pub importance: ClientImportance,
    pub optimum: Option<Vec<f64>>,
    pub verdict: Option<ComparisonVerdict>,
    pub schemes: Vec<SchemeReport>,
    /// Paired `a − b` curves for every scheme pair in config order.
    pub differences: Vec<DifferenceCurve>,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub tool_version: String,
    /// SHA-256 of the canonical JSON form of the parsed scenario.
    pub config_sha256: String,
    pub config_path: String,
    pub master_seed: u64,
    pub threads: Option<usize>,
    pub started_at: String,
    pub finished_at: String,
    pub outputs: ManifestOutputs,
}

#[derive(Debug, Serialize)]
pub struct ManifestOutputs {
    pub rounds: String,
    pub summary: String,
    pub manifest: String,
}

pub fn config_digest(s: &Scenario) -> String {
    let canonical = serde_json::to_vec(s).expect("scenario serializes");
    Sha256::digest(&canonical).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn summary_doc(result: &ScenarioResult) -> Result<SummaryDoc> {
    let schemes = result
        .schemes
        .iter()
        .map(|r| {
            Ok(SchemeReport {
                label: r.label.clone(),
                scheme: r.scheme.clone(),
                stats: r.stats.clone(),
                theorem: r.theorem,
                summary: summarize(&r.label, &r.trajectories)?,
            })
        })
        .collect::<Result<_>>()?;
    let mut differences = Vec::new();
    for (i, a) in result.schemes.iter().enumerate() {
        for b in &result.schemes[i + 1..] {
            differences.push(difference_curve(&a.label, &a.trajectories, &b.label, &b.trajectories)?);
        }
    }
    Ok(SummaryDoc {
        schema_version: SCHEMA_VERSION,
        importance: result.importance.clone(),
        optimum: result.optimum.clone(),
        verdict: result.verdict,
        schemes,
        differences,
    })
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn format_float(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

pub fn write_rounds_csv<W: Write>(result: &ScenarioResult, w: W) -> csv::Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["scheme", "seed", "round", "loss", "dist_sq", "n_participants", "weight_sum"])?;
    for run in &result.schemes {
        for tr in &run.trajectories {
            for r in &tr.records {
                wr.write_record([
                    tr.scheme.clone(),
                    tr.seed.to_string(),
                    r.round.to_string(),
                    format_float(r.loss),
                    format_float(r.dist_sq),
                    r.n_participants.to_string(),
                    format_float(r.weight_sum),
                ])?;
            }
        }
    }
    wr.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

pub fn cmd_simulate(
    config: &Path,
    seed: Option<u64>,
    threads: Option<usize>,
    output: Option<&Path>,
    out: &mut (dyn Write + Send),
) -> Result<i32, CliError> {
    let started_at = now();
    let mut scenario = load_scenario(config)?;
    if let Some(seed) = seed {
        scenario.master_seed = seed;
    }
    let dir = output.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;

    let result = run_scenario(&scenario)?;
    let rounds = dir.join(ROUNDS_CSV);
    let file = fs::File::create(&rounds).map_err(|e| io_err(&rounds, e))?;
    write_rounds_csv(&result, std::io::BufWriter::new(file)).map_err(|e| io_err(&rounds, e))?;
    let summary = dir.join(SUMMARY_JSON);
    write_json(&summary, &summary_doc(&result)?)?;

    let manifest_path = dir.join(MANIFEST_JSON);
    let manifest = RunManifest {
        schema_version: SCHEMA_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        config_sha256: config_digest(&scenario),
        config_path: config.display().to_string(),
        master_seed: scenario.master_seed,
        threads,
        started_at,
        finished_at: now(),
        outputs: ManifestOutputs {
            rounds: rounds.display().to_string(),
            summary: summary.display().to_string(),
            manifest: manifest_path.display().to_string(),
        },
    };
    write_json(&manifest_path, &manifest)?;

    let _ = writeln!(out, "wrote {}, {}, {}", rounds.display(), summary.display(), manifest_path.display());
    for run in &result.schemes {
        if let Ok(last) = summarize(&run.label, &run.trajectories) {
            let _ = writeln!(
                out,
                "{:<20} final dist_sq {:.6e} ± {:.2e}  final loss {:.6e}",
                run.label, last.final_dist_sq_mean, last.final_dist_sq_stderr, last.final_loss_mean
            );
        }
    }
    if let Some(v) = &result.verdict {
        let _ = writeln!(out, "uniform better than md: {} (sum p^2 = {:.4e}, threshold {:.4e})", v.uniform_better, v.sum_p_sq, v.threshold);
    }
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = main_with_args(std::iter::once("fl-sampling").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn stats_md_equal() {
        let (code, out, _) = run(&["stats", "--scheme", "md", "--n", "10", "--m", "5", "--equal"]);
        assert_eq!(code, 0);
        assert!(out.contains("alpha             2.000000e-1"), "{out}");
        assert!(out.contains("Var[sum w]        0.000000e0"), "{out}");
    }

    #[test]
    fn stats_poisson_over_budget() {
        let (code, _, err) = run(&["stats", "--scheme", "poisson", "--n", "4", "--m", "3", "--p", "0.1,0.2,0.3,0.4"]);
        assert_eq!(code, EXIT_USAGE);
        assert!(err.contains("m·max p_i ≤ 1"), "{err}");
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(&["stats", "--scheme", "md", "--n", "4"]).0, EXIT_USAGE);
        assert_eq!(run(&["stats", "--scheme", "bogus", "--n", "4", "--equal"]).0, EXIT_USAGE);
        assert_eq!(run(&["frobnicate"]).0, EXIT_USAGE);
        assert_eq!(run(&["--help"]).0, EXIT_OK);
    }

    #[test]
    fn json_pointer_on_unknown_key() {
        let cfg = r#"{"schema_version":1,"n":4,"m":2,"importance":"equal","schemes":["full"],
            "objective":{"quadratic":{"d":1,"theta_star":{"gaussian":{"scale":1.0,"typo":1}}}},
            "round":{"local_steps":1,"eta_l":0.1,"eta_g":1.0},"rounds":3,"seeds":1,"master_seed":1}"#;
        let e = parse_scenario(cfg).unwrap_err();
        assert_eq!(e.code, EXIT_USAGE);
        assert!(e.message.contains("/objective/quadratic/theta_star/gaussian"), "{}", e.message);
        assert!(e.message.contains("typo"), "{}", e.message);
    }

    #[test]
    fn float_format_round_trips() {
        for v in [0.1, 1.0 / 3.0, 1e-300, -2.5e17, f64::MIN_POSITIVE] {
            let s = format_float(v);
            assert_eq!(s.parse::<f64>().unwrap(), v);
        }
        assert_eq!(format_float(f64::NAN), "NaN");
    }
}
