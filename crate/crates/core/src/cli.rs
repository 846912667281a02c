//! Command-line front end.
//!
//! Exit codes: 0 pass, 1 usage, 2 invalid configuration, 3 security check
//! failed, 4 causality violation.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::analysis::{
    check_security, exact_outcome_distribution, independence_test, monte_carlo, plot_data, security_bound,
    AnalysisError, ExactAnalysis, IndependenceReport, MonteCarlo, SecurityBound, SecurityCheck, Tolerance,
    CHI_SQUARED_SIGNIFICANCE, EXACT_TOLERANCE,
};
use crate::partition::{build_partition, parse_probability, IdealDistribution, PartitionError};
use crate::protocol::RunError;
use crate::randsource::{mix_seed, EntropyStream};
use crate::scenario::{load_scenario, Overrides, Scenario, ScenarioError};
use crate::strategies::AttackReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Pass = 0,
    Usage = 1,
    ConfigInvalid = 2,
    SecurityFail = 3,
    Causality = 4,
}

#[derive(Debug, Parser)]
#[command(name = "dieroll", version, about = "Simulate die rolls between spacelike-separated parties and check the bias bound")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a scenario's layout, partition and feasibility constraints.
    Validate {
        scenario: PathBuf,
        #[arg(long)]
        confirm_receipt: bool,
    },
    /// Run a scenario and check the security bound.
    Run(RunArgs),
    /// Smallest n whose partition realizes a tolerance α′ ≤ the target.
    SuggestN {
        /// Comma-separated P_o, e.g. "1/pi,1-1/pi".
        #[arg(long)]
        dist: String,
        #[arg(long)]
        alpha: f64,
        #[arg(long, default_value_t = 10_000_000)]
        max_n: usize,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    pub scenario: PathBuf,
    #[arg(long)]
    pub trials: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for Monte Carlo; all cores by default.
    #[arg(long, env = "DIEROLL_WORKERS")]
    pub workers: Option<usize>,
    /// Exact enumeration only.
    #[arg(long, conflicts_with = "monte_carlo")]
    pub exact: bool,
    /// Monte Carlo only.
    #[arg(long)]
    pub monte_carlo: bool,
    /// JSON report path.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Transcript and event log of one run.
    #[arg(long)]
    pub transcript: Option<PathBuf>,
    /// Tab-separated outcome/deviation table.
    #[arg(long)]
    pub plot_data: Option<PathBuf>,
    #[arg(long)]
    pub confirm_receipt: bool,
    /// Maximum number of input combinations for exact enumeration.
    #[arg(long)]
    pub enumeration_limit: Option<u64>,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_cli<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> ExitStatus
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = write!(err, "{}", e.render());
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{}", e.render());
                    ExitStatus::Pass
                }
                _ => ExitStatus::Usage,
            };
        }
    };
    match cli.command {
        Command::Validate { scenario, confirm_receipt } => cmd_validate(&scenario, confirm_receipt, out, err),
        Command::Run(args) => cmd_run(&args, out, err),
        Command::SuggestN { dist, alpha, max_n } => cmd_suggest_n(&dist, alpha, max_n, out, err),
    }
}

fn load(path: &Path, confirm_receipt: bool, err: &mut dyn Write) -> Result<Scenario, ExitStatus> {
    load_scenario(path, Overrides { confirm_receipt }).map_err(|e| {
        match &e {
            ScenarioError::Invalid(diags) => {
                let _ = writeln!(err, "{}: invalid scenario", path.display());
                for d in diags {
                    let _ = writeln!(err, "  {d}");
                }
            }
            other => {
                let _ = writeln!(err, "{}: {other}", path.display());
            }
        }
        ExitStatus::ConfigInvalid
    })
}

pub fn cmd_validate(path: &Path, confirm_receipt: bool, out: &mut dyn Write, err: &mut dyn Write) -> ExitStatus {
    match load(path, confirm_receipt, err) {
        Ok(s) => {
            let p = &s.params;
            let _ = writeln!(
                out,
                "{}: ok (M = {}, N = {}, n = {}, class sizes {:?}, alpha = {}, delta = {})",
                s.name,
                p.parties(),
                p.outcomes(),
                p.n(),
                p.partition().class_sizes(),
                p.partition().alpha(),
                p.delta()
            );
            ExitStatus::Pass
        }
        Err(status) => status,
    }
}

#[derive(Debug, Serialize)]
struct ParamsSummary {
    parties: usize,
    outcomes: usize,
    n: usize,
    ideal: Vec<f64>,
    class_sizes: Vec<usize>,
    alpha: f64,
    epsilons: Vec<f64>,
    confirm_receipt: bool,
    bound: SecurityBound,
}

#[derive(Debug, Serialize)]
struct InstanceVerdict {
    instance: usize,
    exact: Option<SecurityCheck>,
    monte_carlo: Option<SecurityCheck>,
}

#[derive(Debug, Serialize)]
struct IndependenceSummary {
    exact_mutual_information: Option<f64>,
    exact_product_gap: Option<f64>,
    monte_carlo: Option<IndependenceReport>,
    monte_carlo_error: Option<String>,
}

#[derive(Debug, Serialize)]
struct Report {
    scenario: String,
    seed: u64,
    trials: u64,
    parameters: ParamsSummary,
    attacks: Vec<(usize, AttackReport)>,
    exact: Option<ExactAnalysis>,
    exact_skipped: Option<String>,
    monte_carlo: Option<MonteCarlo>,
    security: Vec<InstanceVerdict>,
    independence: Option<IndependenceSummary>,
    pass: bool,
}

fn analysis_failure(e: &AnalysisError, err: &mut dyn Write) -> ExitStatus {
    let _ = writeln!(err, "error: {e}");
    if e.is_causality() {
        ExitStatus::Causality
    } else {
        ExitStatus::ConfigInvalid
    }
}

fn write_file(path: &Path, text: &str, err: &mut dyn Write) -> Result<(), ExitStatus> {
    std::fs::write(path, text).map_err(|e| {
        let _ = writeln!(err, "cannot write {}: {e}", path.display());
        ExitStatus::Usage
    })
}

pub fn cmd_run(args: &RunArgs, out: &mut dyn Write, err: &mut dyn Write) -> ExitStatus {
    let scenario = match load(&args.scenario, args.confirm_receipt, err) {
        Ok(s) => s,
        Err(status) => return status,
    };
    match run_scenario(&scenario, args, out, err) {
        Ok(status) | Err(status) => status,
    }
}

fn run_scenario(s: &Scenario, args: &RunArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<ExitStatus, ExitStatus> {
    let trials = args.trials.unwrap_or(s.trials);
    let seed = args.seed.unwrap_or(s.seed);
    let limit = args.enumeration_limit.unwrap_or(s.enumeration_limit);
    let session = &s.session;
    let bound = security_bound(&s.params);

    if let Some(path) = &args.transcript {
        let mut entropy = EntropyStream::from_seed(mix_seed(seed, 0));
        match session.run(&mut entropy) {
            Ok(record) => write_file(path, &(record.to_log() + &record.state.export_log()), err)?,
            Err(e) => {
                let _ = writeln!(err, "error: {e}");
                return Err(run_failure(&e));
            }
        }
    }

    let (exact, exact_skipped) = if args.monte_carlo {
        (None, Some("disabled by --monte-carlo".to_string()))
    } else {
        match exact_outcome_distribution(session, limit) {
            Ok(e) => (Some(e), None),
            Err(AnalysisError::EnumerationLimit { combinations, limit }) if !args.exact => {
                (None, Some(format!("{combinations} input combinations exceed the limit {limit}")))
            }
            Err(e) => return Err(analysis_failure(&e, err)),
        }
    };
    let mc = if args.exact {
        None
    } else {
        match monte_carlo(session, trials, seed, args.workers) {
            Ok(m) => Some(m),
            Err(e) => return Err(analysis_failure(&e, err)),
        }
    };

    let mut security = Vec::new();
    let mut pass = true;
    for (i, inst) in session.instances().iter().enumerate() {
        let ideal = inst.params.partition().ideal();
        let exact_check = exact.as_ref().map(|e| {
            let d = &e.instances[i];
            if d.abort_probability >= 1.0 - EXACT_TOLERANCE {
                SecurityCheck::vacuous(&bound, ideal.len())
            } else {
                check_security(&d.probs, ideal, &bound, Tolerance::Exact)
            }
        });
        let mc_check = mc.as_ref().map(|m| {
            let st = &m.instances[i];
            if st.trials == 0 {
                SecurityCheck::vacuous(&bound, ideal.len())
            } else {
                check_security(&st.empirical, ideal, &bound, Tolerance::Sampled { trials: st.trials })
            }
        });
        pass &= exact_check.as_ref().is_none_or(|c| c.pass) && mc_check.as_ref().is_none_or(|c| c.pass);
        security.push(InstanceVerdict { instance: i, exact: exact_check, monte_carlo: mc_check });
    }

    let independence = (session.instances().len() == 2).then(|| {
        let joint = exact.as_ref().and_then(|e| e.joint.as_ref());
        let (mc_report, mc_error) = match mc.as_ref().and_then(|m| m.joint.as_ref()) {
            Some(j) => match independence_test(j, CHI_SQUARED_SIGNIFICANCE) {
                Ok(r) => (Some(r), None),
                Err(e) => (None, Some(e.to_string())),
            },
            None => (None, None),
        };
        IndependenceSummary {
            exact_mutual_information: joint.map(|j| j.mutual_information),
            exact_product_gap: joint.map(|j| j.product_gap),
            monte_carlo: mc_report,
            monte_carlo_error: mc_error,
        }
    });

    let p = &s.params;
    let report = Report {
        scenario: s.name.clone(),
        seed,
        trials,
        parameters: ParamsSummary {
            parties: p.parties(),
            outcomes: p.outcomes(),
            n: p.n(),
            ideal: p.partition().ideal().to_vec(),
            class_sizes: p.partition().class_sizes().to_vec(),
            alpha: p.partition().alpha(),
            epsilons: p.epsilons().to_vec(),
            confirm_receipt: p.confirm_receipt(),
            bound,
        },
        attacks: s.attacks.clone(),
        exact,
        exact_skipped,
        monte_carlo: mc,
        security,
        independence,
        pass,
    };
    print_summary(&report, out);

    if let Some(path) = &args.report {
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        write_file(path, &(json + "\n"), err)?;
    }
    if let Some(path) = &args.plot_data {
        let mut text = String::new();
        for (i, inst) in session.instances().iter().enumerate() {
            let exact = report.exact.as_ref().map(|e| e.instances[i].probs.as_slice());
            let empirical = report.monte_carlo.as_ref().map(|m| m.instances[i].empirical.as_slice());
            let table = plot_data(inst.params.partition().ideal(), exact, empirical, bound.delta);
            for (row, line) in table.lines().enumerate() {
                if row == 0 && i > 0 {
                    continue;
                }
                let first = if row == 0 { "instance".to_string() } else { i.to_string() };
                text.push_str(&format!("{first}\t{line}\n"));
            }
        }
        write_file(path, &text, err)?;
    }
    Ok(if pass { ExitStatus::Pass } else { ExitStatus::SecurityFail })
}

fn run_failure(e: &RunError) -> ExitStatus {
    if e.is_causality() {
        ExitStatus::Causality
    } else {
        ExitStatus::ConfigInvalid
    }
}

fn verdict(c: &SecurityCheck) -> &'static str {
    match (c.vacuous, c.pass) {
        (true, _) => "PASS (every run aborted)",
        (false, true) => "PASS",
        (false, false) => "FAIL",
    }
}

fn fmt_probs(v: &[f64]) -> String {
    v.iter().map(|p| format!("{p:.6}")).collect::<Vec<_>>().join(" ")
}

fn print_summary(r: &Report, out: &mut dyn Write) {
    let p = &r.parameters;
    let _ = writeln!(out, "scenario {} (M = {}, N = {}, n = {})", r.scenario, p.parties, p.outcomes, p.n);
    let _ = writeln!(out, "  ideal    {}", fmt_probs(&p.ideal));
    let _ = writeln!(out, "  delta    {} (alpha {}, worst pair {:?})", p.bound.delta, p.alpha, p.bound.worst_pair);
    for (i, a) in &r.attacks {
        let _ = writeln!(
            out,
            "  attack   instance {i}: {:?} outcome {} with shift {}: {} (bound {})",
            a.direction, a.target, a.shift, a.achieved, a.bound
        );
    }
    if let Some(reason) = &r.exact_skipped {
        let _ = writeln!(out, "  exact    skipped: {reason}");
    }
    for v in &r.security {
        let i = v.instance;
        if let (Some(e), Some(c)) = (&r.exact, &v.exact) {
            let d = &e.instances[i];
            let _ = writeln!(
                out,
                "  [{i}] exact       {}  abort {:.6}  max dev {:.3e}  vd {:.3e}  {}",
                fmt_probs(&d.probs),
                d.abort_probability,
                c.max_deviation,
                c.variational_distance,
                verdict(c)
            );
        }
        if let (Some(m), Some(c)) = (&r.monte_carlo, &v.monte_carlo) {
            let st = &m.instances[i];
            let _ = writeln!(
                out,
                "  [{i}] monte carlo {}  abort {:.6}  max dev {:.3e}  vd {:.3e}  {}",
                fmt_probs(&st.empirical),
                st.abort_rate(),
                c.max_deviation,
                c.variational_distance,
                verdict(c)
            );
        }
    }
    if let Some(e) = &r.exact {
        for d in &e.instances {
            for g in d.grouped.iter().filter(|g| g.signalling.is_some()) {
                let _ = writeln!(
                    out,
                    "  [{}] party {} receives values that depend on its own: {}",
                    d.instance,
                    g.party,
                    g.signalling.as_deref().unwrap_or_default()
                );
            }
        }
    }
    if let Some(ind) = &r.independence {
        if let (Some(mi), Some(gap)) = (ind.exact_mutual_information, ind.exact_product_gap) {
            let _ = writeln!(out, "  joint    exact mutual information {mi:.6} bits, product gap {gap:.3e}");
        }
        if let Some(t) = &ind.monte_carlo {
            let _ = writeln!(
                out,
                "  joint    chi-squared {:.3} (dof {}), p = {:.3e}: {}",
                t.chi_squared,
                t.degrees_of_freedom,
                t.p_value,
                if t.independent { "independent" } else { "dependent" }
            );
        }
        if let Some(e) = &ind.monte_carlo_error {
            let _ = writeln!(out, "  joint    chi-squared not applicable: {e}");
        }
    }
    let _ = writeln!(out, "verdict: {}", if r.pass { "PASS" } else { "FAIL" });
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SuggestError {
    #[error("target alpha must be finite and non-negative, got {0}")]
    BadTarget(f64),
    #[error(
        "alpha = 0 needs every P_o to be rational: n·P_o is then an integer for a common multiple n of the \
         denominators; an irrational P_o never is, so only alpha > 0 can be reached"
    )]
    Irrational,
    #[error("no n ≤ {0} reaches the target")]
    NotFound(usize),
    #[error(transparent)]
    Partition(#[from] PartitionError),
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

/// Smallest `n ≥ N` whose partition has `α ≤ target`, with that `α`.
pub fn suggest_n(dist: &IdealDistribution, target: f64, max_n: usize) -> Result<(usize, f64), SuggestError> {
    if !(target.is_finite() && target >= 0.0) {
        return Err(SuggestError::BadTarget(target));
    }
    let outcomes = dist.outcomes();
    if target == 0.0 {
        let exact = dist.exact().ok_or(SuggestError::Irrational)?;
        let lcm = exact.iter().try_fold(1i64, |acc, r| {
            let d = *r.denom();
            (acc / gcd(acc, d)).checked_mul(d)
        });
        let lcm = lcm.ok_or(SuggestError::NotFound(max_n))? as usize;
        let n = lcm * outcomes.div_ceil(lcm);
        if n > max_n {
            return Err(SuggestError::NotFound(max_n));
        }
        let part = build_partition(dist, n)?;
        return Ok((n, part.alpha()));
    }
    for n in outcomes..=max_n {
        match build_partition(dist, n) {
            Ok(part) if part.alpha() <= target => return Ok((n, part.alpha())),
            Ok(_) | Err(PartitionError::EmptyClass { .. }) => {}
            Err(e) => return Err(e.into()),
        }
    }
    Err(SuggestError::NotFound(max_n))
}

pub fn cmd_suggest_n(dist: &str, alpha: f64, max_n: usize, out: &mut dyn Write, err: &mut dyn Write) -> ExitStatus {
    let probs = match dist.split(',').map(parse_probability).collect::<Result<Vec<_>, _>>() {
        Ok(p) => p,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return ExitStatus::ConfigInvalid;
        }
    };
    let dist = match IdealDistribution::from_probabilities(&probs) {
        Ok(d) => d,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return ExitStatus::ConfigInvalid;
        }
    };
    match suggest_n(&dist, alpha, max_n) {
        Ok((n, a)) => {
            let _ = writeln!(out, "n = {n}, alpha = {a}");
            ExitStatus::Pass
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            ExitStatus::ConfigInvalid
        }
    }
}
