//! Scenario files: protocol parameters, layout, per-party strategies and
//! run settings in TOML.
//!
//! ```toml
//! name = "biased_thirds"
//! trials = 100000
//! seed = 7
//!
//! [protocol]
//! outcomes = ["1/3", "2/3"]
//! n = 3
//!
//! [[layout.balls]]
//! center = [0.0, 0.0, 0.0]
//! radius = 0.5
//! deadline = 2.0
//!
//! [[layout.balls]]
//! center = [10.0, 0.0, 0.0]
//! radius = 0.5
//! deadline = 2.0
//!
//! [[parties]]
//! strategy = "honest"
//! source = "uniform"
//!
//! [[parties]]
//! strategy = "optimal_shift(0)"
//! ```
//!
//! With `units = "meters"` lengths are divided by `c` (default
//! 299792458 m/s) when the file is read; times are then seconds.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::partition::{build_partition, parse_probability, IdealDistribution, OutcomePartition, Probability};
use crate::protocol::{Instance, ProtocolParams, Session};
use crate::randsource::{build_source_from_bits, BitSourceModel, SourceModel};
use crate::spacetime::{Ball, Layout};
use crate::strategies::{
    minimizing_shift_attack, optimal_shift_attack, AttackReport, DelayedSteer, ForbiddenRead,
    HonestStrategy, InconsistentBroadcast, MitmRelay, RandomAdmissible, ShiftAttack, Silent, Strategy,
};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: Option<String>,
    pub description: Option<String>,
    pub trials: Option<u64>,
    pub seed: Option<u64>,
    pub protocol: ProtocolSection,
    pub layout: LayoutSection,
    pub parties: Vec<PartySpec>,
    pub parallel: Option<ParallelSection>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum ProbText {
    Number(f64),
    Text(String),
}

impl ProbText {
    fn parse(&self) -> Result<Probability, String> {
        match self {
            ProbText::Number(v) => Ok(Probability::real(*v)),
            ProbText::Text(s) => parse_probability(s).map_err(|e| e.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Units {
    #[default]
    Natural,
    Meters,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSection {
    /// `P_o` per outcome.
    pub outcomes: Vec<ProbText>,
    pub n: Option<usize>,
    /// Explicit `|Ω_o|`; `n` is their sum.
    pub class_sizes: Option<Vec<usize>>,
    /// Same `ε` for every party.
    pub epsilon: Option<f64>,
    pub epsilons: Option<Vec<f64>>,
    #[serde(default)]
    pub confirm_receipt: bool,
    #[serde(default)]
    pub units: Units,
    pub c: Option<f64>,
    pub enumeration_limit: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutSection {
    pub balls: Vec<BallSpec>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BallSpec {
    pub center: Vec<f64>,
    pub radius: f64,
    pub deadline: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum SourceSpec {
    Named(String),
    Probabilities(Vec<ProbText>),
    /// `b = log2 n` output bits, each the XOR of `rounds` raw bits.
    Bits { bits: Vec<f64>, rounds: usize },
    RepeatedBits { bias: f64, count: usize, rounds: usize },
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartySpec {
    #[serde(default = "honest_name")]
    pub strategy: String,
    pub source: Option<SourceSpec>,
    #[serde(default)]
    pub clock_skew: f64,
    #[serde(default)]
    pub drop_predistribution: Vec<usize>,
}

fn honest_name() -> String {
    "honest".to_string()
}

/// A second instance over the same parameters and layout.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParallelSection {
    /// Frame time of the second instance's stage II.
    #[serde(default)]
    pub offset: f64,
    pub parties: Vec<PartySpec>,
}

/// A problem found while loading a scenario.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostic {
    pub location: String,
    pub message: String,
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.location, self.message)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    /// TOML syntax or shape error; the message carries line and column.
    #[error("{0}")]
    Parse(String),
    #[error("{} problem(s):\n{}", .0.len(), .0.iter().map(|d| format!("  {d}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<Diagnostic>),
}

/// Strategy name with its optional argument, e.g. `optimal_shift(2)`.
#[derive(Debug, Clone, PartialEq)]
pub enum StrategySpec {
    Honest,
    OptimalShift(usize),
    MinimizingShift(usize),
    Shift(usize),
    MitmRelay(Option<f64>),
    RandomAdmissible(u64),
    InconsistentBroadcast,
    Silent,
    ForbiddenRead,
    DelayedSteer(usize),
}

pub fn parse_strategy(text: &str) -> Result<StrategySpec, String> {
    let text = text.trim();
    let (name, arg) = match text.split_once('(') {
        Some((name, rest)) => {
            let arg = rest.strip_suffix(')').ok_or_else(|| format!("missing ')' in {text:?}"))?;
            (name.trim(), Some(arg.trim()))
        }
        None => (text, None),
    };
    fn need<T: std::str::FromStr>(name: &str, arg: Option<&str>) -> Result<T, String> {
        let arg = arg.ok_or_else(|| format!("{name} needs an argument, e.g. {name}(0)"))?;
        arg.parse().map_err(|_| format!("bad argument {arg:?} for {name}"))
    }
    let none = |spec: StrategySpec| match arg {
        None => Ok(spec),
        Some(a) => Err(format!("{name} takes no argument, got {a:?}")),
    };
    match name {
        "honest" => none(StrategySpec::Honest),
        "optimal_shift" => need(name, arg).map(StrategySpec::OptimalShift),
        "minimizing_shift" => need(name, arg).map(StrategySpec::MinimizingShift),
        "shift" => need(name, arg).map(StrategySpec::Shift),
        "mitm_relay" => match arg {
            None => Ok(StrategySpec::MitmRelay(None)),
            Some(_) => need(name, arg).map(|l| StrategySpec::MitmRelay(Some(l))),
        },
        "random_admissible" => need(name, arg).map(StrategySpec::RandomAdmissible),
        "inconsistent_broadcast" => none(StrategySpec::InconsistentBroadcast),
        "silent" => none(StrategySpec::Silent),
        "forbidden_read" => none(StrategySpec::ForbiddenRead),
        "delayed_steer" => need(name, arg).map(StrategySpec::DelayedSteer),
        _ => Err(format!(
            "unknown strategy {name:?} (known: honest, optimal_shift(o), minimizing_shift(o), shift(c), mitm_relay, \
             random_admissible(seed), inconsistent_broadcast, silent, forbidden_read, delayed_steer(o))"
        )),
    }
}

/// A loaded, validated scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub params: ProtocolParams,
    pub session: Session,
    pub trials: u64,
    pub seed: u64,
    pub enumeration_limit: u64,
    /// Shift attacks planned per instance.
    pub attacks: Vec<(usize, AttackReport)>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Overrides {
    pub confirm_receipt: bool,
}

pub fn parse_scenario(text: &str) -> Result<ScenarioFile, ScenarioError> {
    toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))
}

pub fn load_scenario(path: &Path, overrides: Overrides) -> Result<Scenario, ScenarioError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })?;
    let file = parse_scenario(&text)?;
    let default_name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    build_scenario(&file, &default_name, overrides)
}

struct Issues(Vec<Diagnostic>);

impl Issues {
    fn push(&mut self, location: impl Into<String>, message: impl std::fmt::Display) {
        self.0.push(Diagnostic { location: location.into(), message: message.to_string() });
    }
}

fn build_source(spec: Option<&SourceSpec>, n: usize, epsilon: Option<f64>) -> Result<SourceModel, String> {
    match spec {
        None => Ok(SourceModel::uniform(n)),
        Some(SourceSpec::Named(name)) if name == "uniform" => Ok(SourceModel::uniform(n)),
        Some(SourceSpec::Named(name)) => Err(format!("unknown source {name:?}")),
        Some(SourceSpec::Probabilities(ps)) => {
            let probs = ps.iter().map(|p| p.parse().map(|p| p.value)).collect::<Result<Vec<_>, _>>()?;
            if probs.len() != n {
                return Err(format!("source has {} values, n = {n}", probs.len()));
            }
            match epsilon {
                Some(eps) => SourceModel::new(probs, eps),
                None => SourceModel::exact(probs),
            }
            .map_err(|e| e.to_string())
        }
        Some(SourceSpec::Bits { bits, rounds }) => {
            let model = BitSourceModel::new(bits.clone()).map_err(|e| e.to_string())?;
            build_source_from_bits(&model, n, *rounds).map_err(|e| e.to_string())
        }
        Some(SourceSpec::RepeatedBits { bias, count, rounds }) => {
            let model = BitSourceModel::repeated(*bias, *count).map_err(|e| e.to_string())?;
            build_source_from_bits(&model, n, *rounds).map_err(|e| e.to_string())
        }
    }
}

/// Everything in a scenario file that does not depend on the strategies.
fn build_params(file: &ScenarioFile, overrides: Overrides, issues: &mut Issues) -> Option<(ProtocolParams, Vec<Option<SourceModel>>)> {
    let proto = &file.protocol;
    let scale = match proto.units {
        Units::Natural => {
            if proto.c.is_some() {
                issues.push("protocol.c", "only meaningful with units = \"meters\"");
            }
            1.0
        }
        Units::Meters => {
            let c = proto.c.unwrap_or(SPEED_OF_LIGHT);
            if !(c.is_finite() && c > 0.0) {
                issues.push("protocol.c", format!("speed of light must be positive, got {c}"));
                return None;
            }
            1.0 / c
        }
    };

    let mut probs = Vec::new();
    for (o, p) in proto.outcomes.iter().enumerate() {
        match p.parse() {
            Ok(p) => probs.push(p),
            Err(e) => issues.push(format!("protocol.outcomes[{o}]"), e),
        }
    }
    let dist = match IdealDistribution::from_probabilities(&probs) {
        Ok(d) if probs.len() == proto.outcomes.len() => Some(d),
        Ok(_) => None,
        Err(e) => {
            issues.push("protocol.outcomes", e);
            None
        }
    };
    let partition: Option<OutcomePartition> = dist.as_ref().and_then(|d| {
        let res = match (&proto.class_sizes, proto.n) {
            (Some(sizes), n) => {
                if let Some(n) = n.filter(|&n| n != sizes.iter().sum::<usize>()) {
                    issues.push("protocol.n", format!("{n} differs from the sum of class_sizes"));
                    return None;
                }
                OutcomePartition::from_sizes(d, sizes.clone())
            }
            (None, n) => build_partition(d, n.unwrap_or(d.outcomes())),
        };
        res.map_err(|e| issues.push("protocol", e)).ok()
    });

    let balls = &file.layout.balls;
    let m = balls.len();
    let mut layout_balls = Vec::with_capacity(m);
    let mut deadlines = Vec::with_capacity(m);
    for (i, b) in balls.iter().enumerate() {
        if b.center.is_empty() || b.center.len() > 3 {
            issues.push(format!("layout.balls[{i}].center"), "needs 1 to 3 coordinates");
            continue;
        }
        let mut c = [0.0; 3];
        for (d, v) in b.center.iter().enumerate() {
            c[d] = v * scale;
        }
        layout_balls.push(Ball::new(c, b.radius * scale));
        deadlines.push(b.deadline);
    }
    if file.parties.len() != m {
        issues.push("parties", format!("{} parties for {m} balls", file.parties.len()));
    }
    if let Some(par) = &file.parallel {
        if par.parties.len() != m {
            issues.push("parallel.parties", format!("{} parties for {m} balls", par.parties.len()));
        }
    }
    let layout = Layout::new(layout_balls, deadlines);

    let n = partition.as_ref().map(|p| p.n())?;
    let declared: Option<Vec<f64>> = match (&proto.epsilons, proto.epsilon) {
        (Some(_), Some(_)) => {
            issues.push("protocol", "give either epsilon or epsilons, not both");
            None
        }
        (Some(v), None) => {
            if v.len() != m {
                issues.push("protocol.epsilons", format!("{} values for {m} parties", v.len()));
            }
            Some(v.clone())
        }
        (None, Some(e)) => Some(vec![e; m]),
        (None, None) => None,
    };
    let mut sources = Vec::with_capacity(m);
    for (k, party) in file.parties.iter().enumerate() {
        let honest = matches!(parse_strategy(&party.strategy), Ok(StrategySpec::Honest));
        if !honest && party.source.is_none() {
            sources.push(None);
            continue;
        }
        let eps = declared.as_ref().and_then(|v| v.get(k).copied());
        match build_source(party.source.as_ref(), n, eps) {
            Ok(s) => sources.push(Some(s)),
            Err(e) => {
                issues.push(format!("parties[{k}].source"), e);
                sources.push(None);
            }
        }
    }
    let epsilons = declared.unwrap_or_else(|| {
        (0..m).map(|k| sources.get(k).and_then(|s| s.as_ref()).map_or(0.0, SourceModel::epsilon)).collect()
    });
    if !issues.0.is_empty() {
        return None;
    }
    match ProtocolParams::new(partition?, epsilons, layout) {
        Ok(p) => Some((p.with_confirm_receipt(proto.confirm_receipt || overrides.confirm_receipt), sources)),
        Err(crate::protocol::ParamsError::Layout(vs)) => {
            for v in vs {
                issues.push("layout", v);
            }
            None
        }
        Err(e) => {
            issues.push("protocol", e);
            None
        }
    }
}

fn build_strategies(
    params: &ProtocolParams,
    parties: &[PartySpec],
    sources: &[Option<SourceModel>],
    where_: &str,
    instance: usize,
    attacks: &mut Vec<(usize, AttackReport)>,
    issues: &mut Issues,
) -> Vec<Strategy> {
    let specs: Vec<Option<StrategySpec>> = parties
        .iter()
        .enumerate()
        .map(|(k, p)| parse_strategy(&p.strategy).map_err(|e| issues.push(format!("{where_}[{k}].strategy"), e)).ok())
        .collect();
    let source_of = |k: usize| sources.get(k).cloned().flatten().unwrap_or_else(|| SourceModel::uniform(params.n()));
    let target_party = specs.iter().position(|s| s == &Some(StrategySpec::Honest));
    let mut out = Vec::with_capacity(parties.len());
    for (k, (party, spec)) in parties.iter().zip(&specs).enumerate() {
        let Some(spec) = spec else { continue };
        let loc = format!("{where_}[{k}]");
        if *spec != StrategySpec::Honest && (party.clock_skew != 0.0 || !party.drop_predistribution.is_empty()) {
            issues.push(&loc, "clock_skew and drop_predistribution apply to honest parties only");
        }
        let check_outcome = |o: usize, issues: &mut Issues| {
            if o >= params.outcomes() {
                issues.push(format!("{loc}.strategy"), format!("outcome {o} out of range (N = {})", params.outcomes()));
                false
            } else {
                true
            }
        };
        let strategy = match *spec {
            StrategySpec::Honest => Strategy::Honest(HonestStrategy {
                source: source_of(k),
                clock_skew: party.clock_skew,
                dropped_predistribution: party.drop_predistribution.clone(),
            }),
            StrategySpec::OptimalShift(o) | StrategySpec::MinimizingShift(o) => {
                if !check_outcome(o, issues) {
                    continue;
                }
                let Some(h) = target_party else {
                    issues.push(&loc, "a shift attack needs an honest party");
                    continue;
                };
                let (s, report) = if matches!(spec, StrategySpec::OptimalShift(_)) {
                    optimal_shift_attack(params, h, &source_of(h), o)
                } else {
                    minimizing_shift_attack(params, h, &source_of(h), o)
                };
                if !attacks.iter().any(|(i, r)| *i == instance && *r == report) {
                    attacks.push((instance, report));
                }
                s
            }
            StrategySpec::Shift(c) => Strategy::dishonest(ShiftAttack::new(c % params.n())),
            StrategySpec::MitmRelay(latency) => {
                let min_deadline = params.layout().deadlines().iter().copied().fold(f64::INFINITY, f64::min);
                Strategy::dishonest(MitmRelay { latency: latency.unwrap_or(min_deadline / 4.0) })
            }
            StrategySpec::RandomAdmissible(seed) => Strategy::dishonest(RandomAdmissible { seed }),
            StrategySpec::InconsistentBroadcast => Strategy::dishonest(InconsistentBroadcast),
            StrategySpec::Silent => Strategy::dishonest(Silent),
            StrategySpec::ForbiddenRead => Strategy::dishonest(ForbiddenRead),
            StrategySpec::DelayedSteer(o) => {
                if !check_outcome(o, issues) {
                    continue;
                }
                Strategy::dishonest(DelayedSteer { target: o })
            }
        };
        out.push(strategy);
    }
    out
}

pub fn build_scenario(file: &ScenarioFile, default_name: &str, overrides: Overrides) -> Result<Scenario, ScenarioError> {
    let mut issues = Issues(Vec::new());
    let built = build_params(file, overrides, &mut issues);
    let Some((params, sources)) = built else {
        return Err(ScenarioError::Invalid(issues.0));
    };
    let mut attacks = Vec::new();
    let strategies = build_strategies(&params, &file.parties, &sources, "parties", 0, &mut attacks, &mut issues);
    let mut instances = vec![Instance::new(params.clone(), strategies)];
    if let Some(par) = &file.parallel {
        let mut par_sources = Vec::new();
        for (k, party) in par.parties.iter().enumerate() {
            let honest = matches!(parse_strategy(&party.strategy), Ok(StrategySpec::Honest));
            if !honest && party.source.is_none() {
                par_sources.push(None);
                continue;
            }
            match build_source(party.source.as_ref(), params.n(), params.epsilons().get(k).copied()) {
                Ok(s) => par_sources.push(Some(s)),
                Err(e) => {
                    issues.push(format!("parallel.parties[{k}].source"), e);
                    par_sources.push(None);
                }
            }
        }
        let strategies =
            build_strategies(&params, &par.parties, &par_sources, "parallel.parties", 1, &mut attacks, &mut issues);
        instances.push(Instance::new(params.clone(), strategies).with_offset(par.offset));
    }
    if !issues.0.is_empty() {
        return Err(ScenarioError::Invalid(issues.0));
    }
    let session = Session::new(instances).map_err(|e| {
        ScenarioError::Invalid(vec![Diagnostic { location: "parties".into(), message: e.to_string() }])
    })?;
    Ok(Scenario {
        name: file.name.clone().unwrap_or_else(|| default_name.to_string()),
        params,
        session,
        trials: file.trials.unwrap_or(10_000),
        seed: file.seed.unwrap_or(0),
        enumeration_limit: file.protocol.enumeration_limit.unwrap_or(crate::analysis::DEFAULT_ENUMERATION_LIMIT),
        attacks,
    })
}
