//! Security bound, exact small-instance oracles and Monte Carlo estimation.
//!
//! Every probability of an outcome is conditioned on the run not aborting;
//! the abort probability is reported next to it.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::engine::{ChannelClass, LabId};
use crate::protocol::{InputAxis, ProtocolParams, RunError, Session, SessionInputs, SessionRecord};
use crate::randsource::{mix_seed, EntropyStream};

/// Default guard on the number of input combinations an exact oracle may
/// enumerate.
pub const DEFAULT_ENUMERATION_LIMIT: u64 = 1_000_000;

/// Tolerance for comparisons between exactly computed probabilities.
pub const EXACT_TOLERANCE: f64 = 1e-12;

pub const CHI_SQUARED_SIGNIFICANCE: f64 = 1e-3;

/// Number of standard deviations allowed for Monte Carlo estimates.
pub const SIGMA_LEVEL: f64 = 3.0;

/// Trials handed to one worker at a time. Fixed so that aggregation order,
/// and therefore every report, does not depend on the worker count.
const CHUNK: u64 = 1024;

/// Chunks in flight at once.
const BATCH: u64 = 64;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AnalysisError {
    #[error("exact enumeration needs {combinations} input combinations, limit is {limit}")]
    EnumerationLimit { combinations: u128, limit: u64 },
    #[error("run failed{}: {source}", trial.map(|t| format!(" in trial {t}")).unwrap_or_default())]
    Run { trial: Option<u64>, source: RunError },
    #[error("distribution of values received by party {party} (instance {instance}) given m = {value} sums to {total}")]
    Normalization { instance: usize, party: usize, value: usize, total: f64 },
    #[error("values received by party {party} (instance {instance}) depend on its own value: {detail}")]
    Signalling { instance: usize, party: usize, detail: String },
    #[error("oracle routes disagree on outcome {outcome} of instance {instance}: {grouped} vs {direct}")]
    OracleMismatch { instance: usize, outcome: usize, grouped: f64, direct: f64 },
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),
    #[error("trials must be at least 1")]
    NoTrials,
    #[error("worker pool: {0}")]
    Workers(String),
}

impl AnalysisError {
    pub fn is_causality(&self) -> bool {
        matches!(self, AnalysisError::Run { source, .. } if source.is_causality())
    }
}

/// `δ` together with the pair `(k, o)` attaining `max ε_k·|Ω_o|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SecurityBound {
    pub delta: f64,
    pub alpha: f64,
    pub worst_pair: (usize, usize),
}

pub fn security_bound(params: &ProtocolParams) -> SecurityBound {
    let partition = params.partition();
    let mut worst = (0, 0);
    let mut worst_value = f64::NEG_INFINITY;
    for (k, &eps) in params.epsilons().iter().enumerate() {
        for o in 0..partition.outcomes() {
            let v = eps * partition.class_size(o) as f64;
            if v > worst_value {
                worst_value = v;
                worst = (k, o);
            }
        }
    }
    SecurityBound { delta: partition.alpha() + worst_value, alpha: partition.alpha(), worst_pair: worst }
}

/// Compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
struct Sum {
    total: f64,
    carry: f64,
}

impl Sum {
    fn add(&mut self, v: f64) {
        let t = self.total + v;
        if self.total.abs() >= v.abs() {
            self.carry += (self.total - t) + v;
        } else {
            self.carry += (v - t) + self.total;
        }
        self.total = t;
    }

    fn merge(&mut self, other: &Sum) {
        self.add(other.total);
        self.add(other.carry);
    }

    fn value(&self) -> f64 {
        self.total + self.carry
    }
}

fn summarize(probs: &[f64], ideal: &[f64]) -> (Vec<f64>, f64) {
    let deviations: Vec<f64> = probs.iter().zip(ideal).map(|(p, q)| (p - q).abs()).collect();
    let vd = 0.5 * deviations.iter().sum::<f64>();
    (deviations, vd)
}

/// `P_max = ½ + ½·‖𝒫_R − 𝒫‖`.
pub fn p_max(variational_distance: f64) -> f64 {
    0.5 + 0.5 * variational_distance
}

/// `P(o)` obtained by exhaustive enumeration, one per protocol instance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExactDistribution {
    pub instance: usize,
    pub probs: Vec<f64>,
    pub ideal: Vec<f64>,
    pub abort_probability: f64,
    pub deviations: Vec<f64>,
    pub variational_distance: f64,
    pub p_max: f64,
    /// The same distribution computed from each honest party's grouping of
    /// received values by their sum.
    pub grouped: Vec<GroupedRoute>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupedRoute {
    pub party: usize,
    pub probs: Vec<f64>,
    /// Set when the sum of received values depends on the party's own
    /// value, which the engine rules out unless honest clocks are skewed.
    pub signalling: Option<String>,
}

/// Exact joint distribution of the outcomes of two parallel instances,
/// conditioned on neither aborting.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JointDistribution {
    pub probs: Vec<Vec<f64>>,
    pub marginals: (Vec<f64>, Vec<f64>),
    pub mutual_information: f64,
    /// `max |P(o, o′) − P(o)·P(o′)|`.
    pub product_gap: f64,
}

impl JointDistribution {
    pub fn from_probs(probs: Vec<Vec<f64>>) -> Self {
        let rows: Vec<f64> = probs.iter().map(|r| r.iter().sum()).collect();
        let cols: Vec<f64> = (0..probs.first().map_or(0, Vec::len)).map(|j| probs.iter().map(|r| r[j]).sum()).collect();
        let mut mi = 0.0;
        let mut gap: f64 = 0.0;
        for (i, row) in probs.iter().enumerate() {
            for (j, &p) in row.iter().enumerate() {
                let q = rows[i] * cols[j];
                gap = gap.max((p - q).abs());
                if p > 0.0 && q > 0.0 {
                    mi += p * (p / q).log2();
                }
            }
        }
        Self { probs, marginals: (rows, cols), mutual_information: mi.max(0.0), product_gap: gap }
    }

    pub fn is_product(&self, tolerance: f64) -> bool {
        self.product_gap <= tolerance
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExactAnalysis {
    pub combinations: u64,
    pub instances: Vec<ExactDistribution>,
    pub joint: Option<JointDistribution>,
}

struct Enumeration {
    axes: Vec<InputAxis>,
    sizes: Vec<usize>,
    total: u64,
}

impl Enumeration {
    fn new(session: &Session, limit: u64) -> Result<Self, AnalysisError> {
        let axes = session.input_axes();
        let sizes: Vec<usize> = axes
            .iter()
            .map(|a| match a {
                InputAxis::Honest { probs, .. } => probs.len(),
                InputAxis::Shared { support, .. } => *support as usize,
            })
            .collect();
        let combinations = sizes.iter().fold(1u128, |acc, &s| acc.saturating_mul(s as u128));
        if combinations > limit as u128 {
            return Err(AnalysisError::EnumerationLimit { combinations, limit });
        }
        Ok(Self { axes, sizes, total: combinations as u64 })
    }

    fn digits(&self, mut index: u64) -> Vec<usize> {
        self.sizes
            .iter()
            .rev()
            .map(|&s| {
                let d = (index % s as u64) as usize;
                index /= s as u64;
                d
            })
            .collect::<Vec<_>>()
            .into_iter()
            .rev()
            .collect()
    }

    fn weight(&self, axis: usize, digit: usize) -> f64 {
        match &self.axes[axis] {
            InputAxis::Honest { probs, .. } => probs[digit],
            InputAxis::Shared { support, .. } => 1.0 / *support as f64,
        }
    }

    fn inputs(&self, session: &Session, digits: &[usize]) -> SessionInputs {
        let mut inputs = session.empty_inputs();
        for (axis, &d) in self.axes.iter().zip(digits) {
            match *axis {
                InputAxis::Honest { instance, party, .. } => inputs.honest[instance][party] = Some(d),
                InputAxis::Shared { instance, party, .. } => inputs.shared[instance][party] = d as u64,
            }
        }
        inputs
    }

    fn honest_axes(&self) -> Vec<(usize, usize, usize)> {
        self.axes
            .iter()
            .enumerate()
            .filter_map(|(a, axis)| match *axis {
                InputAxis::Honest { instance, party, .. } => Some((a, instance, party)),
                InputAxis::Shared { .. } => None,
            })
            .collect()
    }
}

/// Per-chunk accumulator of the exact oracle.
#[derive(Clone)]
struct Tally {
    /// `[instance][outcome]`
    direct: Vec<Vec<Sum>>,
    aborted: Vec<Sum>,
    /// `(honest axis, own value, received sum)`, received sum `n` = abort.
    received: BTreeMap<(usize, usize, usize), Sum>,
    joint: Vec<Vec<Sum>>,
}

impl Tally {
    fn new(session: &Session) -> Self {
        let inst = session.instances();
        let joint = if inst.len() == 2 {
            vec![vec![Sum::default(); inst[1].params.outcomes()]; inst[0].params.outcomes()]
        } else {
            Vec::new()
        };
        Self {
            direct: inst.iter().map(|i| vec![Sum::default(); i.params.outcomes()]).collect(),
            aborted: vec![Sum::default(); inst.len()],
            received: BTreeMap::new(),
            joint,
        }
    }

    fn merge(&mut self, other: &Tally) {
        fn merge_all(a: &mut [Sum], b: &[Sum]) {
            a.iter_mut().zip(b).for_each(|(x, y)| x.merge(y));
        }
        self.direct.iter_mut().zip(&other.direct).for_each(|(a, b)| merge_all(a, b));
        merge_all(&mut self.aborted, &other.aborted);
        for (key, v) in &other.received {
            self.received.entry(*key).or_default().merge(v);
        }
        self.joint.iter_mut().zip(&other.joint).for_each(|(a, b)| merge_all(a, b));
    }
}

fn run_error(e: RunError) -> AnalysisError {
    AnalysisError::Run { trial: None, source: e }
}

/// Runs `f` over `0..total` in fixed chunks on the current rayon pool,
/// a bounded batch at a time, and hands the chunk results to `merge` in
/// index order.
fn for_chunks<T: Send>(
    total: u64,
    f: impl Fn(std::ops::Range<u64>) -> Result<T, AnalysisError> + Sync,
    mut merge: impl FnMut(T),
) -> Result<(), AnalysisError> {
    let chunks = total.div_ceil(CHUNK);
    let mut start = 0;
    while start < chunks {
        let end = (start + BATCH).min(chunks);
        let results: Vec<T> = (start..end)
            .into_par_iter()
            .map(|c| f(c * CHUNK..((c + 1) * CHUNK).min(total)))
            .collect::<Result<_, _>>()?;
        results.into_iter().for_each(&mut merge);
        start = end;
    }
    Ok(())
}

/// Exact `P(o)` for every instance of `session`, enumerating all honest
/// draws and every value of the coalition's shared randomness.
///
/// Two routes are computed and must agree. The direct route sums the
/// weights of runs per outcome. The grouped route, for each honest party
/// `k`, tabulates the distribution of the sum of the values `k` accepts
/// given its own value `y`, checks that it is normalized and independent of
/// `y`, and combines it with `k`'s source distribution.
pub fn exact_outcome_distribution(session: &Session, limit: u64) -> Result<ExactAnalysis, AnalysisError> {
    let en = Enumeration::new(session, limit)?;
    let honest = en.honest_axes();
    let instances = session.instances();

    let mut tally = Tally::new(session);
    for_chunks(en.total, |range| {
        let mut tally = Tally::new(session);
        for index in range {
            let digits = en.digits(index);
            let weights: Vec<f64> = digits.iter().enumerate().map(|(a, &d)| en.weight(a, d)).collect();
            let w: f64 = weights.iter().product();
            let record = session.execute(&en.inputs(session, &digits)).map_err(run_error)?;
            let outcomes = record.outcomes();
            for (i, o) in outcomes.iter().enumerate() {
                match o.value() {
                    Some(o) => tally.direct[i][o].add(w),
                    None => tally.aborted[i].add(w),
                }
            }
            if let [Some(a), Some(b)] = [outcomes.first().and_then(|o| o.value()), outcomes.get(1).and_then(|o| o.value())] {
                if !tally.joint.is_empty() {
                    tally.joint[a][b].add(w);
                }
            }
            for (h, &(axis, inst, party)) in honest.iter().enumerate() {
                let rest: f64 = weights.iter().enumerate().filter(|&(a, _)| a != axis).map(|(_, w)| w).product();
                let n = instances[inst].params.n();
                let t = &record.transcripts[inst];
                let slot = if t.aborted() {
                    n
                } else {
                    let view = t.views[party].as_ref().expect("honest view");
                    (view.received.iter().flatten().sum::<u64>() % n as u64) as usize
                };
                tally.received.entry((h, digits[axis], slot)).or_default().add(rest);
            }
        }
        Ok(tally)
    }, |t| tally.merge(&t))?;

    let mut out = Vec::with_capacity(instances.len());
    for (i, inst) in instances.iter().enumerate() {
        let params = &inst.params;
        let ideal = params.partition().ideal().to_vec();
        let abort = tally.aborted[i].value();
        let kept = 1.0 - abort;
        let probs: Vec<f64> = if kept > EXACT_TOLERANCE {
            tally.direct[i].iter().map(|s| s.value() / kept).collect()
        } else {
            vec![0.0; params.outcomes()]
        };
        let mut grouped = Vec::new();
        for (h, &(axis, inst_h, party)) in honest.iter().enumerate() {
            if inst_h != i {
                continue;
            }
            let InputAxis::Honest { probs: source, .. } = &en.axes[axis] else { unreachable!() };
            let n = params.n();
            let mut table = vec![vec![0.0; n + 1]; n];
            for (&(_, y, z), v) in tally.received.range((h, 0, 0)..(h + 1, 0, 0)) {
                table[y][z] = v.value();
            }
            let (route, signalling) = grouped_route(params, i, party, source, &table)?;
            if kept > EXACT_TOLERANCE {
                for (o, (&g, &d)) in route.iter().zip(&probs).enumerate() {
                    if (g - d).abs() > 1e-9 {
                        return Err(AnalysisError::OracleMismatch { instance: i, outcome: o, grouped: g, direct: d });
                    }
                }
            }
            grouped.push(GroupedRoute { party, probs: route, signalling });
        }
        let (deviations, vd) = summarize(&probs, &ideal);
        out.push(ExactDistribution {
            instance: i,
            probs,
            ideal,
            abort_probability: abort,
            deviations,
            variational_distance: vd,
            p_max: p_max(vd),
            grouped,
        });
    }

    let joint = (instances.len() == 2).then(|| {
        let total: f64 = tally.joint.iter().flatten().map(Sum::value).sum();
        let probs = tally
            .joint
            .iter()
            .map(|r| r.iter().map(|s| if total > 0.0 { s.value() / total } else { 0.0 }).collect())
            .collect();
        JointDistribution::from_probs(probs)
    });
    Ok(ExactAnalysis { combinations: en.total, instances: out, joint })
}

/// `P(o) = Σ_{x∈Ω_o} Σ_y P_k(y)·Q((x − y) mod n | y) / (1 − P(abort))` with
/// `Q(·|y)` the distribution of the sum of the values party `k` accepts
/// when its own value is `y`. Also reports whether `Q(·|y)` varies with `y`.
fn grouped_route(
    params: &ProtocolParams,
    instance: usize,
    party: usize,
    source: &[f64],
    q: &[Vec<f64>],
) -> Result<(Vec<f64>, Option<String>), AnalysisError> {
    let n = params.n();
    let mut signalling = None;
    for (value, row) in q.iter().enumerate() {
        let total: f64 = row.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(AnalysisError::Normalization { instance, party, value, total });
        }
        if signalling.is_none() {
            signalling = row.iter().zip(&q[0]).enumerate().find(|(_, (&a, &b))| (a - b).abs() > 1e-9).map(
                |(z, (a, b))| format!("P(sum = {z} | m = {value}) = {a} but P(sum = {z} | m = 0) = {b}"),
            );
        }
    }
    let abort: f64 = source.iter().zip(q).map(|(p, row)| p * row[n]).sum();
    let kept = 1.0 - abort;
    let partition = params.partition();
    let probs = (0..partition.outcomes())
        .map(|o| {
            if kept <= EXACT_TOLERANCE {
                return 0.0;
            }
            let mut s = Sum::default();
            for x in partition.class(o) {
                for (y, &p) in source.iter().enumerate() {
                    s.add(p * q[y][(x + n - y) % n]);
                }
            }
            s.value() / kept
        })
        .collect();
    Ok((probs, signalling))
}

fn coalition_payloads(
    session: &Session,
    record: &SessionRecord,
    instance: usize,
) -> Vec<(LabId, LabId, Option<u64>, u64)> {
    let t = &record.transcripts[instance];
    let mut v: Vec<_> = t
        .messages
        .iter()
        .filter(|m| {
            let c = session.coalition();
            m.channel == ChannelClass::FastInterParty && c.contains(instance, m.from.owner) && !c.contains(instance, m.to.owner)
        })
        .filter(|m| m.within_window(t.params.layout(), t.offset))
        .map(|m| (m.from, m.to, m.payload, m.received_at.map_or(0, |r| r.t.to_bits())))
        .collect();
    v.sort_by_key(|d| (d.0, d.1));
    v
}

/// Runs every input combination once per value of each honest party's own
/// draw, with the coalition's randomness held fixed, and checks that none of
/// the in-window stage-II messages the coalition sends to honest parties of
/// that instance (endpoints, payload and arrival) change with the draw.
/// Late emissions may depend on it; the deadline check rejects them. Returns the number of comparisons made.
pub fn check_no_signalling(session: &Session, limit: u64) -> Result<u64, AnalysisError> {
    let en = Enumeration::new(session, limit)?;
    let honest = en.honest_axes();
    let mut total = 0;
    for_chunks(en.total, |range| {
        let mut checked = 0u64;
        for index in range {
            let digits = en.digits(index);
            for &(axis, instance, party) in &honest {
                // every assignment of the other axes is visited once, with this axis at 0
                if digits[axis] != 0 {
                    continue;
                }
                let base = session.execute(&en.inputs(session, &digits)).map_err(run_error)?;
                let expected = coalition_payloads(session, &base, instance);
                for y in 1..en.sizes[axis] {
                    let mut d = digits.clone();
                    d[axis] = y;
                    let record = session.execute(&en.inputs(session, &d)).map_err(run_error)?;
                    let got = coalition_payloads(session, &record, instance);
                    if got != expected {
                        return Err(AnalysisError::Signalling {
                            instance,
                            party,
                            detail: format!("inputs {digits:?}: {expected:?} with m = 0, {got:?} with m = {y}"),
                        });
                    }
                    checked += 1;
                }
            }
        }
        Ok(checked)
    }, |c| total += c)?;
    Ok(total)
}

/// Empirical outcome frequencies of one instance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutcomeStats {
    pub counts: Vec<u64>,
    /// Runs that ended with an agreed outcome.
    pub trials: u64,
    pub aborts: u64,
    pub empirical: Vec<f64>,
    pub ideal: Vec<f64>,
    pub deviations: Vec<f64>,
    pub variational_distance: f64,
    pub p_max: f64,
}

impl OutcomeStats {
    pub fn from_counts(counts: Vec<u64>, aborts: u64, ideal: Vec<f64>) -> Self {
        let trials: u64 = counts.iter().sum();
        let empirical: Vec<f64> =
            counts.iter().map(|&c| if trials > 0 { c as f64 / trials as f64 } else { 0.0 }).collect();
        let (deviations, vd) = summarize(&empirical, &ideal);
        Self { counts, trials, aborts, empirical, ideal, deviations, variational_distance: vd, p_max: p_max(vd) }
    }

    pub fn abort_rate(&self) -> f64 {
        let runs = self.trials + self.aborts;
        if runs == 0 {
            0.0
        } else {
            self.aborts as f64 / runs as f64
        }
    }

    /// Whether each empirical frequency lies within `sigmas` binomial
    /// standard deviations of `reference`.
    pub fn within_sigma(&self, reference: &[f64], sigmas: f64) -> bool {
        let t = self.trials.max(1) as f64;
        self.empirical.iter().zip(reference).all(|(&p, &q)| {
            let sd = (q * (1.0 - q) / t).sqrt();
            (p - q).abs() <= sigmas * sd + 1e-12
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonteCarlo {
    pub runs: u64,
    pub seed: u64,
    pub instances: Vec<OutcomeStats>,
    /// Counts of `(o, o′)` over runs where both of two instances agreed.
    pub joint: Option<Vec<Vec<u64>>>,
}

#[derive(Clone)]
struct Counts {
    outcomes: Vec<Vec<u64>>,
    aborts: Vec<u64>,
    joint: Vec<Vec<u64>>,
}

/// Runs the session `trials` times, trial `i` seeded from `mix_seed(seed,
/// i)`, on `workers` threads (all cores when `None`).
pub fn monte_carlo(session: &Session, trials: u64, seed: u64, workers: Option<usize>) -> Result<MonteCarlo, AnalysisError> {
    if trials == 0 {
        return Err(AnalysisError::NoTrials);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.unwrap_or(0))
        .build()
        .map_err(|e| AnalysisError::Workers(e.to_string()))?;
    let inst = session.instances();
    let empty = Counts {
        outcomes: inst.iter().map(|i| vec![0; i.params.outcomes()]).collect(),
        aborts: vec![0; inst.len()],
        joint: if inst.len() == 2 {
            vec![vec![0; inst[1].params.outcomes()]; inst[0].params.outcomes()]
        } else {
            Vec::new()
        },
    };
    let mut total = empty.clone();
    pool.install(|| {
        for_chunks(trials, |range| {
            let mut c = empty.clone();
            for trial in range {
                let mut entropy = EntropyStream::from_seed(mix_seed(seed, trial));
                let record =
                    session.run(&mut entropy).map_err(|e| AnalysisError::Run { trial: Some(trial), source: e })?;
                let outcomes = record.outcomes();
                for (i, o) in outcomes.iter().enumerate() {
                    match o.value() {
                        Some(o) => c.outcomes[i][o] += 1,
                        None => c.aborts[i] += 1,
                    }
                }
                if let (false, [a, b]) = (c.joint.is_empty(), outcomes.as_slice()) {
                    if let (Some(a), Some(b)) = (a.value(), b.value()) {
                        c.joint[a][b] += 1;
                    }
                }
            }
            Ok(c)
        }, |c| {
        for (a, b) in total.outcomes.iter_mut().zip(&c.outcomes) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        total.aborts.iter_mut().zip(&c.aborts).for_each(|(x, y)| *x += y);
        for (a, b) in total.joint.iter_mut().zip(&c.joint) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        })
    })?;
    let instances = inst
        .iter()
        .zip(total.outcomes)
        .zip(total.aborts)
        .map(|((i, counts), aborts)| OutcomeStats::from_counts(counts, aborts, i.params.partition().ideal().to_vec()))
        .collect();
    Ok(MonteCarlo { runs: trials, seed, instances, joint: (inst.len() == 2).then_some(total.joint) })
}

/// How much slack a security check allows for the input distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Tolerance {
    /// Exactly computed distribution.
    Exact,
    /// Empirical frequencies over this many non-aborted runs.
    Sampled { trials: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Witness {
    pub outcome: usize,
    pub deviation: f64,
    pub allowed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SecurityCheck {
    pub pass: bool,
    pub delta: f64,
    pub max_deviation: f64,
    pub variational_distance: f64,
    pub variational_allowed: f64,
    /// The outcome with the largest excess over its allowance, if any
    /// allowance is exceeded.
    pub witness: Option<Witness>,
    /// No run ended without an abort, so there is no `P(o)` to check.
    pub vacuous: bool,
}

impl SecurityCheck {
    pub fn vacuous(bound: &SecurityBound, outcomes: usize) -> Self {
        Self {
            pass: true,
            delta: bound.delta,
            max_deviation: 0.0,
            variational_distance: 0.0,
            variational_allowed: outcomes as f64 * bound.delta / 2.0,
            witness: None,
            vacuous: true,
        }
    }
}

/// Pass iff every `|P(o) − P_o| ≤ δ` and `½Σ|P(o) − P_o| ≤ Nδ/2`, each
/// widened by the tolerance.
pub fn check_security(probs: &[f64], ideal: &[f64], bound: &SecurityBound, tolerance: Tolerance) -> SecurityCheck {
    let delta = bound.delta;
    let slack: Vec<f64> = ideal
        .iter()
        .map(|&q| match tolerance {
            Tolerance::Exact => EXACT_TOLERANCE,
            Tolerance::Sampled { trials } => {
                let t = trials.max(1) as f64;
                let var = |p: f64| {
                    let p = p.clamp(0.0, 1.0);
                    p * (1.0 - p) / t
                };
                SIGMA_LEVEL * var(q + delta).max(var(q - delta)).sqrt() + EXACT_TOLERANCE
            }
        })
        .collect();
    let (deviations, vd) = summarize(probs, ideal);
    let mut witness: Option<Witness> = None;
    for (o, (&dev, &s)) in deviations.iter().zip(&slack).enumerate() {
        let allowed = delta + s;
        if dev > allowed && witness.is_none_or(|w| dev - allowed > w.deviation - w.allowed) {
            witness = Some(Witness { outcome: o, deviation: dev, allowed });
        }
    }
    let outcomes = ideal.len() as f64;
    let variational_allowed = outcomes * delta / 2.0 + 0.5 * slack.iter().sum::<f64>();
    let pass = witness.is_none() && vd <= variational_allowed;
    SecurityCheck {
        pass,
        delta,
        max_deviation: deviations.iter().copied().fold(0.0, f64::max),
        variational_distance: vd,
        variational_allowed,
        witness,
        vacuous: false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IndependenceReport {
    pub samples: u64,
    /// Of the empirical joint, in bits.
    pub mutual_information: f64,
    pub chi_squared: f64,
    pub degrees_of_freedom: usize,
    pub p_value: f64,
    pub significance: f64,
    pub independent: bool,
}

/// Mutual information and a chi-squared test of independence on a table of
/// paired counts. Rows and columns that never occur are dropped; every
/// remaining expected count must be at least 5.
pub fn independence_test(joint: &[Vec<u64>], significance: f64) -> Result<IndependenceReport, AnalysisError> {
    let samples: u64 = joint.iter().flatten().sum();
    if samples == 0 {
        return Err(AnalysisError::InsufficientSamples("no paired samples".into()));
    }
    let rows: Vec<u64> = joint.iter().map(|r| r.iter().sum()).collect();
    let width = joint.first().map_or(0, Vec::len);
    let cols: Vec<u64> = (0..width).map(|j| joint.iter().map(|r| r[j]).sum()).collect();
    let live_rows: Vec<usize> = (0..rows.len()).filter(|&i| rows[i] > 0).collect();
    let live_cols: Vec<usize> = (0..width).filter(|&j| cols[j] > 0).collect();
    let t = samples as f64;
    let mut chi = 0.0;
    let mut mi = 0.0;
    for &i in &live_rows {
        for &j in &live_cols {
            let expected = rows[i] as f64 * cols[j] as f64 / t;
            if expected < 5.0 {
                return Err(AnalysisError::InsufficientSamples(format!(
                    "expected count {expected:.2} < 5 for cell ({i}, {j})"
                )));
            }
            let observed = joint[i][j] as f64;
            chi += (observed - expected).powi(2) / expected;
            if observed > 0.0 {
                mi += observed / t * (observed / expected).log2();
            }
        }
    }
    let dof = (live_rows.len().saturating_sub(1)) * (live_cols.len().saturating_sub(1));
    let p_value = if dof == 0 {
        1.0
    } else {
        ChiSquared::new(dof as f64).map_err(|e| AnalysisError::Workers(e.to_string()))?.sf(chi)
    };
    Ok(IndependenceReport {
        samples,
        mutual_information: mi.max(0.0),
        chi_squared: chi,
        degrees_of_freedom: dof,
        p_value,
        significance,
        independent: p_value >= significance,
    })
}

/// `Σ p·ln(p/q)` in nats; infinite if `p` has mass where `q` has none.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| if b > 0.0 { a * (a / b).ln() } else { f64::INFINITY })
        .sum()
}

/// Tab-separated `outcome ideal exact empirical deviation delta` rows for
/// external plotting; missing columns are `-`.
pub fn plot_data(ideal: &[f64], exact: Option<&[f64]>, empirical: Option<&[f64]>, delta: f64) -> String {
    let mut out = String::from("outcome\tideal\texact\tempirical\tdeviation\tdelta\n");
    for (o, &q) in ideal.iter().enumerate() {
        let e = exact.map(|v| v[o]);
        let m = empirical.map(|v| v[o]);
        let dev = e.or(m).map(|p| (p - q).abs());
        let cell = |v: Option<f64>| v.map_or("-".to_string(), |v| v.to_string());
        let _ = writeln!(out, "{o}\t{q}\t{}\t{}\t{}\t{delta}", cell(e), cell(m), cell(dev));
    }
    out
}
