//! Outcome partitions `{Ω_o}` of `ℤ_n` realizing an ideal distribution.

use std::fmt;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

const SUM_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PartitionError {
    #[error("a distribution needs at least 2 outcomes, got {0}")]
    TooFewOutcomes(usize),
    #[error("probability P_{outcome} = {value} is outside [0, 1]")]
    OutOfRange { outcome: usize, value: f64 },
    #[error("probabilities sum to {0}, expected 1")]
    BadSum(f64),
    #[error("n = {n} is smaller than the number of outcomes N = {outcomes}")]
    TooFewResidues { n: usize, outcomes: usize },
    #[error("n = {n} leaves outcome {outcome} (P = {probability}) without any residue")]
    EmptyClass { n: usize, outcome: usize, probability: f64 },
    #[error("class sizes sum to {sum}, expected n = {n}")]
    SizeMismatch { sum: usize, n: usize },
    #[error("cannot parse probability {0:?}")]
    Parse(String),
}

/// A probability given either exactly (a rational) or only numerically.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probability {
    pub value: f64,
    pub exact: Option<Ratio<i64>>,
}

impl Probability {
    pub fn rational(num: i64, den: i64) -> Self {
        let r = Ratio::new(num, den);
        Self { value: ratio_to_f64(r), exact: Some(r) }
    }

    pub fn real(value: f64) -> Self {
        Self { value, exact: None }
    }
}

fn ratio_to_f64(r: Ratio<i64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

enum Term {
    Exact(Ratio<i64>),
    Real(f64),
}

fn parse_term(s: &str) -> Option<Term> {
    let s = s.trim();
    match s {
        "pi" | "π" => return Some(Term::Real(std::f64::consts::PI)),
        "e" => return Some(Term::Real(std::f64::consts::E)),
        _ => {}
    }
    if s.is_empty() || !s.chars().all(|c| c.is_ascii_digit() || c == '.') {
        return None;
    }
    match s.split_once('.') {
        None => s.parse::<i64>().ok().map(|v| Term::Exact(Ratio::from_integer(v))),
        Some((int, frac)) => {
            if frac.contains('.') || frac.len() > 15 {
                return s.parse::<f64>().ok().map(Term::Real);
            }
            let den = 10i64.checked_pow(frac.len() as u32)?;
            let int: i64 = if int.is_empty() { 0 } else { int.parse().ok()? };
            let frac: i64 = if frac.is_empty() { 0 } else { frac.parse().ok()? };
            Some(Term::Exact(Ratio::new(int.checked_mul(den)?.checked_add(frac)?, den)))
        }
    }
}

/// Parses `a`, `a/b` or `1-a/b`, where `a` and `b` are integers, decimals,
/// `pi` or `e`. Integers and decimals stay exact; `pi` and `e` make the value
/// irrational.
pub fn parse_probability(text: &str) -> Result<Probability, PartitionError> {
    let err = || PartitionError::Parse(text.to_string());
    let s = text.trim();
    let (complement, body) = match s.strip_prefix("1-").or_else(|| s.strip_prefix("1−")) {
        Some(rest) => (true, rest),
        None => (false, s),
    };
    let (num, den) = match body.split_once('/') {
        Some((a, b)) => (parse_term(a).ok_or_else(err)?, Some(parse_term(b).ok_or_else(err)?)),
        None => (parse_term(body).ok_or_else(err)?, None),
    };
    let value = match (num, den) {
        (Term::Exact(a), None) => Probability { value: ratio_to_f64(a), exact: Some(a) },
        (Term::Exact(a), Some(Term::Exact(b))) => {
            if *b.numer() == 0 {
                return Err(err());
            }
            let r = a / b;
            Probability { value: ratio_to_f64(r), exact: Some(r) }
        }
        (a, b) => {
            let f = |t: Term| match t {
                Term::Exact(r) => ratio_to_f64(r),
                Term::Real(v) => v,
            };
            let v = f(a) / b.map(f).unwrap_or(1.0);
            Probability::real(v)
        }
    };
    Ok(if complement {
        match value.exact {
            Some(r) => {
                let c = Ratio::from_integer(1) - r;
                Probability { value: ratio_to_f64(c), exact: Some(c) }
            }
            None => Probability::real(1.0 - value.value),
        }
    } else {
        value
    })
}

/// The agreed distribution `𝒫 = {P_o}` over `N` outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct IdealDistribution {
    probs: Vec<f64>,
    exact: Option<Vec<Ratio<i64>>>,
}

impl IdealDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self, PartitionError> {
        Self::validate(&probs)?;
        Ok(Self { probs, exact: None })
    }

    pub fn from_probabilities(ps: &[Probability]) -> Result<Self, PartitionError> {
        let probs: Vec<f64> = ps.iter().map(|p| p.value).collect();
        Self::validate(&probs)?;
        let exact: Option<Vec<_>> = ps.iter().map(|p| p.exact).collect();
        if let Some(ex) = &exact {
            let sum: Ratio<i64> = ex.iter().copied().sum();
            if sum != Ratio::from_integer(1) {
                return Err(PartitionError::BadSum(ratio_to_f64(sum)));
            }
        }
        Ok(Self { probs, exact })
    }

    pub fn uniform(outcomes: usize) -> Result<Self, PartitionError> {
        if outcomes < 2 {
            return Err(PartitionError::TooFewOutcomes(outcomes));
        }
        let ps: Vec<_> = (0..outcomes).map(|_| Probability::rational(1, outcomes as i64)).collect();
        Self::from_probabilities(&ps)
    }

    fn validate(probs: &[f64]) -> Result<(), PartitionError> {
        if probs.len() < 2 {
            return Err(PartitionError::TooFewOutcomes(probs.len()));
        }
        for (outcome, &value) in probs.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(PartitionError::OutOfRange { outcome, value });
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(PartitionError::BadSum(sum));
        }
        Ok(())
    }

    pub fn outcomes(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, o: usize) -> f64 {
        self.probs[o]
    }

    /// Exact rational values, when every entry was given exactly.
    pub fn exact(&self) -> Option<&[Ratio<i64>]> {
        self.exact.as_deref()
    }

    pub fn is_rational(&self) -> bool {
        self.exact.is_some()
    }

    /// Outcomes with `P_o = 0`; their class may legitimately be empty.
    pub fn zero_outcomes(&self) -> Vec<usize> {
        self.probs.iter().enumerate().filter(|(_, &p)| p == 0.0).map(|(o, _)| o).collect()
    }
}

/// `{Ω_o}`: an exact cover of `ℤ_n` by consecutive residue blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomePartition {
    n: usize,
    sizes: Vec<usize>,
    ideal: Vec<f64>,
    alpha: f64,
    #[serde(skip)]
    lookup: Vec<usize>,
}

impl OutcomePartition {
    /// Canonical partition with the given class sizes: `Ω_0 = {0..s_0-1}`,
    /// `Ω_1 = {s_0..s_0+s_1-1}`, and so on. `alpha` is the realized maximum
    /// deviation from `dist`.
    pub fn from_sizes(dist: &IdealDistribution, sizes: Vec<usize>) -> Result<Self, PartitionError> {
        let n: usize = sizes.iter().sum();
        if sizes.len() != dist.outcomes() {
            return Err(PartitionError::TooFewOutcomes(sizes.len()));
        }
        if n < dist.outcomes() {
            return Err(PartitionError::TooFewResidues { n, outcomes: dist.outcomes() });
        }
        let alpha = sizes
            .iter()
            .zip(dist.probs())
            .map(|(&s, &p)| (s as f64 / n as f64 - p).abs())
            .fold(0.0, f64::max);
        let lookup = sizes.iter().enumerate().flat_map(|(o, &s)| std::iter::repeat_n(o, s)).collect();
        Ok(Self { n, sizes, ideal: dist.probs().to_vec(), alpha, lookup })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn outcomes(&self) -> usize {
        self.sizes.len()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn ideal(&self) -> &[f64] {
        &self.ideal
    }

    /// `|Ω_o|`.
    pub fn class_size(&self, o: usize) -> usize {
        self.sizes[o]
    }

    pub fn class_sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn max_class_size(&self) -> usize {
        self.sizes.iter().copied().max().unwrap_or(0)
    }

    pub fn class(&self, o: usize) -> std::ops::Range<usize> {
        let start: usize = self.sizes[..o].iter().sum();
        start..start + self.sizes[o]
    }

    /// The outcome `o` with `x ∈ Ω_o`.
    pub fn outcome_of(&self, x: usize) -> usize {
        self.lookup[x % self.n]
    }

    /// Rebuilds the residue lookup table; needed after deserialization.
    pub fn refreshed(mut self) -> Self {
        self.lookup = self.sizes.iter().enumerate().flat_map(|(o, &s)| std::iter::repeat_n(o, s)).collect();
        self
    }
}

impl fmt::Display for OutcomePartition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n={} sizes={:?} alpha={}", self.n, self.sizes, self.alpha)
    }
}

/// Largest-remainder seat counts for quotas `n·P_o`; ties go to the lower
/// outcome index.
fn apportion(probs: &[f64], n: usize) -> Vec<usize> {
    let quotas: Vec<f64> = probs.iter().map(|p| p * n as f64).collect();
    let mut seats: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = seats.iter().sum();
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &o in order.iter().take(n.saturating_sub(assigned)) {
        seats[o] += 1;
    }
    seats
}

fn apportion_exact(probs: &[Ratio<i64>], n: usize) -> Vec<usize> {
    let quotas: Vec<Ratio<i128>> = probs
        .iter()
        .map(|p| Ratio::new(*p.numer() as i128 * n as i128, *p.denom() as i128))
        .collect();
    let mut seats: Vec<usize> = quotas.iter().map(|q| q.floor().to_integer() as usize).collect();
    let assigned: usize = seats.iter().sum();
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| quotas[b].fract().cmp(&quotas[a].fract()).then(a.cmp(&b)));
    for &o in order.iter().take(n.saturating_sub(assigned)) {
        seats[o] += 1;
    }
    seats
}

/// Builds the partition of `ℤ_n` by largest-remainder apportionment of
/// `n·P_o`.
///
/// Exact rational inputs are apportioned in exact arithmetic, so `alpha` is
/// exactly 0 whenever every `n·P_o` is an integer. An outcome with `P_o > 0`
/// that receives no residue is rejected; outcomes with `P_o = 0` keep an empty
/// class.
pub fn build_partition(dist: &IdealDistribution, n: usize) -> Result<OutcomePartition, PartitionError> {
    if n < dist.outcomes() {
        return Err(PartitionError::TooFewResidues { n, outcomes: dist.outcomes() });
    }
    let sizes = match dist.exact() {
        Some(exact) => apportion_exact(exact, n),
        None => apportion(dist.probs(), n),
    };
    if let Some(outcome) = sizes.iter().zip(dist.probs()).position(|(&s, &p)| s == 0 && p > 0.0) {
        return Err(PartitionError::EmptyClass { n, outcome, probability: dist.prob(outcome) });
    }
    let mut part = OutcomePartition::from_sizes(dist, sizes)?;
    if let Some(exact) = dist.exact() {
        let exact_zero = exact
            .iter()
            .zip(part.class_sizes())
            .all(|(p, &s)| *p * Ratio::from_integer(n as i64) == Ratio::from_integer(s as i64));
        if exact_zero {
            part.alpha = 0.0;
        }
    }
    Ok(part)
}

/// `n = N`, `Ω_o = {o}`, `α = 0`.
pub fn unbiased_partition(outcomes: usize) -> Result<OutcomePartition, PartitionError> {
    let dist = IdealDistribution::uniform(outcomes)?;
    build_partition(&dist, outcomes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, thiserror::Error)]
#[error("α + ε_k·|Ω_o| ≤ 1 violated for party {party}, outcome {outcome}: {alpha} + {epsilon}·{class_size} = {value}")]
pub struct FeasibilityViolation {
    pub party: usize,
    pub outcome: usize,
    pub alpha: f64,
    pub epsilon: f64,
    pub class_size: usize,
    pub value: f64,
}

/// Checks `α + ε_k·|Ω_o| ≤ 1` for every party and outcome.
pub fn check_feasibility(partition: &OutcomePartition, epsilons: &[f64]) -> Result<(), FeasibilityViolation> {
    for (party, &epsilon) in epsilons.iter().enumerate() {
        for outcome in 0..partition.outcomes() {
            let class_size = partition.class_size(outcome);
            let value = partition.alpha() + epsilon * class_size as f64;
            if value > 1.0 {
                return Err(FeasibilityViolation {
                    party,
                    outcome,
                    alpha: partition.alpha(),
                    epsilon,
                    class_size,
                    value,
                });
            }
        }
    }
    Ok(())
}
