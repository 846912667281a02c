//! Party strategies.
//!
//! An honest party is described by its random source; the protocol module
//! executes its behaviour. Every dishonest party is driven by a [`Policy`],
//! and all dishonest parties of a session act as one coalition: they share a
//! pre-agreed random string and can read each other's events, but only
//! through a [`View`], which refuses anything outside the causal past of the
//! decision being made.
//!
//! The adversary model is classical. Its power against the outcome comes
//! only from what reaches it in time, which is what the view restricts.

use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::engine::{Coalition, EngineError, View};
use crate::protocol::ProtocolParams;
use crate::randsource::{mix_seed, SourceModel};
use crate::spacetime::SpacetimeEvent;

/// Position of one dishonest laboratory: party `party` of `instance`,
/// delivering into ball `site`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Slot {
    pub instance: usize,
    pub party: usize,
    pub site: usize,
}

/// Static facts about a session that every policy may use.
#[derive(Debug, Clone)]
pub struct Env<'a> {
    pub instances: Vec<(&'a ProtocolParams, f64)>,
    pub coalition: &'a Coalition,
}

impl Env<'_> {
    pub fn params(&self, instance: usize) -> &ProtocolParams {
        self.instances[instance].0
    }

    /// Frame time at which the instance's stage II starts.
    pub fn offset(&self, instance: usize) -> f64 {
        self.instances[instance].1
    }

    pub fn n(&self, instance: usize) -> usize {
        self.params(instance).n()
    }

    /// Earliest point of a stage-II window: the ball center at the start.
    pub fn window_start(&self, slot: Slot) -> SpacetimeEvent {
        let center = self.params(slot.instance).layout().ball(slot.site).center;
        SpacetimeEvent::new(self.offset(slot.instance), center)
    }

    pub fn dishonest(&self, instance: usize) -> Vec<usize> {
        (0..self.params(instance).parties()).filter(|&p| self.coalition.contains(instance, p)).collect()
    }

    pub fn honest(&self, instance: usize) -> Vec<usize> {
        self.coalition.honest(instance)
    }
}

/// Decision policy of a dishonest party.
///
/// Policies are pure: everything they return is a function of the
/// environment, the slot, the shared randomness, and what they read through
/// the view.
pub trait Policy: Send + Sync + fmt::Debug {
    fn name(&self) -> String;

    /// Number of equally likely values of this slot's share of the
    /// coalition's pre-agreed randomness.
    fn randomness_support(&self, _env: &Env<'_>, _slot: Slot) -> u64 {
        1
    }

    /// Where and when the laboratory emits its stage-II message; `None`
    /// stays silent.
    fn emission_point(&self, env: &Env<'_>, slot: Slot, _shared: &[Vec<u64>]) -> Option<SpacetimeEvent> {
        Some(env.window_start(slot))
    }

    fn payload(&self, env: &Env<'_>, slot: Slot, view: &mut View<'_>) -> Result<u64, EngineError>;
}

/// Behaviour of an honest party, with optional fault injection used to
/// exercise abort paths.
#[derive(Debug, Clone, PartialEq)]
pub struct HonestStrategy {
    pub source: SourceModel,
    /// Offset of this party's clock from frame time, applied to its
    /// deadline checks. Zero is the only setting the security analysis
    /// covers.
    pub clock_skew: f64,
    /// Sites whose predistribution copy is lost in transit.
    pub dropped_predistribution: Vec<usize>,
}

impl HonestStrategy {
    pub fn with_clock_skew(mut self, skew: f64) -> Self {
        self.clock_skew = skew;
        self
    }

    pub fn dropping(mut self, sites: Vec<usize>) -> Self {
        self.dropped_predistribution = sites;
        self
    }
}

#[derive(Debug, Clone)]
pub enum Strategy {
    Honest(HonestStrategy),
    Dishonest(Arc<dyn Policy>),
}

impl Strategy {
    pub fn name(&self) -> String {
        match self {
            Strategy::Honest(_) => "honest".to_string(),
            Strategy::Dishonest(p) => p.name(),
        }
    }

    pub fn is_honest(&self) -> bool {
        matches!(self, Strategy::Honest(_))
    }

    pub fn dishonest(policy: impl Policy + 'static) -> Self {
        Strategy::Dishonest(Arc::new(policy))
    }
}

pub fn honest_strategy(source: SourceModel) -> Strategy {
    Strategy::Honest(HonestStrategy { source, clock_skew: 0.0, dropped_predistribution: Vec::new() })
}

fn residue(v: i64, n: usize) -> u64 {
    v.rem_euclid(n as i64) as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftDirection {
    Maximize,
    Minimize,
}

/// Dishonest parties fix the sum of their messages to `shift`.
///
/// The lowest-indexed dishonest party of the instance is the anchor; every
/// other dishonest party sends a value drawn from the shared randomness and
/// the anchor compensates so the total is `shift mod n`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftAttack {
    pub shift: usize,
    pub label: String,
}

impl ShiftAttack {
    pub fn new(shift: usize) -> Self {
        Self { shift, label: format!("shift({shift})") }
    }

    fn anchor(env: &Env<'_>, instance: usize) -> Option<usize> {
        env.dishonest(instance).first().copied()
    }
}

impl Policy for ShiftAttack {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn randomness_support(&self, env: &Env<'_>, slot: Slot) -> u64 {
        if Self::anchor(env, slot.instance) == Some(slot.party) {
            1
        } else {
            env.n(slot.instance) as u64
        }
    }

    fn payload(&self, env: &Env<'_>, slot: Slot, view: &mut View<'_>) -> Result<u64, EngineError> {
        let n = env.n(slot.instance);
        if Self::anchor(env, slot.instance) != Some(slot.party) {
            return Ok(view.shared(slot.instance, slot.party) % n as u64);
        }
        let others: i64 = env
            .dishonest(slot.instance)
            .into_iter()
            .filter(|&p| p != slot.party)
            .map(|p| (view.shared(slot.instance, p) % n as u64) as i64)
            .sum();
        Ok(residue(self.shift as i64 - others, n))
    }
}

/// Outcome of planning a shift attack against one honest party.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackReport {
    pub target: usize,
    pub direction: ShiftDirection,
    pub shift: usize,
    /// Probability of the target under the attack.
    pub achieved: f64,
    /// `(1/n + ε_k)·|Ω_o*|` when maximizing, `(1/n − ε_k)·|Ω_o*|` when
    /// minimizing.
    pub bound: f64,
}

/// `Σ_{x∈Ω_o*} P_k((x − c) mod n)` for every shift `c`.
pub fn shift_profile(params: &ProtocolParams, honest_source: &SourceModel, target: usize) -> Vec<f64> {
    let n = params.n();
    let class = params.partition().class(target);
    (0..n)
        .map(|c| class.clone().map(|x| honest_source.prob((x + n - c) % n)).sum())
        .collect()
}

fn plan_shift(
    params: &ProtocolParams,
    honest_k: usize,
    honest_source: &SourceModel,
    target: usize,
    direction: ShiftDirection,
) -> (Strategy, AttackReport) {
    let profile = shift_profile(params, honest_source, target);
    let mut shift = 0;
    for (c, &p) in profile.iter().enumerate() {
        let better = match direction {
            ShiftDirection::Maximize => p > profile[shift],
            ShiftDirection::Minimize => p < profile[shift],
        };
        if better {
            shift = c;
        }
    }
    let n = params.n() as f64;
    let eps = params.epsilons()[honest_k];
    let size = params.partition().class_size(target) as f64;
    let bound = match direction {
        ShiftDirection::Maximize => (1.0 / n + eps) * size,
        ShiftDirection::Minimize => (1.0 / n - eps) * size,
    };
    let label = match direction {
        ShiftDirection::Maximize => format!("optimal_shift({target})"),
        ShiftDirection::Minimize => format!("minimizing_shift({target})"),
    };
    let attack = ShiftAttack { shift, label };
    let report = AttackReport { target, direction, shift, achieved: profile[shift], bound };
    (Strategy::dishonest(attack), report)
}

/// The best shift for steering the outcome toward `target`, found by brute
/// force over all `n` shifts. The outcome probability is linear in the
/// adversary's distribution over shifts, so a deterministic shift is optimal.
pub fn optimal_shift_attack(
    params: &ProtocolParams,
    honest_k: usize,
    honest_source: &SourceModel,
    target: usize,
) -> (Strategy, AttackReport) {
    plan_shift(params, honest_k, honest_source, target, ShiftDirection::Maximize)
}

/// The shift that drives the probability of `target` as low as possible.
pub fn minimizing_shift_attack(
    params: &ProtocolParams,
    honest_k: usize,
    honest_source: &SourceModel,
    target: usize,
) -> (Strategy, AttackReport) {
    plan_shift(params, honest_k, honest_source, target, ShiftDirection::Minimize)
}

/// Man-in-the-middle across two parallel instances.
///
/// A dishonest party `p` of one instance forwards, into each ball, the value
/// that party `p` of the other instance delivered there, provided that party
/// is honest in the other instance. Otherwise it sends 0. Each emission
/// happens `latency` after the start of its own instance's window, so the
/// relay is causal only when the configured offsets allow it.
#[derive(Debug, Clone, PartialEq)]
pub struct MitmRelay {
    pub latency: f64,
}

impl MitmRelay {
    fn other(env: &Env<'_>, instance: usize) -> Option<usize> {
        (env.instances.len() == 2).then_some(1 - instance)
    }
}

impl Policy for MitmRelay {
    fn name(&self) -> String {
        "mitm_relay".to_string()
    }

    fn emission_point(&self, env: &Env<'_>, slot: Slot, _shared: &[Vec<u64>]) -> Option<SpacetimeEvent> {
        let start = env.window_start(slot);
        Some(start.at_time(start.t + self.latency))
    }

    fn payload(&self, env: &Env<'_>, slot: Slot, view: &mut View<'_>) -> Result<u64, EngineError> {
        let Some(other) = Self::other(env, slot.instance) else {
            return Ok(0);
        };
        if slot.party >= env.params(other).parties() || env.coalition.contains(other, slot.party) {
            return Ok(0);
        }
        match view.find_delivery(other, slot.party, slot.site) {
            Some(id) => Ok(view.read(id)?.unwrap_or(0) % env.n(slot.instance) as u64),
            None => Ok(0),
        }
    }
}

/// A deterministic pseudo-random policy: emission time, position and payload
/// are a fixed random function of the seed, the slot, the shared randomness
/// and every payload the view admits.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomAdmissible {
    pub seed: u64,
}

impl RandomAdmissible {
    fn support(&self) -> u64 {
        1 + mix_seed(self.seed, 0xA11) % 3
    }

    /// Per-site values break stage-III consistency; only some seeds do it.
    fn per_site(&self) -> bool {
        mix_seed(self.seed, 0x5173).is_multiple_of(4)
    }

    fn slot_hash(&self, env: &Env<'_>, slot: Slot, shared: &[Vec<u64>], salt: u64) -> u64 {
        let mut h = mix_seed(self.seed, salt);
        let site = if self.per_site() { slot.site as u64 + 1 } else { 0 };
        for v in [slot.instance as u64, slot.party as u64, site] {
            h = mix_seed(h, v);
        }
        for p in env.dishonest(slot.instance) {
            h = mix_seed(h, shared.get(slot.instance).and_then(|s| s.get(p)).copied().unwrap_or(0));
        }
        h
    }
}

fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

impl Policy for RandomAdmissible {
    fn name(&self) -> String {
        format!("random_admissible({})", self.seed)
    }

    fn randomness_support(&self, _env: &Env<'_>, _slot: Slot) -> u64 {
        self.support()
    }

    fn emission_point(&self, env: &Env<'_>, slot: Slot, shared: &[Vec<u64>]) -> Option<SpacetimeEvent> {
        let h = self.slot_hash(env, slot, shared, 0xE);
        if h.is_multiple_of(40) {
            return None;
        }
        let params = env.params(slot.instance);
        let ball = params.layout().ball(slot.site);
        let deadline = params.layout().deadline(slot.site);
        // occasionally past the deadline
        let t = env.offset(slot.instance) + 1.05 * deadline * unit(mix_seed(h, 1));
        let r = ball.radius * unit(mix_seed(h, 2));
        let phi = 2.0 * std::f64::consts::PI * unit(mix_seed(h, 3));
        let pos = [ball.center[0] + r * phi.cos(), ball.center[1] + r * phi.sin(), ball.center[2]];
        Some(SpacetimeEvent::new(t, pos))
    }

    fn payload(&self, env: &Env<'_>, slot: Slot, view: &mut View<'_>) -> Result<u64, EngineError> {
        let shared: Vec<Vec<u64>> = (0..env.instances.len())
            .map(|i| (0..env.params(i).parties()).map(|p| view.shared(i, p)).collect())
            .collect();
        let mut h = self.slot_hash(env, slot, &shared, 0xF);
        for obs in view.observations() {
            if let Some(v) = view.read(obs.id)? {
                h = mix_seed(h, v);
            }
        }
        let n = env.n(slot.instance) as u64;
        if (h >> 40).is_multiple_of(50) {
            Ok(n)
        } else {
            Ok(h % n)
        }
    }
}

/// Sends a different value to neighbouring honest recipients so that
/// stage-III verification must catch it.
#[derive(Debug, Clone, PartialEq)]
pub struct InconsistentBroadcast;

impl Policy for InconsistentBroadcast {
    fn name(&self) -> String {
        "inconsistent_broadcast".to_string()
    }

    fn randomness_support(&self, env: &Env<'_>, slot: Slot) -> u64 {
        env.n(slot.instance) as u64
    }

    fn payload(&self, env: &Env<'_>, slot: Slot, view: &mut View<'_>) -> Result<u64, EngineError> {
        let n = env.n(slot.instance) as u64;
        let base = view.shared(slot.instance, slot.party);
        let rank = env.honest(slot.instance).iter().position(|&h| h == slot.site).unwrap_or(0) as u64;
        Ok((base + rank) % n)
    }
}

/// Never emits in stage II.
#[derive(Debug, Clone, PartialEq)]
pub struct Silent;

impl Policy for Silent {
    fn name(&self) -> String {
        "silent".to_string()
    }

    fn emission_point(&self, _env: &Env<'_>, _slot: Slot, _shared: &[Vec<u64>]) -> Option<SpacetimeEvent> {
        None
    }

    fn payload(&self, _env: &Env<'_>, _slot: Slot, _view: &mut View<'_>) -> Result<u64, EngineError> {
        Ok(0)
    }
}

/// Tries to base its message on an honest party's value delivered in a
/// different ball at the same time. Every attempt is a causality violation.
#[derive(Debug, Clone, PartialEq)]
pub struct ForbiddenRead;

impl Policy for ForbiddenRead {
    fn name(&self) -> String {
        "forbidden_read".to_string()
    }

    fn payload(&self, env: &Env<'_>, slot: Slot, view: &mut View<'_>) -> Result<u64, EngineError> {
        let mut sum = 0;
        for k in env.honest(slot.instance) {
            for j in env.dishonest(slot.instance) {
                if j == slot.site {
                    continue;
                }
                if let Some(id) = view.find_delivery(slot.instance, k, j) {
                    sum += view.read(id)?.unwrap_or(0);
                }
            }
        }
        Ok(sum % env.n(slot.instance) as u64)
    }
}

/// Waits until every honest value has reached it causally, then steers the
/// outcome to `target`. Honest deadline checks reject it unless their clocks
/// are skewed.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayedSteer {
    pub target: usize,
}

impl Policy for DelayedSteer {
    fn name(&self) -> String {
        format!("delayed_steer({})", self.target)
    }

    fn emission_point(&self, env: &Env<'_>, slot: Slot, _shared: &[Vec<u64>]) -> Option<SpacetimeEvent> {
        let layout = env.params(slot.instance).layout();
        // honest values reach the first coalition ball, then travel here
        let hub = env.dishonest(slot.instance).first().copied().unwrap_or(slot.site);
        let wait = env
            .honest(slot.instance)
            .into_iter()
            .map(|k| layout.center_distance(k, hub))
            .fold(0.0, f64::max)
            + layout.center_distance(hub, slot.site);
        let start = env.window_start(slot);
        Some(start.at_time(start.t + wait))
    }

    fn payload(&self, env: &Env<'_>, slot: Slot, view: &mut View<'_>) -> Result<u64, EngineError> {
        let params = env.params(slot.instance);
        let n = params.n();
        let dishonest = env.dishonest(slot.instance);
        if dishonest.first() != Some(&slot.party) {
            return Ok(0);
        }
        let mut honest_sum = 0i64;
        for k in env.honest(slot.instance) {
            let site = dishonest[0];
            if let Some(id) = view.find_delivery(slot.instance, k, site) {
                honest_sum += view.read(id)?.unwrap_or(0) as i64;
            }
        }
        let goal = params.partition().class(self.target).start as i64;
        Ok(residue(goal - honest_sum, n))
    }
}
