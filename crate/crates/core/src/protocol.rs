//! The die-rolling protocol: predistribution, relativistic exchange,
//! verification and outcome.
//!
//! Times inside the stage functions are local to one protocol instance
//! (stage II starts at 0); the session executor shifts them by the
//! instance's offset in frame F.

use std::fmt::{self, Write as _};
use std::sync::Arc;

use serde::Serialize;

use crate::engine::{
    ChannelClass, Coalition, EngineError, EventId, EventKind, LabId, PendingEvent, RunState, View,
};
use crate::partition::{check_feasibility, FeasibilityViolation, OutcomePartition};
use crate::randsource::{EntropyExhausted, EntropyStream, SourceModel};
use crate::spacetime::{distance, validate_layout, Layout, LayoutViolation, SpacetimeEvent};
use crate::strategies::{Env, HonestStrategy, Slot, Strategy};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ParamsError {
    #[error("at least 2 parties are required, got {0}")]
    TooFewParties(usize),
    #[error("layout has {layout} balls but {epsilons} bias bounds were given")]
    PartyCount { layout: usize, epsilons: usize },
    #[error("invalid layout: {}", join(.0))]
    Layout(Vec<LayoutViolation>),
    #[error("bias bound ε_{party} = {value} must be finite and non-negative")]
    BadEpsilon { party: usize, value: f64 },
    #[error(transparent)]
    Feasibility(#[from] FeasibilityViolation),
}

fn join(v: &[LayoutViolation]) -> String {
    v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}

/// Everything the parties agree on before the protocol starts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProtocolParams {
    parties: usize,
    partition: OutcomePartition,
    epsilons: Vec<f64>,
    layout: Layout,
    confirm_receipt: bool,
    delta: f64,
}

impl ProtocolParams {
    pub fn new(partition: OutcomePartition, epsilons: Vec<f64>, layout: Layout) -> Result<Self, ParamsError> {
        let parties = layout.parties();
        if parties < 2 {
            return Err(ParamsError::TooFewParties(parties));
        }
        if epsilons.len() != parties {
            return Err(ParamsError::PartyCount { layout: parties, epsilons: epsilons.len() });
        }
        validate_layout(&layout).map_err(ParamsError::Layout)?;
        for (party, &value) in epsilons.iter().enumerate() {
            if !(value.is_finite() && value >= 0.0) {
                return Err(ParamsError::BadEpsilon { party, value });
            }
        }
        check_feasibility(&partition, &epsilons)?;
        let max_eps = epsilons.iter().copied().fold(0.0, f64::max);
        let delta = partition.alpha() + max_eps * partition.max_class_size() as f64;
        Ok(Self { parties, partition, epsilons, layout, confirm_receipt: false, delta })
    }

    /// Enables the variant where every laboratory confirms receipt of its
    /// predistribution copy and the home laboratory aborts without it.
    pub fn with_confirm_receipt(mut self, on: bool) -> Self {
        self.confirm_receipt = on;
        self
    }

    pub fn parties(&self) -> usize {
        self.parties
    }

    pub fn n(&self) -> usize {
        self.partition.n()
    }

    pub fn outcomes(&self) -> usize {
        self.partition.outcomes()
    }

    pub fn partition(&self) -> &OutcomePartition {
        &self.partition
    }

    pub fn epsilons(&self) -> &[f64] {
        &self.epsilons
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn confirm_receipt(&self) -> bool {
        self.confirm_receipt
    }

    /// `δ = α + max_{k,o} ε_k·|Ω_o|`.
    pub fn delta(&self) -> f64 {
        self.delta
    }

    fn max_center_distance(&self) -> f64 {
        let m = self.parties;
        (0..m)
            .flat_map(|i| (0..m).map(move |j| (i, j)))
            .map(|(i, j)| self.layout.center_distance(i, j))
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum AbortReason {
    /// Message from `from` arrived after the deadline.
    Late { from: usize },
    /// Payload outside `ℤ_n`.
    Malformed { from: usize },
    Missing { from: usize },
    /// `peer` saw a different value from `about` than this party.
    Inconsistent { peer: usize, about: usize },
    /// `peer` had nothing to report about `about`.
    Channel { peer: usize, about: usize },
    /// No receipt confirmation from this party's laboratory at `site`.
    Unconfirmed { site: usize },
}

impl fmt::Display for AbortReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AbortReason::Late { from } => write!(f, "late:{from}"),
            AbortReason::Malformed { from } => write!(f, "malformed:{from}"),
            AbortReason::Missing { from } => write!(f, "missing:{from}"),
            AbortReason::Inconsistent { peer, about } => write!(f, "inconsistent:{peer}:{about}"),
            AbortReason::Channel { peer, about } => write!(f, "channel:{peer}:{about}"),
            AbortReason::Unconfirmed { site } => write!(f, "unconfirmed:{site}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Message {
    pub channel: ChannelClass,
    pub from: LabId,
    pub to: LabId,
    pub payload: Option<u64>,
    /// For verification messages: whose value is reported.
    pub subject: Option<usize>,
    pub emitted_at: SpacetimeEvent,
    /// `None` when the message was lost.
    pub received_at: Option<SpacetimeEvent>,
}

impl Message {
    /// `Δt ≥ ‖Δpos‖` between emission and reception.
    pub fn is_causal(&self) -> bool {
        self.received_at.is_none_or(|r| crate::spacetime::can_influence(&self.emitted_at, &r))
    }

    /// Fast message emitted and received inside the destination ball during
    /// its window, in instance-local time.
    pub fn within_window(&self, layout: &Layout, offset: f64) -> bool {
        let site = self.to.site;
        let ball = layout.ball(site);
        let window = 0.0..=layout.deadline(site);
        let inside = |e: &SpacetimeEvent| ball.contains(e.pos) && window.contains(&(e.t - offset));
        inside(&self.emitted_at) && self.received_at.as_ref().is_some_and(inside)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Agreed(usize),
    Aborted,
}

impl Outcome {
    pub fn value(&self) -> Option<usize> {
        match self {
            Outcome::Agreed(o) => Some(*o),
            Outcome::Aborted => None,
        }
    }
}

/// What an honest party holds at the end of stage II.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct HonestView {
    pub own: usize,
    /// Accepted `m_i` per party (`None` for itself and for rejected ones).
    pub received: Vec<Option<u64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AbortRecord {
    pub lab: LabId,
    pub reason: AbortReason,
}

/// The record of one protocol instance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Transcript {
    pub instance: usize,
    pub offset: f64,
    #[serde(skip)]
    pub params: Arc<ProtocolParams>,
    pub messages: Vec<Message>,
    pub aborts: Vec<AbortRecord>,
    pub outcome: Outcome,
    /// Indexed by party; `None` for dishonest parties.
    pub views: Vec<Option<HonestView>>,
}

impl Transcript {
    /// Tab-separated log, one record per message and a final outcome line:
    ///
    /// `msg <instance> <channel> <from> <to> <payload|-> <subject|-> <emit t x y z> <recv t x y z | - - - ->`
    /// `abort <instance> <lab> <reason>`
    /// `outcome <instance> <o|aborted>`
    pub fn to_log(&self) -> String {
        let mut out = String::new();
        let ev = |e: &SpacetimeEvent| format!("{}\t{}\t{}\t{}", e.t, e.pos[0], e.pos[1], e.pos[2]);
        for m in &self.messages {
            let _ = writeln!(
                out,
                "msg\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                self.instance,
                m.channel.as_str(),
                m.from,
                m.to,
                m.payload.map_or("-".to_string(), |p| p.to_string()),
                m.subject.map_or("-".to_string(), |s| s.to_string()),
                ev(&m.emitted_at),
                m.received_at.as_ref().map_or("-\t-\t-\t-".to_string(), ev),
            );
        }
        for a in &self.aborts {
            let _ = writeln!(out, "abort\t{}\t{}\t{}", self.instance, a.lab, a.reason);
        }
        match self.outcome {
            Outcome::Agreed(o) => {
                let _ = writeln!(out, "outcome\t{}\t{}", self.instance, o);
            }
            Outcome::Aborted => {
                let _ = writeln!(out, "outcome\t{}\taborted", self.instance);
            }
        }
        out
    }

    pub fn aborted(&self) -> bool {
        self.outcome == Outcome::Aborted
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProtocolError {
    #[error("copy of m_{party} for site {site} would arrive at t = {arrival}, not before 0")]
    Timing { party: usize, site: usize, arrival: f64 },
    #[error(transparent)]
    Entropy(#[from] EntropyExhausted),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("invalid session: {0}")]
    Setup(String),
    #[error("honest parties of instance {instance} derived different outcomes without aborting")]
    Disagreement { instance: usize },
}

impl RunError {
    pub fn is_causality(&self) -> bool {
        matches!(self, RunError::Engine(_))
    }
}

impl From<EntropyExhausted> for RunError {
    fn from(e: EntropyExhausted) -> Self {
        RunError::Protocol(e.into())
    }
}

/// Stage-I plan of an honest party, in local time.
#[derive(Debug, Clone, PartialEq)]
pub struct Predistribution {
    pub value: usize,
    pub draw_at: SpacetimeEvent,
    /// One slow copy per site `i ≠ k`.
    pub copies: Vec<Message>,
}

/// Default local time at which an honest home laboratory sends its copies.
pub fn predistribution_time(params: &ProtocolParams) -> f64 {
    -2.0 * params.max_center_distance()
}

/// Copies `m_k` from `L_kk` to every `L_ki`, `i ≠ k`, emitted at local time
/// `emit_at` over light-speed channels. Each copy must arrive strictly
/// before 0.
pub fn predistribute(params: &ProtocolParams, k: usize, value: usize, emit_at: f64) -> Result<Predistribution, ProtocolError> {
    let layout = params.layout();
    let home = layout.ball(k).center;
    let copies = (0..params.parties())
        .filter(|&i| i != k)
        .map(|i| {
            let target = layout.ball(i).center;
            let arrival = emit_at + distance(home, target);
            if arrival >= 0.0 {
                return Err(ProtocolError::Timing { party: k, site: i, arrival });
            }
            Ok(Message {
                channel: ChannelClass::SlowIntraParty,
                from: LabId::home(k),
                to: LabId::new(k, i),
                payload: Some(value as u64),
                subject: None,
                emitted_at: SpacetimeEvent::new(emit_at, home),
                received_at: Some(SpacetimeEvent::new(arrival, target)),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Predistribution { value, draw_at: SpacetimeEvent::new(emit_at, home), copies })
}

/// Stage I for party `k`: draw `m_k` from its generator and plan the copies.
pub fn honest_stage1(
    params: &ProtocolParams,
    k: usize,
    source: &SourceModel,
    entropy: &mut EntropyStream,
) -> Result<Predistribution, ProtocolError> {
    let value = source.sample(entropy)?;
    predistribute(params, k, value, predistribution_time(params))
}

/// Deadline check applied by an honest home laboratory `L_kk`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcceptanceRule {
    pub party: usize,
    pub deadline: f64,
    pub n: usize,
    pub clock_skew: f64,
}

impl AcceptanceRule {
    /// Judges a delivery given as `(payload, local reception time)`.
    pub fn judge(&self, from: usize, delivery: Option<(u64, f64)>) -> Result<u64, AbortReason> {
        let (payload, t) = delivery.ok_or(AbortReason::Missing { from })?;
        if t + self.clock_skew > self.deadline {
            return Err(AbortReason::Late { from });
        }
        if payload >= self.n as u64 {
            return Err(AbortReason::Malformed { from });
        }
        Ok(payload)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Plan {
    /// `L_ki → L_ii` for every `i ≠ k`, local time.
    pub emissions: Vec<Message>,
    pub acceptance: AcceptanceRule,
}

/// Stage II for party `k`: send `m_k` from each `L_ki` to `L_ii` at the
/// start of ball `i`'s window, and accept only values in `ℤ_n` that arrive
/// by `t_k`.
pub fn honest_stage2(params: &ProtocolParams, k: usize, value: usize) -> Stage2Plan {
    honest_stage2_skewed(params, k, value, 0.0)
}

pub fn honest_stage2_skewed(params: &ProtocolParams, k: usize, value: usize, clock_skew: f64) -> Stage2Plan {
    let layout = params.layout();
    let emissions = (0..params.parties())
        .filter(|&i| i != k)
        .map(|i| {
            let at = SpacetimeEvent::new(0.0, layout.ball(i).center);
            Message {
                channel: ChannelClass::FastInterParty,
                from: LabId::new(k, i),
                to: LabId::home(i),
                payload: Some(value as u64),
                subject: None,
                emitted_at: at,
                received_at: Some(at),
            }
        })
        .collect();
    let acceptance = AcceptanceRule { party: k, deadline: layout.deadline(k), n: params.n(), clock_skew };
    Stage2Plan { emissions, acceptance }
}

/// Stage III for party `k`. `own[j]` is what `k` received from `j`;
/// `reports[i][j]` is what `i` says it received from `j`. Every pair
/// `(k, i)` compares every third party `j`. An empty result means pass.
pub fn honest_stage3(k: usize, own: &[Option<u64>], reports: &[Vec<Option<u64>>]) -> Vec<AbortReason> {
    let mut out = Vec::new();
    for (i, report) in reports.iter().enumerate() {
        if i == k {
            continue;
        }
        for (j, &mine) in own.iter().enumerate() {
            if j == k || j == i {
                continue;
            }
            let Some(mine) = mine else { continue };
            match report.get(j).copied().flatten() {
                None => out.push(AbortReason::Channel { peer: i, about: j }),
                Some(theirs) if theirs != mine => out.push(AbortReason::Inconsistent { peer: i, about: j }),
                Some(_) => {}
            }
        }
    }
    out
}

/// `x = Σ m_k mod n`, `o` such that `x ∈ Ω_o`.
pub fn compute_outcome(partition: &OutcomePartition, values: &[u64]) -> usize {
    let n = partition.n() as u64;
    let x = values.iter().fold(0u64, |acc, &m| (acc + m % n) % n);
    partition.outcome_of(x as usize)
}

/// One protocol instance inside a session.
#[derive(Debug, Clone)]
pub struct Instance {
    pub params: Arc<ProtocolParams>,
    /// Frame time of this instance's `t = 0`.
    pub offset: f64,
    pub strategies: Vec<Strategy>,
}

impl Instance {
    pub fn new(params: ProtocolParams, strategies: Vec<Strategy>) -> Self {
        Self { params: Arc::new(params), offset: 0.0, strategies }
    }

    pub fn with_offset(mut self, offset: f64) -> Self {
        self.offset = offset;
        self
    }
}

/// Random inputs of one session run: honest draws and the coalition's
/// shared randomness, both indexed `[instance][party]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SessionInputs {
    pub honest: Vec<Vec<Option<usize>>>,
    pub shared: Vec<Vec<u64>>,
}

/// The outcome space of one input coordinate.
#[derive(Debug, Clone, PartialEq)]
pub enum InputAxis {
    Honest { instance: usize, party: usize, probs: Vec<f64> },
    Shared { instance: usize, party: usize, support: u64 },
}

#[derive(Debug, Clone)]
pub struct SessionRecord {
    pub transcripts: Vec<Transcript>,
    pub state: RunState,
}

impl SessionRecord {
    pub fn outcomes(&self) -> Vec<Outcome> {
        self.transcripts.iter().map(|t| t.outcome).collect()
    }

    pub fn to_log(&self) -> String {
        self.transcripts.iter().map(Transcript::to_log).collect()
    }
}

/// One or more protocol instances run side by side against a single
/// adversary coalition.
#[derive(Debug, Clone)]
pub struct Session {
    instances: Vec<Instance>,
    coalition: Coalition,
}

impl Session {
    pub fn new(instances: Vec<Instance>) -> Result<Self, RunError> {
        if instances.is_empty() {
            return Err(RunError::Setup("no protocol instance".into()));
        }
        for (idx, inst) in instances.iter().enumerate() {
            let p = &inst.params;
            if inst.strategies.len() != p.parties() {
                return Err(RunError::Setup(format!(
                    "instance {idx}: {} strategies for {} parties",
                    inst.strategies.len(),
                    p.parties()
                )));
            }
            if !inst.offset.is_finite() {
                return Err(RunError::Setup(format!("instance {idx}: offset must be finite")));
            }
            if !inst.strategies.iter().any(Strategy::is_honest) {
                return Err(RunError::Setup(format!("instance {idx}: at least one party must be honest")));
            }
            for (k, s) in inst.strategies.iter().enumerate() {
                if let Strategy::Honest(h) = s {
                    if h.source.n() != p.n() {
                        return Err(RunError::Setup(format!(
                            "instance {idx}: party {k} source has {} values, n = {}",
                            h.source.n(),
                            p.n()
                        )));
                    }
                    if h.source.epsilon() > p.epsilons()[k] + 1e-12 {
                        return Err(RunError::Setup(format!(
                            "instance {idx}: party {k} source bias {} exceeds agreed ε = {}",
                            h.source.epsilon(),
                            p.epsilons()[k]
                        )));
                    }
                    if let Some(&bad) = h.dropped_predistribution.iter().find(|&&s| s >= p.parties() || s == k) {
                        return Err(RunError::Setup(format!("instance {idx}: party {k} cannot drop site {bad}")));
                    }
                    if !h.clock_skew.is_finite() {
                        return Err(RunError::Setup(format!("instance {idx}: party {k} clock skew must be finite")));
                    }
                }
            }
        }
        let coalition = Coalition::new(
            instances.iter().map(|i| i.strategies.iter().map(|s| !s.is_honest()).collect()).collect(),
        );
        Ok(Self { instances, coalition })
    }

    pub fn single(params: ProtocolParams, strategies: Vec<Strategy>) -> Result<Self, RunError> {
        Self::new(vec![Instance::new(params, strategies)])
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn coalition(&self) -> &Coalition {
        &self.coalition
    }

    pub fn env(&self) -> Env<'_> {
        Env {
            instances: self.instances.iter().map(|i| (i.params.as_ref(), i.offset)).collect(),
            coalition: &self.coalition,
        }
    }

    /// Input coordinates in `(instance, party)` order.
    pub fn input_axes(&self) -> Vec<InputAxis> {
        let env = self.env();
        let mut axes = Vec::new();
        for (instance, inst) in self.instances.iter().enumerate() {
            for (party, s) in inst.strategies.iter().enumerate() {
                axes.push(match s {
                    Strategy::Honest(h) => InputAxis::Honest { instance, party, probs: h.source.probs().to_vec() },
                    Strategy::Dishonest(p) => InputAxis::Shared {
                        instance,
                        party,
                        support: p.randomness_support(&env, Slot { instance, party, site: party }).max(1),
                    },
                });
            }
        }
        axes
    }

    pub fn empty_inputs(&self) -> SessionInputs {
        SessionInputs {
            honest: self.instances.iter().map(|i| vec![None; i.strategies.len()]).collect(),
            shared: self.instances.iter().map(|i| vec![0; i.strategies.len()]).collect(),
        }
    }

    pub fn draw_inputs(&self, entropy: &mut EntropyStream) -> Result<SessionInputs, EntropyExhausted> {
        let mut inputs = self.empty_inputs();
        for axis in self.input_axes() {
            match axis {
                InputAxis::Honest { instance, party, .. } => {
                    let Strategy::Honest(h) = &self.instances[instance].strategies[party] else { unreachable!() };
                    inputs.honest[instance][party] = Some(h.source.sample(entropy)?);
                }
                InputAxis::Shared { instance, party, support } => {
                    inputs.shared[instance][party] = entropy.below(support)?;
                }
            }
        }
        Ok(inputs)
    }

    pub fn run(&self, entropy: &mut EntropyStream) -> Result<SessionRecord, RunError> {
        let inputs = self.draw_inputs(entropy)?;
        self.execute(&inputs)
    }

    /// Runs every stage deterministically for the given inputs.
    pub fn execute(&self, inputs: &SessionInputs) -> Result<SessionRecord, RunError> {
        Executor::new(self, inputs).run()
    }
}

/// Runs a single protocol instance.
pub fn run_protocol(
    params: &ProtocolParams,
    strategies: Vec<Strategy>,
    entropy: &mut EntropyStream,
) -> Result<Transcript, RunError> {
    let session = Session::single(params.clone(), strategies)?;
    Ok(session.run(entropy)?.transcripts.remove(0))
}

struct Delivery {
    receive: EventId,
    emit: EventId,
    payload: u64,
    at: SpacetimeEvent,
}

struct PlannedEmission {
    at: SpacetimeEvent,
    honest: bool,
    instance: usize,
    party: usize,
    site: usize,
    cause: Option<EventId>,
    value: u64,
}

struct InstanceState {
    messages: Vec<Message>,
    aborts: Vec<AbortRecord>,
    /// `[party][site]`: reception of the predistribution copy.
    copies: Vec<Vec<Option<EventId>>>,
    /// `[receiver][sender]`.
    deliveries: Vec<Vec<Option<Delivery>>>,
    accepted: Vec<Vec<Option<u64>>>,
}

struct Executor<'a> {
    session: &'a Session,
    inputs: &'a SessionInputs,
    state: RunState,
    per: Vec<InstanceState>,
}

impl<'a> Executor<'a> {
    fn new(session: &'a Session, inputs: &'a SessionInputs) -> Self {
        let per = session
            .instances
            .iter()
            .map(|i| {
                let m = i.params.parties();
                InstanceState {
                    messages: Vec::new(),
                    aborts: Vec::new(),
                    copies: vec![vec![None; m]; m],
                    deliveries: (0..m).map(|_| (0..m).map(|_| None).collect()).collect(),
                    accepted: vec![vec![None; m]; m],
                }
            })
            .collect();
        Self { session, inputs, state: RunState::new(), per }
    }

    fn shift(e: SpacetimeEvent, offset: f64) -> SpacetimeEvent {
        e.at_time(e.t + offset)
    }

    fn abort(&mut self, instance: usize, party: usize, at: SpacetimeEvent, reason: AbortReason) -> Result<(), RunError> {
        self.state.schedule(PendingEvent::new(EventKind::Abort, instance, LabId::home(party), at))?;
        self.per[instance].aborts.push(AbortRecord { lab: LabId::home(party), reason });
        Ok(())
    }

    fn run(mut self) -> Result<SessionRecord, RunError> {
        for instance in 0..self.session.instances.len() {
            self.stage1(instance)?;
        }
        self.stage2()?;
        for instance in 0..self.session.instances.len() {
            self.accept(instance)?;
            self.stage3(instance)?;
        }
        let transcripts = (0..self.session.instances.len())
            .map(|i| self.finish(i))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(SessionRecord { transcripts, state: self.state })
    }

    fn stage1(&mut self, instance: usize) -> Result<(), RunError> {
        let inst = &self.session.instances[instance];
        let params = inst.params.clone();
        let offset = inst.offset;
        let layout = params.layout();
        let emit_at = predistribution_time(&params);
        for (party, strategy) in inst.strategies.iter().enumerate() {
            let home = layout.ball(party).center;
            let honest = match strategy {
                Strategy::Honest(h) => h,
                Strategy::Dishonest(_) => {
                    let at = SpacetimeEvent::new(offset + 1.5 * emit_at, home);
                    let r = self.inputs.shared[instance][party];
                    self.state.schedule(PendingEvent::new(EventKind::Draw, instance, LabId::home(party), at).payload(r))?;
                    continue;
                }
            };
            let value = self.inputs.honest[instance][party]
                .ok_or_else(|| RunError::Setup(format!("missing draw for party {party}")))?;
            let plan = predistribute(&params, party, value, emit_at)?;
            let draw = self.state.schedule(
                PendingEvent::new(EventKind::Draw, instance, LabId::home(party), Self::shift(plan.draw_at, offset))
                    .payload(value as u64),
            )?;
            let mut confirmed = vec![false; params.parties()];
            for copy in plan.copies {
                let site = copy.to.site;
                let emitted_at = Self::shift(copy.emitted_at, offset);
                let emit = self.state.schedule(
                    PendingEvent::new(EventKind::Emit, instance, copy.from, emitted_at)
                        .payload(value as u64)
                        .channel(ChannelClass::SlowIntraParty)
                        .peer(copy.to)
                        .causes([draw]),
                )?;
                let lost = honest.dropped_predistribution.contains(&site);
                let received_at = (!lost).then(|| Self::shift(copy.received_at.expect("planned"), offset));
                self.per[instance].messages.push(Message { emitted_at, received_at, ..copy });
                let Some(received_at) = received_at else { continue };
                let recv = self.state.schedule(
                    PendingEvent::new(EventKind::Receive, instance, copy.to, received_at)
                        .payload(value as u64)
                        .channel(ChannelClass::SlowIntraParty)
                        .peer(copy.from)
                        .causes([emit]),
                )?;
                self.per[instance].copies[party][site] = Some(recv);
                if params.confirm_receipt() {
                    self.confirm(instance, party, site, received_at, recv, home)?;
                    confirmed[site] = true;
                }
            }
            if params.confirm_receipt() {
                let check_at = SpacetimeEvent::new(offset, home);
                for site in (0..params.parties()).filter(|&s| s != party && !confirmed[s]) {
                    self.abort(instance, party, check_at, AbortReason::Unconfirmed { site })?;
                }
            }
        }
        Ok(())
    }

    fn confirm(
        &mut self,
        instance: usize,
        party: usize,
        site: usize,
        at: SpacetimeEvent,
        cause: EventId,
        home: [f64; 3],
    ) -> Result<(), RunError> {
        let from = LabId::new(party, site);
        let to = LabId::home(party);
        let emit = self.state.schedule(
            PendingEvent::new(EventKind::Emit, instance, from, at)
                .channel(ChannelClass::Confirmation)
                .peer(to)
                .causes([cause]),
        )?;
        let received_at = SpacetimeEvent::new(at.t + distance(at.pos, home), home);
        self.state.schedule(
            PendingEvent::new(EventKind::Receive, instance, to, received_at)
                .channel(ChannelClass::Confirmation)
                .peer(from)
                .causes([emit]),
        )?;
        self.per[instance].messages.push(Message {
            channel: ChannelClass::Confirmation,
            from,
            to,
            payload: None,
            subject: None,
            emitted_at: at,
            received_at: Some(received_at),
        });
        Ok(())
    }

    fn stage2(&mut self) -> Result<(), RunError> {
        let env = self.session.env();
        let mut plans = Vec::new();
        for (instance, inst) in self.session.instances.iter().enumerate() {
            for (party, strategy) in inst.strategies.iter().enumerate() {
                let sites = (0..inst.params.parties()).filter(|&s| s != party);
                match strategy {
                    Strategy::Honest(_) => {
                        let value = self.inputs.honest[instance][party].expect("drawn in stage I");
                        let plan = honest_stage2(&inst.params, party, value);
                        for msg in plan.emissions {
                            let site = msg.to.site;
                            // a lost copy leaves the laboratory with nothing to send
                            let Some(cause) = self.per[instance].copies[party][site] else { continue };
                            plans.push(PlannedEmission {
                                at: Self::shift(msg.emitted_at, inst.offset),
                                honest: true,
                                instance,
                                party,
                                site,
                                cause: Some(cause),
                                value: value as u64,
                            });
                        }
                    }
                    Strategy::Dishonest(policy) => {
                        for site in sites {
                            let slot = Slot { instance, party, site };
                            if let Some(at) = policy.emission_point(&env, slot, &self.inputs.shared) {
                                plans.push(PlannedEmission {
                                    at,
                                    honest: false,
                                    instance,
                                    party,
                                    site,
                                    cause: None,
                                    value: 0,
                                });
                            }
                        }
                    }
                }
            }
        }
        plans.sort_by(|a, b| {
            a.at.t
                .total_cmp(&b.at.t)
                .then(b.honest.cmp(&a.honest))
                .then(a.instance.cmp(&b.instance))
                .then(a.party.cmp(&b.party))
                .then(a.site.cmp(&b.site))
        });
        for plan in plans {
            let from = LabId::new(plan.party, plan.site);
            let to = LabId::home(plan.site);
            let (payload, causes) = if plan.honest {
                (plan.value, plan.cause.into_iter().collect::<Vec<_>>())
            } else {
                let Strategy::Dishonest(policy) = &self.session.instances[plan.instance].strategies[plan.party] else {
                    unreachable!()
                };
                let slot = Slot { instance: plan.instance, party: plan.party, site: plan.site };
                let mut view = View::new(&self.state, &self.session.coalition, &self.inputs.shared, plan.at);
                let payload = policy.payload(&env, slot, &mut view)?;
                (payload, view.into_reads())
            };
            let emit = self.state.schedule(
                PendingEvent::new(EventKind::Emit, plan.instance, from, plan.at)
                    .payload(payload)
                    .channel(ChannelClass::FastInterParty)
                    .peer(to)
                    .causes(causes),
            )?;
            let home = self.session.instances[plan.instance].params.layout().ball(plan.site).center;
            let received_at = SpacetimeEvent::new(plan.at.t + distance(plan.at.pos, home), home);
            let receive = self.state.schedule(
                PendingEvent::new(EventKind::Receive, plan.instance, to, received_at)
                    .payload(payload)
                    .channel(ChannelClass::FastInterParty)
                    .peer(from)
                    .causes([emit]),
            )?;
            let st = &mut self.per[plan.instance];
            st.messages.push(Message {
                channel: ChannelClass::FastInterParty,
                from,
                to,
                payload: Some(payload),
                subject: None,
                emitted_at: plan.at,
                received_at: Some(received_at),
            });
            st.deliveries[plan.site][plan.party] = Some(Delivery { receive, emit, payload, at: received_at });
        }
        Ok(())
    }

    fn accept(&mut self, instance: usize) -> Result<(), RunError> {
        let inst = &self.session.instances[instance];
        let params = inst.params.clone();
        let offset = inst.offset;
        for (k, strategy) in inst.strategies.iter().enumerate() {
            let Strategy::Honest(HonestStrategy { clock_skew, .. }) = strategy else { continue };
            let rule = honest_stage2_skewed(&params, k, 0, *clock_skew).acceptance;
            let deadline_at = SpacetimeEvent::new(offset + rule.deadline, params.layout().ball(k).center);
            for i in (0..params.parties()).filter(|&i| i != k) {
                let delivery = self.per[instance].deliveries[k][i].as_ref().map(|d| (d.payload, d.at.t - offset));
                match rule.judge(i, delivery) {
                    Ok(v) => self.per[instance].accepted[k][i] = Some(v),
                    Err(reason) => self.abort(instance, k, deadline_at, reason)?,
                }
            }
        }
        Ok(())
    }

    fn stage3(&mut self, instance: usize) -> Result<(), RunError> {
        let inst = &self.session.instances[instance];
        let params = inst.params.clone();
        let m = params.parties();
        if m < 3 {
            return Ok(());
        }
        let layout = params.layout();
        let coalition = &self.session.coalition;
        let start = inst.offset + layout.deadlines().iter().copied().fold(0.0, f64::max);
        // reports[i][k][j]: what k told i about j
        let mut reports = vec![vec![vec![None; m]; m]; m];
        let mut received: Vec<Vec<EventId>> = vec![Vec::new(); m];
        for k in 0..m {
            for i in (0..m).filter(|&i| i != k) {
                let k_honest = !coalition.contains(instance, k);
                let i_honest = !coalition.contains(instance, i);
                if !k_honest && !i_honest {
                    continue;
                }
                for j in (0..m).filter(|&j| j != k && j != i) {
                    let deliveries = &self.per[instance].deliveries;
                    let mut site = k;
                    let (report, cause) = if k_honest {
                        // only what had arrived when the report is sent
                        let d = deliveries[k][j]
                            .as_ref()
                            .filter(|d| self.state.get(d.receive).is_some_and(|e| e.at.t <= start));
                        (d.map(|d| d.payload), d.map(|d| d.receive))
                    } else {
                        // the coalition answers with what i itself got from j
                        let d = deliveries[i][j].as_ref();
                        let cause = if coalition.contains(instance, j) {
                            // known where it was decided, next to i
                            site = i;
                            d.map(|d| d.emit)
                        } else {
                            deliveries[k][j].as_ref().map(|d| d.receive)
                        };
                        (d.map(|d| d.payload), cause)
                    };
                    let from = LabId::new(k, site);
                    let to = LabId::home(i);
                    let center = layout.ball(site).center;
                    // a late emission is only known once its light reaches the center
                    let t = cause
                        .and_then(|c| self.state.get(c))
                        .filter(|_| site != k)
                        .map_or(start, |e| start.max(e.at.t + distance(e.at.pos, center)));
                    let at = SpacetimeEvent::new(t, center);
                    let mut emit = PendingEvent::new(EventKind::Emit, instance, from, at)
                        .channel(ChannelClass::Verification)
                        .peer(to)
                        .subject(j)
                        .causes(cause);
                    emit.payload = report;
                    let emit = self.state.schedule(emit)?;
                    let received_at = SpacetimeEvent::new(t + layout.center_distance(site, i), layout.ball(i).center);
                    let mut recv = PendingEvent::new(EventKind::Receive, instance, to, received_at)
                        .channel(ChannelClass::Verification)
                        .peer(from)
                        .subject(j)
                        .causes([emit]);
                    recv.payload = report;
                    let recv = self.state.schedule(recv)?;
                    self.per[instance].messages.push(Message {
                        channel: ChannelClass::Verification,
                        from,
                        to,
                        payload: report,
                        subject: Some(j),
                        emitted_at: at,
                        received_at: Some(received_at),
                    });
                    if i_honest {
                        reports[i][k][j] = report;
                        received[i].push(recv);
                    }
                }
            }
        }
        let verify_t = start
            + (0..m)
                .flat_map(|a| (0..m).map(move |b| (a, b)))
                .map(|(a, b)| layout.center_distance(a, b))
                .fold(0.0, f64::max);
        for i in coalition.honest(instance) {
            let own: Vec<Option<u64>> = (0..m)
                .map(|j| self.per[instance].deliveries[i][j].as_ref().map(|d| d.payload))
                .collect();
            let verdicts = honest_stage3(i, &own, &reports[i]);
            let last = received[i].iter().filter_map(|&id| self.state.get(id)).map(|e| e.at.t).fold(verify_t, f64::max);
            let at = SpacetimeEvent::new(last, layout.ball(i).center);
            let mut verify = PendingEvent::new(EventKind::Verify, instance, LabId::home(i), at)
                .causes(received[i].iter().copied());
            verify.payload = Some(u64::from(verdicts.is_empty()));
            self.state.schedule(verify)?;
            for reason in verdicts {
                self.abort(instance, i, at, reason)?;
            }
        }
        Ok(())
    }

    fn finish(&mut self, instance: usize) -> Result<Transcript, RunError> {
        let inst = &self.session.instances[instance];
        let params = inst.params.clone();
        let m = params.parties();
        let st = &mut self.per[instance];
        let views: Vec<Option<HonestView>> = (0..m)
            .map(|k| {
                self.inputs.honest[instance][k].filter(|_| inst.strategies[k].is_honest()).map(|own| HonestView {
                    own,
                    received: st.accepted[k].clone(),
                })
            })
            .collect();
        let outcome = if st.aborts.is_empty() {
            let mut agreed = None;
            for view in views.iter().flatten() {
                let values: Vec<u64> = std::iter::once(view.own as u64).chain(view.received.iter().flatten().copied()).collect();
                let o = compute_outcome(params.partition(), &values);
                match agreed {
                    None => agreed = Some(o),
                    Some(prev) if prev != o => return Err(RunError::Disagreement { instance }),
                    Some(_) => {}
                }
            }
            Outcome::Agreed(agreed.expect("an honest party exists"))
        } else {
            Outcome::Aborted
        };
        Ok(Transcript {
            instance,
            offset: inst.offset,
            params,
            messages: std::mem::take(&mut st.messages),
            aborts: std::mem::take(&mut st.aborts),
            outcome,
            views,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::{build_partition, unbiased_partition, IdealDistribution};
    use crate::strategies::{honest_strategy, ForbiddenRead, InconsistentBroadcast, Silent};

    fn params(m: usize, n: usize) -> ProtocolParams {
        ProtocolParams::new(unbiased_partition(n).unwrap(), vec![0.0; m], Layout::regular(m, 10.0, 0.5, 2.0)).unwrap()
    }

    fn honest(n: usize) -> Strategy {
        honest_strategy(SourceModel::uniform(n))
    }

    #[test]
    fn copies_for_every_other_site() {
        let p = params(3, 6);
        let plan = predistribute(&p, 0, 4, predistribution_time(&p)).unwrap();
        let targets: Vec<_> = plan.copies.iter().map(|c| c.to).collect();
        assert_eq!(targets, vec![LabId::new(0, 1), LabId::new(0, 2)]);
        assert!(plan.copies.iter().all(|c| c.payload == Some(4) && c.received_at.unwrap().t < 0.0));

        let p2 = params(2, 2);
        let plan = predistribute(&p2, 1, 1, predistribution_time(&p2)).unwrap();
        assert_eq!(plan.copies.len(), 1);
        assert_eq!((plan.copies[0].from, plan.copies[0].to), (LabId::home(1), LabId::new(1, 0)));
    }

    #[test]
    fn copies_sent_too_late() {
        let p = params(2, 2);
        let gap = p.layout().gap(0, 1);
        assert!(matches!(predistribute(&p, 0, 0, -gap / 2.0), Err(ProtocolError::Timing { .. })));
    }

    #[test]
    fn acceptance_paths() {
        let p = params(2, 4);
        let rule = honest_stage2(&p, 0, 1).acceptance;
        let t = rule.deadline;
        assert_eq!(rule.judge(1, Some((3, t))), Ok(3));
        assert_eq!(rule.judge(1, Some((3, t + 1e-6))), Err(AbortReason::Late { from: 1 }));
        assert_eq!(rule.judge(1, Some((4, 0.0))), Err(AbortReason::Malformed { from: 1 }));
        assert_eq!(rule.judge(1, None), Err(AbortReason::Missing { from: 1 }));
    }

    #[test]
    fn stage3_examples() {
        // parties 0 and 1 compare what party 2 sent them
        let own0 = vec![None, Some(1), Some(2)];
        let reports0 = vec![vec![], vec![Some(0), None, Some(5)], vec![Some(0), Some(1), None]];
        assert_eq!(honest_stage3(0, &own0, &reports0), vec![AbortReason::Inconsistent { peer: 1, about: 2 }]);
        let ok = vec![vec![], vec![Some(0), None, Some(2)], vec![Some(0), Some(1), None]];
        assert!(honest_stage3(0, &own0, &ok).is_empty());
        // two parties: nothing to compare
        assert!(honest_stage3(0, &[None, Some(1)], &[vec![], vec![Some(0), None]]).is_empty());
    }

    #[test]
    fn outcome_examples() {
        let six = unbiased_partition(6).unwrap();
        assert_eq!(compute_outcome(&six, &[2, 5, 3]), 4);
        assert_eq!(compute_outcome(&six, &[0, 0, 0]), 0);
        let d = IdealDistribution::new(vec![1.0 / 3.0, 2.0 / 3.0]).unwrap();
        let thirds = build_partition(&d, 3).unwrap();
        assert_eq!(compute_outcome(&thirds, &[1, 1]), 1);
    }

    #[test]
    fn honest_run_agrees() {
        let p = params(2, 2);
        let mut e = EntropyStream::from_seed(5);
        let t = run_protocol(&p, vec![honest(2), honest(2)], &mut e).unwrap();
        assert!(t.aborts.is_empty());
        assert!(matches!(t.outcome, Outcome::Agreed(0 | 1)));
        let fast: Vec<_> = t.messages.iter().filter(|m| m.channel == ChannelClass::FastInterParty).collect();
        assert_eq!(fast.len(), 2);
        assert!(fast.iter().all(|m| m.within_window(p.layout(), 0.0) && m.is_causal()));
    }

    #[test]
    fn silent_party_causes_missing() {
        let p = params(3, 3);
        let mut e = EntropyStream::from_seed(1);
        let t = run_protocol(&p, vec![honest(3), honest(3), Strategy::dishonest(Silent)], &mut e).unwrap();
        assert!(t.aborted());
        assert!(t.aborts.iter().any(|a| a.reason == AbortReason::Missing { from: 2 }));
    }

    #[test]
    fn spacelike_read_is_a_violation() {
        let p = params(2, 2);
        let mut e = EntropyStream::from_seed(1);
        let err = run_protocol(&p, vec![honest(2), Strategy::dishonest(ForbiddenRead)], &mut e).unwrap_err();
        assert!(err.is_causality(), "{err}");
    }

    #[test]
    fn inconsistent_values_detected() {
        let p = params(3, 6);
        let mut e = EntropyStream::from_seed(2);
        let t = run_protocol(&p, vec![honest(6), honest(6), Strategy::dishonest(InconsistentBroadcast)], &mut e)
            .unwrap();
        for party in [0, 1] {
            assert!(t
                .aborts
                .iter()
                .any(|a| a.lab == LabId::home(party) && matches!(a.reason, AbortReason::Inconsistent { about: 2, .. })));
        }
    }

    #[test]
    fn lost_copy_detected_only_with_confirmation() {
        let p = params(2, 2);
        let dropping = Strategy::Honest(match honest(2) {
            Strategy::Honest(h) => h.dropping(vec![1]),
            _ => unreachable!(),
        });
        let mut e = EntropyStream::from_seed(3);
        let plain = run_protocol(&p, vec![dropping.clone(), honest(2)], &mut e).unwrap();
        assert!(plain.aborts.iter().any(|a| a.lab == LabId::home(1) && a.reason == AbortReason::Missing { from: 0 }));
        assert!(!plain.aborts.iter().any(|a| a.lab == LabId::home(0)));

        let confirmed = p.clone().with_confirm_receipt(true);
        let t = run_protocol(&confirmed, vec![dropping, honest(2)], &mut e).unwrap();
        assert!(t.aborts.iter().any(|a| a.lab == LabId::home(0) && a.reason == AbortReason::Unconfirmed { site: 1 }));

        let fine = run_protocol(&confirmed, vec![honest(2), honest(2)], &mut e).unwrap();
        assert!(!fine.aborted());
        assert!(fine.messages.iter().any(|m| m.channel == ChannelClass::Confirmation));
    }

    #[test]
    fn session_setup_checks() {
        let p = params(2, 2);
        assert!(Session::single(p.clone(), vec![honest(2)]).is_err());
        assert!(Session::single(p.clone(), vec![Strategy::dishonest(Silent), Strategy::dishonest(Silent)]).is_err());
        assert!(Session::single(p.clone(), vec![honest(3), honest(2)]).is_err());
        let biased = honest_strategy(SourceModel::exact(vec![0.6, 0.4]).unwrap());
        assert!(Session::single(p, vec![biased, honest(2)]).is_err());
    }

    #[test]
    fn log_has_footer() {
        let p = params(2, 2);
        let mut e = EntropyStream::from_seed(9);
        let t = run_protocol(&p, vec![honest(2), honest(2)], &mut e).unwrap();
        let log = t.to_log();
        assert!(log.lines().last().unwrap().starts_with("outcome\t0\t"));
        assert_eq!(log.lines().filter(|l| l.starts_with("msg\t")).count(), t.messages.len());
    }
}
