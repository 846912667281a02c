//! Logical-time event engine.
//!
//! Every event is committed with the list of events it depends on, and a
//! commit succeeds only if each of those causes lies in the causal past (or
//! on the past light cone) of the new event. Adversary policies only ever see
//! data through a [`View`], which performs the same check before handing out
//! a payload, so no information reaches a decision faster than light.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::spacetime::{causal_deficit, SpacetimeEvent, GEOMETRY_TOLERANCE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EventId(pub usize);

impl fmt::Display for EventId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{}", self.0)
    }
}

/// Laboratory `L_ki`: party `owner` operating inside ball `site`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LabId {
    pub owner: usize,
    pub site: usize,
}

impl LabId {
    pub fn new(owner: usize, site: usize) -> Self {
        Self { owner, site }
    }

    pub fn home(party: usize) -> Self {
        Self { owner: party, site: party }
    }
}

impl fmt::Display for LabId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}.{}", self.owner, self.site)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Draw,
    Emit,
    Receive,
    Verify,
    Abort,
}

impl EventKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventKind::Draw => "draw",
            EventKind::Emit => "emit",
            EventKind::Receive => "receive",
            EventKind::Verify => "verify",
            EventKind::Abort => "abort",
        }
    }
}

/// Channel a message travels on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelClass {
    SlowIntraParty,
    FastInterParty,
    Verification,
    Confirmation,
}

impl ChannelClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            ChannelClass::SlowIntraParty => "slow_intra_party",
            ChannelClass::FastInterParty => "fast_inter_party",
            ChannelClass::Verification => "verification",
            ChannelClass::Confirmation => "confirmation",
        }
    }
}

/// Event data before commit.
#[derive(Debug, Clone, PartialEq)]
pub struct PendingEvent {
    pub kind: EventKind,
    pub instance: usize,
    pub lab: LabId,
    pub at: SpacetimeEvent,
    pub payload: Option<u64>,
    pub channel: Option<ChannelClass>,
    /// Destination of an emission, source of a reception.
    pub peer: Option<LabId>,
    /// Party whose value a verification message reports.
    pub subject: Option<usize>,
    pub causes: Vec<EventId>,
}

impl PendingEvent {
    pub fn new(kind: EventKind, instance: usize, lab: LabId, at: SpacetimeEvent) -> Self {
        Self { kind, instance, lab, at, payload: None, channel: None, peer: None, subject: None, causes: Vec::new() }
    }

    pub fn payload(mut self, payload: u64) -> Self {
        self.payload = Some(payload);
        self
    }

    pub fn channel(mut self, channel: ChannelClass) -> Self {
        self.channel = Some(channel);
        self
    }

    pub fn peer(mut self, peer: LabId) -> Self {
        self.peer = Some(peer);
        self
    }

    pub fn subject(mut self, subject: usize) -> Self {
        self.subject = Some(subject);
        self
    }

    pub fn causes(mut self, causes: impl IntoIterator<Item = EventId>) -> Self {
        self.causes.extend(causes);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub id: EventId,
    pub kind: EventKind,
    pub instance: usize,
    pub lab: LabId,
    pub at: SpacetimeEvent,
    pub payload: Option<u64>,
    pub channel: Option<ChannelClass>,
    pub peer: Option<LabId>,
    pub subject: Option<usize>,
    pub causes: Vec<EventId>,
}

/// A flow of information faster than light: `cause` cannot influence
/// `event`. `deficit = ‖Δpos‖ − Δt > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, thiserror::Error)]
#[error("causality violation: {cause} cannot influence {event} (interval deficit {deficit})")]
pub struct CausalityViolation {
    pub event: EventId,
    pub cause: EventId,
    pub deficit: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EngineError {
    #[error(transparent)]
    Causality(#[from] CausalityViolation),
    #[error("event {event} names unknown cause {cause}")]
    UnknownCause { event: EventId, cause: EventId },
    #[error("{cause} happened at {lab} of party {owner} (instance {instance}), which the reader does not control")]
    PrivateRead { cause: EventId, instance: usize, owner: usize, lab: LabId },
    #[error("non-finite coordinates for event {0}")]
    NonFinite(EventId),
}

/// Committed events of one run, in commit order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunState {
    events: Vec<EventRecord>,
}

impl RunState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn events(&self) -> &[EventRecord] {
        &self.events
    }

    pub fn get(&self, id: EventId) -> Option<&EventRecord> {
        self.events.get(id.0)
    }

    /// Id the next committed event will receive.
    pub fn next_id(&self) -> EventId {
        EventId(self.events.len())
    }

    /// Whether `cause` may influence an event at `at`.
    pub fn check_cause(&self, event: EventId, cause: EventId, at: &SpacetimeEvent) -> Result<(), EngineError> {
        let c = self.get(cause).ok_or(EngineError::UnknownCause { event, cause })?;
        let deficit = causal_deficit(&c.at, at);
        if deficit > GEOMETRY_TOLERANCE {
            return Err(CausalityViolation { event, cause, deficit }.into());
        }
        Ok(())
    }

    /// Commits `event` iff every cause is already committed and causally
    /// admissible; otherwise reports the first offending cause.
    pub fn schedule(&mut self, event: PendingEvent) -> Result<EventId, EngineError> {
        let id = self.next_id();
        if !event.at.is_finite() {
            return Err(EngineError::NonFinite(id));
        }
        for &cause in &event.causes {
            if cause >= id {
                return Err(EngineError::UnknownCause { event: id, cause });
            }
            self.check_cause(id, cause, &event.at)?;
        }
        self.events.push(EventRecord {
            id,
            kind: event.kind,
            instance: event.instance,
            lab: event.lab,
            at: event.at,
            payload: event.payload,
            channel: event.channel,
            peer: event.peer,
            subject: event.subject,
            causes: event.causes,
        });
        Ok(id)
    }

    /// Events ordered by time, ties broken by `(owner, site, id)`, adjusted
    /// so that every event follows its causes.
    pub fn total_order(&self) -> Vec<&EventRecord> {
        #[derive(PartialEq)]
        struct Key<'a>(&'a EventRecord);
        impl Eq for Key<'_> {}
        impl Ord for Key<'_> {
            fn cmp(&self, other: &Self) -> Ordering {
                let (a, b) = (self.0, other.0);
                // reversed: BinaryHeap pops the greatest
                b.at.t
                    .total_cmp(&a.at.t)
                    .then(b.lab.owner.cmp(&a.lab.owner))
                    .then(b.lab.site.cmp(&a.lab.site))
                    .then(b.id.cmp(&a.id))
            }
        }
        impl PartialOrd for Key<'_> {
            fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
                Some(self.cmp(other))
            }
        }

        let n = self.events.len();
        let mut pending = vec![0usize; n];
        let mut children = vec![Vec::new(); n];
        for e in &self.events {
            pending[e.id.0] = e.causes.len();
            for c in &e.causes {
                children[c.0].push(e.id.0);
            }
        }
        let mut heap: BinaryHeap<Key> = self.events.iter().filter(|e| e.causes.is_empty()).map(Key).collect();
        let mut out = Vec::with_capacity(n);
        while let Some(Key(e)) = heap.pop() {
            out.push(e);
            for &child in &children[e.id.0] {
                pending[child] -= 1;
                if pending[child] == 0 {
                    heap.push(Key(&self.events[child]));
                }
            }
        }
        out
    }

    /// One line per event in total order:
    /// `event <id> <instance> <kind> <lab> <t> <x> <y> <z> <payload|-> <channel|-> <peer|-> <subject|-> <causes|->`.
    pub fn export_log(&self) -> String {
        let mut out = String::new();
        for e in self.total_order() {
            let opt = |v: Option<String>| v.unwrap_or_else(|| "-".to_string());
            let causes = if e.causes.is_empty() {
                "-".to_string()
            } else {
                e.causes.iter().map(|c| c.0.to_string()).collect::<Vec<_>>().join(",")
            };
            let _ = writeln!(
                out,
                "event\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                e.id.0,
                e.instance,
                e.kind.as_str(),
                e.lab,
                e.at.t,
                e.at.pos[0],
                e.at.pos[1],
                e.at.pos[2],
                opt(e.payload.map(|p| p.to_string())),
                opt(e.channel.map(|c| c.as_str().to_string())),
                opt(e.peer.map(|p| p.to_string())),
                opt(e.subject.map(|s| s.to_string())),
                causes,
            );
        }
        out
    }
}

/// Metadata of an event a policy may read.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub id: EventId,
    pub instance: usize,
    pub kind: EventKind,
    pub lab: LabId,
    pub peer: Option<LabId>,
    pub at: SpacetimeEvent,
}

/// Which `(instance, party)` slots act together as the adversary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Coalition {
    members: Vec<Vec<bool>>,
}

impl Coalition {
    pub fn new(members: Vec<Vec<bool>>) -> Self {
        Self { members }
    }

    pub fn contains(&self, instance: usize, party: usize) -> bool {
        self.members.get(instance).and_then(|m| m.get(party)).copied().unwrap_or(false)
    }

    pub fn instances(&self) -> usize {
        self.members.len()
    }

    pub fn parties(&self, instance: usize) -> usize {
        self.members[instance].len()
    }

    /// Honest parties of one instance.
    pub fn honest(&self, instance: usize) -> Vec<usize> {
        (0..self.parties(instance)).filter(|&p| !self.contains(instance, p)).collect()
    }
}

/// What an adversary policy may observe when deciding at `at`: events at
/// coalition laboratories in the causal past of `at`, plus the coalition's
/// pre-shared randomness.
pub struct View<'a> {
    state: &'a RunState,
    coalition: &'a Coalition,
    shared: &'a [Vec<u64>],
    at: SpacetimeEvent,
    decision: EventId,
    reads: Vec<EventId>,
}

impl<'a> View<'a> {
    pub fn new(state: &'a RunState, coalition: &'a Coalition, shared: &'a [Vec<u64>], at: SpacetimeEvent) -> Self {
        Self { state, coalition, shared, at, decision: state.next_id(), reads: Vec::new() }
    }

    pub fn at(&self) -> SpacetimeEvent {
        self.at
    }

    pub fn coalition(&self) -> &Coalition {
        self.coalition
    }

    /// Pre-agreed random value of a coalition slot.
    pub fn shared(&self, instance: usize, party: usize) -> u64 {
        self.shared.get(instance).and_then(|s| s.get(party)).copied().unwrap_or(0)
    }

    fn visible(&self, e: &EventRecord) -> bool {
        self.coalition.contains(e.instance, e.lab.owner)
    }

    /// Coalition events in the causal past of the decision point.
    pub fn observations(&self) -> Vec<Observation> {
        self.state
            .events()
            .iter()
            .filter(|e| self.visible(e) && causal_deficit(&e.at, &self.at) <= GEOMETRY_TOLERANCE)
            .map(|e| Observation { id: e.id, instance: e.instance, kind: e.kind, lab: e.lab, peer: e.peer, at: e.at })
            .collect()
    }

    /// Locates the reception, at the home laboratory in ball `site`, of the
    /// stage-II message `from_party` sent in `instance`. Only the id is
    /// returned; the payload must go through [`View::read`].
    pub fn find_delivery(&self, instance: usize, from_party: usize, site: usize) -> Option<EventId> {
        self.state
            .events()
            .iter()
            .find(|e| {
                e.kind == EventKind::Receive
                    && e.instance == instance
                    && e.channel == Some(ChannelClass::FastInterParty)
                    && e.lab == LabId::home(site)
                    && e.peer == Some(LabId::new(from_party, site))
            })
            .map(|e| e.id)
    }

    /// Returns the payload of `id` if the coalition holds it and it lies in
    /// the causal past of the decision point. The read becomes a cause of
    /// the emitted event.
    pub fn read(&mut self, id: EventId) -> Result<Option<u64>, EngineError> {
        let e = self.state.get(id).ok_or(EngineError::UnknownCause { event: self.decision, cause: id })?;
        if !self.visible(e) {
            return Err(EngineError::PrivateRead { cause: id, instance: e.instance, owner: e.lab.owner, lab: e.lab });
        }
        self.state.check_cause(self.decision, id, &self.at)?;
        self.reads.push(id);
        Ok(e.payload)
    }

    pub fn into_reads(self) -> Vec<EventId> {
        self.reads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(t: f64, x: f64) -> SpacetimeEvent {
        SpacetimeEvent::new(t, [x, 0.0, 0.0])
    }

    fn pending(kind: EventKind, owner: usize, at: SpacetimeEvent) -> PendingEvent {
        PendingEvent::new(kind, 0, LabId::home(owner), at)
    }

    #[test]
    fn timelike_cause_commits() {
        let mut s = RunState::new();
        let r = s.schedule(pending(EventKind::Receive, 0, ev(0.0, 0.0))).unwrap();
        assert!(s.schedule(pending(EventKind::Emit, 0, ev(1.0, 0.0)).causes([r])).is_ok());
    }

    #[test]
    fn simultaneous_distant_cause_rejected() {
        let mut s = RunState::new();
        // nearest points of two balls 8 apart
        let r = s.schedule(pending(EventKind::Receive, 1, ev(0.0, 9.0))).unwrap();
        let err = s.schedule(pending(EventKind::Emit, 0, ev(0.0, 1.0)).causes([r])).unwrap_err();
        match err {
            EngineError::Causality(v) => {
                assert_eq!(v.cause, r);
                assert_eq!(v.event, EventId(1));
                assert!((v.deficit - 8.0).abs() < 1e-12);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(s.len(), 1);
    }

    #[test]
    fn lightlike_cause_commits() {
        let mut s = RunState::new();
        let r = s.schedule(pending(EventKind::Emit, 0, ev(0.0, 0.0))).unwrap();
        assert!(s.schedule(pending(EventKind::Receive, 1, ev(3.0, 3.0)).causes([r])).is_ok());
    }

    #[test]
    fn future_cause_rejected() {
        let mut s = RunState::new();
        let r = s.schedule(pending(EventKind::Receive, 0, ev(5.0, 0.0))).unwrap();
        assert!(matches!(
            s.schedule(pending(EventKind::Emit, 0, ev(4.0, 0.0)).causes([r])),
            Err(EngineError::Causality(_))
        ));
    }

    #[test]
    fn unknown_cause_rejected() {
        let mut s = RunState::new();
        assert!(matches!(
            s.schedule(pending(EventKind::Emit, 0, ev(0.0, 0.0)).causes([EventId(3)])),
            Err(EngineError::UnknownCause { .. })
        ));
    }

    #[test]
    fn total_order_respects_causes_on_ties() {
        let mut s = RunState::new();
        // emission by party 1 received at the same point and time by party 0
        let e = s.schedule(pending(EventKind::Emit, 1, ev(0.0, 0.0))).unwrap();
        let r = s.schedule(pending(EventKind::Receive, 0, ev(0.0, 0.0)).causes([e])).unwrap();
        let other = s.schedule(pending(EventKind::Emit, 0, ev(0.0, 10.0))).unwrap();
        let order: Vec<_> = s.total_order().iter().map(|e| e.id).collect();
        assert_eq!(order, vec![other, e, r]);
    }

    #[test]
    fn view_filters_and_guards() {
        let mut s = RunState::new();
        let coalition = Coalition::new(vec![vec![false, true]]);
        let shared = vec![vec![0, 7]];
        let honest = s.schedule(pending(EventKind::Draw, 0, ev(-5.0, 0.0)).payload(3)).unwrap();
        let near = s
            .schedule(PendingEvent::new(EventKind::Receive, 0, LabId::home(1), ev(0.0, 10.0)).payload(1))
            .unwrap();
        let far = s
            .schedule(PendingEvent::new(EventKind::Receive, 0, LabId::home(1), ev(0.0, 100.0)).payload(2))
            .unwrap();
        let mut view = View::new(&s, &coalition, &shared, ev(1.0, 10.0));
        assert_eq!(view.shared(0, 1), 7);
        let seen: Vec<_> = view.observations().iter().map(|o| o.id).collect();
        assert_eq!(seen, vec![near]);
        assert_eq!(view.read(near).unwrap(), Some(1));
        assert!(matches!(view.read(far), Err(EngineError::Causality(_))));
        assert!(matches!(view.read(honest), Err(EngineError::PrivateRead { .. })));
        assert_eq!(view.into_reads(), vec![near]);
    }
}
