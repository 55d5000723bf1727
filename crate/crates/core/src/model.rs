//! Replica automata, messages, events and the protocol transition system.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};
use std::fmt;
use std::hash::Hash;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::trace::{ExecutionTrace, Rule, TraceStep, TIMEOUT_MARK};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ReplicaId(pub usize);

impl ReplicaId {
    pub fn label(&self) -> String {
        format!("replica-{}", self.0)
    }
}

impl fmt::Display for ReplicaId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl FromStr for ReplicaId {
    type Err = ParseIdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        let t = t.strip_prefix("replica-").or_else(|| t.strip_prefix('r')).unwrap_or(t);
        t.parse::<usize>()
            .map(ReplicaId)
            .map_err(|_| ParseIdError(s.to_string()))
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("cannot parse identifier `{0}`")]
pub struct ParseIdError(pub String);

/// Globally unique message identifier.
///
/// Messages produced by a replica's send step are named after the sender and
/// the send event's sequence number, so two runs with the same schedule name
/// their messages identically. Messages created by an adversary or a monitor
/// action draw from a separate counter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MessageId {
    Sent { replica: ReplicaId, seq: u64 },
    Injected(u64),
}

impl fmt::Display for MessageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MessageId::Sent { replica, seq } => write!(f, "r{}.{}", replica.0, seq),
            MessageId::Injected(n) => write!(f, "x{n}"),
        }
    }
}

impl FromStr for MessageId {
    type Err = ParseIdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ParseIdError(s.to_string());
        if let Some(rest) = s.strip_prefix('x') {
            return rest.parse().map(MessageId::Injected).map_err(|_| err());
        }
        let rest = s.strip_prefix('r').ok_or_else(err)?;
        let (r, seq) = rest.split_once('.').ok_or_else(err)?;
        Ok(MessageId::Sent {
            replica: ReplicaId(r.parse().map_err(|_| err())?),
            seq: seq.parse().map_err(|_| err())?,
        })
    }
}

impl Serialize for MessageId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MessageId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Message {
    pub id: MessageId,
    pub from: ReplicaId,
    pub to: ReplicaId,
    #[serde(rename = "type")]
    pub mtype: String,
    #[serde(with = "b64")]
    pub payload: Vec<u8>,
    #[serde(default)]
    pub fictitious: bool,
}

pub(crate) mod b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        STANDARD.decode(s).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct InternalEvent {
    pub label: String,
    #[serde(default)]
    pub params: BTreeMap<String, String>,
}

impl InternalEvent {
    pub fn new(label: impl Into<String>) -> Self {
        InternalEvent {
            label: label.into(),
            params: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.params.insert(key.into(), value.to_string());
        self
    }

    pub fn param(&self, key: &str) -> Option<&str> {
        self.params.get(key).map(String::as_str)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventType {
    Send,
    Receive,
    Internal,
}

impl EventType {
    pub fn name(&self) -> &'static str {
        match self {
            EventType::Send => "send",
            EventType::Receive => "receive",
            EventType::Internal => "internal",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventKind {
    Send { message: Message },
    Receive { message: Message },
    Internal { internal: InternalEvent },
}

/// An event `(replica, seq, kind)`; `seq` numbers the replica's events from 0.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Event {
    pub replica: ReplicaId,
    pub seq: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

/// Identity of an event: replica, sequence number, type and message uid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EventKey {
    pub replica: ReplicaId,
    pub seq: u64,
    pub etype: EventType,
    pub message: Option<MessageId>,
}

impl Event {
    pub fn etype(&self) -> EventType {
        match self.kind {
            EventKind::Send { .. } => EventType::Send,
            EventKind::Receive { .. } => EventType::Receive,
            EventKind::Internal { .. } => EventType::Internal,
        }
    }

    pub fn message(&self) -> Option<&Message> {
        match &self.kind {
            EventKind::Send { message } | EventKind::Receive { message } => Some(message),
            EventKind::Internal { .. } => None,
        }
    }

    pub fn sent(&self) -> Option<&Message> {
        match &self.kind {
            EventKind::Send { message } => Some(message),
            _ => None,
        }
    }

    pub fn received(&self) -> Option<&Message> {
        match &self.kind {
            EventKind::Receive { message } => Some(message),
            _ => None,
        }
    }

    pub fn internal(&self) -> Option<&InternalEvent> {
        match &self.kind {
            EventKind::Internal { internal } => Some(internal),
            _ => None,
        }
    }

    pub fn key(&self) -> EventKey {
        EventKey {
            replica: self.replica,
            seq: self.seq,
            etype: self.etype(),
            message: self.message().map(|m| m.id),
        }
    }
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            EventKind::Send { message } => write!(
                f,
                "{}#{} send {} {}->{} {}",
                self.replica, self.seq, message.id, message.from, message.to, message.mtype
            ),
            EventKind::Receive { message } => write!(
                f,
                "{}#{} recv {} {}->{} {}",
                self.replica, self.seq, message.id, message.from, message.to, message.mtype
            ),
            EventKind::Internal { internal } => {
                write!(f, "{}#{} {}", self.replica, self.seq, internal.label)?;
                for (k, v) in &internal.params {
                    write!(f, " {k}={v}")?;
                }
                Ok(())
            }
        }
    }
}

/// Input to a replica step.
#[derive(Clone, Copy, Debug)]
pub enum Input<'a> {
    /// The empty input: an internal or send step.
    Internal,
    /// Expiry of the replica's armed timer.
    Timeout,
    Message(&'a Message),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Outgoing {
    pub to: ReplicaId,
    pub mtype: String,
    pub payload: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Emit {
    Internal(InternalEvent),
    Send(Outgoing),
    Receive,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Transition<S> {
    pub state: S,
    pub emit: Emit,
}

/// A deterministic replica automaton.
///
/// For every state, either the empty input is enabled or only message
/// inputs are; `step` returns `None` when the input is not enabled.
pub trait Automaton: Clone + Send + Sync {
    type State: Clone + fmt::Debug + PartialEq + Eq + Hash + Send + Sync;

    fn replica_count(&self) -> usize;
    fn initial_state(&self, replica: ReplicaId) -> Self::State;
    fn step(
        &self,
        replica: ReplicaId,
        state: &Self::State,
        input: Input<'_>,
    ) -> Option<Transition<Self::State>>;
    fn is_final(&self, state: &Self::State) -> bool;

    fn internal_enabled(&self, replica: ReplicaId, state: &Self::State) -> bool {
        !self.is_final(state) && self.step(replica, state, Input::Internal).is_some()
    }

    fn timeout_enabled(&self, replica: ReplicaId, state: &Self::State) -> bool {
        !self.is_final(state)
            && !self.internal_enabled(replica, state)
            && self.step(replica, state, Input::Timeout).is_some()
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("no step enabled at replica {replica}")]
    NoStepEnabled { replica: ReplicaId },
    #[error("replica {replica} is in a final state")]
    ReplicaFinal { replica: ReplicaId },
    #[error("message {id} is not in the pool")]
    NotInPool { id: MessageId },
    #[error("inbox of replica {replica} is empty")]
    EmptyInbox { replica: ReplicaId },
    #[error("unknown replica {replica}")]
    UnknownReplica { replica: ReplicaId },
    #[error("replica {replica} produced an invalid transition: {reason}")]
    InvalidTransition { replica: ReplicaId, reason: String },
}

/// Replica states plus per-replica event counters.
#[derive(Clone, Debug)]
pub struct Replicas<A: Automaton> {
    automaton: A,
    states: Vec<A::State>,
    next_seq: Vec<u64>,
}

impl<A: Automaton> Replicas<A> {
    pub fn new(automaton: A) -> Self {
        let n = automaton.replica_count();
        let states = (0..n).map(|r| automaton.initial_state(ReplicaId(r))).collect();
        Replicas {
            automaton,
            states,
            next_seq: vec![0; n],
        }
    }

    pub fn automaton(&self) -> &A {
        &self.automaton
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ReplicaId> {
        (0..self.states.len()).map(ReplicaId)
    }

    pub fn state(&self, r: ReplicaId) -> Result<&A::State, ModelError> {
        self.states
            .get(r.0)
            .ok_or(ModelError::UnknownReplica { replica: r })
    }

    pub fn is_final(&self, r: ReplicaId) -> bool {
        self.states
            .get(r.0)
            .is_some_and(|s| self.automaton.is_final(s))
    }

    pub fn all_final(&self) -> bool {
        self.states.iter().all(|s| self.automaton.is_final(s))
    }

    pub fn internal_enabled(&self, r: ReplicaId) -> bool {
        self.states
            .get(r.0)
            .is_some_and(|s| self.automaton.internal_enabled(r, s))
    }

    pub fn timeout_enabled(&self, r: ReplicaId) -> bool {
        self.states
            .get(r.0)
            .is_some_and(|s| self.automaton.timeout_enabled(r, s))
    }

    /// Sequence number the next event of `r` will carry.
    pub fn next_seq(&self, r: ReplicaId) -> u64 {
        self.next_seq.get(r.0).copied().unwrap_or(0)
    }

    pub fn can_receive(&self, r: ReplicaId, m: &Message) -> bool {
        self.states.get(r.0).is_some_and(|s| {
            !self.automaton.is_final(s) && self.automaton.step(r, s, Input::Message(m)).is_some()
        })
    }

    /// Applies one replica step and returns the event it produced.
    pub fn fire(&mut self, r: ReplicaId, input: Input<'_>) -> Result<Event, ModelError> {
        let state = self.state(r)?;
        if self.automaton.is_final(state) {
            return Err(ModelError::ReplicaFinal { replica: r });
        }
        if matches!(input, Input::Timeout) && self.internal_enabled(r) {
            return Err(ModelError::NoStepEnabled { replica: r });
        }
        let t = self
            .automaton
            .step(r, state, input)
            .ok_or(ModelError::NoStepEnabled { replica: r })?;
        let seq = self.next_seq[r.0];
        let invalid = |reason: &str| ModelError::InvalidTransition {
            replica: r,
            reason: reason.to_string(),
        };
        let kind = match (input, t.emit) {
            (Input::Message(m), Emit::Receive) => EventKind::Receive { message: m.clone() },
            (Input::Message(_), _) => return Err(invalid("message input must emit a receive")),
            (_, Emit::Receive) => return Err(invalid("receive emitted without a message")),
            (Input::Timeout, Emit::Send(_)) => {
                return Err(invalid("timeout must emit an internal event"))
            }
            (Input::Timeout, Emit::Internal(mut internal)) => {
                internal
                    .params
                    .insert(TIMEOUT_MARK.to_string(), "expired".to_string());
                EventKind::Internal { internal }
            }
            (_, Emit::Internal(internal)) => EventKind::Internal { internal },
            (Input::Internal, Emit::Send(out)) => {
                if out.to.0 >= self.states.len() {
                    return Err(invalid("send to unknown replica"));
                }
                EventKind::Send {
                    message: Message {
                        id: MessageId::Sent { replica: r, seq },
                        from: r,
                        to: out.to,
                        mtype: out.mtype,
                        payload: out.payload,
                        fictitious: false,
                    },
                }
            }
        };
        self.states[r.0] = t.state;
        self.next_seq[r.0] += 1;
        Ok(Event {
            replica: r,
            seq,
            kind,
        })
    }
}

/// A move of the protocol transition system.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "move", rename_all = "snake_case")]
pub enum Move {
    Internal { replica: ReplicaId },
    Timeout { replica: ReplicaId },
    Network { message: MessageId },
    Receive { replica: ReplicaId },
}

/// Protocol configuration `(E, pool, states, inboxes)`.
#[derive(Clone, Debug)]
pub struct Configuration<A: Automaton> {
    replicas: Replicas<A>,
    pub event_log: VecDeque<Event>,
    pool: BTreeMap<MessageId, Message>,
    inboxes: Vec<VecDeque<Message>>,
    consumed: BTreeSet<MessageId>,
    next_injected: u64,
}

impl<A: Automaton> Configuration<A> {
    pub fn new(automaton: A) -> Self {
        let replicas = Replicas::new(automaton);
        let n = replicas.len();
        Configuration {
            replicas,
            event_log: VecDeque::new(),
            pool: BTreeMap::new(),
            inboxes: vec![VecDeque::new(); n],
            consumed: BTreeSet::new(),
            next_injected: 0,
        }
    }

    pub fn replicas(&self) -> &Replicas<A> {
        &self.replicas
    }

    pub fn pool(&self) -> &BTreeMap<MessageId, Message> {
        &self.pool
    }

    pub fn inbox(&self, r: ReplicaId) -> Option<&VecDeque<Message>> {
        self.inboxes.get(r.0)
    }

    pub fn consumed(&self) -> &BTreeSet<MessageId> {
        &self.consumed
    }

    pub fn fresh_injected_id(&mut self) -> MessageId {
        let id = MessageId::Injected(self.next_injected);
        self.next_injected += 1;
        id
    }

    /// Internal or Send rule: fire the empty input at `r`.
    pub fn step_internal(&mut self, r: ReplicaId) -> Result<Event, ModelError> {
        let e = self.replicas.fire(r, Input::Internal)?;
        if let Some(m) = e.sent() {
            self.pool.insert(m.id, m.clone());
        }
        self.event_log.push_back(e.clone());
        Ok(e)
    }

    /// Timer expiry at a quiescent replica; behaves like the Internal rule.
    pub fn step_timeout(&mut self, r: ReplicaId) -> Result<Event, ModelError> {
        let e = self.replicas.fire(r, Input::Timeout)?;
        self.event_log.push_back(e.clone());
        Ok(e)
    }

    /// Network rule: move a pool message to its destination inbox.
    pub fn step_network(&mut self, id: MessageId) -> Result<Message, ModelError> {
        let m = self.pool.remove(&id).ok_or(ModelError::NotInPool { id })?;
        self.inboxes[m.to.0].push_back(m.clone());
        Ok(m)
    }

    /// Receive rule: consume the head of `r`'s inbox.
    pub fn step_receive(&mut self, r: ReplicaId) -> Result<Event, ModelError> {
        let inbox = self
            .inboxes
            .get(r.0)
            .ok_or(ModelError::UnknownReplica { replica: r })?;
        let m = inbox
            .front()
            .cloned()
            .ok_or(ModelError::EmptyInbox { replica: r })?;
        let e = self.replicas.fire(r, Input::Message(&m))?;
        self.inboxes[r.0].pop_front();
        self.consumed.insert(m.id);
        self.event_log.push_back(e.clone());
        Ok(e)
    }

    /// Adversary rule: replace the pool. Messages whose uid was not in the
    /// pool before are marked fictitious; uids already used elsewhere are
    /// renamed so every message keeps a unique identity.
    pub fn step_adversary(&mut self, new_pool: Vec<Message>) -> Vec<Message> {
        let old = std::mem::take(&mut self.pool);
        let in_flight: HashSet<MessageId> = self
            .inboxes
            .iter()
            .flatten()
            .map(|m| m.id)
            .chain(self.consumed.iter().copied())
            .collect();
        let mut added = Vec::new();
        for mut m in new_pool {
            match old.get(&m.id) {
                Some(prev) if *prev == m => {}
                _ => {
                    if old.contains_key(&m.id)
                        || in_flight.contains(&m.id)
                        || self.pool.contains_key(&m.id)
                    {
                        m.id = self.fresh_injected_id();
                    }
                    m.fictitious = true;
                    added.push(m.clone());
                }
            }
            self.pool.insert(m.id, m);
        }
        added
    }

    pub fn is_complete(&self) -> bool {
        self.replicas.all_final()
    }

    /// Places `m` directly in its destination inbox, taking it out of the
    /// pool if it is there. Used by monitors.
    pub fn monitor_deliver(&mut self, m: Message) -> Result<(), ModelError> {
        let inbox = self
            .inboxes
            .get_mut(m.to.0)
            .ok_or(ModelError::UnknownReplica { replica: m.to })?;
        self.pool.remove(&m.id);
        inbox.push_back(m);
        Ok(())
    }

    /// All moves enabled in this configuration, in a fixed order.
    pub fn enabled_moves(&self) -> Vec<Move> {
        let mut moves = Vec::new();
        for r in self.replicas.ids() {
            if self.replicas.internal_enabled(r) {
                moves.push(Move::Internal { replica: r });
            }
        }
        for r in self.replicas.ids() {
            if let Some(m) = self.inboxes[r.0].front() {
                if self.replicas.can_receive(r, m) {
                    moves.push(Move::Receive { replica: r });
                }
            }
        }
        for id in self.pool.keys() {
            moves.push(Move::Network { message: *id });
        }
        for r in self.replicas.ids() {
            if self.replicas.timeout_enabled(r) {
                moves.push(Move::Timeout { replica: r });
            }
        }
        moves
    }

    /// Applies `mv` and returns the corresponding trace record (without index).
    pub fn apply(&mut self, mv: Move) -> Result<TraceStep, ModelError> {
        match mv {
            Move::Internal { replica } => {
                let e = self.step_internal(replica)?;
                let rule = if e.sent().is_some() {
                    Rule::Send
                } else {
                    Rule::Internal
                };
                Ok(TraceStep::event(rule, e))
            }
            Move::Timeout { replica } => {
                let e = self.step_timeout(replica)?;
                Ok(TraceStep::event(Rule::Internal, e))
            }
            Move::Receive { replica } => {
                let e = self.step_receive(replica)?;
                Ok(TraceStep::event(Rule::Receive, e))
            }
            Move::Network { message } => {
                let m = self.step_network(message)?;
                Ok(TraceStep::network(Rule::Network, m))
            }
        }
    }

    /// Key identifying the configuration up to its event log.
    pub fn fingerprint(&self) -> ConfigFingerprint<A::State> {
        ConfigFingerprint {
            states: self.replicas.states.clone(),
            pool: self.pool.keys().copied().collect(),
            inboxes: self
                .inboxes
                .iter()
                .map(|q| q.iter().map(|m| m.id).collect())
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ConfigFingerprint<S> {
    states: Vec<S>,
    pool: Vec<MessageId>,
    inboxes: Vec<Vec<MessageId>>,
}

/// Runs the protocol in lock-step rounds until every replica is final, no
/// move is enabled, or `budget` transitions have been taken.
///
/// Each round lets every replica exhaust its empty-input steps, delivers the
/// whole pool ordered by (sender, uid), then lets each replica consume its
/// inbox. When a round makes no progress the lowest-id replica with an armed
/// timer fires it.
pub fn run_synchronous<A: Automaton>(automaton: A, budget: usize) -> ExecutionTrace {
    let n = automaton.replica_count();
    let mut config = Configuration::new(automaton);
    let mut trace = ExecutionTrace::new(n);

    macro_rules! take {
        ($mv:expr) => {{
            if trace.steps.len() >= budget {
                trace.complete = config.is_complete();
                return trace;
            }
            let step = config
                .apply($mv)
                .expect("enabled move must apply in the synchronous runner");
            trace.push(step);
        }};
    }

    loop {
        let before = trace.steps.len();
        for r in config.replicas.ids().collect::<Vec<_>>() {
            while config.replicas.internal_enabled(r) {
                take!(Move::Internal { replica: r });
            }
        }
        let mut pending: Vec<(ReplicaId, MessageId)> =
            config.pool.values().map(|m| (m.from, m.id)).collect();
        pending.sort();
        for (_, id) in pending {
            take!(Move::Network { message: id });
        }
        for r in config.replicas.ids().collect::<Vec<_>>() {
            loop {
                if config.replicas.internal_enabled(r) {
                    take!(Move::Internal { replica: r });
                } else if config.inboxes[r.0]
                    .front()
                    .is_some_and(|m| config.replicas.can_receive(r, m))
                {
                    take!(Move::Receive { replica: r });
                } else {
                    break;
                }
            }
        }
        if trace.steps.len() == before {
            if config.is_complete() {
                break;
            }
            match config.replicas.ids().find(|r| config.replicas.timeout_enabled(*r)) {
                Some(r) => take!(Move::Timeout { replica: r }),
                None => break,
            }
        }
    }
    trace.complete = config.is_complete();
    trace
}

/// Finding of the bounded exclusivity check.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExclusivityViolation {
    pub replica: ReplicaId,
    pub state: String,
    pub message: MessageId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExclusivityReport {
    pub configurations: usize,
    pub exhausted: bool,
    pub violations: Vec<ExclusivityViolation>,
}

/// Explores up to `max_configs` reachable configurations breadth-first and
/// checks that no reachable replica state enables both the empty input and
/// a message input for any message seen during exploration.
pub fn check_exclusivity<A: Automaton>(automaton: A, max_configs: usize) -> ExclusivityReport {
    let start = Configuration::new(automaton.clone());
    let mut seen = HashSet::new();
    let mut queue = VecDeque::new();
    seen.insert(start.fingerprint());
    queue.push_back(start);
    let mut messages: BTreeMap<MessageId, Message> = BTreeMap::new();
    let mut states: Vec<HashSet<A::State>> = vec![HashSet::new(); automaton.replica_count()];
    let mut explored = 0;
    let mut exhausted = true;
    while let Some(config) = queue.pop_front() {
        explored += 1;
        for r in config.replicas.ids() {
            states[r.0].insert(config.replicas.states[r.0].clone());
        }
        for m in config.pool.values().chain(config.inboxes.iter().flatten()) {
            messages.entry(m.id).or_insert_with(|| m.clone());
        }
        for mv in config.enabled_moves() {
            let mut next = config.clone();
            if next.apply(mv).is_err() {
                continue;
            }
            let fp = next.fingerprint();
            if seen.contains(&fp) {
                continue;
            }
            if seen.len() >= max_configs {
                exhausted = false;
                continue;
            }
            seen.insert(fp);
            queue.push_back(next);
        }
    }
    let mut violations = Vec::new();
    for (r, set) in states.iter().enumerate() {
        let r = ReplicaId(r);
        for s in set {
            if automaton.is_final(s) || automaton.step(r, s, Input::Internal).is_none() {
                continue;
            }
            for m in messages.values().filter(|m| m.to == r) {
                if automaton.step(r, s, Input::Message(m)).is_some() {
                    violations.push(ExclusivityViolation {
                        replica: r,
                        state: format!("{s:?}"),
                        message: m.id,
                    });
                }
            }
        }
    }
    ExclusivityReport {
        configurations: explored,
        exhausted,
        violations,
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// Replica 0 sends `k` pings to every other replica; the others echo each
    /// ping back; replica 0 is final once it has all echoes.
    #[derive(Clone, Debug)]
    pub struct PingPong {
        pub n: usize,
        pub k: usize,
    }

    #[derive(Clone, Debug, PartialEq, Eq, Hash)]
    pub struct PpState {
        pub pending: Vec<usize>,
        pub got: usize,
        pub recv: usize,
    }

    impl Automaton for PingPong {
        type State = PpState;

        fn replica_count(&self) -> usize {
            self.n
        }

        fn initial_state(&self, r: ReplicaId) -> PpState {
            let pending = if r.0 == 0 {
                (0..self.k).flat_map(|_| 1..self.n).collect()
            } else {
                vec![]
            };
            PpState {
                pending,
                got: 0,
                recv: 0,
            }
        }

        fn step(&self, r: ReplicaId, s: &PpState, input: Input<'_>) -> Option<Transition<PpState>> {
            match input {
                Input::Internal => {
                    let (&to, rest) = s.pending.split_first()?;
                    let mut next = s.clone();
                    next.pending = rest.to_vec();
                    Some(Transition {
                        state: next,
                        emit: Emit::Send(Outgoing {
                            to: ReplicaId(to),
                            mtype: if r.0 == 0 { "Ping" } else { "Pong" }.into(),
                            payload: vec![],
                        }),
                    })
                }
                Input::Timeout => None,
                Input::Message(m) => {
                    if !s.pending.is_empty() {
                        return None;
                    }
                    let mut next = s.clone();
                    next.recv += 1;
                    if m.mtype == "Ping" {
                        next.pending.push(m.from.0);
                    } else {
                        next.got += 1;
                    }
                    Some(Transition {
                        state: next,
                        emit: Emit::Receive,
                    })
                }
            }
        }

        fn is_final(&self, s: &PpState) -> bool {
            let expected = if s.got > 0 || s.recv == 0 {
                self.k * (self.n - 1)
            } else {
                self.k
            };
            s.pending.is_empty() && s.recv == expected && expected > 0
        }
    }

    #[test]
    fn message_id_round_trips_through_text() {
        for id in [
            MessageId::Sent {
                replica: ReplicaId(3),
                seq: 17,
            },
            MessageId::Injected(4),
        ] {
            assert_eq!(id.to_string().parse::<MessageId>().unwrap(), id);
            let j = serde_json::to_string(&id).unwrap();
            assert_eq!(serde_json::from_str::<MessageId>(&j).unwrap(), id);
        }
        assert!("q1".parse::<MessageId>().is_err());
    }

    #[test]
    fn internal_steps_fill_pool_and_keep_inboxes() {
        let mut c = Configuration::new(PingPong { n: 3, k: 1 });
        let e = c.step_internal(ReplicaId(0)).unwrap();
        assert_eq!(e.seq, 0);
        assert_eq!(c.pool().len(), 1);
        assert!(c.inbox(ReplicaId(1)).unwrap().is_empty());
        assert_eq!(c.event_log.len(), 1);
    }

    #[test]
    fn network_then_receive_moves_message_through() {
        let mut c = Configuration::new(PingPong { n: 2, k: 1 });
        let e = c.step_internal(ReplicaId(0)).unwrap();
        let id = e.sent().unwrap().id;
        let log_len = c.event_log.len();
        c.step_network(id).unwrap();
        assert_eq!(c.event_log.len(), log_len);
        assert!(c.pool().is_empty());
        assert_eq!(c.inbox(ReplicaId(1)).unwrap().len(), 1);
        let r = c.step_receive(ReplicaId(1)).unwrap();
        assert_eq!(r.received().unwrap().id, id);
        assert!(c.inbox(ReplicaId(1)).unwrap().is_empty());
        assert!(c.consumed().contains(&id));
    }

    #[test]
    fn errors_on_disabled_moves() {
        let mut c = Configuration::new(PingPong { n: 2, k: 1 });
        assert_eq!(
            c.step_internal(ReplicaId(1)),
            Err(ModelError::NoStepEnabled {
                replica: ReplicaId(1)
            })
        );
        assert_eq!(
            c.step_receive(ReplicaId(1)),
            Err(ModelError::EmptyInbox {
                replica: ReplicaId(1)
            })
        );
        let bogus = MessageId::Injected(9);
        assert_eq!(c.step_network(bogus), Err(ModelError::NotInPool { id: bogus }));
    }

    #[test]
    fn final_replica_refuses_steps() {
        let mut c = Configuration::new(PingPong { n: 2, k: 1 });
        let t = run_synchronous(PingPong { n: 2, k: 1 }, 100);
        assert!(t.complete);
        for step in &t.steps {
            let mv = step.as_move().unwrap();
            c.apply(mv).unwrap();
        }
        assert!(c.is_complete());
        assert_eq!(
            c.step_internal(ReplicaId(0)),
            Err(ModelError::ReplicaFinal {
                replica: ReplicaId(0)
            })
        );
    }

    #[test]
    fn adversary_marks_new_messages_fictitious() {
        let mut c = Configuration::new(PingPong { n: 2, k: 1 });
        c.step_internal(ReplicaId(0)).unwrap();
        let mut pool: Vec<Message> = c.pool().values().cloned().collect();
        let forged = Message {
            id: c.fresh_injected_id(),
            from: ReplicaId(1),
            to: ReplicaId(0),
            mtype: "Pong".into(),
            payload: vec![],
            fictitious: false,
        };
        pool.push(forged.clone());
        let added = c.step_adversary(pool);
        assert_eq!(added.len(), 1);
        assert!(c.pool()[&forged.id].fictitious);
        assert_eq!(c.pool().values().filter(|m| !m.fictitious).count(), 1);
    }

    #[test]
    fn synchronous_run_is_complete_and_counts_steps() {
        let t = run_synchronous(PingPong { n: 3, k: 2 }, 1000);
        assert!(t.complete);
        // 4 pings and 4 echoes: each sent, moved and received.
        assert_eq!(t.steps.len(), 8 * 3);
        let cut = run_synchronous(PingPong { n: 3, k: 2 }, 5);
        assert!(!cut.complete);
        assert_eq!(cut.steps.len(), 5);
    }

    #[test]
    fn exclusivity_holds_for_ping_pong() {
        let report = check_exclusivity(PingPong { n: 3, k: 1 }, 10_000);
        assert!(report.exhausted);
        assert!(report.violations.is_empty());
        assert!(report.configurations > 1);
    }

    #[derive(Clone)]
    struct Greedy;

    impl Automaton for Greedy {
        type State = u8;
        fn replica_count(&self) -> usize {
            2
        }
        fn initial_state(&self, _r: ReplicaId) -> u8 {
            0
        }
        fn step(&self, r: ReplicaId, s: &u8, input: Input<'_>) -> Option<Transition<u8>> {
            match input {
                Input::Internal if *s < 2 => Some(Transition {
                    state: s + 1,
                    emit: Emit::Send(Outgoing {
                        to: ReplicaId(1 - r.0),
                        mtype: "M".into(),
                        payload: vec![],
                    }),
                }),
                Input::Message(_) => Some(Transition {
                    state: *s,
                    emit: Emit::Receive,
                }),
                _ => None,
            }
        }
        fn is_final(&self, _s: &u8) -> bool {
            false
        }
    }

    #[test]
    fn exclusivity_check_reports_overlap() {
        let report = check_exclusivity(Greedy, 10_000);
        assert!(!report.violations.is_empty());
    }
}
