use std::collections::BTreeMap;

use indexmap::IndexMap;

use crate::model::{Event, Message, MessageId, ReplicaId};

/// Mutable state shared by the filters and the assertion state machine of
/// one test iteration.
#[derive(Clone, Debug, Default)]
pub struct MonitorContext {
    counters: BTreeMap<String, i64>,
    sets: BTreeMap<String, IndexMap<MessageId, Message>>,
    vars: BTreeMap<String, String>,
    /// Every message sent so far, by uid.
    pub pool_view: BTreeMap<MessageId, Message>,
    /// Events consumed by the monitor so far, including the current one.
    pub event_history: Vec<Event>,
    /// Label of the assertion machine's current state.
    pub sm_state: String,
    next_injected: u64,
}

impl MonitorContext {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn counter(&self, name: &str) -> i64 {
        self.counters.get(name).copied().unwrap_or(0)
    }

    pub fn incr(&mut self, name: &str) -> i64 {
        let c = self.counters.entry(name.to_string()).or_insert(0);
        *c += 1;
        *c
    }

    pub fn set_counter(&mut self, name: &str, value: i64) {
        self.counters.insert(name.to_string(), value);
    }

    pub fn set(&self, name: &str) -> Option<&IndexMap<MessageId, Message>> {
        self.sets.get(name)
    }

    pub fn set_len(&self, name: &str) -> usize {
        self.sets.get(name).map_or(0, IndexMap::len)
    }

    pub fn set_contains(&self, name: &str, id: MessageId) -> bool {
        self.sets.get(name).is_some_and(|s| s.contains_key(&id))
    }

    pub fn store(&mut self, name: &str, m: Message) {
        self.sets.entry(name.to_string()).or_default().insert(m.id, m);
    }

    /// Empties the set and returns its messages in insertion order.
    pub fn take_set(&mut self, name: &str) -> Vec<Message> {
        self.sets
            .get_mut(name)
            .map(|s| s.drain(..).map(|(_, m)| m).collect())
            .unwrap_or_default()
    }

    pub fn var(&self, name: &str) -> Option<&str> {
        self.vars.get(name).map(String::as_str)
    }

    pub fn set_var(&mut self, name: &str, value: impl ToString) {
        self.vars.insert(name.to_string(), value.to_string());
    }

    /// Builds a fictitious message with a fresh injected uid.
    pub fn forge(&mut self, from: ReplicaId, to: ReplicaId, mtype: &str, payload: Vec<u8>) -> Message {
        let id = MessageId::Injected(self.next_injected);
        self.next_injected += 1;
        Message {
            id,
            from,
            to,
            mtype: mtype.to_string(),
            payload,
            fictitious: true,
        }
    }

    /// Reserves an injected uid for copies made outside `forge`.
    pub fn fresh_id(&mut self) -> MessageId {
        let id = MessageId::Injected(self.next_injected);
        self.next_injected += 1;
        id
    }

    /// Records the event about to be processed.
    pub fn observe(&mut self, e: &Event) {
        if let Some(m) = e.sent() {
            self.pool_view.insert(m.id, m.clone());
        }
        self.event_history.push(e.clone());
    }

    pub fn counters(&self) -> &BTreeMap<String, i64> {
        &self.counters
    }
}
