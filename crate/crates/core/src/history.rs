//! Histories: events of an execution ordered by happens-before.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use fixedbitset::FixedBitSet;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Event, EventKey, Message, MessageId, ReplicaId};
use crate::trace::ExecutionTrace;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum HistoryError {
    #[error("malformed trace: {0}")]
    MalformedTrace(String),
    #[error("message {0} was not received in this history")]
    NotDelivered(MessageId),
}

/// A finite set of events with its strict happens-before order.
///
/// `past[i]` holds the indices of all events strictly before event `i`.
#[derive(Clone, Debug)]
pub struct History {
    events: Vec<Event>,
    index: HashMap<EventKey, usize>,
    past: Vec<FixedBitSet>,
    sends: HashMap<MessageId, usize>,
    receives: HashMap<MessageId, usize>,
    complete: bool,
}

impl History {
    /// Builds the history of an arbitrary event set.
    ///
    /// Program order comes from per-replica sequence numbers and each receive
    /// is ordered after the send of the same message when both are present.
    pub fn from_events(events: impl IntoIterator<Item = Event>) -> Result<Self, HistoryError> {
        let events: Vec<Event> = events.into_iter().collect();
        let n = events.len();
        let mut index = HashMap::with_capacity(n);
        let mut sends = HashMap::new();
        let mut receives = HashMap::new();
        for (i, e) in events.iter().enumerate() {
            if index.insert(e.key(), i).is_some() {
                return Err(HistoryError::MalformedTrace(format!("duplicate event {e}")));
            }
            if let Some(m) = e.sent() {
                if sends.insert(m.id, i).is_some() {
                    return Err(HistoryError::MalformedTrace(format!("message {} sent twice", m.id)));
                }
            }
            if let Some(m) = e.received() {
                if receives.insert(m.id, i).is_some() {
                    return Err(HistoryError::MalformedTrace(format!(
                        "message {} received twice",
                        m.id
                    )));
                }
            }
        }

        // Immediate predecessors.
        let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut by_replica: BTreeMap<ReplicaId, Vec<usize>> = BTreeMap::new();
        for (i, e) in events.iter().enumerate() {
            by_replica.entry(e.replica).or_default().push(i);
        }
        for idx in by_replica.values_mut() {
            idx.sort_by_key(|&i| events[i].seq);
            for w in idx.windows(2) {
                preds[w[1]].push(w[0]);
            }
        }
        for (id, &r) in &receives {
            if let Some(&s) = sends.get(id) {
                preds[r].push(s);
            }
        }

        // Kahn's algorithm gives a topological order; a leftover means a cycle.
        let mut indegree: Vec<usize> = preds.iter().map(Vec::len).collect();
        let mut succs: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, ps) in preds.iter().enumerate() {
            for &p in ps {
                succs[p].push(i);
            }
        }
        let mut ready: Vec<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = ready.pop() {
            order.push(i);
            for &s in &succs[i] {
                indegree[s] -= 1;
                if indegree[s] == 0 {
                    ready.push(s);
                }
            }
        }
        if order.len() != n {
            return Err(HistoryError::MalformedTrace(
                "causality cycle between sends and receives".into(),
            ));
        }

        let mut past = vec![FixedBitSet::with_capacity(n); n];
        for &i in &order {
            let mut acc = FixedBitSet::with_capacity(n);
            for &p in &preds[i] {
                acc.insert(p);
                acc.union_with(&past[p]);
            }
            past[i] = acc;
        }

        Ok(History {
            events,
            index,
            past,
            sends,
            receives,
            complete: false,
        })
    }

    pub fn with_complete(mut self, complete: bool) -> Self {
        self.complete = complete;
        self
    }

    pub fn is_complete(&self) -> bool {
        self.complete
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn index_of(&self, key: &EventKey) -> Option<usize> {
        self.index.get(key).copied()
    }

    pub fn contains(&self, key: &EventKey) -> bool {
        self.index.contains_key(key)
    }

    /// Events strictly before event `i`.
    pub fn past(&self, i: usize) -> &FixedBitSet {
        &self.past[i]
    }

    /// `a < b` by index.
    pub fn precedes(&self, a: usize, b: usize) -> bool {
        self.past[b].contains(a)
    }

    pub fn happens_before(&self, a: &EventKey, b: &EventKey) -> bool {
        match (self.index_of(a), self.index_of(b)) {
            (Some(a), Some(b)) => self.precedes(a, b),
            _ => false,
        }
    }

    pub fn send_of(&self, id: MessageId) -> Option<usize> {
        self.sends.get(&id).copied()
    }

    pub fn receive_of(&self, id: MessageId) -> Option<usize> {
        self.receives.get(&id).copied()
    }

    /// Messages received in this history, with their contents.
    pub fn delivered_messages(&self) -> BTreeMap<MessageId, Message> {
        self.receives
            .values()
            .filter_map(|&i| self.events[i].received())
            .map(|m| (m.id, m.clone()))
            .collect()
    }

    /// Events strictly before the receive of `id`.
    pub fn causal_past_of_receive(&self, id: MessageId) -> Result<&FixedBitSet, HistoryError> {
        self.receive_of(id)
            .map(|i| &self.past[i])
            .ok_or(HistoryError::NotDelivered(id))
    }

    /// Messages received but never sent by a replica in this history.
    pub fn adversarial_messages(&self) -> BTreeSet<MessageId> {
        self.receives
            .keys()
            .filter(|id| !self.sends.contains_key(id))
            .copied()
            .collect()
    }

    /// Prefix relation: every event of `self` is in `other`, everything
    /// before such an event in `other` is also in `self` and before it there,
    /// and the two orders agree on `self`'s events.
    pub fn is_prefix_of(&self, other: &History) -> bool {
        let mut to_other = Vec::with_capacity(self.len());
        for e in &self.events {
            match other.index.get(&e.key()) {
                Some(&j) => to_other.push(j),
                None => return false,
            }
        }
        let mut from_other: Vec<Option<usize>> = vec![None; other.len()];
        for (i, &j) in to_other.iter().enumerate() {
            from_other[j] = Some(i);
        }
        for (i, &j) in to_other.iter().enumerate() {
            for k in other.past[j].ones() {
                match from_other[k] {
                    Some(k1) if self.past[i].contains(k1) => {}
                    _ => return false,
                }
            }
            for k1 in self.past[i].ones() {
                if !other.past[j].contains(to_other[k1]) {
                    return false;
                }
            }
        }
        true
    }

    /// Sub-history induced by the events selected by `keep`.
    pub fn restrict(&self, keep: impl Fn(usize, &Event) -> bool) -> History {
        let events: Vec<Event> = self
            .events
            .iter()
            .enumerate()
            .filter(|(i, e)| keep(*i, e))
            .map(|(_, e)| e.clone())
            .collect();
        History::from_events(events).expect("a subset of a history is a history")
    }

    /// Immediate happens-before edges: program-order successors and
    /// send-to-receive pairs.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut edges = Vec::new();
        let mut by_replica: BTreeMap<ReplicaId, Vec<usize>> = BTreeMap::new();
        for (i, e) in self.events.iter().enumerate() {
            by_replica.entry(e.replica).or_default().push(i);
        }
        for idx in by_replica.values_mut() {
            idx.sort_by_key(|&i| self.events[i].seq);
            for w in idx.windows(2) {
                edges.push((w[0], w[1]));
            }
        }
        for (id, &r) in &self.receives {
            if let Some(&s) = self.sends.get(id) {
                edges.push((s, r));
            }
        }
        edges.sort();
        edges
    }

    pub fn export(&self) -> HistoryExport {
        HistoryExport {
            complete: self.complete,
            events: self.events.clone(),
            edges: self.edges(),
        }
    }

    /// Graphviz rendering of the immediate edges.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph history {\n");
        for (i, e) in self.events.iter().enumerate() {
            let _ = writeln!(out, "  e{i} [label=\"{}\"];", e.to_string().replace('"', "'"));
        }
        for (a, b) in self.edges() {
            let _ = writeln!(out, "  e{a} -> e{b};");
        }
        out.push_str("}\n");
        out
    }
}

/// Serializable form of a history with its immediate edges.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryExport {
    pub complete: bool,
    pub events: Vec<Event>,
    pub edges: Vec<(usize, usize)>,
}

/// History induced by the protocol steps of a trace.
///
/// Fails if a non-fictitious message is received without a matching send.
pub fn history_of(trace: &ExecutionTrace) -> Result<History, HistoryError> {
    let events: Vec<Event> = trace.events().cloned().collect();
    let sent: BTreeSet<MessageId> = events.iter().filter_map(|e| e.sent()).map(|m| m.id).collect();
    for e in &events {
        if let Some(m) = e.received() {
            if !m.fictitious && !sent.contains(&m.id) {
                return Err(HistoryError::MalformedTrace(format!(
                    "message {} received without a send",
                    m.id
                )));
            }
        }
    }
    Ok(History::from_events(events)?.with_complete(trace.complete))
}
