//! Monitors that reproduce a recorded history, and a randomized check that
//! the product with such a monitor only generates prefixes of it.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use fixedbitset::FixedBitSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::history::History;
use crate::model::{Automaton, Configuration, Event, EventKind, Message, MessageId, Move, ReplicaId};
use crate::trace::TIMEOUT_MARK;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ReplayError {
    #[error("the history is not complete")]
    IncompleteHistory,
}

/// How the monitor decides when a received message may be released.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "gate", content = "message", rename_all = "snake_case")]
pub enum Gate {
    /// Release `m` once every event before its receive has been observed.
    CausalPast,
    /// Release every received message as soon as it is available.
    Disabled,
    /// Like `CausalPast`, except the given message is released ungated.
    SkipFor(MessageId),
}

/// Monitor state `(pool, E)` for a fixed history.
#[derive(Clone, Debug)]
pub struct ReplayMonitor<'h> {
    h: &'h History,
    gate: Gate,
    /// Messages received in the history, with their receive-side past.
    received: BTreeMap<MessageId, (Message, FixedBitSet)>,
    adversarial: BTreeSet<MessageId>,
    pool: BTreeMap<MessageId, Message>,
    seen: FixedBitSet,
    foreign: Vec<Event>,
    released: BTreeSet<MessageId>,
}

/// What the monitor does with one event.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MonitorOutput {
    pub deliver: Vec<Message>,
    /// Every sent message is withheld from the network.
    pub block: bool,
}

/// Builds the replay monitor for a complete history.
pub fn synthesize(h: &History) -> Result<ReplayMonitor<'_>, ReplayError> {
    if !h.is_complete() {
        return Err(ReplayError::IncompleteHistory);
    }
    Ok(ReplayMonitor::new(h))
}

impl<'h> ReplayMonitor<'h> {
    fn new(h: &'h History) -> Self {
        let received = h
            .delivered_messages()
            .into_iter()
            .map(|(id, m)| {
                let past = h
                    .causal_past_of_receive(id)
                    .expect("delivered messages have a receive")
                    .clone();
                (id, (m, past))
            })
            .collect();
        ReplayMonitor {
            h,
            gate: Gate::CausalPast,
            received,
            adversarial: h.adversarial_messages(),
            pool: BTreeMap::new(),
            seen: FixedBitSet::with_capacity(h.len()),
            foreign: Vec::new(),
            released: BTreeSet::new(),
        }
    }

    pub fn with_gate(mut self, gate: Gate) -> Self {
        self.gate = gate;
        self
    }

    pub fn released(&self) -> &BTreeSet<MessageId> {
        &self.released
    }

    /// Events observed that do not belong to the history.
    pub fn foreign(&self) -> &[Event] {
        &self.foreign
    }

    fn gate_open(&self, id: MessageId, past: &FixedBitSet) -> bool {
        match self.gate {
            Gate::Disabled => true,
            Gate::SkipFor(m) if m == id => true,
            _ => past.is_subset(&self.seen),
        }
    }

    pub fn step(&mut self, e: &Event) -> MonitorOutput {
        match self.h.index_of(&e.key()) {
            Some(i) => self.seen.insert(i),
            None => self.foreign.push(e.clone()),
        }
        if let Some(m) = e.sent() {
            if !self.released.contains(&m.id) {
                self.pool.insert(m.id, m.clone());
            }
        }
        let mut deliver = Vec::new();
        let candidates: Vec<MessageId> = self
            .pool
            .keys()
            .chain(self.adversarial.iter())
            .filter(|id| !self.released.contains(id))
            .copied()
            .collect();
        for id in candidates {
            let Some((hm, past)) = self.received.get(&id) else {
                continue;
            };
            if !self.gate_open(id, past) {
                continue;
            }
            let m = self.pool.remove(&id).unwrap_or_else(|| hm.clone());
            self.released.insert(id);
            deliver.push(m);
        }
        MonitorOutput {
            deliver,
            block: e.sent().is_some(),
        }
    }
}

/// Picks the replica-sent message whose receive has the largest causal
/// past, the natural candidate for an ungated release.
pub fn mutation_target(h: &History) -> Option<MessageId> {
    h.delivered_messages()
        .keys()
        .filter(|id| h.send_of(**id).is_some())
        .max_by_key(|id| {
            h.causal_past_of_receive(**id)
                .map(|p| p.count_ones(..))
                .unwrap_or(0)
        })
        .copied()
}

#[derive(Clone, Debug, Serialize)]
pub struct Counterexample {
    pub trial: usize,
    pub step: usize,
    pub reason: String,
    pub produced: Vec<Event>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ReplayReport {
    pub trials: usize,
    pub prefix_trials: usize,
    /// Trials that reproduced every event of the history.
    pub full_trials: usize,
    /// No trial was run, so the check holds vacuously.
    pub vacuous: bool,
    pub counterexample: Option<Counterexample>,
}

impl ReplayReport {
    pub fn holds(&self) -> bool {
        self.prefix_trials == self.trials
    }

    pub fn summary(&self) -> String {
        format!(
            "{}/{} prefix ({} reproduced the whole history){}",
            self.prefix_trials,
            self.trials,
            self.full_trials,
            if self.vacuous { " [vacuous]" } else { "" }
        )
    }
}

enum ProductMove {
    Protocol(Move),
    Monitor,
}

/// Runs `trials` random executions of protocol x replay monitor x blocking
/// network and checks after every step that the produced events are
/// downward closed in `h`, and at the end that they form a prefix of `h`.
///
/// Timer expiries are treated as environment inputs: a replica's timer may
/// fire only when its next event in `h` is that expiry.
pub fn check_replay<A: Automaton>(
    automaton: &A,
    h: &History,
    trials: usize,
    seed: u64,
    gate: Gate,
) -> Result<ReplayReport, ReplayError> {
    synthesize(h)?;
    let by_seq: HashMap<(ReplicaId, u64), usize> = h
        .events()
        .iter()
        .enumerate()
        .map(|(i, e)| ((e.replica, e.seq), i))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = ReplayReport {
        trials,
        prefix_trials: 0,
        full_trials: 0,
        vacuous: trials == 0,
        counterexample: None,
    };
    let max_steps = 4 * h.len() + 64;
    for trial in 0..trials {
        let mut config = Configuration::new(automaton.clone());
        let mut mon = synthesize(h)?.with_gate(gate);
        let mut produced: Vec<Event> = Vec::new();
        let mut produced_set = FixedBitSet::with_capacity(h.len());
        let mut failure: Option<(usize, String)> = None;
        for step in 0..max_steps {
            let mut moves: Vec<ProductMove> = Vec::new();
            for mv in config.enabled_moves() {
                match mv {
                    Move::Internal { .. } | Move::Receive { .. } => moves.push(ProductMove::Protocol(mv)),
                    // Every sent message is blocked by the monitor.
                    Move::Network { .. } => {}
                    Move::Timeout { replica } => {
                        let next = config.replicas().next_seq(replica);
                        let expected = by_seq.get(&(replica, next)).is_some_and(|&i| {
                            matches!(&h.events()[i].kind, EventKind::Internal { internal } if internal.param(TIMEOUT_MARK).is_some())
                        });
                        if expected {
                            moves.push(ProductMove::Protocol(mv));
                        }
                    }
                }
            }
            if !config.event_log.is_empty() {
                moves.push(ProductMove::Monitor);
            }
            if moves.is_empty() {
                break;
            }
            match &moves[rng.random_range(0..moves.len())] {
                ProductMove::Protocol(mv) => {
                    let e = match config.apply(*mv) {
                        Ok(s) => s.event.expect("protocol moves produce events"),
                        Err(err) => {
                            failure = Some((step, err.to_string()));
                            break;
                        }
                    };
                    match h.index_of(&e.key()) {
                        None => {
                            failure = Some((step, format!("event {e} is not in the history")));
                            produced.push(e);
                            break;
                        }
                        Some(i) => {
                            if !h.past(i).is_subset(&produced_set) {
                                failure = Some((step, format!("event {e} occurred before part of its past")));
                                produced.push(e);
                                break;
                            }
                            produced_set.insert(i);
                            produced.push(e);
                        }
                    }
                }
                ProductMove::Monitor => {
                    let e = config.event_log.pop_front().expect("queue is non-empty");
                    let out = mon.step(&e);
                    for m in out.deliver {
                        if let Err(err) = config.monitor_deliver(m) {
                            failure = Some((step, err.to_string()));
                            break;
                        }
                    }
                    if failure.is_some() {
                        break;
                    }
                }
            }
        }
        if failure.is_none() {
            let delivered = h.delivered_messages();
            if let Some(bad) = mon.released().iter().find(|id| !delivered.contains_key(id)) {
                failure = Some((max_steps, format!("released {bad}, which the history never receives")));
            }
        }
        if failure.is_none() {
            match History::from_events(produced.clone()) {
                Ok(p) if p.is_prefix_of(h) => {}
                Ok(_) => failure = Some((max_steps, "produced events are not a prefix".into())),
                Err(err) => failure = Some((max_steps, err.to_string())),
            }
        }
        match failure {
            None => {
                report.prefix_trials += 1;
                if produced.len() == h.len() {
                    report.full_trials += 1;
                }
            }
            Some((step, reason)) => {
                if report.counterexample.is_none() {
                    report.counterexample = Some(Counterexample {
                        trial,
                        step,
                        reason,
                        produced,
                    });
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::history::history_of;
    use crate::model::run_synchronous;
    use crate::model::tests::PingPong;

    #[test]
    fn incomplete_history_is_rejected() {
        let t = run_synchronous(PingPong { n: 3, k: 2 }, 6);
        let h = history_of(&t).unwrap();
        assert_eq!(synthesize(&h).unwrap_err(), ReplayError::IncompleteHistory);
    }

    #[test]
    fn replay_of_ping_pong_stays_within_history() {
        let t = run_synchronous(PingPong { n: 3, k: 2 }, 1000);
        let h = history_of(&t).unwrap();
        let r = check_replay(&PingPong { n: 3, k: 2 }, &h, 30, 5, Gate::CausalPast).unwrap();
        assert!(r.holds(), "{:?}", r.counterexample);
        assert!(r.full_trials > 0);
    }

    #[test]
    fn ungated_replay_breaks_the_prefix_property() {
        let t = run_synchronous(PingPong { n: 3, k: 2 }, 1000);
        let h = history_of(&t).unwrap();
        let r = check_replay(&PingPong { n: 3, k: 2 }, &h, 30, 5, Gate::Disabled).unwrap();
        assert!(!r.holds());
        assert!(r.counterexample.is_some());
    }

    #[test]
    fn zero_trials_is_vacuous() {
        let t = run_synchronous(PingPong { n: 2, k: 1 }, 1000);
        let h = history_of(&t).unwrap();
        let r = check_replay(&PingPong { n: 2, k: 1 }, &h, 0, 0, Gate::CausalPast).unwrap();
        assert!(r.vacuous && r.holds());
    }

    #[test]
    fn monitor_blocks_sends_and_releases_in_causal_order() {
        let t = run_synchronous(PingPong { n: 2, k: 2 }, 1000);
        let h = history_of(&t).unwrap();
        let mut mon = synthesize(&h).unwrap();
        let evs: Vec<Event> = h.events().to_vec();
        let first_send = evs.iter().find(|e| e.sent().is_some()).unwrap();
        let out = mon.step(first_send);
        assert!(out.block);
        assert_eq!(out.deliver.len(), 1);
        assert_eq!(out.deliver[0].id, first_send.sent().unwrap().id);
    }
}
