use std::collections::{BTreeSet, HashMap};

use thiserror::Error;

use crate::model::{EventKey, MessageId};
use crate::trace::{ExecutionTrace, Rule};

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum AuditError {
    #[error("step {step}: blocked message {message} moved by the network")]
    BlockedDelivered { step: usize, message: MessageId },
    #[error("step {step}: message {message} received without being placed in an inbox")]
    ReceiveWithoutDelivery { step: usize, message: MessageId },
    #[error("step {step}: message {message} placed in an inbox twice")]
    DuplicateDelivery { step: usize, message: MessageId },
    #[error("event {0:?} was not consumed by the monitor exactly once")]
    EventNotConserved(EventKey),
    #[error("step {step}: monitor consumed {event:?} before it happened")]
    ConsumedEarly { step: usize, event: EventKey },
}

/// Checks a product trace: blocked messages never move through the network,
/// every received message was placed in an inbox beforehand, and every
/// protocol event is consumed by the monitor exactly once, after it occurs.
pub fn audit(trace: &ExecutionTrace) -> Result<(), AuditError> {
    let mut blocked: BTreeSet<MessageId> = BTreeSet::new();
    let mut emitted: BTreeSet<MessageId> = BTreeSet::new();
    let mut produced: HashMap<EventKey, usize> = HashMap::new();
    let mut consumed: HashMap<EventKey, usize> = HashMap::new();
    for s in &trace.steps {
        match s.rule {
            Rule::Internal | Rule::Send | Rule::Receive => {
                let e = s.event.as_ref().expect("protocol steps carry their event");
                if let Some(m) = e.received() {
                    if !emitted.contains(&m.id) {
                        return Err(AuditError::ReceiveWithoutDelivery {
                            step: s.index,
                            message: m.id,
                        });
                    }
                }
                *produced.entry(e.key()).or_default() += 1;
            }
            Rule::Monitor => {
                let e = s.event.as_ref().expect("monitor steps carry their event");
                if !produced.contains_key(&e.key()) {
                    return Err(AuditError::ConsumedEarly {
                        step: s.index,
                        event: e.key(),
                    });
                }
                *consumed.entry(e.key()).or_default() += 1;
                for m in &s.messages {
                    blocked.remove(&m.id);
                    if !emitted.insert(m.id) {
                        return Err(AuditError::DuplicateDelivery {
                            step: s.index,
                            message: m.id,
                        });
                    }
                }
                if let Some(b) = s.blocked {
                    blocked.insert(b);
                }
            }
            Rule::Network | Rule::NetworkNb => {
                for m in &s.messages {
                    if blocked.contains(&m.id) {
                        return Err(AuditError::BlockedDelivered {
                            step: s.index,
                            message: m.id,
                        });
                    }
                    if !emitted.insert(m.id) {
                        return Err(AuditError::DuplicateDelivery {
                            step: s.index,
                            message: m.id,
                        });
                    }
                }
            }
            Rule::Adversary => {}
        }
    }
    for (k, &n) in &produced {
        if n != 1 || consumed.get(k) != Some(&1) {
            // A run cut short by its budget may leave events unconsumed.
            if trace.complete || consumed.contains_key(k) {
                return Err(AuditError::EventNotConserved(*k));
            }
        }
    }
    Ok(())
}
