//! Filter distance: how many messages of a normal execution separate the
//! point where a filter intervenes from the point where the intervention is
//! undone.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::codec::MessageCodec;
use crate::dsl::{apply_filters, Action, Filter, MonitorContext};
use crate::model::{Event, EventKind};
use crate::trace::ExecutionTrace;

/// Number of round-shifted copies of the normal execution searched for a
/// release point.
pub const MAX_SHIFT: u64 = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "role", content = "set", rename_all = "snake_case")]
pub enum FilterRole {
    Capture(String),
    Release(String),
    Drop,
    Byzantine,
    Other,
}

pub fn classify(f: &Filter) -> FilterRole {
    if f.actions.iter().any(Action::is_byzantine) {
        return FilterRole::Byzantine;
    }
    if let Some(s) = f.actions.iter().find_map(|a| match a {
        Action::DeliverAllFromSet(s) => Some(s.clone()),
        _ => None,
    }) {
        return FilterRole::Release(s);
    }
    if let Some(s) = f.actions.iter().find_map(|a| match a {
        Action::StoreInSet(s) => Some(s.clone()),
        _ => None,
    }) {
        return FilterRole::Capture(s);
    }
    let drops = f.actions.iter().any(|a| matches!(a, Action::DropMessage));
    let delivers = f.actions.iter().any(|a| matches!(a, Action::DeliverMessage));
    if drops && !delivers {
        FilterRole::Drop
    } else {
        FilterRole::Other
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    Finite(u64),
    Infinite,
}

impl fmt::Display for Distance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Distance::Finite(d) => write!(f, "{d}"),
            Distance::Infinite => write!(f, "inf"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistanceRow {
    pub filter: usize,
    pub text: String,
    pub role: FilterRole,
    /// `None` when the filter never intervenes or its release is not found.
    pub distance: Option<Distance>,
}

/// Position (1-based, counted over sent messages) where each filter first
/// matches, walking `events` with the full filter list.
struct Walk {
    first_match: Vec<Option<u64>>,
    matches: Vec<Vec<u64>>,
}

fn walk(filters: &[Filter], streams: &[Vec<Event>]) -> Walk {
    let mut ctx = MonitorContext::new();
    let mut pos = 0u64;
    let mut first_match = vec![None; filters.len()];
    let mut matches = vec![Vec::new(); filters.len()];
    for stream in streams {
        for e in stream {
            if e.sent().is_some() {
                pos += 1;
            }
            ctx.observe(e);
            if let Ok(res) = apply_filters(filters, e, &mut ctx) {
                if let Some(i) = res.matched {
                    if e.sent().is_some() {
                        first_match[i].get_or_insert(pos);
                        matches[i].push(pos);
                    }
                }
            }
        }
    }
    Walk {
        first_match,
        matches,
    }
}

fn shifted(events: &[Event], codec: &dyn MessageCodec, k: u64) -> Vec<Event> {
    events
        .iter()
        .filter_map(|e| {
            let kind = match &e.kind {
                EventKind::Send { message } => EventKind::Send {
                    message: codec.shift_round(message, k)?,
                },
                EventKind::Receive { message } => EventKind::Receive {
                    message: codec.shift_round(message, k)?,
                },
                EventKind::Internal { .. } => return None,
            };
            Some(Event {
                replica: e.replica,
                seq: e.seq,
                kind,
            })
        })
        .collect()
}

/// Computes the distance of every filter of a test case against the events
/// of a fault-free execution.
///
/// A drop filter undoes nothing, so its distance runs to the end of the
/// normal execution. A capture filter is paired with the filter releasing
/// the same set; if the release does not match later in the normal
/// execution, round-shifted copies are appended until it does.
pub fn filter_distances(
    filters: &[Filter],
    normal: &ExecutionTrace,
    codec: &dyn MessageCodec,
) -> Vec<DistanceRow> {
    let base: Vec<Event> = normal.events().cloned().collect();
    let len = base.iter().filter(|e| e.sent().is_some()).count() as u64;
    let mut streams = vec![base.clone()];
    for k in 1..=MAX_SHIFT {
        streams.push(shifted(&base, codec, k));
    }
    let w = walk(filters, &streams);
    filters
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let role = classify(f);
            let distance = match &role {
                FilterRole::Byzantine => Some(Distance::Infinite),
                FilterRole::Drop => w.first_match[i]
                    .filter(|&c| c <= len)
                    .map(|c| Distance::Finite(len - c)),
                FilterRole::Capture(set) => w.first_match[i].filter(|&c| c <= len).and_then(|c| {
                    let release = filters
                        .iter()
                        .position(|g| classify(g) == FilterRole::Release(set.clone()))?;
                    let p = w.matches[release].iter().find(|&&p| p > c)?;
                    Some(Distance::Finite(p - c))
                }),
                FilterRole::Release(_) | FilterRole::Other => None,
            };
            DistanceRow {
                filter: i,
                text: f.to_string(),
                role,
                distance,
            }
        })
        .collect()
}
