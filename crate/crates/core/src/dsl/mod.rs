//! Filters: guarded action lists that decide which messages are delivered.

mod action;
mod condition;
mod context;
mod parse;

use std::collections::BTreeSet;
use std::fmt;

pub use action::{deliver_message, drop_message, Action, ActionFailure, ActionFn};
pub use condition::{
    is_event_type, is_message_from, is_message_receive, is_message_send, is_message_to,
    is_message_type, CmpOp, Condition, Count, MessageSet, Predicate,
};
pub use context::MonitorContext;
pub use parse::{parse_filters, DslRegistry, ParseError};

use crate::model::{Event, Message};

/// `If(condition).Then(actions)`.
#[derive(Clone, Debug)]
pub struct Filter {
    pub condition: Condition,
    pub actions: Vec<Action>,
}

/// Starts a filter: `when(cond).then(vec![...])`.
pub fn when(condition: Condition) -> FilterBuilder {
    FilterBuilder { condition }
}

pub struct FilterBuilder {
    condition: Condition,
}

impl FilterBuilder {
    pub fn then(self, actions: Vec<Action>) -> Filter {
        Filter {
            condition: self.condition,
            actions,
        }
    }
}

impl fmt::Display for Filter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "if {} then ", self.condition)?;
        for (i, a) in self.actions.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{a}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FilterResult {
    /// Index of the filter whose condition held, if any.
    pub matched: Option<usize>,
    pub deliveries: Vec<Message>,
    /// Whether the current send's message must be withheld from the network.
    pub blocked: bool,
}

/// Runs the first filter whose condition holds on `e`.
///
/// With no match nothing is delivered and nothing is blocked. A matched send
/// is blocked unless one of the actions delivered that very message.
pub fn apply_filters(
    filters: &[Filter],
    e: &Event,
    ctx: &mut MonitorContext,
) -> Result<FilterResult, ActionFailure> {
    let Some((i, f)) = filters.iter().enumerate().find(|(_, f)| f.condition.eval(e, ctx)) else {
        return Ok(FilterResult {
            matched: None,
            deliveries: Vec::new(),
            blocked: false,
        });
    };
    let mut deliveries: Vec<Message> = Vec::new();
    let mut seen = BTreeSet::new();
    for a in &f.actions {
        for m in a.apply(e, ctx)? {
            if seen.insert(m.id) {
                deliveries.push(m);
            }
        }
    }
    let blocked = e.sent().is_some_and(|m| !seen.contains(&m.id));
    Ok(FilterResult {
        matched: Some(i),
        deliveries,
        blocked,
    })
}
