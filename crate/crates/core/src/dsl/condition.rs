use std::fmt;
use std::sync::Arc;

use crate::dsl::MonitorContext;
use crate::model::{Event, ReplicaId};

pub type Predicate = Arc<dyn Fn(&Event, &MonitorContext) -> bool + Send + Sync>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CmpOp {
    Lt,
    Gt,
    Leq,
    Geq,
}

impl CmpOp {
    fn apply(&self, a: i64, b: i64) -> bool {
        match self {
            CmpOp::Lt => a < b,
            CmpOp::Gt => a > b,
            CmpOp::Leq => a <= b,
            CmpOp::Geq => a >= b,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            CmpOp::Lt => "lt",
            CmpOp::Gt => "gt",
            CmpOp::Leq => "leq",
            CmpOp::Geq => "gte",
        }
    }
}

/// A pure predicate over the current event and the monitor context.
#[derive(Clone)]
pub enum Condition {
    /// `send`, `receive`, `internal`, or the label of an internal event.
    IsEventType(String),
    IsMessageType(String),
    IsMessageSend,
    IsMessageReceive,
    IsMessageFrom(ReplicaId),
    IsMessageTo(ReplicaId),
    Count { counter: String, op: CmpOp, value: i64 },
    SetContains(String),
    And(Box<Condition>, Box<Condition>),
    Or(Box<Condition>, Box<Condition>),
    Not(Box<Condition>),
    Custom { name: String, pred: Predicate },
}

impl Condition {
    pub fn eval(&self, e: &Event, ctx: &MonitorContext) -> bool {
        match self {
            Condition::IsEventType(t) => {
                e.etype().name() == t || e.internal().is_some_and(|i| i.label == *t)
            }
            Condition::IsMessageType(t) => e.message().is_some_and(|m| m.mtype == *t),
            Condition::IsMessageSend => e.sent().is_some(),
            Condition::IsMessageReceive => e.received().is_some(),
            Condition::IsMessageFrom(r) => e.message().is_some_and(|m| m.from == *r),
            Condition::IsMessageTo(r) => e.message().is_some_and(|m| m.to == *r),
            Condition::Count { counter, op, value } => op.apply(ctx.counter(counter), *value),
            Condition::SetContains(s) => e.message().is_some_and(|m| ctx.set_contains(s, m.id)),
            Condition::And(a, b) => a.eval(e, ctx) && b.eval(e, ctx),
            Condition::Or(a, b) => a.eval(e, ctx) || b.eval(e, ctx),
            Condition::Not(a) => !a.eval(e, ctx),
            Condition::Custom { pred, .. } => pred(e, ctx),
        }
    }

    pub fn and(self, other: Condition) -> Condition {
        Condition::And(Box::new(self), Box::new(other))
    }

    pub fn or(self, other: Condition) -> Condition {
        Condition::Or(Box::new(self), Box::new(other))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn not(self) -> Condition {
        Condition::Not(Box::new(self))
    }

    pub fn custom(
        name: impl Into<String>,
        pred: impl Fn(&Event, &MonitorContext) -> bool + Send + Sync + 'static,
    ) -> Condition {
        Condition::Custom {
            name: name.into(),
            pred: Arc::new(pred),
        }
    }

    /// Matches every event.
    pub fn always() -> Condition {
        Condition::custom("always", |_, _| true)
    }

    /// Message types referenced positively by this condition.
    pub fn message_types(&self) -> Vec<String> {
        match self {
            Condition::IsMessageType(t) => vec![t.clone()],
            Condition::And(a, b) | Condition::Or(a, b) => {
                let mut v = a.message_types();
                v.extend(b.message_types());
                v
            }
            _ => Vec::new(),
        }
    }
}

impl fmt::Debug for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Condition::IsEventType(t) => write!(f, "is_event_type({t})"),
            Condition::IsMessageType(t) => write!(f, "is_message_type({t})"),
            Condition::IsMessageSend => write!(f, "is_message_send"),
            Condition::IsMessageReceive => write!(f, "is_message_receive"),
            Condition::IsMessageFrom(r) => write!(f, "is_message_from({r})"),
            Condition::IsMessageTo(r) => write!(f, "is_message_to({r})"),
            Condition::Count { counter, op, value } => {
                write!(f, "count({counter}).{}({value})", op.name())
            }
            Condition::SetContains(s) => write!(f, "message_set({s}).contains"),
            Condition::And(a, b) => write!(f, "and({a}, {b})"),
            Condition::Or(a, b) => write!(f, "or({a}, {b})"),
            Condition::Not(a) => write!(f, "not({a})"),
            Condition::Custom { name, .. } => write!(f, "{name}"),
        }
    }
}

pub fn is_event_type(t: impl Into<String>) -> Condition {
    Condition::IsEventType(t.into())
}

pub fn is_message_type(t: impl Into<String>) -> Condition {
    Condition::IsMessageType(t.into())
}

pub fn is_message_send() -> Condition {
    Condition::IsMessageSend
}

pub fn is_message_receive() -> Condition {
    Condition::IsMessageReceive
}

pub fn is_message_from(r: ReplicaId) -> Condition {
    Condition::IsMessageFrom(r)
}

pub fn is_message_to(r: ReplicaId) -> Condition {
    Condition::IsMessageTo(r)
}

/// Named integer counter, defaulting to 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Count(pub String);

impl Count {
    pub fn new(name: impl Into<String>) -> Self {
        Count(name.into())
    }

    fn cmp(&self, op: CmpOp, value: i64) -> Condition {
        Condition::Count {
            counter: self.0.clone(),
            op,
            value,
        }
    }

    pub fn lt(&self, v: i64) -> Condition {
        self.cmp(CmpOp::Lt, v)
    }

    pub fn gt(&self, v: i64) -> Condition {
        self.cmp(CmpOp::Gt, v)
    }

    pub fn leq(&self, v: i64) -> Condition {
        self.cmp(CmpOp::Leq, v)
    }

    pub fn gte(&self, v: i64) -> Condition {
        self.cmp(CmpOp::Geq, v)
    }

    pub fn incr(&self) -> crate::dsl::Action {
        crate::dsl::Action::CountIncr(self.0.clone())
    }
}

/// Named message set, defaulting to empty.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MessageSet(pub String);

impl MessageSet {
    pub fn new(name: impl Into<String>) -> Self {
        MessageSet(name.into())
    }

    pub fn contains(&self) -> Condition {
        Condition::SetContains(self.0.clone())
    }

    pub fn store(&self) -> crate::dsl::Action {
        crate::dsl::Action::StoreInSet(self.0.clone())
    }

    pub fn deliver_all(&self) -> crate::dsl::Action {
        crate::dsl::Action::DeliverAllFromSet(self.0.clone())
    }
}
