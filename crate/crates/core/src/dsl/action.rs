use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::dsl::MonitorContext;
use crate::model::{Event, Message};

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("action `{action}` failed: {reason}")]
pub struct ActionFailure {
    pub action: String,
    pub reason: String,
}

pub type ActionFn =
    Arc<dyn Fn(&Event, &mut MonitorContext) -> Result<Vec<Message>, ActionFailure> + Send + Sync>;

/// An effect on the monitor context that returns messages to deliver.
#[derive(Clone)]
pub enum Action {
    DeliverMessage,
    DropMessage,
    CountIncr(String),
    StoreInSet(String),
    DeliverAllFromSet(String),
    /// User-defined action. `byzantine` marks actions that fabricate or
    /// alter messages rather than reorder them.
    Custom {
        name: String,
        byzantine: bool,
        run: ActionFn,
    },
}

impl Action {
    pub fn apply(&self, e: &Event, ctx: &mut MonitorContext) -> Result<Vec<Message>, ActionFailure> {
        match self {
            Action::DeliverMessage => Ok(e.sent().cloned().into_iter().collect()),
            Action::DropMessage => Ok(Vec::new()),
            Action::CountIncr(c) => {
                ctx.incr(c);
                Ok(Vec::new())
            }
            Action::StoreInSet(s) => {
                if let Some(m) = e.message() {
                    ctx.store(s, m.clone());
                }
                Ok(Vec::new())
            }
            Action::DeliverAllFromSet(s) => Ok(ctx.take_set(s)),
            Action::Custom { run, .. } => run(e, ctx),
        }
    }

    pub fn custom(
        name: impl Into<String>,
        run: impl Fn(&Event, &mut MonitorContext) -> Result<Vec<Message>, ActionFailure>
            + Send
            + Sync
            + 'static,
    ) -> Action {
        Action::Custom {
            name: name.into(),
            byzantine: false,
            run: Arc::new(run),
        }
    }

    pub fn byzantine(
        name: impl Into<String>,
        run: impl Fn(&Event, &mut MonitorContext) -> Result<Vec<Message>, ActionFailure>
            + Send
            + Sync
            + 'static,
    ) -> Action {
        Action::Custom {
            name: name.into(),
            byzantine: true,
            run: Arc::new(run),
        }
    }

    pub fn is_byzantine(&self) -> bool {
        matches!(self, Action::Custom { byzantine: true, .. })
    }
}

pub fn deliver_message() -> Action {
    Action::DeliverMessage
}

pub fn drop_message() -> Action {
    Action::DropMessage
}

impl fmt::Debug for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::DeliverMessage => write!(f, "deliver_message"),
            Action::DropMessage => write!(f, "drop_message"),
            Action::CountIncr(c) => write!(f, "count({c}).incr"),
            Action::StoreInSet(s) => write!(f, "message_set({s}).store"),
            Action::DeliverAllFromSet(s) => write!(f, "message_set({s}).deliver_all"),
            Action::Custom { name, .. } => write!(f, "{name}"),
        }
    }
}
