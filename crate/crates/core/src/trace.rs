//! Execution traces and their JSON-lines form.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Event, Message, MessageId, Move, ReplicaId};

pub const TRACE_FORMAT: &str = "nettest-trace/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    Internal,
    Send,
    Network,
    Receive,
    Adversary,
    Monitor,
    NetworkNb,
}

impl Rule {
    /// Rules whose step contributes a protocol event to the history.
    pub fn is_protocol_event(&self) -> bool {
        matches!(self, Rule::Internal | Rule::Send | Rule::Receive)
    }
}

/// One labelled transition.
///
/// Protocol steps carry the event they produced. Network steps carry the
/// moved message. Monitor steps carry the consumed event, the delivered
/// messages and, for sends, whether the message was blocked. Adversary steps
/// carry the injected messages.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceStep {
    pub index: usize,
    pub rule: Rule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replica: Option<ReplicaId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event: Option<Event>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub messages: Vec<Message>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blocked: Option<MessageId>,
}

impl TraceStep {
    pub fn event(rule: Rule, e: Event) -> Self {
        TraceStep {
            index: 0,
            rule,
            replica: Some(e.replica),
            event: Some(e),
            messages: Vec::new(),
            blocked: None,
        }
    }

    pub fn network(rule: Rule, m: Message) -> Self {
        TraceStep {
            index: 0,
            rule,
            replica: Some(m.to),
            event: None,
            messages: vec![m],
            blocked: None,
        }
    }

    pub fn monitor(e: Event, delivered: Vec<Message>, blocked: Option<MessageId>) -> Self {
        TraceStep {
            index: 0,
            rule: Rule::Monitor,
            replica: Some(e.replica),
            event: Some(e),
            messages: delivered,
            blocked,
        }
    }

    pub fn adversary(injected: Vec<Message>) -> Self {
        TraceStep {
            index: 0,
            rule: Rule::Adversary,
            replica: None,
            event: None,
            messages: injected,
            blocked: None,
        }
    }

    /// The protocol-system move this step corresponds to, if any.
    pub fn as_move(&self) -> Option<Move> {
        match self.rule {
            Rule::Internal => {
                let e = self.event.as_ref()?;
                let is_timeout = e
                    .internal()
                    .is_some_and(|i| i.param(TIMEOUT_MARK).is_some());
                Some(if is_timeout {
                    Move::Timeout { replica: e.replica }
                } else {
                    Move::Internal { replica: e.replica }
                })
            }
            Rule::Send => Some(Move::Internal {
                replica: self.event.as_ref()?.replica,
            }),
            Rule::Receive => Some(Move::Receive {
                replica: self.event.as_ref()?.replica,
            }),
            Rule::Network | Rule::NetworkNb => Some(Move::Network {
                message: self.messages.first()?.id,
            }),
            Rule::Adversary | Rule::Monitor => None,
        }
    }
}

/// Parameter carried by internal events produced by a timer expiry.
pub const TIMEOUT_MARK: &str = "timer";

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionTrace {
    pub replicas: usize,
    pub steps: Vec<TraceStep>,
    pub complete: bool,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        source: serde_json::Error,
    },
    #[error("missing or unsupported trace header")]
    BadHeader,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    replicas: usize,
    complete: bool,
}

impl ExecutionTrace {
    pub fn new(replicas: usize) -> Self {
        ExecutionTrace {
            replicas,
            steps: Vec::new(),
            complete: false,
        }
    }

    pub fn push(&mut self, mut step: TraceStep) {
        step.index = self.steps.len();
        self.steps.push(step);
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Protocol events in the order they were produced.
    pub fn events(&self) -> impl Iterator<Item = &Event> {
        self.steps
            .iter()
            .filter(|s| s.rule.is_protocol_event())
            .filter_map(|s| s.event.as_ref())
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), TraceError> {
        let header = Header {
            format: TRACE_FORMAT.to_string(),
            replicas: self.replicas,
            complete: self.complete,
        };
        let to_io = |e: serde_json::Error| TraceError::Io(e.into());
        writeln!(w, "{}", serde_json::to_string(&header).map_err(to_io)?)?;
        for s in &self.steps {
            writeln!(w, "{}", serde_json::to_string(s).map_err(to_io)?)?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, TraceError> {
        let mut lines = r.lines().enumerate().filter(|(_, l)| {
            l.as_ref().map(|s| !s.trim().is_empty()).unwrap_or(true)
        });
        let (_, first) = lines.next().ok_or(TraceError::BadHeader)?;
        let header: Header =
            serde_json::from_str(&first?).map_err(|_| TraceError::BadHeader)?;
        if header.format != TRACE_FORMAT {
            return Err(TraceError::BadHeader);
        }
        let mut trace = ExecutionTrace::new(header.replicas);
        trace.complete = header.complete;
        for (i, line) in lines {
            let step: TraceStep = serde_json::from_str(&line?)
                .map_err(|source| TraceError::Json { line: i + 1, source })?;
            trace.steps.push(step);
        }
        Ok(trace)
    }

    pub fn from_jsonl(s: &str) -> Result<Self, TraceError> {
        Self::read_jsonl(s.as_bytes())
    }
}
