//! JSON bodies exchanged between the API server, the dispatcher and stub
//! replicas.

use std::collections::BTreeMap;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use nettest_core::{Event, EventKind, InternalEvent, Message, MessageId, ReplicaId};
use serde::{Deserialize, Serialize};

use crate::RpcError;

/// A message on the wire. `data` is the payload in standard base64.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireMessage {
    pub id: String,
    pub from: usize,
    pub to: usize,
    #[serde(rename = "type")]
    pub mtype: String,
    pub data: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fictitious: bool,
}

impl From<&Message> for WireMessage {
    fn from(m: &Message) -> Self {
        WireMessage {
            id: m.id.to_string(),
            from: m.from.0,
            to: m.to.0,
            mtype: m.mtype.clone(),
            data: STANDARD.encode(&m.payload),
            fictitious: m.fictitious,
        }
    }
}

impl TryFrom<&WireMessage> for Message {
    type Error = RpcError;

    fn try_from(w: &WireMessage) -> Result<Self, RpcError> {
        Ok(Message {
            id: w
                .id
                .parse::<MessageId>()
                .map_err(|e| RpcError::Malformed(format!("message id `{}`: {e}", w.id)))?,
            from: ReplicaId(w.from),
            to: ReplicaId(w.to),
            mtype: w.mtype.clone(),
            payload: STANDARD
                .decode(&w.data)
                .map_err(|e| RpcError::Malformed(format!("message data: {e}")))?,
            fictitious: w.fictitious,
        })
    }
}

/// Parameter holding the label of an internal event.
pub const LABEL_PARAM: &str = "@label";
/// Parameter holding the message id of a send or receive event.
pub const MESSAGE_PARAM: &str = "@message";

/// An event on the wire. `type` is `send`, `receive` or `internal`; the
/// message id and internal label travel in reserved `@` parameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireEvent {
    pub replica: usize,
    pub seq: u64,
    #[serde(rename = "type")]
    pub etype: String,
    #[serde(default)]
    pub params: BTreeMap<String, String>,
}

impl From<&Event> for WireEvent {
    fn from(e: &Event) -> Self {
        let (etype, params) = match &e.kind {
            EventKind::Send { message } => ("send", BTreeMap::from([(MESSAGE_PARAM.into(), message.id.to_string())])),
            EventKind::Receive { message } => {
                ("receive", BTreeMap::from([(MESSAGE_PARAM.into(), message.id.to_string())]))
            }
            EventKind::Internal { internal } => {
                let mut p = internal.params.clone();
                p.insert(LABEL_PARAM.into(), internal.label.clone());
                ("internal", p)
            }
        };
        WireEvent {
            replica: e.replica.0,
            seq: e.seq,
            etype: etype.into(),
            params,
        }
    }
}

impl WireEvent {
    /// Rebuilds the event, looking messages up by id.
    pub fn to_event(&self, lookup: impl Fn(MessageId) -> Option<Message>) -> Result<Event, RpcError> {
        let message = || -> Result<Message, RpcError> {
            let raw = self
                .params
                .get(MESSAGE_PARAM)
                .ok_or_else(|| RpcError::Malformed(format!("{} event without {MESSAGE_PARAM}", self.etype)))?;
            let id: MessageId = raw
                .parse()
                .map_err(|e| RpcError::Malformed(format!("message id `{raw}`: {e}")))?;
            lookup(id).ok_or_else(|| RpcError::Malformed(format!("event refers to unknown message {id}")))
        };
        let kind = match self.etype.as_str() {
            "send" => EventKind::Send { message: message()? },
            "receive" => EventKind::Receive { message: message()? },
            "internal" => {
                let mut params = self.params.clone();
                let label = params
                    .remove(LABEL_PARAM)
                    .ok_or_else(|| RpcError::Malformed(format!("internal event without {LABEL_PARAM}")))?;
                EventKind::Internal {
                    internal: InternalEvent { label, params },
                }
            }
            other => return Err(RpcError::Malformed(format!("unknown event type `{other}`"))),
        };
        Ok(Event {
            replica: ReplicaId(self.replica),
            seq: self.seq,
            kind,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registration {
    pub id: usize,
    /// Base URL of the replica, e.g. `http://127.0.0.1:4100`.
    pub addr: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectiveAction {
    Start,
    Stop,
    Restart,
    /// Expire the replica's timer.
    Timeout,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Directive {
    pub action: DirectiveAction,
    pub target: usize,
}

/// A stub's answer to a dispatched message or directive. Every event it
/// produced has been posted to the API server before the answer is sent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StubStatus {
    pub events: usize,
    #[serde(rename = "final")]
    pub is_final: bool,
    pub timer_armed: bool,
    /// No empty-input step is pending and the replica is not final.
    pub ready: bool,
}

/// Body of every non-2xx response and of plain acknowledgements.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Ack {
    pub fn ok() -> Self {
        Ack { ok: true, error: None }
    }

    pub fn err(e: impl ToString) -> Self {
        Ack {
            ok: false,
            error: Some(e.to_string()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn msg() -> Message {
        Message {
            id: MessageId::Sent {
                replica: ReplicaId(1),
                seq: 5,
            },
            from: ReplicaId(1),
            to: ReplicaId(2),
            mtype: "Prepare".into(),
            payload: vec![0, 159, 146, 150],
            fictitious: false,
        }
    }

    #[test]
    fn message_round_trip() {
        let m = msg();
        let w = WireMessage::from(&m);
        assert_eq!(w.id, "r1.5");
        let json = serde_json::to_string(&w).unwrap();
        assert!(json.contains("\"type\":\"Prepare\""));
        assert!(!json.contains("fictitious"));
        let back: WireMessage = serde_json::from_str(&json).unwrap();
        assert_eq!(Message::try_from(&back).unwrap(), m);
    }

    #[test]
    fn bad_data_is_malformed() {
        let mut w = WireMessage::from(&msg());
        w.data = "***".into();
        assert!(matches!(Message::try_from(&w), Err(RpcError::Malformed(_))));
    }

    #[test]
    fn event_round_trip() {
        let m = msg();
        let events = [
            Event {
                replica: ReplicaId(1),
                seq: 5,
                kind: EventKind::Send { message: m.clone() },
            },
            Event {
                replica: ReplicaId(2),
                seq: 0,
                kind: EventKind::Receive { message: m.clone() },
            },
            Event {
                replica: ReplicaId(0),
                seq: 3,
                kind: EventKind::Internal {
                    internal: InternalEvent::new("AddToLog").with("request", "alpha"),
                },
            },
        ];
        for e in &events {
            let w = WireEvent::from(e);
            let back = w.to_event(|id| (id == m.id).then(|| m.clone())).unwrap();
            assert_eq!(&back, e);
        }
        let w = WireEvent::from(&events[1]);
        assert!(w.to_event(|_| None).is_err());
    }

    #[test]
    fn directive_json() {
        let d = Directive {
            action: DirectiveAction::Restart,
            target: 3,
        };
        assert_eq!(serde_json::to_string(&d).unwrap(), r#"{"action":"restart","target":3}"#);
    }
}
