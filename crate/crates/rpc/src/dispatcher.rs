//! Sends messages and directives to registered replicas.

use std::time::Duration;

use nettest_core::{Message, ReplicaId};
use serde::Serialize;

use crate::server::Registry;
use crate::wire::{Ack, Directive, StubStatus, WireMessage};
use crate::RpcError;

/// One attempt per dispatch; failures surface as errors. Calls block until
/// the replica answers, so dispatches to one replica keep their order.
pub struct Dispatcher {
    client: reqwest::blocking::Client,
    registry: Registry,
}

impl Dispatcher {
    pub fn new(registry: Registry, timeout: Duration) -> Result<Self, RpcError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| RpcError::Transport(e.to_string()))?;
        Ok(Dispatcher { client, registry })
    }

    fn addr(&self, r: ReplicaId) -> Result<String, RpcError> {
        self.registry
            .read()
            .expect("registry lock")
            .get(&r)
            .cloned()
            .ok_or(RpcError::UnreachableReplica {
                replica: r,
                reason: "not registered".into(),
            })
    }

    fn post(&self, r: ReplicaId, path: &str, body: &impl Serialize) -> Result<StubStatus, RpcError> {
        let url = format!("{}{path}", self.addr(r)?);
        let unreachable = |reason: String| RpcError::UnreachableReplica { replica: r, reason };
        let resp = self
            .client
            .post(&url)
            .json(body)
            .send()
            .map_err(|e| unreachable(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| unreachable(e.to_string()))?;
        if !status.is_success() {
            let reason = serde_json::from_str::<Ack>(&text)
                .ok()
                .and_then(|a| a.error)
                .unwrap_or(text);
            return Err(RpcError::Stub {
                replica: r,
                status: status.as_u16(),
                reason,
            });
        }
        serde_json::from_str(&text).map_err(|e| RpcError::Malformed(format!("stub status: {e}")))
    }

    pub fn send_message(&self, m: &Message) -> Result<StubStatus, RpcError> {
        self.post(m.to, "/message", &WireMessage::from(m))
    }

    pub fn directive(&self, d: Directive) -> Result<StubStatus, RpcError> {
        self.post(ReplicaId(d.target), "/directive", &d)
    }
}
