//! Running test cases against replicas in other processes.
//!
//! Replicas register with an [`ApiServer`] and post their events and sent
//! messages to it. The [`Dispatcher`] delivers messages and [`Directive`]s
//! to them. [`RemoteBackend`] plugs both into the test-case driver.
//!
//! Endpoints on the API server, all `POST` with JSON bodies:
//!
//! - `/replica` takes a [`Registration`] `{"id": 0, "addr": "http://host:port"}`.
//! - `/message` takes a [`WireMessage`] `{"id": "r0.3", "from": 0, "to": 1, "type": "Prepare", "data": "<base64>"}`.
//! - `/event` takes a [`WireEvent`] `{"replica": 0, "seq": 3, "type": "send", "params": {"@message": "r0.3"}}`.
//!
//! Endpoints on a replica:
//!
//! - `/message` takes a [`WireMessage`] and answers with a [`StubStatus`].
//! - `/directive` takes a [`Directive`] `{"action": "restart", "target": 2}` and answers with a [`StubStatus`].
//!
//! Errors come back as an [`Ack`] `{"ok": false, "error": "..."}` with a 4xx or 5xx status.

pub mod dispatcher;
pub mod remote;
pub mod server;
pub mod stub;
pub mod wire;

use nettest_core::ReplicaId;
use thiserror::Error;

pub use dispatcher::Dispatcher;
pub use remote::RemoteBackend;
pub use server::ApiServer;
pub use wire::{Ack, Directive, DirectiveAction, Registration, StubStatus, WireEvent, WireMessage};

/// Environment variable naming the API server bind address.
pub const BIND_ENV: &str = "NETTEST_BIND";

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum RpcError {
    #[error("cannot bind {addr}: {reason}")]
    Bind { addr: String, reason: String },
    #[error("unknown replica {0}")]
    UnknownReplica(ReplicaId),
    #[error("replica {replica} is unreachable: {reason}")]
    UnreachableReplica { replica: ReplicaId, reason: String },
    #[error("replica {replica} answered {status}: {reason}")]
    Stub { replica: ReplicaId, status: u16, reason: String },
    #[error("malformed payload: {0}")]
    Malformed(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("timed out: {0}")]
    Timeout(String),
}
