//! A [`ReplicaBackend`] whose replicas are stubs reached over HTTP.

use std::time::Duration;

use nettest_core::driver::{BackendError, ReplicaBackend};
use nettest_core::{Event, Message, ReplicaId};

use crate::dispatcher::Dispatcher;
use crate::server::ApiServer;
use crate::wire::{Directive, DirectiveAction, StubStatus};
use crate::RpcError;

pub struct RemoteBackend {
    server: ApiServer,
    dispatcher: Dispatcher,
    status: Vec<StubStatus>,
    event_timeout: Duration,
}

impl From<RpcError> for BackendError {
    fn from(e: RpcError) -> Self {
        BackendError::Transport(e.to_string())
    }
}

impl RemoteBackend {
    /// Waits for replicas `0..n` to register with `server`.
    pub fn connect(server: ApiServer, n: usize, wait: Duration) -> Result<Self, RpcError> {
        server.wait_for_replicas(n, wait)?;
        let dispatcher = Dispatcher::new(server.registry(), Duration::from_secs(30))?;
        Ok(RemoteBackend {
            server,
            dispatcher,
            status: vec![StubStatus::default(); n],
            event_timeout: Duration::from_secs(10),
        })
    }

    pub fn server(&self) -> &ApiServer {
        &self.server
    }

    /// Pulls the `status.events` events the stub reported for this step.
    fn collect(&mut self, r: ReplicaId, status: StubStatus) -> Result<Vec<Event>, BackendError> {
        let mut out = Vec::with_capacity(status.events);
        for _ in 0..status.events {
            let e = self.server.next_event(self.event_timeout)?;
            if e.replica != r {
                return Err(BackendError::Protocol {
                    replica: r,
                    detail: format!("event {e} arrived while {r} was stepping"),
                });
            }
            out.push(e);
        }
        self.status[r.0] = status;
        Ok(out)
    }

    fn directive(&mut self, r: ReplicaId, action: DirectiveAction) -> Result<Vec<Event>, BackendError> {
        let st = self.dispatcher.directive(Directive { action, target: r.0 })?;
        self.collect(r, st)
    }
}

impl ReplicaBackend for RemoteBackend {
    fn replica_count(&self) -> usize {
        self.status.len()
    }

    /// Broadcasts a restart directive, one replica at a time.
    fn reset(&mut self) -> Result<Vec<Event>, BackendError> {
        self.server.clear();
        let mut out = Vec::new();
        for r in 0..self.status.len() {
            out.extend(self.directive(ReplicaId(r), DirectiveAction::Restart)?);
        }
        Ok(out)
    }

    /// Stubs report readiness regardless of message content, which matches
    /// the toy protocols: they accept any message when idle and not final.
    fn can_receive(&self, r: ReplicaId, _m: &Message) -> bool {
        self.status.get(r.0).is_some_and(|s| s.ready)
    }

    fn receive(&mut self, r: ReplicaId, m: &Message) -> Result<Vec<Event>, BackendError> {
        self.server.remember(m);
        let st = self.dispatcher.send_message(m)?;
        self.collect(r, st)
    }

    fn timeout_enabled(&self, r: ReplicaId) -> bool {
        self.status.get(r.0).is_some_and(|s| s.timer_armed)
    }

    fn timeout(&mut self, r: ReplicaId) -> Result<Vec<Event>, BackendError> {
        self.directive(r, DirectiveAction::Timeout)
    }

    fn is_final(&self, r: ReplicaId) -> bool {
        self.status.get(r.0).is_some_and(|s| s.is_final)
    }
}
