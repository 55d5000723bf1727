use thiserror::Error;

use crate::model::{Automaton, Event, Input, Message, ModelError, ReplicaId, Replicas};

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum BackendError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("replica {replica} reported an unexpected event: {detail}")]
    Protocol { replica: ReplicaId, detail: String },
}

/// Where the replicas under test run.
///
/// Every call that makes a replica take a step also lets that replica take
/// all its empty-input steps, and returns the produced events in order.
pub trait ReplicaBackend: Send {
    fn replica_count(&self) -> usize;
    /// Restarts every replica and returns the events of their start-up steps.
    fn reset(&mut self) -> Result<Vec<Event>, BackendError>;
    fn can_receive(&self, r: ReplicaId, m: &Message) -> bool;
    fn receive(&mut self, r: ReplicaId, m: &Message) -> Result<Vec<Event>, BackendError>;
    fn timeout_enabled(&self, r: ReplicaId) -> bool;
    fn timeout(&mut self, r: ReplicaId) -> Result<Vec<Event>, BackendError>;
    fn is_final(&self, r: ReplicaId) -> bool;
}

/// Runs the automata inside the driver's process.
#[derive(Clone, Debug)]
pub struct InProcess<A: Automaton> {
    automaton: A,
    replicas: Replicas<A>,
}

impl<A: Automaton> InProcess<A> {
    pub fn new(automaton: A) -> Self {
        let replicas = Replicas::new(automaton.clone());
        InProcess {
            automaton,
            replicas,
        }
    }

    pub fn replicas(&self) -> &Replicas<A> {
        &self.replicas
    }

    fn flush(&mut self, r: ReplicaId, out: &mut Vec<Event>) -> Result<(), ModelError> {
        while self.replicas.internal_enabled(r) {
            out.push(self.replicas.fire(r, Input::Internal)?);
        }
        Ok(())
    }
}

impl<A: Automaton + 'static> ReplicaBackend for InProcess<A> {
    fn replica_count(&self) -> usize {
        self.replicas.len()
    }

    fn reset(&mut self) -> Result<Vec<Event>, BackendError> {
        self.replicas = Replicas::new(self.automaton.clone());
        let mut out = Vec::new();
        for r in self.replicas.ids().collect::<Vec<_>>() {
            self.flush(r, &mut out)?;
        }
        Ok(out)
    }

    fn can_receive(&self, r: ReplicaId, m: &Message) -> bool {
        self.replicas.can_receive(r, m)
    }

    fn receive(&mut self, r: ReplicaId, m: &Message) -> Result<Vec<Event>, BackendError> {
        let mut out = vec![self.replicas.fire(r, Input::Message(m))?];
        self.flush(r, &mut out)?;
        Ok(out)
    }

    fn timeout_enabled(&self, r: ReplicaId) -> bool {
        self.replicas.timeout_enabled(r)
    }

    fn timeout(&mut self, r: ReplicaId) -> Result<Vec<Event>, BackendError> {
        let mut out = vec![self.replicas.fire(r, Input::Timeout)?];
        self.flush(r, &mut out)?;
        Ok(out)
    }

    fn is_final(&self, r: ReplicaId) -> bool {
        self.replicas.is_final(r)
    }
}
