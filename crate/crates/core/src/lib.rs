//! Programmer-guided unit testing for consensus protocol implementations.
//!
//! A test case is a list of filters that decide, event by event, which
//! messages reach their destination, and an assertion state machine that
//! checks the observed events. Messages not claimed by a filter are
//! scheduled by PCTCP.

pub mod codec;
pub mod driver;
pub mod dsl;
pub mod history;
pub mod model;
pub mod pctcp;
pub mod protocols;
pub mod replay;
pub mod statemachine;
pub mod trace;

pub use history::{history_of, History, HistoryError};
pub use model::{
    run_synchronous, Automaton, Configuration, Emit, Event, EventKey, EventKind, EventType, Input,
    InternalEvent, Message, MessageId, ModelError, Move, Outgoing, ReplicaId, Replicas, Transition,
};
pub use trace::{ExecutionTrace, Rule, TraceStep};
