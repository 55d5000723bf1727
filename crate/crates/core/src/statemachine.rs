//! Assertion state machines over the event stream.

use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::dsl::{Condition, MonitorContext};
use crate::model::Event;

/// Label of the absorbing failure state.
pub const FAIL: &str = "Fail";
pub const INITIAL: &str = "Initial";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct StateId(pub usize);

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum StateMachineError {
    #[error("state `{from}` already has a transition to `{to}`")]
    DuplicateTransitionTarget { from: String, to: String },
    #[error("the failure state has no outgoing transitions")]
    FailIsAbsorbing,
    #[error("the failure state cannot be accepting")]
    FailCannotSucceed,
    #[error("unknown state {0:?}")]
    UnknownState(StateId),
}

#[derive(Clone)]
struct State {
    label: String,
    success: bool,
    transitions: Vec<(Condition, StateId)>,
}

/// A deterministic machine whose transitions are guarded by conditions.
///
/// Transitions are tried in insertion order and the first that holds fires.
/// At most one transition fires per event.
#[derive(Clone)]
pub struct AssertionStateMachine {
    states: Vec<State>,
    current: StateId,
}

impl Default for AssertionStateMachine {
    fn default() -> Self {
        Self::new()
    }
}

impl AssertionStateMachine {
    pub fn new() -> Self {
        AssertionStateMachine {
            states: vec![
                State {
                    label: INITIAL.to_string(),
                    success: false,
                    transitions: Vec::new(),
                },
                State {
                    label: FAIL.to_string(),
                    success: false,
                    transitions: Vec::new(),
                },
            ],
            current: StateId(0),
        }
    }

    pub fn initial(&self) -> StateId {
        StateId(0)
    }

    pub fn fail(&self) -> StateId {
        StateId(1)
    }

    pub fn state_named(&self, label: &str) -> Option<StateId> {
        self.states.iter().position(|s| s.label == label).map(StateId)
    }

    /// Adds `from --cond--> label`, creating the target state if needed.
    pub fn on(
        &mut self,
        from: StateId,
        cond: Condition,
        label: &str,
    ) -> Result<StateId, StateMachineError> {
        if from.0 >= self.states.len() {
            return Err(StateMachineError::UnknownState(from));
        }
        if from == self.fail() {
            return Err(StateMachineError::FailIsAbsorbing);
        }
        let target = match self.state_named(label) {
            Some(t) => t,
            None => {
                self.states.push(State {
                    label: label.to_string(),
                    success: false,
                    transitions: Vec::new(),
                });
                StateId(self.states.len() - 1)
            }
        };
        let st = &mut self.states[from.0];
        if st.transitions.iter().any(|(_, t)| *t == target) {
            return Err(StateMachineError::DuplicateTransitionTarget {
                from: st.label.clone(),
                to: label.to_string(),
            });
        }
        st.transitions.push((cond, target));
        Ok(target)
    }

    pub fn mark_success(&mut self, s: StateId) -> Result<(), StateMachineError> {
        if s == self.fail() {
            return Err(StateMachineError::FailCannotSucceed);
        }
        self.states
            .get_mut(s.0)
            .ok_or(StateMachineError::UnknownState(s))?
            .success = true;
        Ok(())
    }

    /// Consumes one event and returns the (possibly unchanged) state.
    pub fn step(&mut self, e: &Event, ctx: &MonitorContext) -> StateId {
        if self.current == self.fail() {
            return self.current;
        }
        if let Some((_, t)) = self.states[self.current.0]
            .transitions
            .iter()
            .find(|(c, _)| c.eval(e, ctx))
        {
            self.current = *t;
        }
        self.current
    }

    pub fn current(&self) -> StateId {
        self.current
    }

    pub fn current_label(&self) -> &str {
        &self.states[self.current.0].label
    }

    pub fn is_accepting(&self) -> bool {
        self.states[self.current.0].success
    }

    pub fn is_failed(&self) -> bool {
        self.current == self.fail()
    }

    pub fn reset(&mut self) {
        self.current = self.initial();
    }

    pub fn dump(&self) -> StateMachineDump {
        StateMachineDump {
            current: self.current_label().to_string(),
            states: self
                .states
                .iter()
                .map(|s| DumpState {
                    label: s.label.clone(),
                    success: s.success,
                    transitions: s
                        .transitions
                        .iter()
                        .map(|(c, t)| DumpTransition {
                            condition: c.to_string(),
                            target: self.states[t.0].label.clone(),
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}

impl fmt::Debug for AssertionStateMachine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.dump())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct StateMachineDump {
    pub current: String,
    pub states: Vec<DumpState>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DumpState {
    pub label: String,
    pub success: bool,
    pub transitions: Vec<DumpTransition>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DumpTransition {
    pub condition: String,
    pub target: String,
}
