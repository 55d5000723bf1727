//! Protocol-specific views of opaque message payloads.

use serde::{Deserialize, Serialize};

use crate::model::Message;

/// Fields common to round-based protocols.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageView {
    /// View, term or ballot.
    pub round: Option<u64>,
    pub request: Option<String>,
    pub index: Option<u64>,
}

pub trait MessageCodec: Send + Sync {
    fn view(&self, m: &Message) -> Option<MessageView>;
    /// The same message with its round advanced by `by`.
    fn shift_round(&self, m: &Message, by: u64) -> Option<Message>;
}
