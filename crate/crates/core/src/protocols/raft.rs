//! A small Raft: one election followed by replication and commit of a
//! single entry. Elections are started by a designated replica per term so
//! that runs stay deterministic apart from message order.

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::codec::{MessageCodec, MessageView};
use crate::model::{Automaton, Emit, Input, InternalEvent, Message, Outgoing, ReplicaId, Transition};
use crate::protocols::ConfigError;

pub const REQUEST_VOTE: &str = "RequestVote";
pub const REQUEST_VOTE_REPLY: &str = "RequestVoteReply";
pub const APPEND_ENTRIES: &str = "AppendEntries";
pub const APPEND_ENTRIES_REPLY: &str = "AppendEntriesReply";
pub const ELECTION: &str = "Election";
pub const BECOME_LEADER: &str = "BecomeLeader";
pub const COMMIT_ENTRY: &str = "CommitEntry";
pub const GIVE_UP: &str = "GiveUp";

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Entry {
    pub term: u64,
    pub command: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum RaftMessage {
    RequestVote { term: u64, last_log_term: u64, last_log_len: usize },
    RequestVoteReply { term: u64, granted: bool },
    AppendEntries { term: u64, entries: Vec<Entry>, commit: usize },
    AppendEntriesReply { term: u64, success: bool, match_len: usize },
}

impl RaftMessage {
    pub fn mtype(&self) -> &'static str {
        match self {
            RaftMessage::RequestVote { .. } => REQUEST_VOTE,
            RaftMessage::RequestVoteReply { .. } => REQUEST_VOTE_REPLY,
            RaftMessage::AppendEntries { .. } => APPEND_ENTRIES,
            RaftMessage::AppendEntriesReply { .. } => APPEND_ENTRIES_REPLY,
        }
    }

    pub fn term(&self) -> u64 {
        match self {
            RaftMessage::RequestVote { term, .. }
            | RaftMessage::RequestVoteReply { term, .. }
            | RaftMessage::AppendEntries { term, .. }
            | RaftMessage::AppendEntriesReply { term, .. } => *term,
        }
    }

    fn with_term(&self, t: u64) -> RaftMessage {
        let mut m = self.clone();
        match &mut m {
            RaftMessage::RequestVote { term, .. }
            | RaftMessage::RequestVoteReply { term, .. }
            | RaftMessage::AppendEntries { term, .. }
            | RaftMessage::AppendEntriesReply { term, .. } => *term = t,
        }
        m
    }

    pub fn encode(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("raft messages serialize")
    }

    pub fn decode(m: &Message) -> Option<RaftMessage> {
        serde_json::from_slice(&m.payload).ok()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Raft {
    pub n: usize,
    /// `election_order[(t - 1) % len]` starts the election of term `t`.
    pub election_order: Vec<ReplicaId>,
    pub max_term: u64,
    pub command: String,
}

impl Raft {
    pub fn new(n: usize) -> Result<Self, ConfigError> {
        if n < 3 {
            return Err(ConfigError(format!("raft needs at least 3 replicas, got {n}")));
        }
        Ok(Raft {
            n,
            election_order: (0..n).map(ReplicaId).collect(),
            max_term: 3,
            command: "cmd".into(),
        })
    }

    pub fn majority(&self) -> usize {
        self.n / 2 + 1
    }

    /// Largest number of faulty replicas a majority quorum tolerates.
    pub fn f(&self) -> usize {
        (self.n - 1) / 2
    }

    pub fn candidate_for(&self, term: u64) -> ReplicaId {
        let i = (term.max(1) - 1) as usize % self.election_order.len();
        self.election_order[i]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Follower,
    Candidate,
    Leader,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Pending {
    Send(ReplicaId, RaftMessage),
    Note(InternalEvent),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RaftState {
    pub term: u64,
    pub role: Role,
    pub voted_for: Option<ReplicaId>,
    pub votes: BTreeSet<ReplicaId>,
    pub log: Vec<Entry>,
    pub commit: usize,
    pub acks: BTreeSet<ReplicaId>,
    /// Term whose leader this replica has heard from.
    pub leader_term: Option<u64>,
    pub pending: VecDeque<Pending>,
    pub done: bool,
    pub gave_up: bool,
}

impl Raft {
    fn broadcast(&self, me: ReplicaId, s: &mut RaftState, m: RaftMessage) {
        for r in (0..self.n).map(ReplicaId).filter(|r| *r != me) {
            s.pending.push_back(Pending::Send(r, m.clone()));
        }
    }

    fn observe_term(&self, s: &mut RaftState, t: u64) {
        if t > s.term {
            s.term = t;
            s.role = Role::Follower;
            s.voted_for = None;
            s.votes.clear();
            s.acks.clear();
        }
    }

    fn last_log(s: &RaftState) -> (u64, usize) {
        (s.log.last().map_or(0, |e| e.term), s.log.len())
    }

    fn commit_note(s: &RaftState) -> Pending {
        let e = &s.log[s.commit - 1];
        Pending::Note(
            InternalEvent::new(COMMIT_ENTRY)
                .with("index", s.commit)
                .with("term", e.term)
                .with("command", &e.command),
        )
    }

    fn handle(&self, me: ReplicaId, s: &mut RaftState, from: ReplicaId, m: RaftMessage) {
        self.observe_term(s, m.term());
        match m {
            RaftMessage::RequestVote {
                term,
                last_log_term,
                last_log_len,
            } => {
                let fresh = (last_log_term, last_log_len) >= Self::last_log(s);
                let granted = term == s.term && s.voted_for.is_none_or(|v| v == from) && fresh;
                if granted {
                    s.voted_for = Some(from);
                }
                s.pending.push_back(Pending::Send(
                    from,
                    RaftMessage::RequestVoteReply {
                        term: s.term,
                        granted,
                    },
                ));
            }
            RaftMessage::RequestVoteReply { term, granted } => {
                if s.role != Role::Candidate || term != s.term || !granted {
                    return;
                }
                s.votes.insert(from);
                if s.votes.len() >= self.majority() {
                    s.role = Role::Leader;
                    s.leader_term = Some(s.term);
                    s.pending
                        .push_back(Pending::Note(InternalEvent::new(BECOME_LEADER).with("term", s.term)));
                    s.log.push(Entry {
                        term: s.term,
                        command: self.command.clone(),
                    });
                    s.acks = BTreeSet::from([me]);
                    let ae = RaftMessage::AppendEntries {
                        term: s.term,
                        entries: s.log.clone(),
                        commit: s.commit,
                    };
                    self.broadcast(me, s, ae);
                }
            }
            RaftMessage::AppendEntries { term, entries, commit } => {
                if term < s.term {
                    s.pending.push_back(Pending::Send(
                        from,
                        RaftMessage::AppendEntriesReply {
                            term: s.term,
                            success: false,
                            match_len: 0,
                        },
                    ));
                    return;
                }
                s.role = Role::Follower;
                s.leader_term = Some(term);
                s.log = entries;
                if commit > s.commit && commit <= s.log.len() {
                    s.commit = commit;
                    let note = Self::commit_note(s);
                    s.pending.push_back(note);
                    s.done = true;
                } else {
                    s.pending.push_back(Pending::Send(
                        from,
                        RaftMessage::AppendEntriesReply {
                            term: s.term,
                            success: true,
                            match_len: s.log.len(),
                        },
                    ));
                }
            }
            RaftMessage::AppendEntriesReply {
                term,
                success,
                match_len,
            } => {
                if s.role != Role::Leader || term != s.term || !success || match_len == 0 {
                    return;
                }
                s.acks.insert(from);
                if s.commit == 0 && s.acks.len() >= self.majority() {
                    s.commit = s.log.len();
                    let note = Self::commit_note(s);
                    s.pending.push_back(note);
                    let ae = RaftMessage::AppendEntries {
                        term: s.term,
                        entries: s.log.clone(),
                        commit: s.commit,
                    };
                    self.broadcast(me, s, ae);
                    s.done = true;
                }
            }
        }
    }
}

impl Automaton for Raft {
    type State = RaftState;

    fn replica_count(&self) -> usize {
        self.n
    }

    fn initial_state(&self, _r: ReplicaId) -> RaftState {
        RaftState {
            term: 0,
            role: Role::Follower,
            voted_for: None,
            votes: BTreeSet::new(),
            log: Vec::new(),
            commit: 0,
            acks: BTreeSet::new(),
            leader_term: None,
            pending: VecDeque::new(),
            done: false,
            gave_up: false,
        }
    }

    fn step(&self, r: ReplicaId, s: &RaftState, input: Input<'_>) -> Option<Transition<RaftState>> {
        match input {
            Input::Internal => {
                let mut next = s.clone();
                let emit = match next.pending.pop_front()? {
                    Pending::Send(to, m) => Emit::Send(Outgoing {
                        to,
                        mtype: m.mtype().to_string(),
                        payload: m.encode(),
                    }),
                    Pending::Note(ev) => Emit::Internal(ev),
                };
                Some(Transition { state: next, emit })
            }
            Input::Timeout => {
                let armed = s.pending.is_empty()
                    && !s.done
                    && !s.gave_up
                    && s.role != Role::Leader
                    && s.leader_term != Some(s.term)
                    && self.candidate_for(s.term + 1) == r;
                if !armed {
                    return None;
                }
                let mut next = s.clone();
                if s.term + 1 > self.max_term {
                    next.gave_up = true;
                    return Some(Transition {
                        state: next,
                        emit: Emit::Internal(InternalEvent::new(GIVE_UP).with("term", s.term)),
                    });
                }
                next.term += 1;
                next.role = Role::Candidate;
                next.voted_for = Some(r);
                next.votes = BTreeSet::from([r]);
                next.acks.clear();
                let (last_log_term, last_log_len) = Self::last_log(s);
                let rv = RaftMessage::RequestVote {
                    term: next.term,
                    last_log_term,
                    last_log_len,
                };
                self.broadcast(r, &mut next, rv);
                Some(Transition {
                    emit: Emit::Internal(InternalEvent::new(ELECTION).with("term", next.term)),
                    state: next,
                })
            }
            Input::Message(m) => {
                if !s.pending.is_empty() || self.is_final(s) {
                    return None;
                }
                let mut next = s.clone();
                if let Some(rm) = RaftMessage::decode(m) {
                    self.handle(r, &mut next, m.from, rm);
                }
                Some(Transition {
                    state: next,
                    emit: Emit::Receive,
                })
            }
        }
    }

    fn is_final(&self, s: &RaftState) -> bool {
        s.pending.is_empty() && (s.done || s.gave_up)
    }
}

/// Decoded views of Raft payloads; the round is the term.
#[derive(Clone, Copy, Debug, Default)]
pub struct RaftCodec;

impl MessageCodec for RaftCodec {
    fn view(&self, m: &Message) -> Option<MessageView> {
        let rm = RaftMessage::decode(m)?;
        Some(MessageView {
            round: Some(rm.term()),
            request: None,
            index: match &rm {
                RaftMessage::AppendEntries { commit, .. } => Some(*commit as u64),
                _ => None,
            },
        })
    }

    fn shift_round(&self, m: &Message, by: u64) -> Option<Message> {
        let rm = RaftMessage::decode(m)?;
        let mut out = m.clone();
        out.payload = rm.with_term(rm.term() + by).encode();
        Some(out)
    }
}
