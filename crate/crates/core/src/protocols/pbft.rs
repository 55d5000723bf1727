//! A small PBFT: PrePrepare/Prepare/Commit in a view, and a ViewChange /
//! NewView exchange when a replica's timer expires.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::codec::{MessageCodec, MessageView};
use crate::model::{Automaton, Emit, Input, InternalEvent, Message, Outgoing, ReplicaId, Transition};
use crate::protocols::ConfigError;

pub const PRE_PREPARE: &str = "PrePrepare";
pub const PREPARE: &str = "Prepare";
pub const COMMIT: &str = "Commit";
pub const VIEW_CHANGE: &str = "ViewChange";
pub const NEW_VIEW: &str = "NewView";
/// Internal event emitted when a replica decides a request.
pub const ADD_TO_LOG: &str = "AddToLog";
pub const TIMEOUT: &str = "Timeout";
pub const GIVE_UP: &str = "GiveUp";
/// Request value used by byzantine replicas.
pub const NIL: &str = "nil";

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum PbftMessage {
    PrePrepare { view: u64, index: u64, request: String },
    Prepare { view: u64, index: u64, request: String },
    Commit { view: u64, index: u64, request: String },
    ViewChange { view: u64 },
    NewView { view: u64 },
}

impl PbftMessage {
    pub fn mtype(&self) -> &'static str {
        match self {
            PbftMessage::PrePrepare { .. } => PRE_PREPARE,
            PbftMessage::Prepare { .. } => PREPARE,
            PbftMessage::Commit { .. } => COMMIT,
            PbftMessage::ViewChange { .. } => VIEW_CHANGE,
            PbftMessage::NewView { .. } => NEW_VIEW,
        }
    }

    pub fn view(&self) -> u64 {
        match self {
            PbftMessage::PrePrepare { view, .. }
            | PbftMessage::Prepare { view, .. }
            | PbftMessage::Commit { view, .. }
            | PbftMessage::ViewChange { view }
            | PbftMessage::NewView { view } => *view,
        }
    }

    fn with_view(&self, v: u64) -> PbftMessage {
        let mut m = self.clone();
        match &mut m {
            PbftMessage::PrePrepare { view, .. }
            | PbftMessage::Prepare { view, .. }
            | PbftMessage::Commit { view, .. }
            | PbftMessage::ViewChange { view }
            | PbftMessage::NewView { view } => *view = v,
        }
        m
    }

    pub fn encode(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("pbft messages serialize")
    }

    pub fn decode(m: &Message) -> Option<PbftMessage> {
        serde_json::from_slice(&m.payload).ok()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pbft {
    pub n: usize,
    pub f: usize,
    pub requests: Vec<String>,
    /// Views `0..view_bound` may be entered; asking for a later one gives up.
    pub view_bound: u64,
}

impl Pbft {
    pub fn new(n: usize, f: usize, requests: Vec<String>) -> Result<Self, ConfigError> {
        if n < 3 * f + 1 {
            return Err(ConfigError(format!("n = {n} is below 3f + 1 = {}", 3 * f + 1)));
        }
        if requests.is_empty() {
            return Err(ConfigError("at least one request is needed".into()));
        }
        Ok(Pbft {
            n,
            f,
            requests,
            view_bound: 3,
        })
    }

    /// Four replicas, one fault, one request `alpha`.
    pub fn standard() -> Self {
        Pbft::new(4, 1, vec!["alpha".into()]).expect("valid configuration")
    }

    pub fn leader(&self, view: u64) -> ReplicaId {
        ReplicaId((view % self.n as u64) as usize)
    }

    pub fn quorum(&self) -> usize {
        2 * self.f + 1
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct Slot {
    pub proposal: Option<String>,
    pub prepares: BTreeMap<String, BTreeSet<ReplicaId>>,
    pub commits: BTreeMap<String, BTreeSet<ReplicaId>>,
    pub prepare_from: BTreeSet<ReplicaId>,
    pub commit_from: BTreeSet<ReplicaId>,
    pub prepared: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Pending {
    Send(ReplicaId, PbftMessage),
    Note(InternalEvent),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PbftState {
    pub view: u64,
    /// Highest view this replica asked to move to.
    pub requested_view: u64,
    pub pending: VecDeque<Pending>,
    pub slots: BTreeMap<(u64, u64), Slot>,
    pub decided: BTreeMap<u64, (String, u64)>,
    pub buffered: Vec<(ReplicaId, PbftMessage)>,
    pub view_change_votes: BTreeMap<u64, BTreeSet<ReplicaId>>,
    pub new_view_sent: BTreeSet<u64>,
    pub gave_up: bool,
}

impl Pbft {
    fn broadcast(&self, me: ReplicaId, s: &mut PbftState, m: PbftMessage) {
        for r in (0..self.n).map(ReplicaId).filter(|r| *r != me) {
            s.pending.push_back(Pending::Send(r, m.clone()));
        }
    }

    fn propose_all(&self, me: ReplicaId, s: &mut PbftState) {
        let v = s.view;
        for (i, req) in self.requests.iter().enumerate() {
            let i = i as u64;
            if s.decided.contains_key(&i) {
                continue;
            }
            let slot = s.slots.entry((v, i)).or_default();
            slot.proposal = Some(req.clone());
            slot.prepares.entry(req.clone()).or_default().insert(me);
            let pp = PbftMessage::PrePrepare {
                view: v,
                index: i,
                request: req.clone(),
            };
            let p = PbftMessage::Prepare {
                view: v,
                index: i,
                request: req.clone(),
            };
            self.broadcast(me, s, pp);
            self.broadcast(me, s, p);
            self.check(me, s, v, i);
        }
    }

    fn check(&self, me: ReplicaId, s: &mut PbftState, v: u64, i: u64) {
        let q = self.quorum();
        let Some(slot) = s.slots.get_mut(&(v, i)) else {
            return;
        };
        let Some(req) = slot.proposal.clone() else {
            return;
        };
        if !slot.prepared && slot.prepares.get(&req).map_or(0, BTreeSet::len) >= q {
            slot.prepared = true;
            slot.commits.entry(req.clone()).or_default().insert(me);
            self.broadcast(
                me,
                s,
                PbftMessage::Commit {
                    view: v,
                    index: i,
                    request: req.clone(),
                },
            );
        }
        let slot = &s.slots[&(v, i)];
        if slot.prepared
            && !s.decided.contains_key(&i)
            && slot.commits.get(&req).map_or(0, BTreeSet::len) >= q
        {
            s.decided.insert(i, (req.clone(), v));
            s.pending.push_back(Pending::Note(
                InternalEvent::new(ADD_TO_LOG)
                    .with("request", &req)
                    .with("view", v)
                    .with("index", i),
            ));
        }
    }

    fn install_view(&self, me: ReplicaId, s: &mut PbftState, v: u64) {
        s.view = v;
        s.requested_view = s.requested_view.max(v);
        if self.leader(v) == me {
            self.propose_all(me, s);
        }
        let (now, later): (Vec<_>, Vec<_>) = std::mem::take(&mut s.buffered)
            .into_iter()
            .partition(|(_, m)| m.view() == v);
        s.buffered = later.into_iter().filter(|(_, m)| m.view() > v).collect();
        for (from, m) in now {
            self.handle(me, s, from, m);
        }
    }

    fn maybe_new_view(&self, me: ReplicaId, s: &mut PbftState, v: u64) {
        if self.leader(v) != me || v <= s.view || s.new_view_sent.contains(&v) || v >= self.view_bound {
            return;
        }
        let others = s
            .view_change_votes
            .get(&v)
            .map_or(0, |set| set.iter().filter(|r| **r != me).count());
        if others >= 2 * self.f {
            s.new_view_sent.insert(v);
            self.broadcast(me, s, PbftMessage::NewView { view: v });
            self.install_view(me, s, v);
        }
    }

    fn handle(&self, me: ReplicaId, s: &mut PbftState, from: ReplicaId, m: PbftMessage) {
        match &m {
            PbftMessage::ViewChange { view } => {
                s.view_change_votes.entry(*view).or_default().insert(from);
                self.maybe_new_view(me, s, *view);
                return;
            }
            PbftMessage::NewView { view } => {
                if *view > s.view && from == self.leader(*view) {
                    self.install_view(me, s, *view);
                }
                return;
            }
            _ => {}
        }
        let v = m.view();
        if v > s.view {
            s.buffered.push((from, m));
            return;
        }
        if v < s.view {
            return;
        }
        match m {
            PbftMessage::PrePrepare { index, request, .. } => {
                if from != self.leader(v) || s.requested_view > s.view {
                    return;
                }
                let slot = s.slots.entry((v, index)).or_default();
                if slot.proposal.is_some() {
                    return;
                }
                slot.proposal = Some(request.clone());
                slot.prepares.entry(request.clone()).or_default().insert(me);
                self.broadcast(
                    me,
                    s,
                    PbftMessage::Prepare {
                        view: v,
                        index,
                        request,
                    },
                );
                self.check(me, s, v, index);
            }
            PbftMessage::Prepare { index, request, .. } => {
                let slot = s.slots.entry((v, index)).or_default();
                slot.prepare_from.insert(from);
                slot.prepares.entry(request).or_default().insert(from);
                self.check(me, s, v, index);
            }
            PbftMessage::Commit { index, request, .. } => {
                let slot = s.slots.entry((v, index)).or_default();
                slot.commit_from.insert(from);
                slot.commits.entry(request).or_default().insert(from);
                self.check(me, s, v, index);
            }
            PbftMessage::ViewChange { .. } | PbftMessage::NewView { .. } => unreachable!(),
        }
    }

    fn all_decided(&self, s: &PbftState) -> bool {
        s.decided.len() == self.requests.len()
    }

}

impl Automaton for Pbft {
    type State = PbftState;

    fn replica_count(&self) -> usize {
        self.n
    }

    fn initial_state(&self, r: ReplicaId) -> PbftState {
        let mut s = PbftState {
            view: 0,
            requested_view: 0,
            pending: VecDeque::new(),
            slots: BTreeMap::new(),
            decided: BTreeMap::new(),
            buffered: Vec::new(),
            view_change_votes: BTreeMap::new(),
            new_view_sent: BTreeSet::new(),
            gave_up: false,
        };
        if self.leader(0) == r {
            self.propose_all(r, &mut s);
        }
        s
    }

    fn step(&self, r: ReplicaId, s: &PbftState, input: Input<'_>) -> Option<Transition<PbftState>> {
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
                // One expiry per view: after asking for a view change the
                // replica waits for the new view to be installed.
                if !s.pending.is_empty() || s.gave_up || self.all_decided(s) || s.requested_view > s.view {
                    return None;
                }
                let mut next = s.clone();
                let target = s.view + 1;
                if target >= self.view_bound {
                    next.gave_up = true;
                    return Some(Transition {
                        state: next,
                        emit: Emit::Internal(InternalEvent::new(GIVE_UP).with("view", s.view)),
                    });
                }
                next.requested_view = target;
                next.view_change_votes.entry(target).or_default().insert(r);
                self.broadcast(r, &mut next, PbftMessage::ViewChange { view: target });
                self.maybe_new_view(r, &mut next, target);
                Some(Transition {
                    state: next,
                    emit: Emit::Internal(InternalEvent::new(TIMEOUT).with("view", target)),
                })
            }
            Input::Message(m) => {
                if !s.pending.is_empty() || self.is_final(s) {
                    return None;
                }
                let mut next = s.clone();
                if let Some(pm) = PbftMessage::decode(m) {
                    self.handle(r, &mut next, m.from, pm);
                }
                Some(Transition {
                    state: next,
                    emit: Emit::Receive,
                })
            }
        }
    }

    fn is_final(&self, s: &PbftState) -> bool {
        if !s.pending.is_empty() {
            return false;
        }
        if s.gave_up {
            return true;
        }
        // Replica identity is not part of the state; a replica has heard
        // from everyone once it has heard from n - 1 distinct peers.
        self.all_decided(s)
            && s.decided.iter().all(|(i, (_, v))| {
                s.slots.get(&(*v, *i)).is_some_and(|slot| {
                    let leader = self.leader(*v);
                    let mut prep = slot.prepare_from.clone();
                    if slot.proposal.is_some() {
                        prep.insert(leader);
                    }
                    prep.len() + 1 >= self.n && slot.commit_from.len() + 1 >= self.n
                })
            })
    }
}

/// Decoded views of PBFT payloads.
#[derive(Clone, Copy, Debug, Default)]
pub struct PbftCodec;

impl MessageCodec for PbftCodec {
    fn view(&self, m: &Message) -> Option<MessageView> {
        let pm = PbftMessage::decode(m)?;
        Some(match &pm {
            PbftMessage::PrePrepare { view, index, request }
            | PbftMessage::Prepare { view, index, request }
            | PbftMessage::Commit { view, index, request } => MessageView {
                round: Some(*view),
                request: Some(request.clone()),
                index: Some(*index),
            },
            PbftMessage::ViewChange { view } | PbftMessage::NewView { view } => MessageView {
                round: Some(*view),
                request: None,
                index: None,
            },
        })
    }

    fn shift_round(&self, m: &Message, by: u64) -> Option<Message> {
        let pm = PbftMessage::decode(m)?;
        let mut out = m.clone();
        out.payload = pm.with_view(pm.view() + by).encode();
        Some(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{check_exclusivity, run_synchronous};

    #[test]
    fn rejects_too_few_replicas() {
        assert!(Pbft::new(3, 1, vec!["a".into()]).is_err());
        assert!(Pbft::new(4, 1, vec![]).is_err());
        assert!(Pbft::new(4, 1, vec!["a".into()]).is_ok());
    }

    #[test]
    fn fault_free_run_decides_alpha_everywhere() {
        let t = run_synchronous(Pbft::standard(), 10_000);
        assert!(t.complete);
        let decisions: Vec<_> = t
            .events()
            .filter_map(|e| e.internal())
            .filter(|i| i.label == ADD_TO_LOG)
            .collect();
        assert_eq!(decisions.len(), 4);
        assert!(decisions.iter().all(|d| d.param("request") == Some("alpha") && d.param("view") == Some("0")));
        let sent = t.events().filter(|e| e.sent().is_some()).count();
        assert_eq!(sent, 27);
    }

    #[test]
    fn payload_round_trip_and_shift() {
        let m = PbftMessage::Prepare {
            view: 0,
            index: 0,
            request: "alpha".into(),
        };
        let msg = Message {
            id: crate::model::MessageId::Injected(0),
            from: ReplicaId(0),
            to: ReplicaId(1),
            mtype: m.mtype().into(),
            payload: m.encode(),
            fictitious: false,
        };
        assert_eq!(PbftMessage::decode(&msg), Some(m));
        let shifted = PbftCodec.shift_round(&msg, 2).unwrap();
        assert_eq!(PbftCodec.view(&shifted).unwrap().round, Some(2));
    }

    #[test]
    fn leader_rotates() {
        let p = Pbft::standard();
        assert_eq!(p.leader(0), ReplicaId(0));
        assert_eq!(p.leader(5), ReplicaId(1));
    }

    #[test]
    fn exclusivity_on_bounded_exploration() {
        let report = check_exclusivity(Pbft::standard(), 2_000);
        assert!(report.violations.is_empty(), "{:?}", report.violations.first());
        assert!(report.configurations > 100);
    }
}
