//! Test cases for the toy protocols, with the protocol-aware conditions and
//! actions they use.

use crate::driver::{Expectation, TestCase};
use crate::dsl::{
    drop_message, is_event_type, is_message_from, is_message_receive, is_message_send, is_message_to,
    is_message_type, when, Action, ActionFailure, Condition, Count, DslRegistry, MessageSet,
    MonitorContext,
};
use crate::model::{Event, ReplicaId};
use crate::protocols::pbft::{self, Pbft, PbftMessage};
use crate::protocols::raft::{self, Raft, RaftMessage};
use crate::statemachine::AssertionStateMachine;

fn pbft_of(e: &Event) -> Option<PbftMessage> {
    e.message().and_then(PbftMessage::decode)
}

fn raft_of(e: &Event) -> Option<RaftMessage> {
    e.message().and_then(RaftMessage::decode)
}

/// The message carries view `v`.
pub fn view(v: u64) -> Condition {
    Condition::custom(format!("view({v})"), move |e, _| pbft_of(e).is_some_and(|m| m.view() == v))
}

pub fn view_at_least(v: u64) -> Condition {
    Condition::custom(format!("view_at_least({v})"), move |e, _| {
        pbft_of(e).is_some_and(|m| m.view() >= v)
    })
}

fn view_change_senders(v: u64, ctx: &MonitorContext) -> usize {
    let mut senders: Vec<ReplicaId> = ctx
        .event_history
        .iter()
        .filter_map(|e| e.sent())
        .filter(|m| matches!(PbftMessage::decode(m), Some(PbftMessage::ViewChange { view }) if view == v))
        .map(|m| m.from)
        .collect();
    senders.sort();
    senders.dedup();
    senders.len()
}

/// At least `k` distinct replicas have sent `ViewChange(v)` so far.
pub fn view_change_senders_at_least(v: u64, k: usize) -> Condition {
    Condition::custom(format!("view_change_senders_at_least({v}, {k})"), move |_, ctx| {
        view_change_senders(v, ctx) >= k
    })
}

fn decision(e: &Event, label: &str, key: &str) -> Option<(String, String)> {
    let i = e.internal().filter(|i| i.label == label)?;
    Some((i.param(key)?.to_string(), i.param("request").or(i.param("command"))?.to_string()))
}

/// The current event decides a value that differs from one already
/// decided at the same log index.
pub fn conflicting_decision() -> Condition {
    Condition::custom("conflicting_decision", |e, ctx| {
        let Some((idx, val)) = decision(e, pbft::ADD_TO_LOG, "index") else {
            return false;
        };
        ctx.event_history
            .iter()
            .filter_map(|p| decision(p, pbft::ADD_TO_LOG, "index"))
            .any(|(i, v)| i == idx && v != val)
    })
}

/// Replaces a Prepare with a forged one for the nil request.
pub fn change_prepare_to_nil() -> Action {
    Action::byzantine("change_prepare_to_nil", |e, ctx| {
        let fail = |reason: &str| ActionFailure {
            action: "change_prepare_to_nil".into(),
            reason: reason.into(),
        };
        let m = e.sent().ok_or_else(|| fail("not a send event"))?;
        let Some(PbftMessage::Prepare { view, index, .. }) = PbftMessage::decode(m) else {
            return Err(fail("not a Prepare"));
        };
        let nil = PbftMessage::Prepare {
            view,
            index,
            request: pbft::NIL.into(),
        };
        Ok(vec![ctx.forge(m.from, m.to, pbft::PREPARE, nil.encode())])
    })
}

/// Agreement: succeeds once some replica decides, fails if two replicas
/// decide different values at the same index.
pub fn agreement_machine() -> AssertionStateMachine {
    let mut sm = AssertionStateMachine::new();
    let init = sm.initial();
    sm.on(init, conflicting_decision(), crate::statemachine::FAIL)
        .expect("fresh machine");
    let decided = sm
        .on(init, is_event_type(pbft::ADD_TO_LOG), "Decided")
        .expect("fresh machine");
    sm.on(decided, conflicting_decision(), crate::statemachine::FAIL)
        .expect("fresh machine");
    sm.mark_success(decided).expect("not fail");
    sm
}

/// Whether two replicas decide different values at one index in `events`.
pub fn violates_agreement<'a>(events: impl IntoIterator<Item = &'a Event>) -> bool {
    let mut seen: std::collections::BTreeMap<String, String> = Default::default();
    for e in events {
        if let Some((i, v)) = decision(e, pbft::ADD_TO_LOG, "index") {
            if seen.get(&i).is_some_and(|w| *w != v) {
                return true;
            }
            seen.entry(i).or_insert(v);
        }
    }
    false
}

fn prepare_to(p: ReplicaId) -> Condition {
    is_message_type(pbft::PREPARE).and(is_message_to(p))
}

/// A single backup whose Prepares are all lost times out alone: it asks for
/// view 1 and no new view is ever installed.
pub fn drop_prepare_one(_pb: &Pbft, p: ReplicaId) -> TestCase {
    let mut sm = AssertionStateMachine::new();
    let init = sm.initial();
    let once = sm
        .on(
            init,
            is_message_send().and(is_message_type(pbft::VIEW_CHANGE)).and(view(1)),
            "ViewChangeOnce",
        )
        .expect("fresh machine");
    let bad = is_message_type(pbft::NEW_VIEW).or(conflicting_decision());
    sm.on(init, bad.clone(), crate::statemachine::FAIL).expect("fresh machine");
    sm.on(once, bad.or(view_change_senders_at_least(1, 2)), crate::statemachine::FAIL)
        .expect("fresh machine");
    sm.mark_success(once).expect("not fail");
    TestCase::new(
        "drop-prepare-one",
        vec![when(prepare_to(p)).then(vec![drop_message()])],
        sm,
    )
    .describe(format!(
        "Prepares to {p} are dropped; {p} alone asks for view 1 and no NewView follows"
    ))
    .expect(Expectation::AtLeast(0.95))
}

/// With three backups starved of Prepares, the view-1 leader collects
/// enough ViewChange votes and broadcasts NewView(1).
pub fn drop_prepare_three(pb: &Pbft, targets: [ReplicaId; 3]) -> TestCase {
    let mut sm = AssertionStateMachine::new();
    let init = sm.initial();
    let expected = sm
        .on(init, view_change_senders_at_least(1, pb.quorum()), "ViewChangeExpected")
        .expect("fresh machine");
    sm.on(init, conflicting_decision(), crate::statemachine::FAIL)
        .expect("fresh machine");
    let seen = sm
        .on(
            expected,
            is_message_send().and(is_message_type(pbft::NEW_VIEW)).and(view(1)),
            "NewViewSeen",
        )
        .expect("fresh machine");
    sm.on(expected, conflicting_decision(), crate::statemachine::FAIL)
        .expect("fresh machine");
    sm.on(seen, conflicting_decision(), crate::statemachine::FAIL)
        .expect("fresh machine");
    sm.mark_success(seen).expect("not fail");
    let cond = targets
        .iter()
        .map(|t| is_message_to(*t))
        .reduce(Condition::or)
        .expect("three targets");
    TestCase::new(
        "drop-prepare-three",
        vec![when(is_message_type(pbft::PREPARE).and(cond)).then(vec![drop_message()])],
        sm,
    )
    .describe("Prepares to three backups are dropped; the view-1 leader broadcasts NewView(1)")
    .expect(Expectation::AtLeast(0.95))
}

/// One replica's Prepares are rewritten to the nil request. With f = 1
/// the correct replicas still agree on alpha.
pub fn byzantine_nil_prepare(_pb: &Pbft, b: ReplicaId) -> TestCase {
    TestCase::new(
        "byzantine-nil-prepare",
        vec![when(is_message_send().and(is_message_type(pbft::PREPARE)).and(is_message_from(b)))
            .then(vec![change_prepare_to_nil()])],
        agreement_machine(),
    )
    .describe(format!("{b} sends nil Prepares; agreement must hold"))
    .expect(Expectation::AtLeast(0.95))
}

/// Holds the view-0 PrePrepare to `r` until a PrePrepare of a later view
/// is sent.
pub fn delay_preprepare(_pb: &Pbft, r: ReplicaId) -> TestCase {
    let held = MessageSet::new("held_preprepare");
    TestCase::new(
        "delay-preprepare",
        vec![
            when(
                is_message_send()
                    .and(is_message_type(pbft::PRE_PREPARE))
                    .and(is_message_to(r))
                    .and(view(0)),
            )
            .then(vec![held.store()]),
            when(
                is_message_send()
                    .and(is_message_type(pbft::PRE_PREPARE))
                    .and(view_at_least(1)),
            )
            .then(vec![held.deliver_all(), Action::DeliverMessage]),
        ],
        agreement_machine(),
    )
    .describe(format!("the view-0 PrePrepare to {r} is held until view 1 starts"))
    .expect(Expectation::AtLeast(0.95))
}

/// Count of receive events of view-`v` Prepares so far.
fn prepares_received(v: u64, ctx: &MonitorContext) -> usize {
    ctx.event_history
        .iter()
        .filter_map(|e| e.received())
        .filter(|m| matches!(PbftMessage::decode(m), Some(PbftMessage::Prepare { view, .. }) if view == v))
        .count()
}

/// All `count` view-`v` Prepares have been received.
pub fn prepares_received_at_least(v: u64, count: usize) -> Condition {
    Condition::custom(format!("prepares_received_at_least({v}, {count})"), move |_, ctx| {
        prepares_received(v, ctx) >= count
    })
}

/// No filters. Succeeds only if view 1 begins before any view-0 Prepare is
/// delivered and every view-0 Prepare is delivered afterwards, a schedule
/// that random testing should essentially never produce.
pub fn late_prepares_baseline(pb: &Pbft) -> TestCase {
    let mut sm = AssertionStateMachine::new();
    let init = sm.initial();
    sm.on(
        init,
        is_message_receive().and(is_message_type(pbft::PREPARE)).and(view(0)),
        crate::statemachine::FAIL,
    )
    .expect("fresh machine");
    let begun = sm
        .on(
            init,
            is_message_send().and(is_message_type(pbft::NEW_VIEW)).and(view(1)),
            "ViewOneBegun",
        )
        .expect("fresh machine");
    let all = pb.requests.len() * pb.n * (pb.n - 1);
    let late = sm
        .on(begun, prepares_received_at_least(0, all), "AllPreparesLate")
        .expect("fresh machine");
    sm.mark_success(late).expect("not fail");
    TestCase::new("late-prepares-baseline", vec![], sm)
        .describe("no filters; counts runs delivering every view-0 Prepare after view 1 begins")
        .expect(Expectation::AtMost(0.01))
}

pub fn pbft_cases(pb: &Pbft) -> Vec<TestCase> {
    let last = ReplicaId(pb.n - 1);
    let mut cases = vec![drop_prepare_one(pb, last)];
    if pb.n >= 4 {
        cases.push(drop_prepare_three(pb, [ReplicaId(1), ReplicaId(2), ReplicaId(3)]));
    }
    cases.push(byzantine_nil_prepare(pb, ReplicaId(1)));
    cases.push(delay_preprepare(pb, last));
    cases.push(late_prepares_baseline(pb));
    cases
}

fn u64_arg(args: &[String], i: usize) -> Result<u64, String> {
    let a = args.get(i).ok_or_else(|| format!("missing argument {}", i + 1))?;
    a.parse().map_err(|_| format!("`{a}` is not a number"))
}

pub fn pbft_registry(_pb: &Pbft) -> DslRegistry {
    let mut reg = DslRegistry::new();
    reg.condition("view", |a| Ok(view(u64_arg(a, 0)?)))
        .condition("view_at_least", |a| Ok(view_at_least(u64_arg(a, 0)?)))
        .condition("view_change_senders_at_least", |a| {
            Ok(view_change_senders_at_least(u64_arg(a, 0)?, u64_arg(a, 1)? as usize))
        })
        .condition("prepares_received_at_least", |a| {
            Ok(prepares_received_at_least(u64_arg(a, 0)?, u64_arg(a, 1)? as usize))
        })
        .condition("conflicting_decision", |a| {
            if a.is_empty() {
                Ok(conflicting_decision())
            } else {
                Err("conflicting_decision takes no arguments".into())
            }
        })
        .action("change_prepare_to_nil", |a| {
            if a.is_empty() {
                Ok(change_prepare_to_nil())
            } else {
                Err("change_prepare_to_nil takes no arguments".into())
            }
        });
    reg
}

/// The message carries term `t`.
pub fn term(t: u64) -> Condition {
    Condition::custom(format!("term({t})"), move |e, _| raft_of(e).is_some_and(|m| m.term() == t))
}

pub fn term_at_least(t: u64) -> Condition {
    Condition::custom(format!("term_at_least({t})"), move |e, _| {
        raft_of(e).is_some_and(|m| m.term() >= t)
    })
}

fn leader_term(e: &Event) -> Option<u64> {
    e.internal()
        .filter(|i| i.label == raft::BECOME_LEADER)?
        .param("term")?
        .parse()
        .ok()
}

/// The current event makes a replica leader of a term that already has one.
pub fn second_leader_in_term() -> Condition {
    Condition::custom("second_leader_in_term", |e, ctx| {
        let Some(t) = leader_term(e) else {
            return false;
        };
        ctx.event_history
            .iter()
            .filter(|p| p.replica != e.replica)
            .any(|p| leader_term(p) == Some(t))
    })
}

/// A replica becomes leader of a term `>= t`.
pub fn leader_elected_from(t: u64) -> Condition {
    Condition::custom(format!("leader_elected_from({t})"), move |e, _| {
        leader_term(e).is_some_and(|x| x >= t)
    })
}

/// Election safety: success once a leader of a term `>= min_term` is
/// elected, failure on two leaders in one term.
pub fn election_machine(min_term: u64) -> AssertionStateMachine {
    let mut sm = AssertionStateMachine::new();
    let init = sm.initial();
    sm.on(init, second_leader_in_term(), crate::statemachine::FAIL)
        .expect("fresh machine");
    let elected = sm
        .on(init, leader_elected_from(min_term), "LeaderElected")
        .expect("fresh machine");
    sm.on(elected, second_leader_in_term(), crate::statemachine::FAIL)
        .expect("fresh machine");
    sm.mark_success(elected).expect("not fail");
    sm
}

/// Drops the first `f` vote replies; the candidate still gathers a
/// majority and is elected in term 1.
pub fn drop_f_votes(r: &Raft) -> TestCase {
    let c = Count::new("dropped_votes");
    TestCase::new(
        "drop-f-votes",
        vec![when(
            is_message_send()
                .and(is_message_type(raft::REQUEST_VOTE_REPLY))
                .and(c.lt(r.f() as i64)),
        )
        .then(vec![c.incr(), drop_message()])],
        election_machine(1),
    )
    .describe(format!("the first {} vote replies are dropped; a leader is still elected", r.f()))
    .expect(Expectation::AtLeast(0.95))
}

/// Holds every term-1 vote reply until a term-2 election starts, so the
/// first candidate cannot win its own term in time.
pub fn revote(_r: &Raft) -> TestCase {
    let held = MessageSet::new("held_votes");
    TestCase::new(
        "revote",
        vec![
            when(
                is_message_send()
                    .and(is_message_type(raft::REQUEST_VOTE_REPLY))
                    .and(term(1)),
            )
            .then(vec![held.store()]),
            when(
                is_message_send()
                    .and(is_message_type(raft::REQUEST_VOTE))
                    .and(term_at_least(2)),
            )
            .then(vec![held.deliver_all(), Action::DeliverMessage]),
        ],
        election_machine(2),
    )
    .describe("term-1 votes are released only once term 2 starts; a later term elects a leader")
    .expect(Expectation::AtLeast(0.9))
}

pub fn raft_cases(r: &Raft) -> Vec<TestCase> {
    vec![drop_f_votes(r), revote(r)]
}

pub fn raft_registry(_r: &Raft) -> DslRegistry {
    let mut reg = DslRegistry::new();
    reg.condition("term", |a| Ok(term(u64_arg(a, 0)?)))
        .condition("term_at_least", |a| Ok(term_at_least(u64_arg(a, 0)?)))
        .condition("leader_elected_from", |a| Ok(leader_elected_from(u64_arg(a, 0)?)))
        .condition("second_leader_in_term", |a| {
            if a.is_empty() {
                Ok(second_leader_in_term())
            } else {
                Err("second_leader_in_term takes no arguments".into())
            }
        });
    reg
}
