//! Acceptance suite. Each test checks one criterion and prints a single
//! `criterion N ... PASS|FAIL` line; run with `--nocapture` to see them.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::process::Command;
use std::time::{Duration, Instant};

use nettest_core::driver::distance::{filter_distances, Distance, FilterRole};
use nettest_core::driver::{run_suite, DriverConfig, IterationOutcome, SuiteReport, Verdict};
use nettest_core::dsl::{
    apply_filters, deliver_message, drop_message, is_event_type, is_message_from, is_message_receive,
    is_message_send, is_message_to, is_message_type, when, Condition, Count, MessageSet, MonitorContext,
};
use nettest_core::pctcp::{DeliveryScheduler, Pctcp};
use nettest_core::protocols::cases::{agreement_machine, violates_agreement};
use nettest_core::protocols::pbft::{self, PbftMessage};
use nettest_core::protocols::raft::{self, RaftMessage};
use nettest_core::protocols::{Protocol, ProtocolKind};
use nettest_core::replay::{mutation_target, Gate};
use nettest_core::{
    history_of, Automaton, Configuration, Emit, Event, EventKey, EventKind, ExecutionTrace, History, Input,
    InternalEvent, Message, MessageId, Outgoing, ReplicaId, Transition,
};

fn verdict(n: u32, name: &str, ok: bool, detail: &str) {
    println!(
        "criterion {n} {name:<28} {}  {detail}",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok, "criterion {n} ({name}) failed: {detail}");
}

fn pbft4() -> Protocol {
    Protocol::new(ProtocolKind::Pbft, Some(4)).unwrap()
}

fn raft(n: usize) -> Protocol {
    Protocol::new(ProtocolKind::Raft, Some(n)).unwrap()
}

fn suite(p: &Protocol, name: &str, seed: u64, iterations: usize) -> SuiteReport {
    let tc = p.testcase(name).unwrap_or_else(|| panic!("no test case {name}"));
    let p2 = p.clone();
    run_suite(&tc, move || p2.backend(), &DriverConfig::default(), seed, iterations, 4)
}

fn pbft_sends(o: &IterationOutcome) -> Vec<(ReplicaId, PbftMessage)> {
    o.trace
        .events()
        .filter_map(|e| Some((e.replica, PbftMessage::decode(e.sent()?)?)))
        .collect()
}

// ---------------------------------------------------------------- 1

#[test]
fn criterion_1_replay_prefix() {
    let start = Instant::now();
    let p = pbft4();
    let normal = p.normal_run(100_000);
    // Record to the trace format and read it back, as the CLI does.
    let recorded = ExecutionTrace::from_jsonl(&normal.to_jsonl()).unwrap();
    let h = history_of(&recorded).unwrap();
    let decided = h
        .events()
        .iter()
        .filter(|e| e.internal().is_some_and(|i| i.label == pbft::ADD_TO_LOG))
        .count();
    let exact = p.check_replay(&h, 100, 7, Gate::CausalPast).unwrap();
    let target = mutation_target(&h).unwrap();
    let mutated = p.check_replay(&h, 100, 7, Gate::SkipFor(target)).unwrap();
    let elapsed = start.elapsed();
    let ok = h.is_complete()
        && decided == 4
        && exact.prefix_trials == 100
        && mutated.prefix_trials < 100
        && elapsed < Duration::from_secs(60);
    verdict(
        1,
        "replay prefix",
        ok,
        &format!(
            "{} events, gated {}/100, gate skipped for {target}: {} failing, {:.1?}",
            h.len(),
            exact.prefix_trials,
            mutated.trials - mutated.prefix_trials,
            elapsed
        ),
    );
}

// ---------------------------------------------------------------- 2

fn msg(from: usize, to: usize, mtype: &str, uid: u64) -> Message {
    Message {
        id: MessageId::Sent {
            replica: ReplicaId(from),
            seq: uid,
        },
        from: ReplicaId(from),
        to: ReplicaId(to),
        mtype: mtype.into(),
        payload: vec![1, 2, 3],
        fictitious: false,
    }
}

fn send(m: &Message) -> Event {
    Event {
        replica: m.from,
        seq: m.id_seq(),
        kind: EventKind::Send { message: m.clone() },
    }
}

fn recv(m: &Message, seq: u64) -> Event {
    Event {
        replica: m.to,
        seq,
        kind: EventKind::Receive { message: m.clone() },
    }
}

fn internal(r: usize, label: &str) -> Event {
    Event {
        replica: ReplicaId(r),
        seq: 9,
        kind: EventKind::Internal {
            internal: InternalEvent::new(label),
        },
    }
}

trait SeqOf {
    fn id_seq(&self) -> u64;
}

impl SeqOf for Message {
    fn id_seq(&self) -> u64 {
        match self.id {
            MessageId::Sent { seq, .. } => seq,
            MessageId::Injected(k) => k,
        }
    }
}

/// One row of the condition table: a condition with an (event, context) pair
/// on which it must hold and one on which it must not.
struct CondRow {
    row: &'static str,
    cond: Condition,
    pos: (Event, MonitorContext),
    neg: (Event, MonitorContext),
}

fn ctx() -> MonitorContext {
    MonitorContext::new()
}

fn ctx_counter(name: &str, v: i64) -> MonitorContext {
    let mut c = MonitorContext::new();
    c.set_counter(name, v);
    c
}

fn condition_rows() -> Vec<CondRow> {
    let prep = msg(0, 2, "Prepare", 1);
    let commit = msg(1, 3, "Commit", 2);
    let c = Count::new("c");
    let s = MessageSet::new("s");
    let mut in_set = ctx();
    in_set.store("s", prep.clone());
    vec![
        CondRow {
            row: "IsEventType(t)",
            cond: is_event_type("send"),
            pos: (send(&prep), ctx()),
            neg: (recv(&prep, 0), ctx()),
        },
        CondRow {
            row: "IsEventType(internal label)",
            cond: is_event_type("AddToLog"),
            pos: (internal(0, "AddToLog"), ctx()),
            neg: (internal(0, "Timeout"), ctx()),
        },
        CondRow {
            row: "IsMessageType(t)",
            cond: is_message_type("Prepare"),
            pos: (send(&prep), ctx()),
            neg: (send(&commit), ctx()),
        },
        CondRow {
            row: "IsMessageType(t) on receive",
            cond: is_message_type("Prepare"),
            pos: (recv(&prep, 4), ctx()),
            neg: (internal(0, "Prepare"), ctx()),
        },
        CondRow {
            row: "IsMessageSend",
            cond: is_message_send(),
            pos: (send(&prep), ctx()),
            neg: (recv(&prep, 0), ctx()),
        },
        CondRow {
            row: "IsMessageReceive",
            cond: is_message_receive(),
            pos: (recv(&prep, 0), ctx()),
            neg: (send(&prep), ctx()),
        },
        CondRow {
            row: "IsMessageFrom(r)",
            cond: is_message_from(ReplicaId(0)),
            pos: (recv(&prep, 0), ctx()),
            neg: (send(&commit), ctx()),
        },
        CondRow {
            row: "IsMessageFrom(r) internal",
            cond: is_message_from(ReplicaId(0)),
            pos: (send(&prep), ctx()),
            neg: (internal(0, "x"), ctx()),
        },
        CondRow {
            row: "IsMessageTo(r)",
            cond: is_message_to(ReplicaId(2)),
            pos: (send(&prep), ctx()),
            neg: (send(&commit), ctx()),
        },
        CondRow {
            row: "IsMessageTo(r) internal",
            cond: is_message_to(ReplicaId(2)),
            pos: (recv(&prep, 0), ctx()),
            neg: (internal(2, "x"), ctx()),
        },
        CondRow {
            row: "Count(c).Lt(v) unset",
            cond: c.lt(3),
            pos: (send(&prep), ctx()),
            neg: (send(&prep), ctx_counter("c", 3)),
        },
        CondRow {
            row: "Count(c).Gt(v)",
            cond: c.gt(3),
            pos: (send(&prep), ctx_counter("c", 4)),
            neg: (send(&prep), ctx_counter("c", 3)),
        },
        CondRow {
            row: "Count(c).Leq(v)",
            cond: c.leq(3),
            pos: (send(&prep), ctx_counter("c", 3)),
            neg: (send(&prep), ctx_counter("c", 4)),
        },
        CondRow {
            row: "Count(c).Geq(v)",
            cond: c.gte(3),
            pos: (send(&prep), ctx_counter("c", 3)),
            neg: (send(&prep), ctx_counter("c", 2)),
        },
        CondRow {
            row: "MessageSet(s).Contains",
            cond: s.contains(),
            pos: (send(&prep), in_set.clone()),
            neg: (send(&commit), in_set.clone()),
        },
        CondRow {
            row: "And(c1, c2)",
            cond: is_message_type("Prepare").and(is_message_to(ReplicaId(2))),
            pos: (send(&prep), ctx()),
            neg: (send(&msg(0, 1, "Prepare", 3)), ctx()),
        },
        CondRow {
            row: "Or(c1, c2)",
            cond: is_message_type("Prepare").or(is_message_type("Commit")),
            pos: (send(&commit), ctx()),
            neg: (send(&msg(0, 1, "ViewChange", 3)), ctx()),
        },
        CondRow {
            row: "Not(c)",
            cond: is_message_send().not(),
            pos: (recv(&prep, 0), ctx()),
            neg: (send(&prep), ctx()),
        },
    ]
}

fn ids(ms: &[Message]) -> Vec<MessageId> {
    ms.iter().map(|m| m.id).collect()
}

/// Checks one positive and one negative case of every action row. Returns
/// the names of the rows that misbehave.
fn action_rows() -> (usize, Vec<String>) {
    let prep = msg(0, 2, "Prepare", 1);
    let other = msg(1, 2, "Prepare", 5);
    let mut bad = Vec::new();
    let mut checked = 0;
    let mut check = |row: &str, ok: bool| {
        checked += 1;
        if !ok {
            bad.push(row.to_string());
        }
    };

    // DeliverMessage: {m} on send(m), nothing otherwise.
    let mut c = ctx();
    let r = apply_filters(&[when(is_message_send()).then(vec![deliver_message()])], &send(&prep), &mut c).unwrap();
    check("DeliverMessage +", ids(&r.deliveries) == vec![prep.id] && !r.blocked);
    let r = apply_filters(&[when(is_message_receive()).then(vec![deliver_message()])], &recv(&prep, 0), &mut c)
        .unwrap();
    check("DeliverMessage -", r.deliveries.is_empty() && !r.blocked);

    // DropMessage: nothing delivered and the sent message is blocked.
    let mut c = ctx();
    let r = apply_filters(&[when(is_message_send()).then(vec![drop_message()])], &send(&prep), &mut c).unwrap();
    check("DropMessage +", r.deliveries.is_empty() && r.blocked);
    let r = apply_filters(&[when(is_message_type("Commit")).then(vec![drop_message()])], &send(&prep), &mut c)
        .unwrap();
    check("DropMessage -", r.matched.is_none() && !r.blocked);

    // Count(c).Incr: bumps the counter and delivers nothing.
    let cnt = Count::new("c");
    let mut c = ctx();
    let r = apply_filters(&[when(is_message_send()).then(vec![cnt.incr()])], &send(&prep), &mut c).unwrap();
    check("Count.Incr +", c.counter("c") == 1 && r.deliveries.is_empty());
    let mut c = ctx();
    apply_filters(&[when(is_message_receive()).then(vec![cnt.incr()])], &send(&prep), &mut c).unwrap();
    check("Count.Incr -", c.counter("c") == 0);

    // MessageSet(s).Store: adds m, blocks it, delivers nothing.
    let set = MessageSet::new("s");
    let mut c = ctx();
    let r = apply_filters(&[when(is_message_send()).then(vec![set.store()])], &send(&prep), &mut c).unwrap();
    check("MessageSet.Store +", c.set_contains("s", prep.id) && r.blocked && r.deliveries.is_empty());
    let mut c = ctx();
    apply_filters(&[when(is_message_type("Commit")).then(vec![set.store()])], &send(&prep), &mut c).unwrap();
    check("MessageSet.Store -", c.set_len("s") == 0);

    // MessageSet(s).DeliverAll: returns the stored messages and empties the set.
    let mut c = ctx();
    c.store("s", prep.clone());
    let r = apply_filters(
        &[when(is_message_type("Prepare")).then(vec![set.deliver_all(), deliver_message()])],
        &send(&other),
        &mut c,
    )
    .unwrap();
    check(
        "MessageSet.DeliverAll +",
        ids(&r.deliveries) == vec![prep.id, other.id] && c.set_len("s") == 0 && !r.blocked,
    );
    let mut c = ctx();
    let r = apply_filters(&[when(is_message_send()).then(vec![set.deliver_all()])], &send(&other), &mut c).unwrap();
    check("MessageSet.DeliverAll -", r.deliveries.is_empty() && c.set_len("s") == 0 && r.blocked);

    // First match: only the first applicable filter runs.
    let mut c = ctx();
    let fs = [
        when(Condition::always()).then(vec![Count::new("a").incr()]),
        when(Condition::always()).then(vec![Count::new("b").incr()]),
    ];
    apply_filters(&fs, &send(&prep), &mut c).unwrap();
    check("first match", c.counter("a") == 1 && c.counter("b") == 0);
    (checked, bad)
}

#[test]
fn criterion_2_dsl_tables() {
    let rows = condition_rows();
    let mut bad = Vec::new();
    for r in &rows {
        let before = format!("{:?}", r.pos.1.counters());
        if !r.cond.eval(&r.pos.0, &r.pos.1) {
            bad.push(format!("{} +", r.row));
        }
        if r.cond.eval(&r.neg.0, &r.neg.1) {
            bad.push(format!("{} -", r.row));
        }
        if format!("{:?}", r.pos.1.counters()) != before {
            bad.push(format!("{} mutated the context", r.row));
        }
    }
    let (checked, bad_actions) = action_rows();
    bad.extend(bad_actions);
    verdict(
        2,
        "dsl tables",
        bad.is_empty(),
        &format!(
            "{} condition rows x2, {checked} action checks, failing: {bad:?}",
            rows.len()
        ),
    );
}

// ---------------------------------------------------------------- 3

fn agreement_fails(o: &IterationOutcome) -> bool {
    let mut sm = agreement_machine();
    let mut ctx = MonitorContext::new();
    let mut failed = false;
    for e in o.trace.events() {
        ctx.observe(e);
        sm.step(e, &ctx);
        failed |= sm.is_failed();
    }
    failed
}

#[test]
fn criterion_3_example_scenarios() {
    let p = pbft4();
    let one = suite(&p, "drop-prepare-one", 0, 100);
    let one_ok = one
        .outcomes
        .iter()
        .filter(|o| {
            let sends = pbft_sends(o);
            let vc1: BTreeSet<ReplicaId> = sends
                .iter()
                .filter(|(_, m)| matches!(m, PbftMessage::ViewChange { view: 1 }))
                .map(|(r, _)| *r)
                .collect();
            let nv = sends.iter().filter(|(_, m)| matches!(m, PbftMessage::NewView { .. })).count();
            o.verdict == Verdict::Success && vc1.len() == 1 && nv == 0
        })
        .count();

    let three = suite(&p, "drop-prepare-three", 0, 100);
    let three_ok = three
        .outcomes
        .iter()
        .filter(|o| {
            let nv1 = pbft_sends(o)
                .iter()
                .any(|(_, m)| matches!(m, PbftMessage::NewView { view: 1 }));
            o.verdict == Verdict::Success && o.label == "NewViewSeen" && nv1
        })
        .count();

    let mut runs = 0;
    let mut violations = 0;
    for proto in [pbft4(), raft(5)] {
        for tc in proto.testcases() {
            let r = suite(&proto, &tc.name, 0, 100);
            for o in &r.outcomes {
                runs += 1;
                if agreement_fails(o) || violates_agreement(o.trace.events()) {
                    violations += 1;
                }
            }
        }
    }
    verdict(
        3,
        "example scenarios",
        one_ok == 100 && three_ok == 100 && violations == 0,
        &format!(
            "one view change {one_ok}/100, new view {three_ok}/100, agreement failures {violations}/{runs}"
        ),
    );
}

// ---------------------------------------------------------------- 4

/// Whether every view-0 Prepare is received after the first view-1
/// NewView is sent, computed straight from the trace.
fn prepares_all_late(o: &IterationOutcome, n: usize) -> bool {
    let events: Vec<&Event> = o.trace.events().collect();
    let begin = events.iter().position(|e| {
        e.sent()
            .and_then(PbftMessage::decode)
            .is_some_and(|m| matches!(m, PbftMessage::NewView { view: 1 }))
    });
    let Some(begin) = begin else { return false };
    let late: Vec<usize> = events
        .iter()
        .enumerate()
        .filter(|(_, e)| {
            e.received()
                .and_then(PbftMessage::decode)
                .is_some_and(|m| matches!(m, PbftMessage::Prepare { view: 0, .. }))
        })
        .map(|(i, _)| i)
        .collect();
    late.len() == n * (n - 1) && late.iter().all(|&i| i > begin)
}

#[test]
fn criterion_4_baseline_contrast() {
    let p = pbft4();
    let r = suite(&p, "late-prepares-baseline", 0, 200);
    let by_machine = r.successes();
    let by_oracle = r.outcomes.iter().filter(|o| prepares_all_late(o, 4)).count();
    verdict(
        4,
        "baseline contrast",
        by_machine <= 2 && by_oracle <= 2 && r.total() == 200,
        &format!("machine {by_machine}/200, trace oracle {by_oracle}/200, tolerance 2/200"),
    );
}

// ---------------------------------------------------------------- 5

fn mid(k: u64) -> MessageId {
    MessageId::Sent {
        replica: ReplicaId(0),
        seq: k,
    }
}

/// Delivers a synthetic poset of two chains `0..5` and `5..10` to
/// completion and returns the delivery order.
fn drain(seed: u64) -> Vec<u64> {
    let preds: Vec<Vec<u64>> = (0..10u64)
        .map(|i| if i % 5 == 0 { vec![] } else { (i - i % 5..i).collect() })
        .collect();
    let mut s = Pctcp::new(seed, 10, 2).unwrap();
    for (i, p) in preds.iter().enumerate() {
        let p: Vec<MessageId> = p.iter().copied().map(mid).collect();
        s.register(mid(i as u64), &p).unwrap();
    }
    let mut done: BTreeSet<u64> = BTreeSet::new();
    let mut order = Vec::new();
    while done.len() < 10 {
        let enabled: BTreeSet<MessageId> = (0..10u64)
            .filter(|i| !done.contains(i) && preds[*i as usize].iter().all(|p| done.contains(p)))
            .map(mid)
            .collect();
        let m = s.next_delivery(&enabled).unwrap();
        s.notify_delivered(m).unwrap();
        let MessageId::Sent { seq, .. } = m else { unreachable!() };
        done.insert(seq);
        order.push(seq);
    }
    order
}

/// Lower end of the 95% Wilson score interval.
fn wilson_lower(hits: usize, n: usize) -> f64 {
    let z = 1.959_964f64;
    let n = n as f64;
    let p = hits as f64 / n;
    let denom = 1.0 + z * z / n;
    let centre = p + z * z / (2.0 * n);
    let margin = z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt();
    (centre - margin) / denom
}

#[test]
fn criterion_5_hitting_bound() {
    let start = Instant::now();
    let runs: Vec<Vec<u64>> = (0..2000).map(drain).collect();
    let pos = |order: &[u64], m: u64| order.iter().position(|&x| x == m).unwrap();
    // The target: the last message of the second chain before the first of
    // the first chain, which needs the whole second chain to run first.
    let hits = runs.iter().filter(|o| pos(o, 9) < pos(o, 0)).count();
    let lower = wilson_lower(hits, runs.len());
    // Every other ordered pair across the chains, for the record.
    let mut worst = (1.0f64, (0, 0));
    for a in 0..10u64 {
        for b in 0..10u64 {
            if a / 5 == b / 5 {
                continue;
            }
            let h = runs.iter().filter(|o| pos(o, a) < pos(o, b)).count();
            let l = wilson_lower(h, runs.len());
            if l < worst.0 {
                worst = (l, (a, b));
            }
        }
    }
    let bound = 1.0 / (4.0 * 10.0);
    let elapsed = start.elapsed();
    verdict(
        5,
        "pctcp hitting bound",
        lower >= bound && elapsed < Duration::from_secs(30),
        &format!(
            "target hit {hits}/2000, wilson lower {lower:.4} >= {bound}; worst pair {:?} lower {:.4}; {:.1?}",
            worst.1, worst.0, elapsed
        ),
    );
}

// ---------------------------------------------------------------- 6

/// Distance of the revote capture filter computed from the fault-free run:
/// from the first term-1 vote reply to the first vote request of the next
/// term, which only exists in the run repeated one term later.
fn revote_oracle(normal: &ExecutionTrace) -> u64 {
    let sends: Vec<RaftMessage> = normal.events().filter_map(|e| RaftMessage::decode(e.sent()?)).collect();
    let len = sends.len() as u64;
    let first_reply = sends
        .iter()
        .position(|m| matches!(m, RaftMessage::RequestVoteReply { term: 1, .. }))
        .unwrap() as u64
        + 1;
    let first_request = sends
        .iter()
        .position(|m| matches!(m, RaftMessage::RequestVote { .. }))
        .unwrap() as u64
        + 1;
    len + first_request - first_reply
}

#[test]
fn criterion_6_raft_analogs() {
    let p5 = raft(5);
    let r = suite(&p5, "drop-f-votes", 0, 100);
    let elected = r
        .outcomes
        .iter()
        .filter(|o| {
            o.verdict == Verdict::Success
                && o.trace
                    .events()
                    .any(|e| e.internal().is_some_and(|i| i.label == raft::BECOME_LEADER))
        })
        .count();

    let mut dists = BTreeMap::new();
    let mut oracle = BTreeMap::new();
    for n in [3usize, 5, 7] {
        let p = raft(n);
        let tc = p.testcase("revote").unwrap();
        let normal = p.normal_run(100_000);
        let rows = filter_distances(&tc.filters, &normal, p.codec().as_ref());
        let d = rows
            .iter()
            .find(|r| matches!(r.role, FilterRole::Capture(_)))
            .and_then(|r| r.distance);
        dists.insert(n, d);
        oracle.insert(n, Distance::Finite(revote_oracle(&normal)));
    }
    let finite = |n: usize| match dists[&n] {
        Some(Distance::Finite(d)) => Some(d as i64),
        _ => None,
    };
    let linear = match (finite(3), finite(5), finite(7)) {
        (Some(a), Some(b), Some(c)) => b - a == c - b && b > a,
        _ => false,
    };
    let matches_oracle = [3, 5, 7].iter().all(|n| dists[n] == Some(oracle[n]));
    verdict(
        6,
        "raft analogs",
        elected >= 95 && linear && matches_oracle,
        &format!(
            "elected {elected}/100; revote distance n=3,5,7: {:?} (oracle {:?})",
            [3, 5, 7].map(finite),
            [3, 5, 7].map(|n| oracle[&n].to_string())
        ),
    );
}

// ---------------------------------------------------------------- 7

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
enum Do {
    Send(usize, &'static str),
    Note(&'static str),
}

/// A scripted replica: it runs its pending steps, and after each receive
/// queues the steps scripted for it, until it has received `expect`
/// messages.
#[derive(Clone)]
struct Script {
    initial: Vec<Vec<Do>>,
    on_receive: Vec<Vec<Do>>,
    expect: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct St {
    pending: Vec<Do>,
    received: usize,
    expect: usize,
}

impl Automaton for Script {
    type State = St;

    fn replica_count(&self) -> usize {
        self.expect.len()
    }

    fn initial_state(&self, r: ReplicaId) -> St {
        St {
            pending: self.initial[r.0].clone(),
            received: 0,
            expect: self.expect[r.0],
        }
    }

    fn step(&self, r: ReplicaId, s: &St, input: Input<'_>) -> Option<Transition<St>> {
        let mut next = s.clone();
        let emit = match input {
            Input::Internal => match next.pending.first()?.clone() {
                Do::Send(to, t) => {
                    next.pending.remove(0);
                    Emit::Send(Outgoing {
                        to: ReplicaId(to),
                        mtype: t.into(),
                        payload: Vec::new(),
                    })
                }
                Do::Note(l) => {
                    next.pending.remove(0);
                    Emit::Internal(InternalEvent::new(l))
                }
            },
            Input::Timeout => return None,
            Input::Message(_) => {
                if !s.pending.is_empty() || s.received >= s.expect {
                    return None;
                }
                next.received += 1;
                next.pending = self.on_receive[r.0].clone();
                Emit::Receive
            }
        };
        Some(Transition { state: next, emit })
    }

    fn is_final(&self, s: &St) -> bool {
        s.pending.is_empty() && s.received == s.expect
    }
}

fn models() -> Vec<(&'static str, Script)> {
    vec![
        (
            "relay",
            Script {
                initial: vec![vec![Do::Send(1, "a"), Do::Send(2, "a")], vec![], vec![]],
                on_receive: vec![vec![], vec![Do::Send(2, "b")], vec![Do::Note("got")]],
                expect: vec![0, 1, 2],
            },
        ),
        (
            "echo",
            Script {
                initial: vec![vec![Do::Send(1, "ping"), Do::Send(2, "ping")], vec![], vec![]],
                on_receive: vec![vec![], vec![Do::Send(0, "pong")], vec![Do::Send(0, "pong")]],
                expect: vec![2, 1, 1],
            },
        ),
        (
            "cross",
            Script {
                initial: vec![vec![Do::Send(1, "x")], vec![Do::Send(0, "y")]],
                on_receive: vec![vec![Do::Note("seen")], vec![Do::Note("seen")]],
                expect: vec![1, 1],
            },
        ),
    ]
}

/// Every distinct event list reachable in `a`, found by exhaustive search
/// over all moves.
fn enumerate(a: Script) -> Vec<Vec<Event>> {
    let mut out: BTreeMap<BTreeSet<EventKey>, Vec<Event>> = BTreeMap::new();
    let mut visited = HashSet::new();
    let mut stack = vec![(Configuration::new(a), Vec::<Event>::new())];
    while let Some((config, events)) = stack.pop() {
        let keys: BTreeSet<EventKey> = events.iter().map(Event::key).collect();
        if !visited.insert((config.fingerprint(), keys.clone())) {
            continue;
        }
        out.entry(keys).or_insert_with(|| events.clone());
        for mv in config.enabled_moves() {
            let mut c = config.clone();
            let step = c.apply(mv).unwrap();
            let mut ev = events.clone();
            if let Some(e) = step.event {
                ev.push(e);
            }
            assert!(ev.len() <= 8);
            stack.push((c, ev));
        }
    }
    out.into_values().collect()
}

/// Happens-before by definition: program order plus send before receive of
/// the same message, closed transitively.
fn brute_order(ev: &[Event]) -> Vec<Vec<bool>> {
    let n = ev.len();
    let mut r = vec![vec![false; n]; n];
    for i in 0..n {
        for j in 0..n {
            let program = ev[i].replica == ev[j].replica && ev[i].seq < ev[j].seq;
            let message = match (ev[i].sent(), ev[j].received()) {
                (Some(a), Some(b)) => a.id == b.id,
                _ => false,
            };
            r[i][j] = program || message;
        }
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if r[i][k] && r[k][j] {
                    r[i][j] = true;
                }
            }
        }
    }
    r
}

/// Prefix by definition: containment, downward closure and agreement of the
/// two orders on the smaller event set.
fn brute_prefix(a: &[Event], ra: &[Vec<bool>], b: &[Event], rb: &[Vec<bool>]) -> bool {
    let pos_b: BTreeMap<EventKey, usize> = b.iter().enumerate().map(|(i, e)| (e.key(), i)).collect();
    let keys_a: BTreeSet<EventKey> = a.iter().map(Event::key).collect();
    let Some(map): Option<Vec<usize>> = a.iter().map(|e| pos_b.get(&e.key()).copied()).collect() else {
        return false;
    };
    for &j in &map {
        for k in 0..b.len() {
            if rb[k][j] && !keys_a.contains(&b[k].key()) {
                return false;
            }
        }
    }
    for x in 0..a.len() {
        for y in 0..a.len() {
            if ra[x][y] != rb[map[x]][map[y]] {
                return false;
            }
        }
    }
    true
}

#[test]
fn criterion_7_history_oracles() {
    let mut all: Vec<(Vec<Event>, Vec<Vec<bool>>, History)> = Vec::new();
    let mut per_model = Vec::new();
    for (name, m) in models() {
        let lists = enumerate(m);
        per_model.push(format!("{name}={}", lists.len()));
        for ev in lists {
            let r = brute_order(&ev);
            let h = History::from_events(ev.clone()).unwrap();
            all.push((ev, r, h));
        }
    }
    let mut hb_checked = 0usize;
    let mut hb_bad = 0usize;
    for (ev, r, h) in &all {
        for i in 0..ev.len() {
            for j in 0..ev.len() {
                hb_checked += 1;
                if h.happens_before(&ev[i].key(), &ev[j].key()) != r[i][j] {
                    hb_bad += 1;
                }
            }
        }
    }
    let mut pairs = 0usize;
    let mut prefix_bad = 0usize;
    let mut prefixes = 0usize;
    for (ea, ra, ha) in &all {
        for (eb, rb, hb) in &all {
            pairs += 1;
            let want = brute_prefix(ea, ra, eb, rb);
            prefixes += usize::from(want);
            if ha.is_prefix_of(hb) != want {
                prefix_bad += 1;
            }
        }
    }
    verdict(
        7,
        "history oracles",
        hb_bad == 0 && prefix_bad == 0 && all.len() > 1,
        &format!(
            "histories {} ({}), order pairs {hb_checked} mismatches {hb_bad}, history pairs {pairs} ({prefixes} prefix) mismatches {prefix_bad}",
            all.len(),
            per_model.join(" ")
        ),
    );
}

// ---------------------------------------------------------------- 8

fn cli_run(mode: &str, report: &std::path::Path) -> (String, serde_json::Value) {
    let out = Command::new(env!("CARGO_BIN_EXE_nettest"))
        .args([
            "run",
            "--protocol",
            "pbft",
            "--n",
            "4",
            "--test",
            "drop-prepare-three",
            "--iterations",
            "100",
            "--seed",
            "0",
            "--mode",
            mode,
            "--bind",
            "127.0.0.1:0",
            "--report",
        ])
        .arg(report)
        .output()
        .expect("run nettest");
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(
        out.status.success(),
        "{mode} run failed: {stdout}{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let json = std::fs::read_to_string(report).unwrap();
    (stdout, serde_json::from_str(&json).unwrap())
}

fn k_of_n(v: &serde_json::Value) -> (usize, usize) {
    let outcomes = v["outcomes"].as_array().unwrap();
    let k = outcomes.iter().filter(|o| o["verdict"] == "success").count();
    (k, outcomes.len())
}

#[test]
fn criterion_8_mode_equivalence() {
    let dir = std::env::temp_dir().join(format!("nettest-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let (_, inproc) = cli_run("inproc", &dir.join("inproc.json"));
    let (_, rpc) = cli_run("rpc", &dir.join("rpc.json"));
    let _ = std::fs::remove_dir_all(&dir);
    let (a, b) = (k_of_n(&inproc), k_of_n(&rpc));
    verdict(
        8,
        "mode equivalence",
        a == b && a.1 == 100 && inproc == rpc,
        &format!(
            "in-process {}/{}, rpc with 4 stub processes {}/{}, reports identical: {}",
            a.0,
            a.1,
            b.0,
            b.1,
            inproc == rpc
        ),
    );
}

// ---------------------------------------------------------------- 9

#[test]
fn criterion_9_determinism() {
    let mut suites = 0;
    let mut differing = Vec::new();
    for p in [pbft4(), raft(5)] {
        for tc in p.testcases() {
            suites += 1;
            let cfg = DriverConfig::default();
            let serial = |seed| {
                let p2 = p.clone();
                run_suite(&tc, move || p2.backend(), &cfg, seed, 25, 1)
            };
            let a = serial(11);
            let b = serial(11);
            let p2 = p.clone();
            let c = run_suite(&tc, move || p2.backend(), &cfg, 11, 25, 4);
            let same = a == b
                && a == c
                && a.schedules() == b.schedules()
                && a.outcomes.iter().zip(&b.outcomes).all(|(x, y)| x.trace == y.trace);
            if !same {
                differing.push(tc.name.clone());
            }
        }
    }
    verdict(
        9,
        "determinism",
        differing.is_empty(),
        &format!("{suites} suites x 25 seeds rerun serially and in parallel; differing: {differing:?}"),
    );
}
