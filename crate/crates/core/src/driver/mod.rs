//! Runs test cases: the product of the protocol, the filter monitor and a
//! network that only moves unblocked messages.

mod audit;
mod backend;
pub mod distance;

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt::{self, Write as _};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use audit::{audit, AuditError};
pub use backend::{BackendError, InProcess, ReplicaBackend};

use crate::dsl::{apply_filters, ActionFailure, Filter, MonitorContext};
use crate::model::{Event, Message, MessageId, ReplicaId};
use crate::pctcp::{scheduler, DeliveryScheduler, PctcpError, ScheduleDump, Strategy};
use crate::statemachine::AssertionStateMachine;
use crate::trace::{ExecutionTrace, Rule, TraceStep};

pub type Setup = Arc<dyn Fn(&mut MonitorContext) + Send + Sync>;

/// Suite-level pass criterion on the number of successful iterations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "fraction", rename_all = "snake_case")]
pub enum Expectation {
    AtLeast(f64),
    AtMost(f64),
}

impl Expectation {
    pub fn holds(&self, successes: usize, total: usize) -> bool {
        let rate = if total == 0 {
            0.0
        } else {
            successes as f64 / total as f64
        };
        match self {
            Expectation::AtLeast(f) => rate >= *f,
            Expectation::AtMost(f) => rate <= *f,
        }
    }
}

impl fmt::Display for Expectation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expectation::AtLeast(x) => write!(f, ">= {:.0}%", x * 100.0),
            Expectation::AtMost(x) => write!(f, "<= {:.0}%", x * 100.0),
        }
    }
}

/// Filters, an assertion machine and run limits.
#[derive(Clone)]
pub struct TestCase {
    pub name: String,
    pub description: String,
    pub filters: Vec<Filter>,
    pub assertion: AssertionStateMachine,
    pub setup: Option<Setup>,
    pub step_budget: usize,
    pub expectation: Expectation,
}

impl TestCase {
    pub fn new(name: impl Into<String>, filters: Vec<Filter>, assertion: AssertionStateMachine) -> Self {
        TestCase {
            name: name.into(),
            description: String::new(),
            filters,
            assertion,
            setup: None,
            step_budget: 5_000,
            expectation: Expectation::AtLeast(1.0),
        }
    }

    pub fn describe(mut self, d: impl Into<String>) -> Self {
        self.description = d.into();
        self
    }

    pub fn with_setup(mut self, f: impl Fn(&mut MonitorContext) + Send + Sync + 'static) -> Self {
        self.setup = Some(Arc::new(f));
        self
    }

    pub fn with_budget(mut self, steps: usize) -> Self {
        self.step_budget = steps;
        self
    }

    pub fn expect(mut self, e: Expectation) -> Self {
        self.expectation = e;
        self
    }
}

impl fmt::Debug for TestCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TestCase")
            .field("name", &self.name)
            .field("filters", &self.filters)
            .field("step_budget", &self.step_budget)
            .finish()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DriverConfig {
    /// Bound on deliveries used to sample change points.
    pub event_bound: u64,
    pub depth: usize,
    pub strategy: Strategy,
}

impl Default for DriverConfig {
    fn default() -> Self {
        DriverConfig {
            event_bound: 1000,
            depth: 10,
            strategy: Strategy::Pctcp,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Success,
    Fail,
    Errored,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndReason {
    /// Every replica reached a final state.
    Complete,
    /// The step budget ran out.
    Budget,
    /// No move of the product system was enabled.
    Stalled,
    Error,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum DriverError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Action(#[from] ActionFailure),
    #[error(transparent)]
    Scheduler(#[from] PctcpError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationOutcome {
    pub seed: u64,
    pub verdict: Verdict,
    pub label: String,
    pub end: EndReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub events: usize,
    pub sent: usize,
    pub delivered: usize,
    pub steps: usize,
    pub counters: BTreeMap<String, i64>,
    pub schedule: ScheduleDump,
    #[serde(skip)]
    pub trace: ExecutionTrace,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Success => "success",
            Verdict::Fail => "fail",
            Verdict::Errored => "errored",
        })
    }
}

impl fmt::Display for EndReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EndReason::Complete => "complete",
            EndReason::Budget => "budget",
            EndReason::Stalled => "stalled",
            EndReason::Error => "error",
        })
    }
}

impl IterationOutcome {
    pub fn row(&self) -> String {
        let mut row = format!(
            "seed={} verdict={} state={} end={} events={} sent={} delivered={} steps={}",
            self.seed,
            self.verdict,
            self.label,
            self.end,
            self.events,
            self.sent,
            self.delivered,
            self.steps,
        );
        if let Some(e) = &self.error {
            let _ = write!(row, " error=\"{e}\"");
        }
        row
    }
}

struct Product<'a> {
    tc: &'a TestCase,
    backend: &'a mut dyn ReplicaBackend,
    sched: Box<dyn DeliveryScheduler>,
    ctx: MonitorContext,
    sm: AssertionStateMachine,
    queue: VecDeque<Event>,
    pool: BTreeMap<MessageId, Message>,
    blocked: BTreeSet<MessageId>,
    registered: BTreeSet<MessageId>,
    inboxes: Vec<VecDeque<Message>>,
    /// Everything that has ever been placed in an inbox.
    emitted: BTreeSet<MessageId>,
    causal: Vec<BTreeSet<MessageId>>,
    send_past: HashMap<MessageId, BTreeSet<MessageId>>,
    trace: ExecutionTrace,
    events: usize,
    sent: usize,
    delivered: usize,
}

impl<'a> Product<'a> {
    fn ingest(&mut self, events: Vec<Event>) {
        for e in events {
            let r = e.replica.0;
            let rule = if let Some(m) = e.sent() {
                let past = self.causal[r].clone();
                self.send_past.insert(m.id, past);
                self.causal[r].insert(m.id);
                self.pool.insert(m.id, m.clone());
                self.sent += 1;
                Rule::Send
            } else if let Some(m) = e.received() {
                if let Some(p) = self.send_past.get(&m.id) {
                    let p = p.clone();
                    self.causal[r].extend(p);
                }
                self.causal[r].insert(m.id);
                Rule::Receive
            } else {
                Rule::Internal
            };
            self.events += 1;
            self.queue.push_back(e.clone());
            self.trace.push(TraceStep::event(rule, e));
        }
    }

    fn enqueue(&mut self, m: Message) {
        self.emitted.insert(m.id);
        self.delivered += 1;
        self.inboxes[m.to.0].push_back(m);
    }

    /// Delivers a message returned by a filter action.
    fn deliver_from_monitor(&mut self, m: Message) -> Message {
        if let Some(pooled) = self.pool.remove(&m.id) {
            self.blocked.remove(&m.id);
            if self.registered.contains(&m.id) {
                self.sched.mark_delivered_externally(m.id);
            }
            // An action may have rewritten the contents under the same uid.
            let mut out = m;
            out.fictitious |= out != pooled;
            self.enqueue(out.clone());
            out
        } else if !self.emitted.contains(&m.id) && m.fictitious {
            self.enqueue(m.clone());
            m
        } else {
            let mut copy = m;
            copy.id = self.ctx.fresh_id();
            copy.fictitious = true;
            self.enqueue(copy.clone());
            copy
        }
    }

    fn monitor_step(&mut self, e: Event) -> Result<(), DriverError> {
        self.ctx.observe(&e);
        let res = apply_filters(&self.tc.filters, &e, &mut self.ctx)?;
        let mut delivered = Vec::new();
        for m in res.deliveries {
            delivered.push(self.deliver_from_monitor(m));
        }
        let mut blocked = None;
        if let Some(m) = e.sent() {
            if res.blocked {
                if self.pool.contains_key(&m.id) {
                    self.blocked.insert(m.id);
                    blocked = Some(m.id);
                }
            } else if res.matched.is_none() && self.pool.contains_key(&m.id) {
                let preds: Vec<MessageId> = self
                    .send_past
                    .get(&m.id)
                    .map(|p| p.intersection(&self.registered).copied().collect())
                    .unwrap_or_default();
                self.sched.register(m.id, &preds)?;
                self.registered.insert(m.id);
            }
        }
        self.sm.step(&e, &self.ctx);
        self.ctx.sm_state = self.sm.current_label().to_string();
        self.trace.push(TraceStep::monitor(e, delivered, blocked));
        Ok(())
    }

    fn all_final(&self) -> bool {
        (0..self.inboxes.len()).all(|r| self.backend.is_final(ReplicaId(r)))
    }

    fn receivable(&self) -> Option<ReplicaId> {
        (0..self.inboxes.len()).map(ReplicaId).find(|&r| {
            self.inboxes[r.0]
                .front()
                .is_some_and(|m| self.backend.can_receive(r, m))
        })
    }

    fn run(&mut self) -> Result<EndReason, DriverError> {
        let start = self.backend.reset()?;
        self.ingest(start);
        loop {
            if self.trace.len() >= self.tc.step_budget {
                return Ok(EndReason::Budget);
            }
            if let Some(e) = self.queue.pop_front() {
                self.monitor_step(e)?;
                continue;
            }
            if self.all_final() {
                return Ok(EndReason::Complete);
            }
            if let Some(r) = self.receivable() {
                let m = self.inboxes[r.0].pop_front().expect("receivable inbox is non-empty");
                let events = self.backend.receive(r, &m)?;
                match events.first().and_then(Event::received) {
                    Some(got) if got.id == m.id => {}
                    _ => {
                        return Err(BackendError::Protocol {
                            replica: r,
                            detail: format!("delivery of {} did not produce its receive", m.id),
                        }
                        .into())
                    }
                }
                self.ingest(events);
                continue;
            }
            let enabled: BTreeSet<MessageId> = self
                .pool
                .keys()
                .filter(|id| self.registered.contains(id) && !self.blocked.contains(id))
                .copied()
                .collect();
            if let Some(id) = self.sched.next_delivery(&enabled) {
                let m = self.pool.remove(&id).expect("enabled messages are pooled");
                self.sched.notify_delivered(id)?;
                self.trace.push(TraceStep::network(Rule::NetworkNb, m.clone()));
                self.enqueue(m);
                continue;
            }
            if let Some(r) = (0..self.inboxes.len())
                .map(ReplicaId)
                .find(|&r| self.backend.timeout_enabled(r))
            {
                let events = self.backend.timeout(r)?;
                self.ingest(events);
                continue;
            }
            return Ok(EndReason::Stalled);
        }
    }
}

/// Runs one iteration of `tc` with the given seed.
pub fn run_iteration(
    tc: &TestCase,
    backend: &mut dyn ReplicaBackend,
    cfg: &DriverConfig,
    seed: u64,
) -> IterationOutcome {
    let n = backend.replica_count();
    let sched = match scheduler(cfg.strategy, seed, cfg.event_bound, cfg.depth) {
        Ok(s) => s,
        Err(e) => {
            return IterationOutcome {
                seed,
                verdict: Verdict::Errored,
                label: tc.assertion.current_label().to_string(),
                end: EndReason::Error,
                error: Some(e.to_string()),
                events: 0,
                sent: 0,
                delivered: 0,
                steps: 0,
                counters: BTreeMap::new(),
                schedule: crate::pctcp::RandomWalk::new(seed).dump(),
                trace: ExecutionTrace::new(n),
            }
        }
    };
    let mut ctx = MonitorContext::new();
    if let Some(setup) = &tc.setup {
        setup(&mut ctx);
    }
    let mut sm = tc.assertion.clone();
    sm.reset();
    ctx.sm_state = sm.current_label().to_string();
    let mut p = Product {
        tc,
        backend,
        sched,
        ctx,
        sm,
        queue: VecDeque::new(),
        pool: BTreeMap::new(),
        blocked: BTreeSet::new(),
        registered: BTreeSet::new(),
        inboxes: vec![VecDeque::new(); n],
        emitted: BTreeSet::new(),
        causal: vec![BTreeSet::new(); n],
        send_past: HashMap::new(),
        trace: ExecutionTrace::new(n),
        events: 0,
        sent: 0,
        delivered: 0,
    };
    let result = p.run();
    let (end, error) = match result {
        Ok(end) => (end, None),
        Err(e) => (EndReason::Error, Some(e.to_string())),
    };
    p.trace.complete = end == EndReason::Complete;
    let verdict = if error.is_some() {
        Verdict::Errored
    } else if p.sm.is_accepting() {
        Verdict::Success
    } else {
        Verdict::Fail
    };
    IterationOutcome {
        seed,
        verdict,
        label: p.sm.current_label().to_string(),
        end,
        error,
        events: p.events,
        sent: p.sent,
        delivered: p.delivered,
        steps: p.trace.len(),
        counters: p.ctx.counters().clone(),
        schedule: p.sched.dump(),
        trace: p.trace,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub testcase: String,
    pub config: DriverConfig,
    pub expectation: Expectation,
    pub outcomes: Vec<IterationOutcome>,
}

impl SuiteReport {
    pub fn total(&self) -> usize {
        self.outcomes.len()
    }

    pub fn successes(&self) -> usize {
        self.count(Verdict::Success)
    }

    pub fn count(&self, v: Verdict) -> usize {
        self.outcomes.iter().filter(|o| o.verdict == v).count()
    }

    /// `k/N` over all iterations.
    pub fn summary(&self) -> String {
        format!("{}/{}", self.successes(), self.total())
    }

    pub fn passed(&self) -> bool {
        self.count(Verdict::Errored) == 0 && self.expectation.holds(self.successes(), self.total())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "testcase {} strategy={} depth={} event_bound={}",
            self.testcase, self.config.strategy, self.config.depth, self.config.event_bound
        );
        for (i, o) in self.outcomes.iter().enumerate() {
            let _ = writeln!(out, "  #{i:<4} {}", o.row());
        }
        let _ = writeln!(
            out,
            "{} {} passed (expect {}, errored {}) => {}",
            self.testcase,
            self.summary(),
            self.expectation,
            self.count(Verdict::Errored),
            if self.passed() { "PASS" } else { "FAIL" }
        );
        out
    }

    pub fn schedules(&self) -> Vec<&ScheduleDump> {
        self.outcomes.iter().map(|o| &o.schedule).collect()
    }
}

/// Runs `iterations` seeds starting at `base_seed`. With `jobs > 1` the
/// iterations are spread over a thread pool, each with its own backend.
pub fn run_suite<F>(
    tc: &TestCase,
    make_backend: F,
    cfg: &DriverConfig,
    base_seed: u64,
    iterations: usize,
    jobs: usize,
) -> SuiteReport
where
    F: Fn() -> Box<dyn ReplicaBackend> + Sync,
{
    let seeds: Vec<u64> = (0..iterations as u64).map(|i| base_seed.wrapping_add(i)).collect();
    let outcomes = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .expect("thread pool");
        pool.install(|| {
            seeds
                .par_iter()
                .map_init(&make_backend, |b, &s| run_iteration(tc, b.as_mut(), cfg, s))
                .collect()
        })
    } else {
        let mut b = make_backend();
        return run_suite_on(tc, b.as_mut(), cfg, base_seed, iterations);
    };
    SuiteReport {
        testcase: tc.name.clone(),
        config: *cfg,
        expectation: tc.expectation,
        outcomes,
    }
}

/// Runs the iterations one after another on an existing backend, such as a
/// cluster of remote replicas that cannot be duplicated.
pub fn run_suite_on(
    tc: &TestCase,
    backend: &mut dyn ReplicaBackend,
    cfg: &DriverConfig,
    base_seed: u64,
    iterations: usize,
) -> SuiteReport {
    let outcomes = (0..iterations as u64)
        .map(|i| run_iteration(tc, backend, cfg, base_seed.wrapping_add(i)))
        .collect();
    SuiteReport {
        testcase: tc.name.clone(),
        config: *cfg,
        expectation: tc.expectation,
        outcomes,
    }
}
