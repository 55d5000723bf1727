//! `nettest`: run unit-test suites against toy consensus protocols, record
//! executions, check replay monitors and compute filter distances.

use std::fs;
use std::path::PathBuf;
use std::process::{Child, Command, ExitCode, Stdio};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nettest_core::driver::distance::{filter_distances, FilterRole};
use nettest_core::driver::{run_iteration, run_suite, run_suite_on, DriverConfig, SuiteReport, TestCase};
use nettest_core::dsl::parse_filters;
use nettest_core::pctcp::Strategy;
use nettest_core::protocols::{Protocol, ProtocolKind};
use nettest_core::replay::{mutation_target, Gate};
use nettest_core::{history_of, ExecutionTrace, ReplicaId};
use nettest_rpc::{ApiServer, RemoteBackend, BIND_ENV};

#[derive(Parser)]
#[command(name = "nettest", version, about = "Programmer-guided unit tests for consensus protocols")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a test case for a number of seeded iterations.
    Run(RunArgs),
    /// List the test cases shipped for a protocol.
    List(ProtoArgs),
    /// Record an execution trace as JSON lines.
    Record(RecordArgs),
    /// Check that the replay monitor of a recorded run only produces prefixes of it.
    ReplayCheck(ReplayArgs),
    /// Print the filter distances of a test case.
    Distance(DistanceArgs),
    /// Print the history of a recorded trace as JSON or DOT.
    History(HistoryArgs),
    /// Serve one replica over HTTP for rpc mode.
    Stub(StubArgs),
}

#[derive(Args, Clone)]
struct ProtoArgs {
    #[arg(long, default_value = "pbft")]
    protocol: ProtocolKind,
    /// Number of replicas (pbft: 4, raft: 5 when omitted).
    #[arg(long)]
    n: Option<usize>,
}

impl ProtoArgs {
    fn build(&self) -> Result<Protocol> {
        Ok(Protocol::new(self.protocol, self.n)?)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Inproc,
    Rpc,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    proto: ProtoArgs,
    #[arg(long = "test")]
    test: String,
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    iterations: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Overrides the test case's step budget.
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long, default_value_t = 10)]
    depth: usize,
    #[arg(long = "event-bound", default_value_t = 1000)]
    event_bound: u64,
    #[arg(long, default_value = "pctcp")]
    strategy: Strategy,
    #[arg(long, value_enum, default_value = "inproc")]
    mode: Mode,
    /// Worker threads for in-process mode.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Replaces the test case's filters with those parsed from this file.
    #[arg(long)]
    filters: Option<PathBuf>,
    /// Where to write the JSON report.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Print one row per iteration.
    #[arg(long, short)]
    verbose: bool,
    /// API server bind address in rpc mode.
    #[arg(long, env = BIND_ENV, default_value = "127.0.0.1:0")]
    bind: String,
}

#[derive(Args)]
struct RecordArgs {
    #[command(flatten)]
    proto: ProtoArgs,
    #[arg(long)]
    out: PathBuf,
    /// Record an iteration of this test case instead of the fault-free run.
    #[arg(long = "test")]
    test: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10_000)]
    budget: usize,
}

#[derive(Args)]
struct ReplayArgs {
    #[command(flatten)]
    proto: ProtoArgs,
    #[arg(long)]
    trace: PathBuf,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Release one received message without waiting for its causal past.
    #[arg(long = "mutate-gate")]
    mutate_gate: bool,
}

#[derive(Args)]
struct DistanceArgs {
    #[command(flatten)]
    proto: ProtoArgs,
    #[arg(long = "test")]
    test: String,
}

#[derive(Args)]
struct HistoryArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    dot: bool,
}

#[derive(Args)]
struct StubArgs {
    #[command(flatten)]
    proto: ProtoArgs,
    #[arg(long)]
    id: usize,
    /// Base URL of the API server.
    #[arg(long)]
    server: String,
    #[arg(long, default_value = "127.0.0.1:0")]
    bind: String,
}

/// An unknown test case or a bad flag combination.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn lookup(p: &Protocol, name: &str) -> Result<TestCase> {
    p.testcase(name).ok_or_else(|| {
        let known: Vec<String> = p.testcases().into_iter().map(|t| t.name).collect();
        Usage(format!("unknown test `{name}` for {}; known: {}", p.kind(), known.join(", "))).into()
    })
}

/// Child stub processes, killed on drop.
struct Stubs(Vec<Child>);

impl Drop for Stubs {
    fn drop(&mut self) {
        for c in &mut self.0 {
            let _ = c.kill();
            let _ = c.wait();
        }
    }
}

fn spawn_stubs(args: &ProtoArgs, n: usize, server: &str) -> Result<Stubs> {
    let exe = std::env::current_exe().context("locating the nettest binary")?;
    let mut stubs = Stubs(Vec::new());
    for id in 0..n {
        let mut cmd = Command::new(&exe);
        cmd.arg("stub")
            .arg("--protocol")
            .arg(args.protocol.to_string())
            .arg("--id")
            .arg(id.to_string())
            .arg("--server")
            .arg(server)
            .stdout(Stdio::null());
        if let Some(n) = args.n {
            cmd.arg("--n").arg(n.to_string());
        }
        stubs.0.push(cmd.spawn().with_context(|| format!("starting stub {id}"))?);
    }
    Ok(stubs)
}

fn cmd_run(a: RunArgs) -> Result<ExitCode> {
    let p = a.proto.build()?;
    let mut tc = lookup(&p, &a.test)?;
    if let Some(path) = &a.filters {
        let src = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        tc.filters = parse_filters(&src, &p.registry()).with_context(|| format!("parsing {}", path.display()))?;
    }
    if let Some(b) = a.budget {
        tc = tc.with_budget(b);
    }
    let cfg = DriverConfig {
        event_bound: a.event_bound,
        depth: a.depth,
        strategy: a.strategy,
    };
    let iterations = a.iterations as usize;
    let report = match a.mode {
        Mode::Inproc => {
            let p2 = p.clone();
            run_suite(&tc, move || p2.backend(), &cfg, a.seed, iterations, a.jobs.max(1))
        }
        Mode::Rpc => {
            let server = ApiServer::start(&a.bind)?;
            let _stubs = spawn_stubs(&a.proto, p.replica_count(), &server.url())?;
            let mut backend = RemoteBackend::connect(server, p.replica_count(), Duration::from_secs(30))?;
            run_suite_on(&tc, &mut backend, &cfg, a.seed, iterations)
        }
    };
    if let Some(path) = &a.report {
        write_report(path, &report)?;
    }
    print_report(&report, a.verbose);
    Ok(if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn write_report(path: &PathBuf, report: &SuiteReport) -> Result<()> {
    let json = serde_json::to_string_pretty(report)?;
    fs::write(path, json + "\n").with_context(|| format!("writing {}", path.display()))
}

fn print_report(report: &SuiteReport, verbose: bool) {
    if verbose {
        print!("{}", report.render());
    } else {
        println!(
            "{} {} (expect {}) {}",
            report.testcase,
            report.summary(),
            report.expectation,
            if report.passed() { "PASS" } else { "FAIL" }
        );
    }
}

fn cmd_list(a: ProtoArgs) -> Result<ExitCode> {
    let p = a.build()?;
    for tc in p.testcases() {
        println!("{:<24} {}", tc.name, tc.description);
        for f in &tc.filters {
            println!("    {f}");
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_record(a: RecordArgs) -> Result<ExitCode> {
    let p = a.proto.build()?;
    let trace = match &a.test {
        None => p.normal_run(a.budget),
        Some(name) => {
            let tc = lookup(&p, name)?.with_budget(a.budget);
            let mut b = p.backend();
            run_iteration(&tc, b.as_mut(), &DriverConfig::default(), a.seed).trace
        }
    };
    fs::write(&a.out, trace.to_jsonl()).with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "recorded {} steps, {} events, complete={} -> {}",
        trace.len(),
        trace.events().count(),
        trace.complete,
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn read_trace(path: &PathBuf) -> Result<ExecutionTrace> {
    let src = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(ExecutionTrace::from_jsonl(&src)?)
}

fn cmd_replay(a: ReplayArgs) -> Result<ExitCode> {
    let p = a.proto.build()?;
    let h = history_of(&read_trace(&a.trace)?)?;
    let gate = if a.mutate_gate {
        let m = mutation_target(&h).context("the history delivers no message")?;
        println!("gate disabled for {m}");
        Gate::SkipFor(m)
    } else {
        Gate::CausalPast
    };
    let r = p.check_replay(&h, a.trials, a.seed, gate)?;
    let verdict = if r.holds() { "PASS" } else { "FAIL" };
    println!("prefix: {}/{} {verdict}", r.prefix_trials, r.trials);
    println!("full replays: {}/{}", r.full_trials, r.trials);
    if let Some(c) = &r.counterexample {
        println!("counterexample: trial {} step {}: {}", c.trial, c.step, c.reason);
        for e in &c.produced {
            println!("  {e}");
        }
    }
    Ok(if r.holds() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn cmd_distance(a: DistanceArgs) -> Result<ExitCode> {
    let p = a.proto.build()?;
    let tc = lookup(&p, &a.test)?;
    let normal = p.normal_run(100_000);
    let codec = p.codec();
    let sends = normal.events().filter(|e| e.sent().is_some()).count();
    println!("{} ({} messages in the fault-free run)", tc.name, sends);
    for row in filter_distances(&tc.filters, &normal, codec.as_ref()) {
        let role = match &row.role {
            FilterRole::Capture(s) => format!("capture[{s}]"),
            FilterRole::Release(s) => format!("release[{s}]"),
            FilterRole::Drop => "drop".into(),
            FilterRole::Byzantine => "byzantine".into(),
            FilterRole::Other => "unknown".into(),
        };
        let d = match (&row.distance, &row.role) {
            (Some(d), _) => d.to_string(),
            (None, FilterRole::Release(_)) => "-".into(),
            (None, FilterRole::Other) => "unknown".into(),
            (None, _) => "no match".into(),
        };
        println!("  #{:<2} {:<20} {:>8}  {}", row.filter, role, d, row.text);
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_history(a: HistoryArgs) -> Result<ExitCode> {
    let h = history_of(&read_trace(&a.trace)?)?;
    if a.dot {
        print!("{}", h.to_dot());
    } else {
        println!("{}", serde_json::to_string_pretty(&h.export())?);
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_stub(a: StubArgs) -> Result<ExitCode> {
    let p = a.proto.build()?;
    if a.id >= p.replica_count() {
        bail!(Usage(format!("replica {} does not exist in a {}-replica run", a.id, p.replica_count())));
    }
    nettest_rpc::stub::run(p, ReplicaId(a.id), &a.bind, &a.server)?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Run(a) => cmd_run(a),
        Cmd::List(a) => cmd_list(a),
        Cmd::Record(a) => cmd_record(a),
        Cmd::ReplayCheck(a) => cmd_replay(a),
        Cmd::Distance(a) => cmd_distance(a),
        Cmd::History(a) => cmd_history(a),
        Cmd::Stub(a) => cmd_stub(a),
    };
    match res {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
