use std::time::Duration;

use nettest_core::driver::{run_suite, run_suite_on, DriverConfig, ReplicaBackend};
use nettest_core::protocols::{Protocol, ProtocolKind};
use nettest_core::{EventType, Message, MessageId, ReplicaId};
use nettest_rpc::stub::{self, StubHandle};
use nettest_rpc::{ApiServer, Directive, DirectiveAction, Dispatcher, RemoteBackend, RpcError, WireEvent, WireMessage};

const WAIT: Duration = Duration::from_secs(10);

fn pbft() -> Protocol {
    Protocol::new(ProtocolKind::Pbft, None).unwrap()
}

fn post(url: String, body: &impl serde::Serialize) -> reqwest::blocking::Response {
    reqwest::blocking::Client::new().post(url).json(body).send().unwrap()
}

fn message(from: usize, to: usize) -> Message {
    Message {
        id: MessageId::Sent {
            replica: ReplicaId(from),
            seq: 0,
        },
        from: ReplicaId(from),
        to: ReplicaId(to),
        mtype: "Ping".into(),
        payload: b"hi".to_vec(),
        fictitious: false,
    }
}

#[test]
fn events_from_unregistered_replicas_are_rejected() {
    let server = ApiServer::start("127.0.0.1:0").unwrap();
    let m = message(2, 0);
    let resp = post(format!("{}/message", server.url()), &WireMessage::from(&m));
    assert_eq!(resp.status().as_u16(), 403);
    let ev = nettest_core::Event {
        replica: ReplicaId(2),
        seq: 0,
        kind: nettest_core::EventKind::Send { message: m.clone() },
    };
    let resp = post(format!("{}/event", server.url()), &WireEvent::from(&ev));
    assert_eq!(resp.status().as_u16(), 403);
    assert!(resp.text().unwrap().contains("unknown replica"));
    assert!(server.try_next_event().is_none());

    let reg = nettest_rpc::Registration {
        id: 2,
        addr: "http://127.0.0.1:9".into(),
    };
    assert!(post(format!("{}/replica", server.url()), &reg).status().is_success());
    assert!(post(format!("{}/message", server.url()), &WireMessage::from(&m)).status().is_success());
    assert!(server.pool_contains(m.id));
    assert!(post(format!("{}/event", server.url()), &WireEvent::from(&ev)).status().is_success());
    assert_eq!(server.next_event(WAIT).unwrap(), ev);
}

#[test]
fn malformed_bodies_get_client_errors() {
    let server = ApiServer::start("127.0.0.1:0").unwrap();
    let resp = reqwest::blocking::Client::new()
        .post(format!("{}/event", server.url()))
        .header("content-type", "application/json")
        .body("{\"replica\": \"zero\"}")
        .send()
        .unwrap();
    assert!(resp.status().is_client_error());
}

#[test]
fn dispatch_to_unregistered_replica_is_unreachable() {
    let server = ApiServer::start("127.0.0.1:0").unwrap();
    let d = Dispatcher::new(server.registry(), WAIT).unwrap();
    let err = d.send_message(&message(0, 3)).unwrap_err();
    assert!(matches!(err, RpcError::UnreachableReplica { replica: ReplicaId(3), .. }));
}

fn cluster(p: &Protocol) -> (RemoteBackend, Vec<StubHandle>) {
    let server = ApiServer::start("127.0.0.1:0").unwrap();
    let stubs = (0..p.replica_count())
        .map(|r| stub::spawn(p.clone(), ReplicaId(r), &server.url()).unwrap())
        .collect();
    (RemoteBackend::connect(server, p.replica_count(), WAIT).unwrap(), stubs)
}

#[test]
fn dispatched_message_comes_back_as_a_receive() {
    let p = pbft();
    let (mut b, _stubs) = cluster(&p);
    let start = b.reset().unwrap();
    // The view-0 leader starts by sending PrePrepare and Prepare to each backup.
    assert_eq!(start.len(), 6);
    assert!(start.iter().all(|e| e.replica == ReplicaId(0) && e.etype() == EventType::Send));
    let pp = start[0].sent().unwrap().clone();
    assert!(b.can_receive(ReplicaId(1), &pp));
    let evs = b.receive(ReplicaId(1), &pp).unwrap();
    assert_eq!(evs[0].etype(), EventType::Receive);
    assert_eq!(evs[0].received(), Some(&pp));
    // Replica 1 answers with a Prepare to each of the others.
    assert_eq!(evs.len(), 4);
    assert!(b.server().pool_contains(evs[1].sent().unwrap().id));
}

#[test]
fn restart_directive_resets_stub_state() {
    let p = pbft();
    let (mut b, _stubs) = cluster(&p);
    let first = b.reset().unwrap();
    let pp = first[0].sent().unwrap().clone();
    b.receive(ReplicaId(1), &pp).unwrap();
    let again = b.reset().unwrap();
    assert_eq!(first, again);
    // Replica 1 starts over at sequence number 0.
    let evs = b.receive(ReplicaId(1), &pp).unwrap();
    assert_eq!(evs[0].seq, 0);
}

#[test]
fn stopped_replica_refuses_messages() {
    let p = pbft();
    let server = ApiServer::start("127.0.0.1:0").unwrap();
    let _s = stub::spawn(p.clone(), ReplicaId(1), &server.url()).unwrap();
    while server.registered().is_empty() {
        std::thread::sleep(Duration::from_millis(5));
    }
    let d = Dispatcher::new(server.registry(), WAIT).unwrap();
    d.directive(Directive {
        action: DirectiveAction::Stop,
        target: 1,
    })
    .unwrap();
    let err = d.send_message(&message(0, 1)).unwrap_err();
    assert!(matches!(err, RpcError::Stub { status: 503, .. }));
    let st = d
        .directive(Directive {
            action: DirectiveAction::Start,
            target: 1,
        })
        .unwrap();
    assert_eq!(st.events, 0);
}

#[test]
fn remote_and_in_process_suites_agree() {
    let p = pbft();
    let tc = p.testcase("drop-prepare-three").unwrap();
    let cfg = DriverConfig::default();
    let local = {
        let p = p.clone();
        run_suite(&tc, move || p.backend(), &cfg, 100, 5, 1)
    };
    let (mut b, _stubs) = cluster(&p);
    let remote = run_suite_on(&tc, &mut b, &cfg, 100, 5);
    assert_eq!(local.summary(), remote.summary());
    assert_eq!(local, remote);
}
