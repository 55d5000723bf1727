//! A stub replica: one replica of a toy protocol behind HTTP, reporting its
//! events to an API server.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use nettest_core::model::ModelError;
use nettest_core::protocols::Protocol;
use nettest_core::{Automaton, Event, Input, Message, ReplicaId, Replicas};
use tokio::runtime::Runtime;
use tokio::sync::Mutex;

use crate::wire::{Ack, Directive, DirectiveAction, Registration, StubStatus, WireEvent, WireMessage};
use crate::RpcError;

trait Host: Send + Sync {
    fn restart(&mut self) -> Result<Vec<Event>, ModelError>;
    fn receive(&mut self, m: &Message) -> Result<Vec<Event>, ModelError>;
    fn timeout(&mut self) -> Result<Vec<Event>, ModelError>;
    fn status(&self) -> StubStatus;
}

struct AutomatonHost<A: Automaton> {
    automaton: A,
    replicas: Replicas<A>,
    id: ReplicaId,
}

impl<A: Automaton> AutomatonHost<A> {
    fn flush(&mut self, mut out: Vec<Event>) -> Result<Vec<Event>, ModelError> {
        while self.replicas.internal_enabled(self.id) {
            out.push(self.replicas.fire(self.id, Input::Internal)?);
        }
        Ok(out)
    }
}

impl<A: Automaton> Host for AutomatonHost<A> {
    fn restart(&mut self) -> Result<Vec<Event>, ModelError> {
        self.replicas = Replicas::new(self.automaton.clone());
        self.flush(Vec::new())
    }

    fn receive(&mut self, m: &Message) -> Result<Vec<Event>, ModelError> {
        let e = self.replicas.fire(self.id, Input::Message(m))?;
        self.flush(vec![e])
    }

    fn timeout(&mut self) -> Result<Vec<Event>, ModelError> {
        let e = self.replicas.fire(self.id, Input::Timeout)?;
        self.flush(vec![e])
    }

    fn status(&self) -> StubStatus {
        let is_final = self.replicas.is_final(self.id);
        StubStatus {
            events: 0,
            is_final,
            timer_armed: self.replicas.timeout_enabled(self.id),
            ready: !is_final && !self.replicas.internal_enabled(self.id),
        }
    }
}

fn host_for(protocol: &Protocol, id: ReplicaId) -> Box<dyn Host> {
    fn make<A: Automaton + 'static>(a: A, id: ReplicaId) -> Box<dyn Host> {
        Box::new(AutomatonHost {
            replicas: Replicas::new(a.clone()),
            automaton: a,
            id,
        })
    }
    match protocol {
        Protocol::Pbft(p) => make(p.clone(), id),
        Protocol::Raft(r) => make(r.clone(), id),
    }
}

struct StubState {
    id: ReplicaId,
    host: Box<dyn Host>,
    stopped: bool,
    client: reqwest::Client,
    server: String,
}

type Shared = Arc<Mutex<StubState>>;
type Reply = (StatusCode, Json<serde_json::Value>);

fn reply_err(code: StatusCode, e: impl ToString) -> Reply {
    (code, Json(serde_json::to_value(Ack::err(e)).expect("ack serializes")))
}

async fn post_json(client: &reqwest::Client, url: String, body: &impl serde::Serialize) -> Result<(), RpcError> {
    let resp = client
        .post(&url)
        .json(body)
        .send()
        .await
        .map_err(|e| RpcError::Transport(e.to_string()))?;
    if resp.status().is_success() {
        Ok(())
    } else {
        let status = resp.status().as_u16();
        let reason = resp.text().await.unwrap_or_default();
        Err(RpcError::Transport(format!("{url} answered {status}: {reason}")))
    }
}

/// Posts each event, preceded by the message for sends, in order.
async fn report(st: &StubState, events: &[Event]) -> Result<(), RpcError> {
    for e in events {
        if let Some(m) = e.sent() {
            post_json(&st.client, format!("{}/message", st.server), &WireMessage::from(m)).await?;
        }
        post_json(&st.client, format!("{}/event", st.server), &WireEvent::from(e)).await?;
    }
    Ok(())
}

async fn finish(st: &StubState, events: Result<Vec<Event>, ModelError>) -> Reply {
    let events = match events {
        Ok(ev) => ev,
        Err(e) => return reply_err(StatusCode::CONFLICT, e),
    };
    if let Err(e) = report(st, &events).await {
        return reply_err(StatusCode::BAD_GATEWAY, e);
    }
    let status = StubStatus {
        events: events.len(),
        ..st.host.status()
    };
    (StatusCode::OK, Json(serde_json::to_value(status).expect("status serializes")))
}

async fn on_message(State(s): State<Shared>, Json(w): Json<WireMessage>) -> Reply {
    let mut st = s.lock().await;
    if st.stopped {
        return reply_err(StatusCode::SERVICE_UNAVAILABLE, format!("replica {} is stopped", st.id));
    }
    let m = match Message::try_from(&w) {
        Ok(m) => m,
        Err(e) => return reply_err(StatusCode::BAD_REQUEST, e),
    };
    if m.to != st.id {
        return reply_err(StatusCode::BAD_REQUEST, format!("message for {} sent to {}", m.to, st.id));
    }
    let events = st.host.receive(&m);
    finish(&st, events).await
}

async fn on_directive(State(s): State<Shared>, Json(d): Json<Directive>) -> Reply {
    let mut st = s.lock().await;
    if d.target != st.id.0 {
        return reply_err(StatusCode::BAD_REQUEST, format!("directive for {} sent to {}", d.target, st.id));
    }
    let events = match d.action {
        DirectiveAction::Restart => {
            st.stopped = false;
            st.host.restart()
        }
        DirectiveAction::Start => {
            st.stopped = false;
            Ok(Vec::new())
        }
        DirectiveAction::Stop => {
            st.stopped = true;
            Ok(Vec::new())
        }
        DirectiveAction::Timeout if st.stopped => {
            return reply_err(StatusCode::SERVICE_UNAVAILABLE, format!("replica {} is stopped", st.id));
        }
        DirectiveAction::Timeout => st.host.timeout(),
    };
    finish(&st, events).await
}

/// Serves replica `id` on `listener` after registering it with the API
/// server at `server`. Runs until the runtime shuts down.
pub async fn serve(
    protocol: Protocol,
    id: ReplicaId,
    listener: tokio::net::TcpListener,
    server: String,
) -> Result<(), RpcError> {
    if id.0 >= protocol.replica_count() {
        return Err(RpcError::UnknownReplica(id));
    }
    let addr = listener
        .local_addr()
        .map_err(|e| RpcError::Transport(e.to_string()))?;
    let server = server.trim_end_matches('/').to_string();
    let client = reqwest::Client::new();
    post_json(
        &client,
        format!("{server}/replica"),
        &Registration {
            id: id.0,
            addr: format!("http://{addr}"),
        },
    )
    .await?;
    let state = Arc::new(Mutex::new(StubState {
        id,
        host: host_for(&protocol, id),
        stopped: false,
        client,
        server,
    }));
    let app = Router::new()
        .route("/message", post(on_message))
        .route("/directive", post(on_directive))
        .with_state(state);
    axum::serve(listener, app)
        .await
        .map_err(|e| RpcError::Transport(e.to_string()))
}

/// Runs a stub on the current thread until it fails.
pub fn run(protocol: Protocol, id: ReplicaId, bind: &str, server: &str) -> Result<(), RpcError> {
    let rt = runtime(bind)?;
    rt.block_on(async {
        let listener = bind_listener(bind).await?;
        serve(protocol, id, listener, server.to_string()).await
    })
}

fn runtime(bind: &str) -> Result<Runtime, RpcError> {
    tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .map_err(|e| RpcError::Bind {
            addr: bind.to_string(),
            reason: e.to_string(),
        })
}

async fn bind_listener(bind: &str) -> Result<tokio::net::TcpListener, RpcError> {
    tokio::net::TcpListener::bind(bind).await.map_err(|e| RpcError::Bind {
        addr: bind.to_string(),
        reason: e.to_string(),
    })
}

/// A stub running on a background thread of this process.
pub struct StubHandle {
    pub addr: SocketAddr,
    _runtime: Runtime,
}

/// Starts a stub in this process.
pub fn spawn(protocol: Protocol, id: ReplicaId, server: &str) -> Result<StubHandle, RpcError> {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(1)
        .enable_all()
        .build()
        .map_err(|e| RpcError::Transport(e.to_string()))?;
    let listener = rt.block_on(bind_listener("127.0.0.1:0"))?;
    let addr = listener
        .local_addr()
        .map_err(|e| RpcError::Transport(e.to_string()))?;
    let server = server.to_string();
    // Registration failures surface through `ApiServer::wait_for_replicas`.
    rt.spawn(async move {
        let _ = serve(protocol, id, listener, server).await;
    });
    Ok(StubHandle { addr, _runtime: rt })
}
