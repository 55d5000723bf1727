//! The API server: replicas register here and report their events and
//! sent messages.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use nettest_core::{Event, Message, MessageId, ReplicaId};
use tokio::runtime::Runtime;

use crate::wire::{Ack, Registration, WireEvent, WireMessage};
use crate::RpcError;

pub type Registry = Arc<RwLock<BTreeMap<ReplicaId, String>>>;

struct Shared {
    registry: Registry,
    pool: Mutex<HashMap<MessageId, Message>>,
    tx: Sender<Event>,
}

type Reply = (StatusCode, Json<Ack>);

fn reject(code: StatusCode, e: impl ToString) -> Reply {
    (code, Json(Ack::err(e)))
}

async fn register(State(s): State<Arc<Shared>>, Json(reg): Json<Registration>) -> Reply {
    s.registry
        .write()
        .expect("registry lock")
        .insert(ReplicaId(reg.id), reg.addr.trim_end_matches('/').to_string());
    (StatusCode::OK, Json(Ack::ok()))
}

fn is_registered(s: &Shared, r: ReplicaId) -> bool {
    s.registry.read().expect("registry lock").contains_key(&r)
}

async fn message(State(s): State<Arc<Shared>>, Json(w): Json<WireMessage>) -> Reply {
    if !is_registered(&s, ReplicaId(w.from)) {
        return reject(StatusCode::FORBIDDEN, RpcError::UnknownReplica(ReplicaId(w.from)));
    }
    match Message::try_from(&w) {
        Ok(m) => {
            s.pool.lock().expect("pool lock").insert(m.id, m);
            (StatusCode::OK, Json(Ack::ok()))
        }
        Err(e) => reject(StatusCode::BAD_REQUEST, e),
    }
}

async fn event(State(s): State<Arc<Shared>>, Json(w): Json<WireEvent>) -> Reply {
    if !is_registered(&s, ReplicaId(w.replica)) {
        return reject(StatusCode::FORBIDDEN, RpcError::UnknownReplica(ReplicaId(w.replica)));
    }
    let e = {
        let pool = s.pool.lock().expect("pool lock");
        w.to_event(|id| pool.get(&id).cloned())
    };
    match e {
        Ok(e) => match s.tx.send(e) {
            Ok(()) => (StatusCode::OK, Json(Ack::ok())),
            Err(_) => reject(StatusCode::SERVICE_UNAVAILABLE, "driver is gone"),
        },
        Err(e) => reject(StatusCode::BAD_REQUEST, e),
    }
}

/// A running API server. Requests are accepted concurrently and handed to
/// the driver through one queue, in arrival order.
pub struct ApiServer {
    /// Keeps the serving threads alive.
    _runtime: Runtime,
    addr: SocketAddr,
    shared: Arc<Shared>,
    events: Receiver<Event>,
}

impl ApiServer {
    /// Binds `bind` (use port 0 for an ephemeral port) and starts serving.
    pub fn start(bind: &str) -> Result<Self, RpcError> {
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .map_err(|e| RpcError::Bind {
                addr: bind.to_string(),
                reason: e.to_string(),
            })?;
        let listener = runtime
            .block_on(tokio::net::TcpListener::bind(bind))
            .map_err(|e| RpcError::Bind {
                addr: bind.to_string(),
                reason: e.to_string(),
            })?;
        let addr = listener.local_addr().map_err(|e| RpcError::Bind {
            addr: bind.to_string(),
            reason: e.to_string(),
        })?;
        let (tx, events) = mpsc::channel();
        let shared = Arc::new(Shared {
            registry: Registry::default(),
            pool: Mutex::new(HashMap::new()),
            tx,
        });
        let app = Router::new()
            .route("/replica", post(register))
            .route("/event", post(event))
            .route("/message", post(message))
            .with_state(shared.clone());
        runtime.spawn(async move {
            let _ = axum::serve(listener, app).await;
        });
        Ok(ApiServer {
            _runtime: runtime,
            addr,
            shared,
            events,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn registry(&self) -> Registry {
        self.shared.registry.clone()
    }

    pub fn registered(&self) -> BTreeMap<ReplicaId, String> {
        self.shared.registry.read().expect("registry lock").clone()
    }

    /// Blocks until replicas `0..n` have all registered.
    pub fn wait_for_replicas(&self, n: usize, timeout: Duration) -> Result<(), RpcError> {
        let deadline = Instant::now() + timeout;
        loop {
            let reg = self.registered();
            if (0..n).all(|r| reg.contains_key(&ReplicaId(r))) {
                return Ok(());
            }
            if Instant::now() >= deadline {
                return Err(RpcError::Timeout(format!(
                    "{} of {n} replicas registered",
                    reg.len()
                )));
            }
            std::thread::sleep(Duration::from_millis(10));
        }
    }

    /// Adds a message the driver is about to dispatch, so that the receive
    /// event reported for it can be resolved.
    pub fn remember(&self, m: &Message) {
        self.shared.pool.lock().expect("pool lock").insert(m.id, m.clone());
    }

    pub fn pool_contains(&self, id: MessageId) -> bool {
        self.shared.pool.lock().expect("pool lock").contains_key(&id)
    }

    pub fn pool_len(&self) -> usize {
        self.shared.pool.lock().expect("pool lock").len()
    }

    /// Forgets all messages and discards queued events.
    pub fn clear(&self) {
        self.shared.pool.lock().expect("pool lock").clear();
        while self.events.try_recv().is_ok() {}
    }

    pub fn next_event(&self, timeout: Duration) -> Result<Event, RpcError> {
        self.events.recv_timeout(timeout).map_err(|e| match e {
            RecvTimeoutError::Timeout => RpcError::Timeout("no event arrived".into()),
            RecvTimeoutError::Disconnected => RpcError::Timeout("event queue closed".into()),
        })
    }

    pub fn try_next_event(&self) -> Option<Event> {
        self.events.try_recv().ok()
    }
}
