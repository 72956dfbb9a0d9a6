//! Network runtime: `/ws` for clients, `/broker` for worker nodes and
//! `/healthz`. All protocol logic lives in the core [`Engine`]; this module
//! only moves frames between sockets and the engine.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State as AxumState;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::Router;
use care_core::broker::ConnId;
use care_core::engine::SessionId;
use care_core::model::Timestamp;
use care_core::{Engine, EngineConfig, Outbound};
use futures_util::{SinkExt, StreamExt};
use tokio::net::TcpListener;
use tokio::sync::mpsc::{unbounded_channel, UnboundedReceiver, UnboundedSender};

use crate::config::ServerConfig;
use crate::store::{DataDir, FileJournal, StoreError};

const TICK: Duration = Duration::from_secs(1);

pub fn now() -> Timestamp {
    let ms = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0);
    Timestamp(ms)
}

/// An opened data directory together with the engine over it.
pub struct Instance {
    pub dir: DataDir,
    pub engine: Engine<FileJournal>,
}

#[derive(Debug, thiserror::Error)]
pub enum InstanceError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("seeding label set {id}: {reason}")]
    Seed { id: String, reason: String },
}

impl Instance {
    /// Opens the data directory and defines the configured label sets.
    pub fn open(cfg: &ServerConfig) -> Result<Self, InstanceError> {
        let (dir, state, journal) = DataDir::open(&cfg.data_dir)?;
        let engine_cfg = EngineConfig {
            broker_token: cfg.broker_token.clone(),
            assist_timeout_ms: cfg.assist_timeout_ms(),
            password_pepper: cfg.session_secret.clone(),
        };
        let mut engine = Engine::new(engine_cfg, state, journal);
        for ls in &cfg.label_sets {
            engine
                .define_labelset(ls.clone())
                .map_err(|e| InstanceError::Seed { id: ls.labelset_id.to_string(), reason: e.to_string() })?;
        }
        Ok(Self { dir, engine })
    }
}

enum Frame {
    Text(String),
    Close,
}

struct Hub {
    engine: Engine<FileJournal>,
    clients: HashMap<SessionId, UnboundedSender<Frame>>,
    workers: HashMap<ConnId, UnboundedSender<Frame>>,
}

impl Hub {
    /// Delivers engine output in order. Sends never block, so this is safe
    /// to run while holding the hub lock, which keeps per-socket order equal
    /// to engine order.
    fn dispatch(&mut self, out: Vec<Outbound>) {
        for o in out {
            match o {
                Outbound::ToClient { session, message } => {
                    if let Some(tx) = self.clients.get(&session) {
                        let _ = tx.send(Frame::Text(message.to_json()));
                    }
                }
                Outbound::ToWorker { conn, message } => {
                    if let Some(tx) = self.workers.get(&conn) {
                        let text = serde_json::to_string(&message).expect("worker message serializes");
                        let _ = tx.send(Frame::Text(text));
                    }
                }
                Outbound::CloseWorker { conn } => {
                    if let Some(tx) = self.workers.remove(&conn) {
                        let _ = tx.send(Frame::Close);
                    }
                }
            }
        }
    }
}

#[derive(Clone)]
struct Shared(Arc<Mutex<Hub>>);

impl Shared {
    fn lock(&self) -> MutexGuard<'_, Hub> {
        // a panic inside the engine must not wedge every other connection
        self.0.lock().unwrap_or_else(|p| p.into_inner())
    }
}

pub fn router(instance: Instance) -> Router {
    let Instance { dir, engine } = instance;
    // the data dir lock must live as long as the server
    let dir = Arc::new(dir);
    let shared = Shared(Arc::new(Mutex::new(Hub { engine, clients: HashMap::new(), workers: HashMap::new() })));
    let ticker = shared.clone();
    tokio::spawn(async move {
        let _keep = dir;
        let mut interval = tokio::time::interval(TICK);
        loop {
            interval.tick().await;
            let mut hub = ticker.lock();
            let out = hub.engine.tick(now());
            hub.dispatch(out);
        }
    });
    Router::new()
        .route("/healthz", get(|| async { "ok" }))
        .route("/ws", get(client_upgrade))
        .route("/broker", get(worker_upgrade))
        .with_state(shared)
}

async fn client_upgrade(ws: WebSocketUpgrade, AxumState(shared): AxumState<Shared>) -> impl IntoResponse {
    ws.on_upgrade(move |socket| client_loop(socket, shared))
}

async fn worker_upgrade(ws: WebSocketUpgrade, AxumState(shared): AxumState<Shared>) -> impl IntoResponse {
    ws.on_upgrade(move |socket| worker_loop(socket, shared))
}

fn spawn_writer(mut sink: futures_util::stream::SplitSink<WebSocket, Message>, mut rx: UnboundedReceiver<Frame>) {
    tokio::spawn(async move {
        while let Some(frame) = rx.recv().await {
            let res = match frame {
                Frame::Text(t) => sink.send(Message::Text(t.into())).await,
                Frame::Close => {
                    let _ = sink.send(Message::Close(None)).await;
                    break;
                }
            };
            if res.is_err() {
                break;
            }
        }
    });
}

async fn client_loop(socket: WebSocket, shared: Shared) {
    let (sink, mut stream) = socket.split();
    let (tx, rx) = unbounded_channel();
    let session = {
        let mut hub = shared.lock();
        let s = hub.engine.connect_client(now());
        hub.clients.insert(s, tx);
        s
    };
    spawn_writer(sink, rx);
    while let Some(Ok(msg)) = stream.next().await {
        let text = match msg {
            Message::Text(t) => t.to_string(),
            Message::Binary(b) => String::from_utf8_lossy(&b).into_owned(),
            Message::Close(_) => break,
            _ => continue,
        };
        let mut hub = shared.lock();
        let out = hub.engine.client_frame(session, &text, now());
        hub.dispatch(out);
    }
    let mut hub = shared.lock();
    hub.engine.disconnect_client(session);
    hub.clients.remove(&session);
}

async fn worker_loop(socket: WebSocket, shared: Shared) {
    let (sink, mut stream) = socket.split();
    let (tx, rx) = unbounded_channel();
    let conn = {
        let mut hub = shared.lock();
        let c = hub.engine.connect_worker();
        hub.workers.insert(c, tx);
        c
    };
    spawn_writer(sink, rx);
    while let Some(Ok(msg)) = stream.next().await {
        let text = match msg {
            Message::Text(t) => t.to_string(),
            Message::Close(_) => break,
            _ => continue,
        };
        let mut hub = shared.lock();
        let out = hub.engine.worker_frame(conn, &text, now());
        hub.dispatch(out);
        if !hub.workers.contains_key(&conn) {
            break;
        }
    }
    let mut hub = shared.lock();
    hub.workers.remove(&conn);
    let out = hub.engine.disconnect_worker(conn, now());
    hub.dispatch(out);
}

/// Binds `cfg.listen_addr` and serves until `shutdown` resolves. `on_bound`
/// receives the actual address, which matters when the port is 0.
pub async fn serve(
    cfg: ServerConfig,
    on_bound: impl FnOnce(SocketAddr),
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> anyhow::Result<()> {
    cfg.validate_serve()?;
    let instance = Instance::open(&cfg)?;
    let listener = TcpListener::bind(cfg.listen_addr).await?;
    on_bound(listener.local_addr()?);
    let app = router(instance);
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await?;
    Ok(())
}

/// Resolves on Ctrl-C or SIGTERM.
pub async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
}
