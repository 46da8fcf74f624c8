//! Network front end: NDJSON over TCP plus a WebSocket bridge carrying the same JSON
//! payloads one per text frame. All connections feed one session task, which owns the
//! session and the simulator clock.

use std::collections::BTreeMap;
use std::future::Future;
use std::io::Write;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::routing::get;
use axum::Router;
use futures_util::{SinkExt, StreamExt};
use serde_json::Value;
use thiserror::Error;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, oneshot};
use tracing::{debug, info, warn};

use crate::protocol::{
    admit, decode, encode, FrameDecoder, ProtocolError, Role, WireMessage, HANDSHAKE_TIMEOUT,
    MAX_FRAME_BYTES,
};
use crate::session::{Effects, Event, Recipient, Session};

/// Frames queued per client before it is considered too slow and dropped.
const CLIENT_QUEUE: usize = 1024;
const HUB_QUEUE: usize = 4096;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("cannot bind {addr}: {source}")]
    BindFailure {
        addr: SocketAddr,
        source: std::io::Error,
    },
    #[error("cannot open recording {path}: {source}")]
    Record {
        path: String,
        source: std::io::Error,
    },
    #[error("server i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug)]
pub struct ServeOptions {
    pub listen: SocketAddr,
    pub ws_listen: Option<SocketAddr>,
    pub record: Option<PathBuf>,
    pub handshake_timeout: Duration,
}

impl ServeOptions {
    pub fn new(listen: SocketAddr) -> Self {
        Self {
            listen,
            ws_listen: None,
            record: None,
            handshake_timeout: HANDSHAKE_TIMEOUT,
        }
    }
}

enum Outbound {
    Frame(Arc<[u8]>),
    Close,
}

enum Inbound {
    Admit {
        conn: u64,
        client_id: String,
        role: Role,
        tx: mpsc::Sender<Outbound>,
    },
    Message {
        conn: u64,
        client_id: String,
        msg: WireMessage,
        received: Instant,
    },
    Gone {
        conn: u64,
        client_id: String,
    },
}

static CONNECTIONS: AtomicU64 = AtomicU64::new(0);

struct Peer {
    conn: u64,
    tx: mpsc::Sender<Outbound>,
}

pub struct Server {
    session: Session,
    tcp: TcpListener,
    ws: Option<TcpListener>,
    record: Option<std::io::BufWriter<std::fs::File>>,
    handshake_timeout: Duration,
}

impl Server {
    pub async fn bind(session: Session, opts: &ServeOptions) -> Result<Self, ServerError> {
        let tcp =
            TcpListener::bind(opts.listen)
                .await
                .map_err(|source| ServerError::BindFailure {
                    addr: opts.listen,
                    source,
                })?;
        let ws = match opts.ws_listen {
            Some(addr) => Some(
                TcpListener::bind(addr)
                    .await
                    .map_err(|source| ServerError::BindFailure { addr, source })?,
            ),
            None => None,
        };
        let record = match &opts.record {
            Some(path) => Some(std::io::BufWriter::new(
                std::fs::File::create(path).map_err(|source| ServerError::Record {
                    path: path.display().to_string(),
                    source,
                })?,
            )),
            None => None,
        };
        Ok(Self {
            session,
            tcp,
            ws,
            record,
            handshake_timeout: opts.handshake_timeout,
        })
    }

    pub fn local_addr(&self) -> std::io::Result<SocketAddr> {
        self.tcp.local_addr()
    }

    pub fn ws_addr(&self) -> Option<SocketAddr> {
        self.ws.as_ref().and_then(|l| l.local_addr().ok())
    }

    /// Serves until `shutdown` resolves.
    pub async fn run(self, shutdown: impl Future<Output = ()>) -> Result<(), ServerError> {
        let (hub_tx, hub_rx) = mpsc::channel(HUB_QUEUE);
        let timeout = self.handshake_timeout;
        let mut tasks = Vec::new();
        info!(addr = %self.tcp.local_addr()?, "listening (tcp)");
        tasks.push(tokio::spawn(accept_tcp(self.tcp, hub_tx.clone(), timeout)));
        if let Some(ws) = self.ws {
            info!(addr = %ws.local_addr()?, "listening (websocket /ws)");
            let app = Router::new()
                .route("/ws", get(ws_upgrade))
                .with_state(WsState {
                    hub: hub_tx.clone(),
                    timeout,
                });
            tasks.push(tokio::spawn(async move {
                if let Err(e) = axum::serve(ws, app).await {
                    warn!(error = %e, "websocket listener stopped");
                }
            }));
        }
        drop(hub_tx);
        let hub = Hub {
            session: self.session,
            clients: BTreeMap::new(),
            record: self.record,
            started: Instant::now(),
        };
        let result = hub.run(hub_rx, shutdown).await;
        for t in tasks {
            t.abort();
        }
        result
    }
}

struct Hub {
    session: Session,
    clients: BTreeMap<String, Peer>,
    record: Option<std::io::BufWriter<std::fs::File>>,
    started: Instant,
}

impl Hub {
    async fn run(
        mut self,
        mut rx: mpsc::Receiver<Inbound>,
        shutdown: impl Future<Output = ()>,
    ) -> Result<(), ServerError> {
        let period = Duration::from_secs_f64(1.0 / self.session.sim().tick_rate_hz());
        let mut ticker = tokio::time::interval(period);
        ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        tokio::pin!(shutdown);
        loop {
            tokio::select! {
                _ = &mut shutdown => break,
                _ = ticker.tick() => {
                    let fx = self.session.handle(Event::Tick);
                    self.dispatch(fx, None);
                }
                inbound = rx.recv() => match inbound {
                    Some(inbound) => self.on_inbound(inbound),
                    None => break,
                },
            }
        }
        for peer in self.clients.values() {
            let _ = peer.tx.try_send(Outbound::Close);
        }
        if let Some(rec) = self.record.as_mut() {
            rec.flush()?;
        }
        Ok(())
    }

    fn on_inbound(&mut self, inbound: Inbound) {
        match inbound {
            Inbound::Admit {
                conn,
                client_id,
                role,
                tx,
            } => {
                if self.clients.contains_key(&client_id) {
                    let err = WireMessage::error(
                        crate::protocol::ErrorCode::ProtocolViolation,
                        format!("client id {client_id} is already connected"),
                    );
                    if let Ok(bytes) = encode(&err) {
                        let _ = tx.try_send(Outbound::Frame(bytes.into()));
                    }
                    let _ = tx.try_send(Outbound::Close);
                    return;
                }
                info!(%client_id, ?role, "client admitted");
                self.clients.insert(client_id.clone(), Peer { conn, tx });
                let fx = self.session.handle(Event::Connect { client_id, role });
                self.dispatch(fx, None);
            }
            Inbound::Message {
                conn,
                client_id,
                msg,
                received,
            } => {
                if !self.is_current(&client_id, conn) {
                    return;
                }
                self.log("in", &client_id, &msg);
                let fx = self.session.handle(Event::Message { client_id, msg });
                let latency = (!fx.commands.is_empty()).then(|| received.elapsed());
                self.dispatch(fx, latency);
            }
            Inbound::Gone { conn, client_id } => {
                if self.is_current(&client_id, conn) {
                    self.drop_client(&client_id);
                }
            }
        }
    }

    fn is_current(&self, client_id: &str, conn: u64) -> bool {
        self.clients.get(client_id).is_some_and(|p| p.conn == conn)
    }

    fn drop_client(&mut self, client_id: &str) {
        if self.clients.remove(client_id).is_some() {
            info!(%client_id, "client left");
            let fx = self.session.handle(Event::Disconnect {
                client_id: client_id.to_owned(),
            });
            self.dispatch(fx, None);
        }
    }

    fn dispatch(&mut self, fx: Effects, latency: Option<Duration>) {
        if let Some(latency) = latency {
            for c in &fx.commands {
                debug!(cause = ?c.cause, latency_us = latency.as_micros() as u64, "command");
            }
            if let Some(rec) = self.record.as_mut() {
                let line = serde_json::json!({
                    "type": "command",
                    "server_ts_us": self.started.elapsed().as_micros() as u64,
                    "latency_us": latency.as_secs_f64() * 1e6,
                    "joints_rad": fx.commands.last().map(|c| c.q.to_array()),
                });
                let _ = writeln!(rec, "{line}");
            }
        }
        let mut slow = Vec::new();
        for reply in &fx.replies {
            let bytes: Arc<[u8]> = match encode(&reply.msg) {
                Ok(b) => b.into(),
                Err(e) => {
                    warn!(error = %e, "dropping unencodable reply");
                    continue;
                }
            };
            match &reply.to {
                Recipient::Client(id) => {
                    self.log("out", id, &reply.msg);
                    if let Some(peer) = self.clients.get(id) {
                        if peer.tx.try_send(Outbound::Frame(bytes)).is_err() {
                            slow.push(id.clone());
                        }
                    }
                }
                Recipient::All => {
                    self.log("out", "*", &reply.msg);
                    for (id, peer) in &self.clients {
                        if peer.tx.try_send(Outbound::Frame(bytes.clone())).is_err() {
                            slow.push(id.clone());
                        }
                    }
                }
            }
        }
        for id in fx.close.iter().chain(slow.iter()) {
            if let Some(peer) = self.clients.get(id) {
                let _ = peer.tx.try_send(Outbound::Close);
            }
        }
        for id in slow {
            warn!(client_id = %id, "client too slow; disconnecting");
            self.drop_client(&id);
        }
        for id in fx.close {
            self.clients.remove(&id);
        }
    }

    fn log(&mut self, direction: &str, peer: &str, msg: &WireMessage) {
        let Some(rec) = self.record.as_mut() else {
            return;
        };
        let Ok(Value::Object(mut obj)) = serde_json::to_value(msg) else {
            return;
        };
        obj.insert(
            "server_ts_us".into(),
            (self.started.elapsed().as_micros() as u64).into(),
        );
        obj.insert("direction".into(), direction.into());
        obj.insert("peer".into(), peer.into());
        let _ = writeln!(rec, "{}", Value::Object(obj));
    }
}

trait FrameRead: Send {
    /// Next complete frame without its terminator; `None` once the peer is gone.
    fn next_frame(&mut self)
        -> impl Future<Output = Option<Result<Vec<u8>, ProtocolError>>> + Send;
}

trait FrameWrite: Send + 'static {
    /// Writes one LF-terminated encoded message.
    fn write_frame(&mut self, line: &[u8]) -> impl Future<Output = std::io::Result<()>> + Send;
    fn close(&mut self) -> impl Future<Output = ()> + Send;
}

struct TcpReader {
    half: OwnedReadHalf,
    decoder: FrameDecoder,
    buf: Vec<u8>,
}

impl FrameRead for TcpReader {
    async fn next_frame(&mut self) -> Option<Result<Vec<u8>, ProtocolError>> {
        loop {
            if let Some(frame) = self.decoder.next_frame() {
                return Some(frame);
            }
            match self.half.read(&mut self.buf).await {
                Ok(0) | Err(_) => return None,
                Ok(n) => self.decoder.push(&self.buf[..n]),
            }
        }
    }
}

struct TcpWriter(OwnedWriteHalf);

impl FrameWrite for TcpWriter {
    async fn write_frame(&mut self, line: &[u8]) -> std::io::Result<()> {
        self.0.write_all(line).await
    }

    async fn close(&mut self) {
        let _ = self.0.shutdown().await;
    }
}

struct WsReader(futures_util::stream::SplitStream<WebSocket>);

impl FrameRead for WsReader {
    async fn next_frame(&mut self) -> Option<Result<Vec<u8>, ProtocolError>> {
        loop {
            let bytes = match self.0.next().await? {
                Ok(Message::Text(t)) => t.as_str().as_bytes().to_vec(),
                Ok(Message::Binary(b)) => b.to_vec(),
                Ok(Message::Close(_)) | Err(_) => return None,
                Ok(_) => continue,
            };
            if bytes.len() > MAX_FRAME_BYTES {
                return Some(Err(ProtocolError::OversizeFrame(bytes.len())));
            }
            return Some(Ok(bytes));
        }
    }
}

struct WsWriter(futures_util::stream::SplitSink<WebSocket, Message>);

impl FrameWrite for WsWriter {
    async fn write_frame(&mut self, line: &[u8]) -> std::io::Result<()> {
        let text = std::str::from_utf8(line.strip_suffix(b"\n").unwrap_or(line))
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        self.0
            .send(Message::Text(text.to_owned().into()))
            .await
            .map_err(std::io::Error::other)
    }

    async fn close(&mut self) {
        let _ = self.0.send(Message::Close(None)).await;
        let _ = self.0.close().await;
    }
}

async fn accept_tcp(listener: TcpListener, hub: mpsc::Sender<Inbound>, timeout: Duration) {
    loop {
        match listener.accept().await {
            Ok((stream, peer)) => {
                debug!(%peer, "tcp connection");
                let hub = hub.clone();
                tokio::spawn(async move { serve_tcp(stream, hub, timeout).await });
            }
            Err(e) => {
                warn!(error = %e, "accept failed");
                tokio::time::sleep(Duration::from_millis(50)).await;
            }
        }
    }
}

async fn serve_tcp(stream: TcpStream, hub: mpsc::Sender<Inbound>, timeout: Duration) {
    let _ = stream.set_nodelay(true);
    let (r, w) = stream.into_split();
    let reader = TcpReader {
        half: r,
        decoder: FrameDecoder::new(),
        buf: vec![0; 8192],
    };
    serve_connection(reader, TcpWriter(w), hub, timeout).await;
}

#[derive(Clone)]
struct WsState {
    hub: mpsc::Sender<Inbound>,
    timeout: Duration,
}

async fn ws_upgrade(
    ws: WebSocketUpgrade,
    State(state): State<WsState>,
) -> axum::response::Response {
    ws.max_message_size(MAX_FRAME_BYTES + 1)
        .on_upgrade(move |socket| async move {
            let (sink, stream) = socket.split();
            serve_connection(WsReader(stream), WsWriter(sink), state.hub, state.timeout).await;
        })
}

async fn reject<W: FrameWrite>(mut writer: W, err: &ProtocolError) {
    if let Ok(bytes) = encode(&err.to_message()) {
        let _ = writer.write_frame(&bytes).await;
    }
    writer.close().await;
}

/// Handshake, then pumps frames into the hub until either side goes away.
async fn serve_connection<R: FrameRead, W: FrameWrite>(
    mut reader: R,
    mut writer: W,
    hub: mpsc::Sender<Inbound>,
    timeout: Duration,
) {
    let first = match tokio::time::timeout(timeout, reader.next_frame()).await {
        Err(_) => return reject(writer, &ProtocolError::HandshakeTimeout).await,
        Ok(None) => return,
        Ok(Some(frame)) => frame,
    };
    let admitted = match first.and_then(|f| decode(&f)).and_then(|m| admit(&m)) {
        Ok(a) => a,
        Err(ProtocolError::UnknownType(t)) => {
            let e = ProtocolError::ProtocolViolation(format!(
                "expected hello as first message, got {t}"
            ));
            return reject(writer, &e).await;
        }
        Err(e) => return reject(writer, &e).await,
    };
    let client_id = admitted.client_id;
    let conn = CONNECTIONS.fetch_add(1, Ordering::Relaxed);
    let (tx, mut rx) = mpsc::channel::<Outbound>(CLIENT_QUEUE);
    let replies = tx.clone();
    if hub
        .send(Inbound::Admit {
            conn,
            client_id: client_id.clone(),
            role: admitted.role,
            tx,
        })
        .await
        .is_err()
    {
        return;
    }
    let (done_tx, mut done_rx) = oneshot::channel::<()>();
    tokio::spawn(async move {
        while let Some(out) = rx.recv().await {
            match out {
                Outbound::Frame(bytes) => {
                    if writer.write_frame(&bytes).await.is_err() {
                        break;
                    }
                }
                Outbound::Close => break,
            }
        }
        writer.close().await;
        drop(done_tx);
    });
    loop {
        let frame = tokio::select! {
            frame = reader.next_frame() => frame,
            _ = &mut done_rx => break,
        };
        let Some(frame) = frame else { break };
        match frame.and_then(|f| decode(&f)) {
            Ok(msg) => {
                let inbound = Inbound::Message {
                    conn,
                    client_id: client_id.clone(),
                    msg,
                    received: Instant::now(),
                };
                if hub.send(inbound).await.is_err() {
                    break;
                }
            }
            Err(e) => {
                if let Ok(bytes) = encode(&e.to_message()) {
                    let _ = replies.try_send(Outbound::Frame(bytes.into()));
                }
                if e.closes_connection() {
                    let _ = replies.try_send(Outbound::Close);
                    break;
                }
            }
        }
    }
    let _ = hub.send(Inbound::Gone { conn, client_id }).await;
}
