//! WebSocket gateway: broadcasts telemetry lines to every connected client
//! and forwards parsed operator commands into a bounded queue.
//!
//! The simulation loop only ever calls [`Gateway::publish`] and
//! [`Gateway::try_commands`], neither of which blocks on a client. A client
//! whose outgoing queue fills up is disconnected.

use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{sync_channel, Receiver, RecvTimeoutError, SyncSender, TryRecvError, TrySendError};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use thiserror::Error;
use tungstenite::handshake::server::{ErrorResponse, Request, Response};
use tungstenite::{Message, WebSocket};

use crate::telemetry::{parse_command, rejection_line, OperatorCommand};

pub const DEFAULT_ADDR: &str = "127.0.0.1:8080";
pub const WS_PATH: &str = "/ws";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GatewayConfig {
    /// Telemetry lines buffered per client before it counts as stalled.
    pub client_queue: usize,
    pub command_queue: usize,
    /// Read poll interval of client threads.
    pub poll: Duration,
    pub write_timeout: Duration,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            client_queue: 256,
            command_queue: 64,
            poll: Duration::from_millis(10),
            write_timeout: Duration::from_millis(500),
        }
    }
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
}

#[derive(Debug, Default)]
pub struct GatewayStats {
    pub accepted: AtomicU64,
    pub dropped_slow: AtomicU64,
    pub commands: AtomicU64,
    pub rejected: AtomicU64,
}

struct ClientSlot {
    id: u64,
    tx: SyncSender<Arc<str>>,
}

struct Shared {
    config: GatewayConfig,
    clients: Mutex<Vec<ClientSlot>>,
    commands: SyncSender<OperatorCommand>,
    shutdown: AtomicBool,
    next_id: AtomicU64,
    stats: GatewayStats,
}

pub struct Gateway {
    addr: SocketAddr,
    shared: Arc<Shared>,
    commands: Receiver<OperatorCommand>,
    accept: Option<JoinHandle<()>>,
}

/// Binds `addr` and starts accepting clients in the background.
pub fn serve(addr: &str, config: GatewayConfig) -> Result<Gateway, GatewayError> {
    let bind_err = |source| GatewayError::Bind {
        addr: addr.to_string(),
        source,
    };
    let listener = TcpListener::bind(addr).map_err(bind_err)?;
    listener.set_nonblocking(true).map_err(bind_err)?;
    let local = listener.local_addr().map_err(bind_err)?;
    let (tx, rx) = sync_channel(config.command_queue);
    let shared = Arc::new(Shared {
        config,
        clients: Mutex::new(Vec::new()),
        commands: tx,
        shutdown: AtomicBool::new(false),
        next_id: AtomicU64::new(1),
        stats: GatewayStats::default(),
    });
    let s = Arc::clone(&shared);
    let accept = thread::Builder::new()
        .name("gateway-accept".into())
        .spawn(move || accept_loop(listener, s))
        .expect("spawn accept thread");
    log::info!("gateway listening on ws://{local}{WS_PATH}");
    Ok(Gateway {
        addr: local,
        shared,
        commands: rx,
        accept: Some(accept),
    })
}

impl Gateway {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("ws://{}{WS_PATH}", self.addr)
    }

    /// Queues `line` for every client; never blocks on the network.
    pub fn publish(&self, line: &str) {
        let line: Arc<str> = Arc::from(line);
        let mut clients = self.shared.clients.lock().expect("client list poisoned");
        clients.retain(|c| match c.tx.try_send(Arc::clone(&line)) {
            Ok(()) => true,
            Err(TrySendError::Full(_)) => {
                log::warn!("gateway: client {} stalled, disconnecting", c.id);
                self.shared.stats.dropped_slow.fetch_add(1, Ordering::Relaxed);
                false
            }
            Err(TrySendError::Disconnected(_)) => false,
        });
    }

    /// Commands received so far, in arrival order.
    pub fn try_commands(&self) -> Vec<OperatorCommand> {
        self.commands.try_iter().collect()
    }

    pub fn recv_command_timeout(&self, timeout: Duration) -> Option<OperatorCommand> {
        match self.commands.recv_timeout(timeout) {
            Ok(c) => Some(c),
            Err(RecvTimeoutError::Timeout | RecvTimeoutError::Disconnected) => None,
        }
    }

    pub fn client_count(&self) -> usize {
        self.shared.clients.lock().expect("client list poisoned").len()
    }

    pub fn stats(&self) -> &GatewayStats {
        &self.shared.stats
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.shared.shutdown.store(true, Ordering::SeqCst);
        self.shared.clients.lock().expect("client list poisoned").clear();
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for Gateway {
    fn drop(&mut self) {
        self.stop();
    }
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    while !shared.shutdown.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                let s = Arc::clone(&shared);
                let spawned = thread::Builder::new()
                    .name(format!("gateway-client-{peer}"))
                    .spawn(move || client_session(stream, s));
                if let Err(e) = spawned {
                    log::error!("gateway: cannot spawn client thread: {e}");
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => thread::sleep(shared.config.poll),
            Err(e) => {
                log::warn!("gateway: accept failed: {e}");
                thread::sleep(shared.config.poll);
            }
        }
    }
}

fn handshake(stream: TcpStream, shared: &Shared) -> Option<WebSocket<TcpStream>> {
    stream.set_nonblocking(false).ok()?;
    stream.set_read_timeout(Some(Duration::from_secs(2))).ok()?;
    stream.set_write_timeout(Some(shared.config.write_timeout)).ok()?;
    let _ = stream.set_nodelay(true);
    let check_path = |req: &Request, resp: Response| -> Result<Response, ErrorResponse> {
        let path = req.uri().path();
        if path == WS_PATH || path == "/" {
            Ok(resp)
        } else {
            let mut err = ErrorResponse::new(Some(format!("unknown path {path}; use {WS_PATH}")));
            *err.status_mut() = tungstenite::http::StatusCode::NOT_FOUND;
            Err(err)
        }
    };
    let ws = tungstenite::accept_hdr(stream, check_path).ok()?;
    ws.get_ref().set_read_timeout(Some(shared.config.poll)).ok()?;
    Some(ws)
}

fn now_unix() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

fn client_session(stream: TcpStream, shared: Arc<Shared>) {
    let Some(mut ws) = handshake(stream, &shared) else {
        return;
    };
    let id = shared.next_id.fetch_add(1, Ordering::Relaxed);
    let (tx, rx) = sync_channel::<Arc<str>>(shared.config.client_queue);
    shared.clients.lock().expect("client list poisoned").push(ClientSlot { id, tx });
    shared.stats.accepted.fetch_add(1, Ordering::Relaxed);
    log::info!("gateway: client {id} connected");

    'session: loop {
        if shared.shutdown.load(Ordering::SeqCst) {
            break;
        }
        loop {
            match rx.try_recv() {
                Ok(line) => {
                    if ws.send(Message::Text(line.to_string())).is_err() {
                        break 'session;
                    }
                }
                Err(TryRecvError::Empty) => break,
                // dropped by the publisher (stalled) or gateway shutdown
                Err(TryRecvError::Disconnected) => break 'session,
            }
        }
        match ws.read() {
            Ok(Message::Text(text)) => {
                let reply = match parse_command(&text) {
                    Ok(kind) => {
                        let cmd = OperatorCommand {
                            kind,
                            issued_at: now_unix(),
                            client_id: id,
                        };
                        match shared.commands.try_send(cmd) {
                            Ok(()) => {
                                shared.stats.commands.fetch_add(1, Ordering::Relaxed);
                                None
                            }
                            Err(_) => Some(rejection_line("command queue full")),
                        }
                    }
                    Err(e) => Some(rejection_line(&e.reason)),
                };
                if let Some(r) = reply {
                    shared.stats.rejected.fetch_add(1, Ordering::Relaxed);
                    if ws.send(Message::Text(r)).is_err() {
                        break;
                    }
                }
            }
            Ok(Message::Close(_)) => break,
            Ok(_) => {}
            Err(tungstenite::Error::Io(e))
                if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {}
            Err(_) => break,
        }
    }
    let _ = ws.close(None);
    let _ = ws.flush();
    shared.clients.lock().expect("client list poisoned").retain(|c| c.id != id);
    log::info!("gateway: client {id} disconnected");
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::telemetry::CommandKind;
    use std::time::Instant;

    fn connect(g: &Gateway) -> WebSocket<tungstenite::stream::MaybeTlsStream<TcpStream>> {
        let (ws, _) = tungstenite::connect(g.url()).unwrap();
        ws
    }

    fn wait_for(mut cond: impl FnMut() -> bool) {
        let t0 = Instant::now();
        while !cond() {
            assert!(t0.elapsed() < Duration::from_secs(5), "timed out");
            thread::sleep(Duration::from_millis(2));
        }
    }

    fn read_text(ws: &mut WebSocket<tungstenite::stream::MaybeTlsStream<TcpStream>>) -> String {
        loop {
            if let Message::Text(t) = ws.read().unwrap() {
                return t;
            }
        }
    }

    #[test]
    fn broadcasts_identical_streams() {
        let g = serve("127.0.0.1:0", GatewayConfig::default()).unwrap();
        let mut a = connect(&g);
        let mut b = connect(&g);
        wait_for(|| g.client_count() == 2);
        let lines: Vec<String> = (0..50).map(|i| format!("{{\"v\":1,\"t\":{i}.0}}\n")).collect();
        for l in &lines {
            g.publish(l);
        }
        let ra: Vec<String> = (0..50).map(|_| read_text(&mut a)).collect();
        let rb: Vec<String> = (0..50).map(|_| read_text(&mut b)).collect();
        assert_eq!(ra, lines);
        assert_eq!(rb, lines);
    }

    #[test]
    fn commands_are_queued_and_bad_ones_rejected() {
        let g = serve("127.0.0.1:0", GatewayConfig::default()).unwrap();
        let mut c = connect(&g);
        c.send(Message::Text(r#"{"cmd":"GOAL","x":3.0,"y":1.5}"#.into())).unwrap();
        c.send(Message::Text(r#"{"cmd":"FLY"}"#.into())).unwrap();
        c.send(Message::Text(r#"{"cmd":"ESTOP"}"#.into())).unwrap();
        let first = g.recv_command_timeout(Duration::from_secs(5)).unwrap();
        assert_eq!(first.kind, CommandKind::Goal { x: 3.0, y: 1.5 });
        let second = g.recv_command_timeout(Duration::from_secs(5)).unwrap();
        assert_eq!(second.kind, CommandKind::Estop);
        let reply = read_text(&mut c);
        assert!(reply.contains("rejected"), "{reply}");
        assert_eq!(g.stats().rejected.load(Ordering::Relaxed), 1);
    }

    #[test]
    fn stalled_client_is_dropped_without_blocking() {
        let cfg = GatewayConfig {
            client_queue: 8,
            ..GatewayConfig::default()
        };
        let g = serve("127.0.0.1:0", cfg).unwrap();
        let _stalled = connect(&g);
        wait_for(|| g.client_count() == 1);
        let big = "x".repeat(64 * 1024);
        let mut worst = Duration::ZERO;
        for _ in 0..400 {
            let t0 = Instant::now();
            g.publish(&big);
            worst = worst.max(t0.elapsed());
        }
        assert!(worst < Duration::from_millis(50), "{worst:?}");
        wait_for(|| g.client_count() == 0);
        assert!(g.stats().dropped_slow.load(Ordering::Relaxed) >= 1);
    }

    #[test]
    fn no_clients_is_fine_and_bad_path_is_refused() {
        let g = serve("127.0.0.1:0", GatewayConfig::default()).unwrap();
        g.publish("{}\n");
        assert!(g.try_commands().is_empty());
        assert!(tungstenite::connect(format!("ws://{}/nope", g.local_addr())).is_err());
        assert!(serve(&g.local_addr().to_string(), GatewayConfig::default()).is_err());
    }
}
