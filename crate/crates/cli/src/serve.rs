//! Live serving: control and mocap TCP sockets plus the console WebSocket,
//! with the tick loop paced to the wall clock.
//!
//! Socket threads only parse and enqueue; the tick thread owns the stage.

use std::collections::BTreeSet;
use std::io::{self, BufRead, BufReader, ErrorKind};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use shadowstage::protocol::{
    encode_server_message, map_control, parse_control, parse_mocap_frame, CueInfo, ServerMessage, Show,
};
use shadowstage::stage::{Command, Stage, StageEvent};
use tungstenite::{Message, WebSocket};

use crate::Failure;

/// Console snapshots are decimated to at most this rate.
pub const CONSOLE_HZ: f64 = 30.0;
const POLL: Duration = Duration::from_millis(10);

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub bind: String,
    pub control_port: u16,
    pub mocap_port: u16,
    pub ws_port: u16,
    pub dt: f64,
}

enum Inbound {
    Command(Command),
    Notice(String),
}

#[derive(Clone)]
struct Shared {
    show: Arc<Show>,
    dt: f64,
    stop: Arc<AtomicBool>,
    tick: Arc<AtomicU64>,
    pointer: Arc<AtomicUsize>,
    inbound: Sender<Inbound>,
    clients: Arc<Mutex<Vec<Sender<String>>>>,
}

pub struct ServerHandle {
    pub control_addr: SocketAddr,
    pub mocap_addr: SocketAddr,
    pub ws_addr: SocketAddr,
    shared: Shared,
    threads: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    /// Ticks completed so far.
    pub fn current_tick(&self) -> u64 {
        self.shared.tick.load(Ordering::SeqCst)
    }

    pub fn shutdown(mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }

    /// Blocks until the tick loop ends (it only ends on shutdown or a runtime failure).
    pub fn wait(mut self) {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

fn bind(host: &str, port: u16, what: &str) -> Result<TcpListener, Failure> {
    let l = TcpListener::bind((host, port))
        .map_err(|e| Failure::runtime(anyhow::anyhow!("cannot open {what} port {host}:{port}: {e}")))?;
    l.set_nonblocking(true).map_err(Failure::runtime)?;
    Ok(l)
}

/// Binds all three sockets (port 0 picks a free port) and starts serving.
pub fn start(show: Arc<Show>, cfg: &ServeConfig) -> Result<ServerHandle, Failure> {
    let stage = Stage::new(show.clone(), cfg.dt).map_err(Failure::config)?;
    let control = bind(&cfg.bind, cfg.control_port, "control")?;
    let mocap = bind(&cfg.bind, cfg.mocap_port, "mocap")?;
    let ws = bind(&cfg.bind, cfg.ws_port, "console")?;
    let addr = |l: &TcpListener| l.local_addr().map_err(Failure::runtime);
    let (control_addr, mocap_addr, ws_addr) = (addr(&control)?, addr(&mocap)?, addr(&ws)?);

    let (tx, rx) = mpsc::channel();
    let shared = Shared {
        show,
        dt: cfg.dt,
        stop: Arc::new(AtomicBool::new(false)),
        tick: Arc::new(AtomicU64::new(0)),
        pointer: Arc::new(AtomicUsize::new(0)),
        inbound: tx,
        clients: Arc::new(Mutex::new(Vec::new())),
    };
    let threads = vec![
        spawn_listener(control, shared.clone(), control_session),
        spawn_listener(mocap, shared.clone(), mocap_session),
        spawn_listener(ws, shared.clone(), console_session),
        {
            let s = shared.clone();
            thread::spawn(move || tick_loop(stage, rx, s))
        },
    ];
    log::info!("control on {control_addr}, mocap on {mocap_addr}, console on ws://{ws_addr}");
    Ok(ServerHandle {
        control_addr,
        mocap_addr,
        ws_addr,
        shared,
        threads,
    })
}

fn spawn_listener(listener: TcpListener, shared: Shared, session: fn(TcpStream, Shared)) -> JoinHandle<()> {
    thread::spawn(move || {
        while !shared.stop.load(Ordering::SeqCst) {
            match listener.accept() {
                Ok((stream, peer)) => {
                    log::info!("connection from {peer}");
                    let s = shared.clone();
                    if stream.set_nonblocking(false).is_ok() {
                        thread::spawn(move || session(stream, s));
                    }
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(POLL),
                Err(e) => {
                    log::warn!("accept failed: {e}");
                    thread::sleep(POLL);
                }
            }
        }
    })
}

fn timed_out(e: &io::Error) -> bool {
    matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut)
}

/// Calls `on_line` for each complete line until EOF, error or shutdown.
fn read_lines(stream: TcpStream, shared: &Shared, mut on_line: impl FnMut(&str)) {
    if stream.set_read_timeout(Some(Duration::from_millis(100))).is_err() {
        return;
    }
    let mut reader = BufReader::new(stream);
    let mut buf = Vec::new();
    while !shared.stop.load(Ordering::SeqCst) {
        match reader.read_until(b'\n', &mut buf) {
            Ok(0) => break,
            Ok(_) => {
                if buf.ends_with(b"\n") {
                    let line = String::from_utf8_lossy(&buf).trim().to_string();
                    if !line.is_empty() {
                        on_line(&line);
                    }
                    buf.clear();
                }
            }
            Err(e) if timed_out(&e) => {}
            Err(e) => {
                log::warn!("read failed: {e}");
                break;
            }
        }
    }
}

fn control_session(stream: TcpStream, shared: Shared) {
    let s = shared.clone();
    read_lines(stream, &shared, |line| match parse_control(line) {
        Ok(msg) => {
            if let Some(c) = map_control(&msg, &s.show.controls) {
                let _ = s.inbound.send(Inbound::Command(c));
            }
        }
        Err(e) => log::warn!("control: {e}: {line:?}"),
    });
}

/// Rebases each connection's timestamps so its first frame lands on the current simulated time.
fn mocap_session(stream: TcpStream, shared: Shared) {
    let peer = stream.peer_addr().map(|a| a.to_string()).unwrap_or_default();
    let s = shared.clone();
    let mut shift = None;
    let mut avatars = BTreeSet::new();
    read_lines(stream, &shared, |line| match parse_mocap_frame(line.as_bytes(), None) {
        Ok(mut frame) => {
            let now = s.tick.load(Ordering::SeqCst) as f64 * s.dt;
            let d = *shift.get_or_insert(now - frame.t);
            frame.t += d;
            avatars.insert(frame.avatar.clone());
            let _ = s.inbound.send(Inbound::Command(Command::Mocap(frame)));
        }
        Err(e) => {
            let _ = s.inbound.send(Inbound::Notice(format!("mocap {peer}: {e}")));
        }
    });
    let _ = shared.inbound.send(Inbound::Notice(format!(
        "mocap source {peer} disconnected; {:?} hold their last pose",
        avatars
    )));
}

fn console_session(stream: TcpStream, shared: Shared) {
    let mut ws = match tungstenite::accept(stream) {
        Ok(ws) => ws,
        Err(e) => {
            log::warn!("websocket handshake failed: {e}");
            return;
        }
    };
    let _ = ws.get_ref().set_read_timeout(Some(POLL));
    let (tx, rx) = mpsc::channel();
    let hello = ServerMessage::Show {
        cues: shared
            .show
            .cues
            .cues()
            .iter()
            .map(|c| CueInfo {
                id: c.id.clone(),
                avatar: c.avatar.clone(),
            })
            .collect(),
        avatars: shared.show.avatars.iter().map(|a| a.id.clone()).collect(),
        pointer: shared.pointer.load(Ordering::SeqCst),
    };
    if ws.send(Message::text(encode_server_message(&hello))).is_err() {
        return;
    }
    shared.clients.lock().expect("client list lock").push(tx);
    console_loop(&mut ws, &rx, &shared);
    let _ = ws.close(None);
}

fn console_loop(ws: &mut WebSocket<TcpStream>, outgoing: &Receiver<String>, shared: &Shared) {
    while !shared.stop.load(Ordering::SeqCst) {
        match ws.read() {
            Ok(Message::Text(t)) => match parse_control(t.as_str()) {
                Ok(msg) => {
                    if let Some(c) = map_control(&msg, &shared.show.controls) {
                        let _ = shared.inbound.send(Inbound::Command(c));
                    }
                }
                Err(e) => {
                    let reply = ServerMessage::Error { message: e.to_string() };
                    if ws.send(Message::text(encode_server_message(&reply))).is_err() {
                        return;
                    }
                }
            },
            Ok(Message::Close(_)) => return,
            Ok(_) => {}
            Err(tungstenite::Error::Io(e)) if timed_out(&e) => {}
            Err(_) => return,
        }
        while let Ok(text) = outgoing.try_recv() {
            if ws.send(Message::text(text)).is_err() {
                return;
            }
        }
    }
}

fn broadcast(shared: &Shared, text: String) {
    let mut clients = shared.clients.lock().expect("client list lock");
    clients.retain(|c| c.send(text.clone()).is_ok());
}

fn tick_loop(mut stage: Stage, inbound: Receiver<Inbound>, shared: Shared) {
    let stride = ((1.0 / CONSOLE_HZ) / shared.dt).ceil().max(1.0) as u64;
    let start = Instant::now();
    // events and diagnostics from ticks between console snapshots ride on the next one
    let (mut held_events, mut held_diags) = (Vec::new(), Vec::new());
    while !shared.stop.load(Ordering::SeqCst) {
        let mut notices = Vec::new();
        while let Ok(m) = inbound.try_recv() {
            match m {
                Inbound::Command(c) => stage.push(c),
                Inbound::Notice(n) => notices.push(n),
            }
        }
        let mut snap = stage.tick();
        snap.diagnostics.extend(notices);
        for d in &snap.diagnostics {
            log::info!("tick {}: {d}", snap.tick);
        }
        shared.pointer.store(snap.cue_pointer, Ordering::SeqCst);
        shared.tick.store(snap.tick, Ordering::SeqCst);
        for e in &snap.events {
            if let StageEvent::CueFired { id, avatar } = e {
                let msg = ServerMessage::CueFired {
                    id: id.clone(),
                    avatar: avatar.clone(),
                    tick: snap.tick,
                };
                broadcast(&shared, encode_server_message(&msg));
            }
        }
        held_events.append(&mut snap.events);
        held_diags.append(&mut snap.diagnostics);
        if snap.tick % stride == 0 {
            snap.events = std::mem::take(&mut held_events);
            snap.diagnostics = std::mem::take(&mut held_diags);
            broadcast(&shared, encode_server_message(&ServerMessage::Snapshot(snap)));
        }
        let due = start + Duration::from_secs_f64(stage.tick_index() as f64 * shared.dt);
        if let Some(wait) = due.checked_duration_since(Instant::now()) {
            thread::sleep(wait);
        }
    }
}
