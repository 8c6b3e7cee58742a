//! Threaded control server.
//!
//! One engine thread owns the [`ControlCore`]. Transports turn client
//! connections into messages on a shared channel and drain a bounded
//! per-client outbox. A slow client never stalls the engine: when its
//! outbox is full the oldest event is discarded and the loss is reported in
//! the next event it receives.

use std::collections::{BTreeMap, VecDeque};
use std::io::{self, BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use super::{encode_event, ControlCore, Event, TranscriptEntry};

pub const DEFAULT_OUTBOX_CAPACITY: usize = 1024;

/// Upper bound on ticks executed between two looks at the inbox.
const MAX_BATCH: u64 = 1000;
const IDLE_POLL: Duration = Duration::from_millis(20);

pub type ClientId = u64;

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub outbox_capacity: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            outbox_capacity: DEFAULT_OUTBOX_CAPACITY,
        }
    }
}

#[derive(Default)]
struct OutboxState {
    queue: VecDeque<Event>,
    dropped_total: u64,
    unreported: bool,
    closed: bool,
}

/// Bounded drop-oldest event queue for one client.
pub struct Outbox {
    state: Mutex<OutboxState>,
    ready: Condvar,
    capacity: usize,
}

pub enum Pop {
    /// An event and, if events were lost since the previous pop, the
    /// client's cumulative drop count.
    Event(Event, u64),
    Empty,
    Closed,
}

impl Outbox {
    pub fn new(capacity: usize) -> Self {
        Outbox {
            state: Mutex::new(OutboxState::default()),
            ready: Condvar::new(),
            capacity: capacity.max(1),
        }
    }

    pub fn push(&self, event: Event) {
        let mut s = self.state.lock().expect("outbox lock");
        if s.closed {
            return;
        }
        if s.queue.len() >= self.capacity {
            s.queue.pop_front();
            s.dropped_total += 1;
            s.unreported = true;
        }
        s.queue.push_back(event);
        self.ready.notify_one();
    }

    pub fn close(&self) {
        self.state.lock().expect("outbox lock").closed = true;
        self.ready.notify_all();
    }

    /// Waits up to `timeout` (forever if `None`) for the next event. Events
    /// queued before closing are still delivered.
    pub fn pop(&self, timeout: Option<Duration>) -> Pop {
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut s = self.state.lock().expect("outbox lock");
        loop {
            if let Some(ev) = s.queue.pop_front() {
                let dropped = if s.unreported { s.dropped_total } else { 0 };
                s.unreported = false;
                return Pop::Event(ev, dropped);
            }
            if s.closed {
                return Pop::Closed;
            }
            match deadline {
                None => s = self.ready.wait(s).expect("outbox lock"),
                Some(d) => {
                    let now = Instant::now();
                    if now >= d {
                        return Pop::Empty;
                    }
                    s = self.ready.wait_timeout(s, d - now).expect("outbox lock").0;
                }
            }
        }
    }

    pub fn dropped(&self) -> u64 {
        self.state.lock().expect("outbox lock").dropped_total
    }
}

enum Inbound {
    Connect(ClientId, Arc<Outbox>),
    Line(ClientId, String),
    Disconnect(ClientId),
    /// Finish the current run, then stop.
    Drain,
    Shutdown,
}

/// A running server. Dropping it without [`ServerHandle::shutdown`] leaves
/// the engine thread running until the process exits.
pub struct ServerHandle {
    tx: Sender<Inbound>,
    engine: Option<JoinHandle<Vec<TranscriptEntry>>>,
    next_id: Arc<AtomicU64>,
    stop: Arc<AtomicBool>,
    config: ServerConfig,
    workers: Vec<JoinHandle<()>>,
}

/// Starts the engine thread around `core`.
pub fn start(core: ControlCore, config: ServerConfig) -> ServerHandle {
    let (tx, rx) = mpsc::channel();
    let engine = thread::Builder::new()
        .name("etlsim-engine".into())
        .spawn(move || engine_loop(core, rx))
        .expect("spawn engine thread");
    ServerHandle {
        tx,
        engine: Some(engine),
        next_id: Arc::new(AtomicU64::new(1)),
        stop: Arc::new(AtomicBool::new(false)),
        config,
        workers: Vec::new(),
    }
}

impl ServerHandle {
    /// Accepts TCP clients on `listener` until shutdown.
    pub fn serve_tcp(&mut self, listener: TcpListener) -> io::Result<()> {
        listener.set_nonblocking(true)?;
        let (tx, ids, stop, cap) = self.parts();
        let worker = thread::spawn(move || {
            while !stop.load(Ordering::Relaxed) {
                match listener.accept() {
                    Ok((stream, addr)) => {
                        eprintln!("etlsim: connection from {addr}");
                        let _ = stream.set_nonblocking(false);
                        let id = ids.fetch_add(1, Ordering::Relaxed);
                        if let Ok(read_half) = stream.try_clone() {
                            connect(&tx, id, cap, BufReader::new(read_half), stream, false);
                        }
                    }
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                        thread::sleep(Duration::from_millis(10))
                    }
                    Err(_) => thread::sleep(Duration::from_millis(10)),
                }
            }
        });
        self.workers.push(worker);
        Ok(())
    }

    /// Accepts browser clients on `listener`. Each WebSocket text message
    /// carries one or more protocol lines; each event is sent as one text
    /// message.
    pub fn serve_websocket(&mut self, listener: TcpListener) -> io::Result<()> {
        listener.set_nonblocking(true)?;
        let (tx, ids, stop, cap) = self.parts();
        let worker = thread::spawn(move || {
            while !stop.load(Ordering::Relaxed) {
                match listener.accept() {
                    Ok((stream, addr)) => {
                        eprintln!("etlsim: websocket connection from {addr}");
                        let _ = stream.set_nonblocking(false);
                        let id = ids.fetch_add(1, Ordering::Relaxed);
                        let tx = tx.clone();
                        thread::spawn(move || websocket_client(stream, id, tx, cap));
                    }
                    Err(_) => thread::sleep(Duration::from_millis(10)),
                }
            }
        });
        self.workers.push(worker);
        Ok(())
    }

    /// Attaches one client over arbitrary byte streams (e.g. stdin/stdout).
    /// When `drain_on_eof` is set, end of input lets the current run finish
    /// and then stops the server.
    pub fn attach<R, W>(&mut self, reader: R, writer: W, drain_on_eof: bool) -> JoinHandle<()>
    where
        R: BufRead + Send + 'static,
        W: Write + Send + 'static,
    {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        connect(
            &self.tx,
            id,
            self.config.outbox_capacity,
            reader,
            writer,
            drain_on_eof,
        )
    }

    fn parts(&self) -> (Sender<Inbound>, Arc<AtomicU64>, Arc<AtomicBool>, usize) {
        (
            self.tx.clone(),
            Arc::clone(&self.next_id),
            Arc::clone(&self.stop),
            self.config.outbox_capacity,
        )
    }

    /// Blocks until the engine thread exits (after a drain) and returns the
    /// command transcript.
    pub fn wait(mut self) -> Vec<TranscriptEntry> {
        let transcript = self
            .engine
            .take()
            .map(|h| h.join().unwrap_or_default())
            .unwrap_or_default();
        self.stop_workers();
        transcript
    }

    /// Stops the engine at the next tick boundary and returns the command
    /// transcript.
    pub fn shutdown(self) -> Vec<TranscriptEntry> {
        let _ = self.tx.send(Inbound::Shutdown);
        self.wait()
    }

    fn stop_workers(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

/// Registers a client and spawns its reader and writer threads. Returns
/// the writer thread, which ends once the server closes the outbox.
fn connect<R, W>(
    tx: &Sender<Inbound>,
    id: ClientId,
    capacity: usize,
    reader: R,
    mut writer: W,
    drain_on_eof: bool,
) -> JoinHandle<()>
where
    R: BufRead + Send + 'static,
    W: Write + Send + 'static,
{
    let outbox = Arc::new(Outbox::new(capacity));
    let _ = tx.send(Inbound::Connect(id, Arc::clone(&outbox)));
    let rtx = tx.clone();
    thread::spawn(move || {
        for line in reader.lines() {
            let Ok(line) = line else { break };
            if line.trim().is_empty() {
                continue;
            }
            if rtx.send(Inbound::Line(id, line)).is_err() {
                return;
            }
        }
        let _ = rtx.send(if drain_on_eof {
            Inbound::Drain
        } else {
            Inbound::Disconnect(id)
        });
    });
    thread::spawn(move || loop {
        match outbox.pop(None) {
            Pop::Event(ev, dropped) => {
                let line = encode_event(&ev, dropped);
                if writeln!(writer, "{line}")
                    .and_then(|_| writer.flush())
                    .is_err()
                {
                    outbox.close();
                    return;
                }
            }
            Pop::Closed => return,
            Pop::Empty => {}
        }
    })
}

fn websocket_client(stream: TcpStream, id: ClientId, tx: Sender<Inbound>, capacity: usize) {
    use tungstenite::{Error, Message};

    let Ok(mut ws) = tungstenite::accept(stream) else {
        return;
    };
    if ws
        .get_ref()
        .set_read_timeout(Some(Duration::from_millis(10)))
        .is_err()
    {
        return;
    }
    let outbox = Arc::new(Outbox::new(capacity));
    if tx.send(Inbound::Connect(id, Arc::clone(&outbox))).is_err() {
        return;
    }
    loop {
        match ws.read() {
            Ok(Message::Text(text)) => {
                for line in text.as_str().lines().filter(|l| !l.trim().is_empty()) {
                    let _ = tx.send(Inbound::Line(id, line.to_string()));
                }
            }
            Ok(Message::Close(_)) => break,
            Ok(_) => {}
            Err(Error::Io(e))
                if matches!(
                    e.kind(),
                    io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut
                ) => {}
            Err(_) => break,
        }
        loop {
            match outbox.pop(Some(Duration::ZERO)) {
                Pop::Event(ev, dropped) => {
                    if ws.send(Message::text(encode_event(&ev, dropped))).is_err() {
                        let _ = tx.send(Inbound::Disconnect(id));
                        return;
                    }
                }
                Pop::Empty => break,
                Pop::Closed => {
                    let _ = ws.close(None);
                    let _ = ws.flush();
                    return;
                }
            }
        }
    }
    let _ = tx.send(Inbound::Disconnect(id));
}

fn engine_loop(mut core: ControlCore, rx: Receiver<Inbound>) -> Vec<TranscriptEntry> {
    let mut clients: BTreeMap<ClientId, Arc<Outbox>> = BTreeMap::new();
    let mut draining = false;
    // pacing reference: wall time and tick count when the current pace began
    let mut anchor: Option<(Instant, u64, u64)> = None;

    let send = |clients: &BTreeMap<ClientId, Arc<Outbox>>, from: Option<ClientId>, ev: Event| {
        if ev.is_broadcast() {
            for c in clients.values() {
                c.push(ev.clone());
            }
        } else if let Some(c) = from.and_then(|id| clients.get(&id)) {
            c.push(ev);
        }
    };

    'outer: loop {
        let first = if core.is_running() {
            match rx.try_recv() {
                Ok(m) => Some(m),
                Err(mpsc::TryRecvError::Empty) => None,
                Err(mpsc::TryRecvError::Disconnected) => break,
            }
        } else {
            if draining {
                break;
            }
            match rx.recv_timeout(IDLE_POLL) {
                Ok(m) => Some(m),
                Err(RecvTimeoutError::Timeout) => None,
                Err(RecvTimeoutError::Disconnected) => break,
            }
        };
        let pending = first
            .into_iter()
            .chain(std::iter::from_fn(|| rx.try_recv().ok()));
        for msg in pending {
            match msg {
                Inbound::Connect(id, outbox) => {
                    clients.insert(id, outbox);
                }
                Inbound::Disconnect(id) => {
                    if let Some(c) = clients.remove(&id) {
                        c.close();
                    }
                }
                Inbound::Line(id, line) => {
                    let pace = core.ticks_per_second();
                    for ev in core.handle_line(&line) {
                        send(&clients, Some(id), ev);
                    }
                    if pace != core.ticks_per_second() || !core.is_running() {
                        anchor = None;
                    }
                }
                Inbound::Drain => draining = true,
                Inbound::Shutdown => break 'outer,
            }
        }

        if !core.is_running() {
            anchor = None;
            continue;
        }
        let pace = core.ticks_per_second();
        let (since, base, _) = *anchor.get_or_insert((Instant::now(), core.tick(), pace));
        let target = base + (since.elapsed().as_secs_f64() * pace as f64) as u64;
        let due = target.saturating_sub(core.tick()).min(MAX_BATCH);
        if due == 0 {
            let wait = Duration::from_secs_f64(1.0 / pace as f64).min(IDLE_POLL);
            thread::sleep(wait);
            continue;
        }
        for _ in 0..due {
            for ev in core.advance() {
                send(&clients, None, ev);
            }
            if !core.is_running() {
                break;
            }
        }
    }

    for c in clients.values() {
        c.close();
    }
    core.transcript().to_vec()
}
