//! Long-running services: the mock inference server, its socket transport,
//! and the manager that launches, probes, registers and stops instances.

use std::collections::VecDeque;
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, unbounded, Receiver, RecvTimeoutError, Sender};
use indexmap::IndexMap;
use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::event::{Entity, EventKind, ExecutionEvent, RunClock};
use crate::mapper::Placement;
use crate::model::{InferenceRequest, MockServiceConfig, Payload, ServiceTransport, TaskDescription};

pub const DEFAULT_PROBE_INTERVAL: f64 = 0.1;
pub const MOCK_KIND: &str = "mock-inference";
const MAX_FRAME: usize = 16 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EndpointState {
    Starting,
    Ready,
    Stopped,
    Failed,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Capacity {
    pub max_num_seqs: u32,
    pub max_num_batched_tokens: u64,
    pub token_rate: f64,
}

impl From<&MockServiceConfig> for Capacity {
    fn from(c: &MockServiceConfig) -> Self {
        Capacity {
            max_num_seqs: c.max_num_seqs,
            max_num_batched_tokens: c.max_num_batched_tokens,
            token_rate: c.token_rate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServiceEndpoint {
    pub service_id: String,
    pub name: String,
    /// `host:port` for socket services, `inproc://<id>` otherwise.
    pub address: String,
    pub state: EndpointState,
    pub capacity: Capacity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceResponse {
    pub id: String,
    pub total_tokens: u64,
    pub queue_latency: f64,
    pub service_latency: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ServiceError {
    #[error("service {service} not ready after {timeout} s")]
    ServiceStartTimeout { service: String, timeout: f64 },
    #[error("cannot start service: {0}")]
    SpawnFailure(String),
    #[error("unknown service {0}")]
    UnknownEntity(String),
    #[error("service stopped")]
    ServiceStopped,
    #[error("service queue is full")]
    QueueOverflow,
    #[error("transport error: {0}")]
    Transport(String),
}

impl ServiceError {
    fn wire_name(&self) -> &'static str {
        match self {
            ServiceError::QueueOverflow => "QueueOverflow",
            ServiceError::ServiceStopped => "ServiceStopped",
            _ => "Transport",
        }
    }
}

pub type Reply = Result<InferenceResponse, ServiceError>;

enum Msg {
    Infer(InferenceRequest, Sender<Reply>),
    Stop,
}

struct Core {
    cfg: MockServiceConfig,
    epoch: Instant,
    accepting: AtomicBool,
    outstanding: AtomicUsize,
    tokens_done: AtomicU64,
}

impl Core {
    fn elapsed(&self) -> f64 {
        self.epoch.elapsed().as_secs_f64()
    }
}

/// In-process mock inference server.
///
/// Admitted sequences share `token_rate` equally. Up to `max_num_seqs` are
/// admitted in FIFO order while their summed prompt tokens stay within
/// `max_num_batched_tokens`; a lone sequence is always admitted. Latencies are
/// measured on the service's own timeline, so a lone request reports exactly
/// `total_tokens / token_rate`.
pub struct MockService {
    core: Arc<Core>,
    tx: Sender<Msg>,
    worker: Mutex<Option<JoinHandle<()>>>,
}

impl MockService {
    pub fn spawn(cfg: MockServiceConfig) -> Self {
        let core = Arc::new(Core {
            cfg,
            epoch: Instant::now(),
            accepting: AtomicBool::new(true),
            outstanding: AtomicUsize::new(0),
            tokens_done: AtomicU64::new(0),
        });
        let (tx, rx) = unbounded();
        let c = core.clone();
        let worker = thread::Builder::new()
            .name("mock-inference".into())
            .spawn(move || serve_loop(c, rx))
            .expect("spawn mock service thread");
        MockService {
            core,
            tx,
            worker: Mutex::new(Some(worker)),
        }
    }

    pub fn config(&self) -> &MockServiceConfig {
        &self.core.cfg
    }

    /// Seconds since the service started.
    pub fn elapsed(&self) -> f64 {
        self.core.elapsed()
    }

    pub fn ping(&self) -> bool {
        self.core.accepting.load(Ordering::SeqCst)
            && self.core.cfg.answers_probes
            && self.elapsed() >= self.core.cfg.warmup
    }

    pub fn tokens_processed(&self) -> u64 {
        self.core.tokens_done.load(Ordering::SeqCst)
    }

    pub fn submit(&self, req: InferenceRequest) -> Result<Receiver<Reply>, ServiceError> {
        if !self.core.accepting.load(Ordering::SeqCst) {
            return Err(ServiceError::ServiceStopped);
        }
        let cap = self.core.cfg.queue_capacity;
        let prev = self.core.outstanding.fetch_add(1, Ordering::SeqCst);
        if prev >= cap {
            self.core.outstanding.fetch_sub(1, Ordering::SeqCst);
            return Err(ServiceError::QueueOverflow);
        }
        let (rtx, rrx) = bounded(1);
        if self.tx.send(Msg::Infer(req, rtx)).is_err() {
            self.core.outstanding.fetch_sub(1, Ordering::SeqCst);
            return Err(ServiceError::ServiceStopped);
        }
        Ok(rrx)
    }

    pub fn infer(&self, req: InferenceRequest) -> Reply {
        let rx = self.submit(req)?;
        rx.recv().unwrap_or(Err(ServiceError::ServiceStopped))
    }

    /// Stop accepting work; everything still queued or in service fails with
    /// `ServiceStopped`. Idempotent.
    pub fn stop(&self) {
        self.core.accepting.store(false, Ordering::SeqCst);
        let _ = self.tx.send(Msg::Stop);
        if let Some(h) = self.worker.lock().take() {
            let _ = h.join();
        }
    }
}

impl Drop for MockService {
    fn drop(&mut self) {
        self.stop();
    }
}

struct Seq {
    req: InferenceRequest,
    arrival: f64,
    admitted: f64,
    remaining: f64,
    reply: Sender<Reply>,
}

struct Timeline {
    t: f64,
    waiting: VecDeque<Seq>,
    active: Vec<Seq>,
}

impl Timeline {
    fn per_seq_rate(&self, rate: f64) -> f64 {
        rate / self.active.len() as f64
    }

    fn next_completion(&self, rate: f64) -> Option<(usize, f64)> {
        let r = self.per_seq_rate(rate);
        self.active
            .iter()
            .enumerate()
            .map(|(i, s)| (i, self.t + s.remaining / r))
            .min_by(|a, b| a.1.total_cmp(&b.1))
    }

    /// Move model time to `target`, completing sequences in order on the way.
    fn advance_to(&mut self, target: f64, core: &Core) {
        let rate = core.cfg.token_rate;
        loop {
            let Some((idx, tc)) = self.next_completion(rate) else {
                self.t = self.t.max(target);
                return;
            };
            if tc > target {
                let done = (target - self.t) * self.per_seq_rate(rate);
                for s in &mut self.active {
                    s.remaining -= done;
                }
                self.t = target;
                return;
            }
            let done = self.active[idx].remaining;
            for s in &mut self.active {
                s.remaining -= done;
            }
            self.active[idx].remaining = 0.0;
            self.t = tc;
            let mut i = 0;
            while i < self.active.len() {
                if self.active[i].remaining <= 1e-6 {
                    let s = self.active.remove(i);
                    let total = s.req.total_tokens();
                    core.tokens_done.fetch_add(total, Ordering::SeqCst);
                    core.outstanding.fetch_sub(1, Ordering::SeqCst);
                    let _ = s.reply.send(Ok(InferenceResponse {
                        id: s.req.id,
                        total_tokens: total,
                        queue_latency: s.admitted - s.arrival,
                        service_latency: self.t - s.admitted,
                    }));
                } else {
                    i += 1;
                }
            }
            self.admit(core);
        }
    }

    fn admit(&mut self, core: &Core) {
        let cfg = &core.cfg;
        let mut batched: u64 = self.active.iter().map(|s| s.req.prompt_tokens).sum();
        while let Some(front) = self.waiting.front() {
            let fits = self.active.is_empty()
                || (self.active.len() < cfg.max_num_seqs as usize
                    && batched + front.req.prompt_tokens <= cfg.max_num_batched_tokens);
            if !fits {
                break;
            }
            let mut s = self.waiting.pop_front().expect("front exists");
            s.admitted = self.t;
            batched += s.req.prompt_tokens;
            self.active.push(s);
        }
    }

    fn fail_all(&mut self, core: &Core) {
        for s in self.waiting.drain(..).chain(self.active.drain(..)) {
            core.outstanding.fetch_sub(1, Ordering::SeqCst);
            let _ = s.reply.send(Err(ServiceError::ServiceStopped));
        }
    }
}

fn serve_loop(core: Arc<Core>, rx: Receiver<Msg>) {
    let rate = core.cfg.token_rate;
    let mut tl = Timeline {
        t: 0.0,
        waiting: VecDeque::new(),
        active: Vec::new(),
    };
    loop {
        let next = tl.next_completion(rate).map(|(_, t)| t);
        let msg = match next {
            Some(tc) => {
                let deadline = core.epoch + Duration::from_secs_f64(tc.max(0.0));
                match rx.recv_deadline(deadline) {
                    Ok(m) => Some(m),
                    Err(RecvTimeoutError::Timeout) => None,
                    Err(RecvTimeoutError::Disconnected) => Some(Msg::Stop),
                }
            }
            None => Some(rx.recv().unwrap_or(Msg::Stop)),
        };
        match msg {
            None => {
                let tc = next.expect("deadline implies a completion");
                tl.advance_to(tc, &core);
            }
            Some(Msg::Infer(req, reply)) => {
                let now = core.elapsed().max(tl.t);
                tl.advance_to(now, &core);
                let remaining = req.total_tokens() as f64;
                tl.waiting.push_back(Seq {
                    req,
                    arrival: now,
                    admitted: now,
                    remaining,
                    reply,
                });
                tl.admit(&core);
            }
            Some(Msg::Stop) => {
                tl.fail_all(&core);
                while let Ok(Msg::Infer(_, reply)) = rx.try_recv() {
                    core.outstanding.fetch_sub(1, Ordering::SeqCst);
                    let _ = reply.send(Err(ServiceError::ServiceStopped));
                }
                return;
            }
        }
    }
}

/// Write one frame: a big-endian u32 byte length followed by JSON.
pub fn write_frame<W: Write>(w: &mut W, value: &Value) -> io::Result<()> {
    let body = serde_json::to_vec(value)?;
    let len = u32::try_from(body.len()).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "frame too large"))?;
    w.write_all(&len.to_be_bytes())?;
    w.write_all(&body)?;
    w.flush()
}

pub fn read_frame<R: Read>(r: &mut R) -> io::Result<Value> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "frame too large"));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    serde_json::from_slice(&body).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

/// TCP front end for a [`MockService`] on 127.0.0.1.
pub struct SocketServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    conns: Arc<Mutex<Vec<TcpStream>>>,
    acceptor: Option<JoinHandle<()>>,
}

impl SocketServer {
    pub fn bind(service: Arc<MockService>) -> io::Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let conns: Arc<Mutex<Vec<TcpStream>>> = Arc::default();
        let (s, c) = (stop.clone(), conns.clone());
        let acceptor = thread::Builder::new()
            .name("mock-inference-accept".into())
            .spawn(move || {
                for stream in listener.incoming() {
                    if s.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = stream else { continue };
                    let _ = stream.set_nodelay(true);
                    if let Ok(clone) = stream.try_clone() {
                        c.lock().push(clone);
                    }
                    let svc = service.clone();
                    thread::spawn(move || handle_conn(stream, svc));
                }
            })?;
        Ok(SocketServer {
            addr,
            stop,
            conns,
            acceptor: Some(acceptor),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(&mut self) {
        if self.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        // Wake the blocking accept.
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
        for c in self.conns.lock().drain(..) {
            let _ = c.shutdown(Shutdown::Both);
        }
    }
}

impl Drop for SocketServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn handle_conn(mut stream: TcpStream, service: Arc<MockService>) {
    while let Ok(msg) = read_frame(&mut stream) {
        let reply = if msg.get("ping").is_some() {
            json!({ "ready": service.ping() })
        } else {
            match serde_json::from_value::<InferenceRequest>(msg) {
                Ok(req) => {
                    let id = req.id.clone();
                    match service.infer(req) {
                        Ok(resp) => serde_json::to_value(resp).expect("response serializes"),
                        Err(e) => json!({ "id": id, "error": e.wire_name() }),
                    }
                }
                Err(e) => json!({ "error": "Transport", "detail": e.to_string() }),
            }
        };
        if write_frame(&mut stream, &reply).is_err() {
            break;
        }
    }
}

pub fn socket_ping(addr: &str) -> io::Result<bool> {
    let mut s = TcpStream::connect(addr)?;
    s.set_read_timeout(Some(Duration::from_secs(5)))?;
    write_frame(&mut s, &json!({ "ping": true }))?;
    let v = read_frame(&mut s)?;
    Ok(v.get("ready").and_then(Value::as_bool).unwrap_or(false))
}

pub fn socket_infer(addr: &str, req: &InferenceRequest) -> Reply {
    let transport = |e: io::Error| ServiceError::Transport(e.to_string());
    let mut s = TcpStream::connect(addr).map_err(transport)?;
    let _ = s.set_nodelay(true);
    write_frame(&mut s, &serde_json::to_value(req).expect("request serializes")).map_err(transport)?;
    let v = read_frame(&mut s).map_err(transport)?;
    match v.get("error").and_then(Value::as_str) {
        Some("QueueOverflow") => Err(ServiceError::QueueOverflow),
        Some("ServiceStopped") => Err(ServiceError::ServiceStopped),
        Some(other) => Err(ServiceError::Transport(other.to_string())),
        None => serde_json::from_value(v).map_err(|e| ServiceError::Transport(e.to_string())),
    }
}

/// Per-service request accounting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceCounters {
    pub sent: u64,
    pub responses: u64,
    pub errors: u64,
}

struct Entry {
    endpoint: ServiceEndpoint,
    task_id: String,
    service: Option<Arc<MockService>>,
    server: Option<SocketServer>,
    counters: ServiceCounters,
    probes: u32,
    launched_at: f64,
    warmup: f64,
    answers_probes: bool,
    failure: Option<ServiceError>,
    virtual_busy_until: f64,
}

struct ManagerInner {
    clock: RunClock,
    probe_interval: f64,
    ready_timeout: Mutex<f64>,
    entries: Mutex<IndexMap<String, Entry>>,
    registry: Mutex<Vec<String>>,
    events: Mutex<Vec<ExecutionEvent>>,
    changed: Condvar,
}

/// Launches services, probes readiness, and keeps the endpoint registry.
///
/// On a wall clock each instance is a live [`MockService`] probed from a
/// background thread. On a virtual clock no threads run: probes fire when the
/// caller advances time through [`ServiceManager::poll_virtual`], and requests
/// are served first-come first-served at `token_rate` via
/// [`ServiceManager::reserve_virtual`].
#[derive(Clone)]
pub struct ServiceManager {
    inner: Arc<ManagerInner>,
}

impl ServiceManager {
    pub fn new(clock: RunClock) -> Self {
        Self::with_probe_interval(clock, DEFAULT_PROBE_INTERVAL)
    }

    pub fn with_probe_interval(clock: RunClock, probe_interval: f64) -> Self {
        ServiceManager {
            inner: Arc::new(ManagerInner {
                clock,
                probe_interval,
                ready_timeout: Mutex::new(30.0),
                entries: Mutex::new(IndexMap::new()),
                registry: Mutex::new(Vec::new()),
                events: Mutex::new(Vec::new()),
                changed: Condvar::new(),
            }),
        }
    }

    pub fn clock(&self) -> &RunClock {
        &self.inner.clock
    }

    pub fn set_ready_timeout(&self, seconds: f64) {
        *self.inner.ready_timeout.lock() = seconds;
    }

    pub fn probe_interval(&self) -> f64 {
        self.inner.probe_interval
    }

    /// Start the service described by `task` and begin probing it. Returns the
    /// service id (the task id) without waiting for readiness.
    pub fn launch_service(&self, task: &TaskDescription, placement: &Placement) -> Result<String, ServiceError> {
        let Payload::Service(p) = &task.payload else {
            return Err(ServiceError::SpawnFailure(format!("task {} is not a service", task.id)));
        };
        if p.kind != MOCK_KIND {
            return Err(ServiceError::SpawnFailure(format!("unknown service kind {}", p.kind)));
        }
        let id = task.id.clone();
        if self.inner.entries.lock().contains_key(&id) {
            return Err(ServiceError::SpawnFailure(format!("service {id} already launched")));
        }
        let virtual_mode = self.inner.clock.is_virtual();
        let (service, server, address) = if virtual_mode {
            (None, None, format!("inproc://{id}"))
        } else {
            let svc = Arc::new(MockService::spawn(p.config.clone()));
            match p.config.transport {
                ServiceTransport::InProcess => (Some(svc), None, format!("inproc://{id}")),
                ServiceTransport::Socket => {
                    let server = SocketServer::bind(svc.clone()).map_err(|e| ServiceError::SpawnFailure(e.to_string()))?;
                    let addr = server.addr().to_string();
                    (Some(svc), Some(server), addr)
                }
            }
        };
        let now = self.inner.clock.now();
        let endpoint = ServiceEndpoint {
            service_id: id.clone(),
            name: p.name.clone(),
            address: address.clone(),
            state: EndpointState::Starting,
            capacity: Capacity::from(&p.config),
        };
        self.inner.entries.lock().insert(
            id.clone(),
            Entry {
                endpoint,
                task_id: task.id.clone(),
                service: service.clone(),
                server,
                counters: ServiceCounters::default(),
                probes: 0,
                launched_at: now,
                warmup: p.config.warmup,
                answers_probes: p.config.answers_probes,
                failure: None,
                virtual_busy_until: now,
            },
        );
        self.push_event(
            ExecutionEvent::new(now, Entity::Service, id.clone(), EventKind::ServiceStarting)
                .with("name", p.name.clone())
                .with("address", address.clone())
                .with("task", task.id.clone())
                .with("nodes", placement.nodes().into_iter().collect::<Vec<_>>().join(",")),
        );
        if let Some(svc) = service {
            let mgr = self.clone();
            let sid = id.clone();
            let socket = p.config.transport == ServiceTransport::Socket;
            thread::Builder::new()
                .name(format!("probe-{id}"))
                .spawn(move || mgr.probe_loop(&sid, &svc, socket.then_some(address)))
                .map_err(|e| ServiceError::SpawnFailure(e.to_string()))?;
        }
        Ok(id)
    }

    fn probe_loop(&self, id: &str, svc: &MockService, socket: Option<String>) {
        let t0 = self.inner.clock.now();
        let timeout = *self.inner.ready_timeout.lock();
        let interval = self.inner.probe_interval;
        for k in 0u32.. {
            let offset = f64::from(k) * interval;
            let wait = t0 + offset - self.inner.clock.now();
            if wait > 0.0 {
                thread::sleep(Duration::from_secs_f64(wait));
            }
            if self.state_of(id) != Some(EndpointState::Starting) {
                return;
            }
            let ready = match &socket {
                Some(addr) => socket_ping(addr).unwrap_or(false),
                None => svc.ping(),
            };
            if ready {
                self.mark_ready(id, k + 1);
                return;
            }
            if offset >= timeout {
                self.mark_failed(id, k + 1, timeout);
                return;
            }
        }
    }

    fn state_of(&self, id: &str) -> Option<EndpointState> {
        self.inner.entries.lock().get(id).map(|e| e.endpoint.state)
    }

    fn mark_ready(&self, id: &str, probes: u32) {
        let now = self.inner.clock.now();
        let mut entries = self.inner.entries.lock();
        let Some(e) = entries.get_mut(id) else { return };
        if e.endpoint.state != EndpointState::Starting {
            return;
        }
        e.endpoint.state = EndpointState::Ready;
        e.probes = probes;
        self.inner.registry.lock().push(id.to_string());
        let ev = ExecutionEvent::new(now, Entity::Service, id, EventKind::ServiceReady)
            .with("name", e.endpoint.name.clone())
            .with("address", e.endpoint.address.clone())
            .with("probes", probes);
        drop(entries);
        self.push_event(ev);
        self.inner.changed.notify_all();
    }

    fn mark_failed(&self, id: &str, probes: u32, timeout: f64) {
        let now = self.inner.clock.now();
        let mut entries = self.inner.entries.lock();
        let Some(e) = entries.get_mut(id) else { return };
        e.endpoint.state = EndpointState::Failed;
        e.probes = probes;
        e.failure = Some(ServiceError::ServiceStartTimeout {
            service: id.to_string(),
            timeout,
        });
        let svc = e.service.take();
        let server = e.server.take();
        drop(entries);
        drop(server);
        if let Some(s) = svc {
            s.stop();
        }
        self.push_event(
            ExecutionEvent::new(now, Entity::Service, id, EventKind::Failed)
                .with("reason", "ready timeout")
                .with("probes", probes),
        );
        self.inner.changed.notify_all();
    }

    /// Launch and block until the service is Ready or has timed out.
    pub fn start_service(&self, task: &TaskDescription, placement: &Placement) -> Result<ServiceEndpoint, ServiceError> {
        let id = self.launch_service(task, placement)?;
        self.wait_ready(&id)
    }

    pub fn wait_ready(&self, id: &str) -> Result<ServiceEndpoint, ServiceError> {
        if let Some(v) = self.inner.clock.as_virtual() {
            while self.state_of(id) == Some(EndpointState::Starting) {
                match self.next_due() {
                    Some(t) => {
                        v.set(t);
                        self.poll_virtual();
                    }
                    None => break,
                }
            }
        }
        let mut entries = self.inner.entries.lock();
        loop {
            let e = entries.get(id).ok_or_else(|| ServiceError::UnknownEntity(id.to_string()))?;
            match e.endpoint.state {
                EndpointState::Ready => return Ok(e.endpoint.clone()),
                EndpointState::Starting => self.inner.changed.wait(&mut entries),
                EndpointState::Failed => return Err(e.failure.clone().unwrap_or(ServiceError::ServiceStopped)),
                EndpointState::Stopped => return Err(ServiceError::ServiceStopped),
            }
        }
    }

    /// Virtual clock only: time of the earliest pending probe.
    pub fn next_due(&self) -> Option<f64> {
        if !self.inner.clock.is_virtual() {
            return None;
        }
        let interval = self.inner.probe_interval;
        self.inner
            .entries
            .lock()
            .values()
            .filter(|e| e.endpoint.state == EndpointState::Starting)
            .map(|e| e.launched_at + f64::from(e.probes) * interval)
            .min_by(f64::total_cmp)
    }

    /// Virtual clock only: run every probe due at or before the current time.
    pub fn poll_virtual(&self) {
        let Some(v) = self.inner.clock.as_virtual() else { return };
        let now = v.now();
        let interval = self.inner.probe_interval;
        let timeout = *self.inner.ready_timeout.lock();
        loop {
            let mut outcome = None;
            {
                let mut entries = self.inner.entries.lock();
                for (id, e) in entries.iter_mut() {
                    if e.endpoint.state != EndpointState::Starting {
                        continue;
                    }
                    let offset = f64::from(e.probes) * interval;
                    if e.launched_at + offset > now {
                        continue;
                    }
                    e.probes += 1;
                    if e.answers_probes && offset >= e.warmup {
                        outcome = Some((id.clone(), e.probes, true));
                    } else if offset >= timeout {
                        outcome = Some((id.clone(), e.probes, false));
                    } else {
                        outcome = Some((String::new(), 0, false));
                    }
                    break;
                }
            }
            match outcome {
                None => return,
                Some((id, probes, true)) => self.mark_ready(&id, probes),
                Some((id, probes, false)) if !id.is_empty() => self.mark_failed(&id, probes, timeout),
                Some(_) => {}
            }
        }
    }

    /// Ready endpoints registered under `name`, in registration order.
    pub fn lookup(&self, name: &str) -> Vec<ServiceEndpoint> {
        let registry = self.inner.registry.lock();
        let entries = self.inner.entries.lock();
        registry
            .iter()
            .filter_map(|id| entries.get(id))
            .filter(|e| e.endpoint.name == name && e.endpoint.state == EndpointState::Ready)
            .map(|e| e.endpoint.clone())
            .collect()
    }

    pub fn endpoint(&self, id: &str) -> Option<ServiceEndpoint> {
        self.inner.entries.lock().get(id).map(|e| e.endpoint.clone())
    }

    pub fn probes(&self, id: &str) -> Option<u32> {
        self.inner.entries.lock().get(id).map(|e| e.probes)
    }

    pub fn task_of(&self, id: &str) -> Option<String> {
        self.inner.entries.lock().get(id).map(|e| e.task_id.clone())
    }

    pub fn counters(&self, id: &str) -> Option<ServiceCounters> {
        self.inner.entries.lock().get(id).map(|e| e.counters)
    }

    /// Services launched but neither Ready nor failed yet.
    pub fn pending_starts(&self) -> usize {
        self.inner
            .entries
            .lock()
            .values()
            .filter(|e| e.endpoint.state == EndpointState::Starting)
            .count()
    }

    pub fn service_ids(&self) -> Vec<String> {
        self.inner.entries.lock().keys().cloned().collect()
    }

    /// Deregister, then terminate. Queued requests fail with `ServiceStopped`.
    /// Stopping an already stopped or failed service is a no-op.
    pub fn stop_service(&self, id: &str) -> Result<(), ServiceError> {
        let (svc, server, name) = {
            let mut entries = self.inner.entries.lock();
            let e = entries.get_mut(id).ok_or_else(|| ServiceError::UnknownEntity(id.to_string()))?;
            if matches!(e.endpoint.state, EndpointState::Stopped | EndpointState::Failed) {
                return Ok(());
            }
            self.inner.registry.lock().retain(|r| r != id);
            e.endpoint.state = EndpointState::Stopped;
            (e.service.take(), e.server.take(), e.endpoint.name.clone())
        };
        drop(server);
        if let Some(s) = svc {
            s.stop();
        }
        let now = self.inner.clock.now();
        self.push_event(ExecutionEvent::new(now, Entity::Service, id, EventKind::ServiceStopped).with("name", name));
        self.inner.changed.notify_all();
        Ok(())
    }

    pub fn stop_all(&self) {
        for id in self.service_ids() {
            let _ = self.stop_service(&id);
        }
    }

    /// Queue `req` on service `id`. The receiver yields exactly one reply.
    pub fn submit(&self, id: &str, req: InferenceRequest) -> Result<Receiver<Reply>, ServiceError> {
        let (svc, address, socket) = {
            let mut entries = self.inner.entries.lock();
            let e = entries.get_mut(id).ok_or_else(|| ServiceError::UnknownEntity(id.to_string()))?;
            e.counters.sent += 1;
            if e.endpoint.state != EndpointState::Ready || e.service.is_none() {
                e.counters.errors += 1;
                return Err(ServiceError::ServiceStopped);
            }
            (e.service.clone().expect("checked above"), e.endpoint.address.clone(), e.server.is_some())
        };
        let inner_rx = if socket {
            let (tx, rx) = bounded(1);
            thread::spawn(move || {
                let _ = tx.send(socket_infer(&address, &req));
            });
            Ok(rx)
        } else {
            svc.submit(req)
        };
        let inner_rx = match inner_rx {
            Ok(rx) => rx,
            Err(e) => {
                self.count(id, false);
                return Err(e);
            }
        };
        let (tx, rx) = bounded(1);
        let mgr = self.clone();
        let sid = id.to_string();
        thread::spawn(move || {
            let reply = inner_rx.recv().unwrap_or(Err(ServiceError::ServiceStopped));
            mgr.count(&sid, reply.is_ok());
            let _ = tx.send(reply);
        });
        Ok(rx)
    }

    pub fn infer(&self, id: &str, req: InferenceRequest) -> Reply {
        let rx = self.submit(id, req)?;
        rx.recv().unwrap_or(Err(ServiceError::ServiceStopped))
    }

    fn count(&self, id: &str, ok: bool) {
        if let Some(e) = self.inner.entries.lock().get_mut(id) {
            if ok {
                e.counters.responses += 1;
            } else {
                e.counters.errors += 1;
            }
        }
    }

    /// Virtual clock only: book `tokens` on service `id` no earlier than `now`,
    /// served first-come first-served at the full token rate. Returns the
    /// (start, finish) times.
    pub fn reserve_virtual(&self, id: &str, tokens: u64, now: f64) -> Result<(f64, f64), ServiceError> {
        let mut entries = self.inner.entries.lock();
        let e = entries.get_mut(id).ok_or_else(|| ServiceError::UnknownEntity(id.to_string()))?;
        e.counters.sent += 1;
        if e.endpoint.state != EndpointState::Ready {
            e.counters.errors += 1;
            return Err(ServiceError::ServiceStopped);
        }
        let start = now.max(e.virtual_busy_until);
        let finish = start + tokens as f64 / e.endpoint.capacity.token_rate;
        e.virtual_busy_until = finish;
        e.counters.responses += 1;
        Ok((start, finish))
    }

    fn push_event(&self, ev: ExecutionEvent) {
        self.inner.events.lock().push(ev);
    }

    pub fn drain_events(&self) -> Vec<ExecutionEvent> {
        std::mem::take(&mut *self.inner.events.lock())
    }
}
