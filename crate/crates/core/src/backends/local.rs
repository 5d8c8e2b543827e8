//! Backend that really executes work on this machine: OS processes for
//! executables, a fixed worker pool for functions and coupled tasks, and one
//! thread per service client.

use std::collections::HashMap;
use std::fs::File;
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Sender};
use parking_lot::{Mutex, RwLock};
use serde_json::Value;

use super::{Backend, BackendError, ExecutionHandle, Notifier, RuntimeContext};
use crate::event::{Entity, EventKind, ExecutionEvent, RunClock};
use crate::mapper::Placement;
use crate::model::{CoupledPayload, CoupledRole, Payload, ServiceClientPayload, TaskDescription};
use crate::store::TensorRecord;

/// A named callable: receives the task's JSON args and a cancel flag.
pub type TaskFn = Arc<dyn Fn(&Value, &AtomicBool) -> Result<(), String> + Send + Sync>;

#[derive(Clone, Default)]
pub struct FunctionRegistry(Arc<RwLock<HashMap<String, TaskFn>>>);

impl FunctionRegistry {
    /// Registry with `noop`, `sleep {seconds}`, `spin {seconds}` and
    /// `fail {message}`.
    pub fn with_builtins() -> Self {
        let r = Self::default();
        r.register("noop", |_, _| Ok(()));
        r.register("sleep", |args, cancel| {
            sleep_unless_canceled(seconds_arg(args), cancel);
            Ok(())
        });
        r.register("spin", |args, cancel| {
            let until = Instant::now() + Duration::from_secs_f64(seconds_arg(args));
            while Instant::now() < until && !cancel.load(Ordering::Relaxed) {
                std::hint::spin_loop();
            }
            Ok(())
        });
        r.register("fail", |args, _| {
            Err(args
                .get("message")
                .and_then(Value::as_str)
                .unwrap_or("requested failure")
                .to_string())
        });
        r
    }

    pub fn register<F>(&self, name: &str, f: F)
    where
        F: Fn(&Value, &AtomicBool) -> Result<(), String> + Send + Sync + 'static,
    {
        self.0.write().insert(name.to_string(), Arc::new(f));
    }

    pub fn get(&self, name: &str) -> Option<TaskFn> {
        self.0.read().get(name).cloned()
    }
}

fn seconds_arg(args: &Value) -> f64 {
    args.get("seconds").and_then(Value::as_f64).unwrap_or(0.0).max(0.0)
}

/// Sleep in short slices; returns false if canceled first.
fn sleep_unless_canceled(seconds: f64, cancel: &AtomicBool) -> bool {
    let until = Instant::now() + Duration::from_secs_f64(seconds);
    loop {
        if cancel.load(Ordering::Relaxed) {
            return false;
        }
        let now = Instant::now();
        if now >= until {
            return true;
        }
        thread::sleep((until - now).min(Duration::from_millis(5)));
    }
}

/// Event queue stamped under its lock, so drained events are in time order.
struct Sink {
    clock: RunClock,
    events: Mutex<Vec<ExecutionEvent>>,
    notifier: Mutex<Notifier>,
}

impl Sink {
    fn emit(&self, make: impl FnOnce(f64) -> ExecutionEvent) {
        {
            let mut q = self.events.lock();
            let ts = self.clock.now();
            q.push(make(ts));
        }
        self.notifier.lock().notify();
    }
}

struct Job {
    task_id: String,
    finished: AtomicBool,
    canceled: AtomicBool,
}

impl Job {
    /// Emit the single terminal event for this job; later calls do nothing.
    fn finish(&self, sink: &Sink, kind: EventKind, attrs: Vec<(&str, Value)>) {
        if self.finished.swap(true, Ordering::SeqCst) {
            return;
        }
        sink.emit(|ts| {
            let mut e = ExecutionEvent::task(ts, self.task_id.clone(), kind);
            for (k, v) in attrs {
                e = e.with(k, v);
            }
            e
        });
    }

    fn running(&self, sink: &Sink) {
        sink.emit(|ts| ExecutionEvent::task(ts, self.task_id.clone(), EventKind::Running));
    }

    fn is_canceled(&self) -> bool {
        self.canceled.load(Ordering::SeqCst)
    }
}

type PoolJob = Box<dyn FnOnce() + Send>;

struct WorkerPool {
    tx: Option<Sender<PoolJob>>,
    threads: Vec<JoinHandle<()>>,
}

impl WorkerPool {
    fn new(size: usize) -> Self {
        let (tx, rx) = unbounded::<PoolJob>();
        let threads = (0..size.max(1))
            .map(|i| {
                let rx = rx.clone();
                thread::Builder::new()
                    .name(format!("rhl-worker-{i}"))
                    .spawn(move || {
                        for job in rx {
                            job();
                        }
                    })
                    .expect("spawn worker thread")
            })
            .collect();
        WorkerPool { tx: Some(tx), threads }
    }

    fn submit(&self, job: PoolJob) -> bool {
        self.tx.as_ref().is_some_and(|tx| tx.send(job).is_ok())
    }
}

impl Drop for WorkerPool {
    fn drop(&mut self) {
        self.tx.take();
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

struct ProcJob {
    job: Arc<Job>,
    children: Vec<Child>,
    codes: Vec<Option<i32>>,
    started: Instant,
}

struct Reaper {
    jobs: Arc<Mutex<Vec<ProcJob>>>,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl Reaper {
    fn start(sink: Arc<Sink>) -> Self {
        let jobs: Arc<Mutex<Vec<ProcJob>>> = Arc::default();
        let stop = Arc::new(AtomicBool::new(false));
        let (j, s) = (jobs.clone(), stop.clone());
        let thread = thread::Builder::new()
            .name("rhl-reaper".into())
            .spawn(move || {
                while !s.load(Ordering::SeqCst) {
                    reap_once(&j, &sink);
                    thread::sleep(Duration::from_millis(1));
                }
            })
            .expect("spawn reaper thread");
        Reaper {
            jobs,
            stop,
            thread: Some(thread),
        }
    }
}

impl Drop for Reaper {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
        for p in self.jobs.lock().iter_mut() {
            for c in &mut p.children {
                let _ = c.kill();
                let _ = c.wait();
            }
        }
    }
}

fn reap_once(jobs: &Mutex<Vec<ProcJob>>, sink: &Sink) {
    let mut jobs = jobs.lock();
    let mut i = 0;
    while i < jobs.len() {
        let p = &mut jobs[i];
        let canceled = p.job.is_canceled();
        for (c, code) in p.children.iter_mut().zip(p.codes.iter_mut()) {
            if code.is_some() {
                continue;
            }
            if canceled {
                let _ = c.kill();
            }
            if let Ok(Some(status)) = c.try_wait() {
                *code = Some(status.code().unwrap_or(-1));
            }
        }
        if p.codes.iter().all(Option::is_some) {
            let p = jobs.swap_remove(i);
            let codes: Vec<i32> = p.codes.iter().map(|c| c.unwrap_or(-1)).collect();
            let kind = if canceled {
                EventKind::Canceled
            } else if codes.iter().all(|&c| c == 0) {
                EventKind::Done
            } else {
                EventKind::Failed
            };
            p.job.finish(
                sink,
                kind,
                vec![
                    ("compute", p.started.elapsed().as_secs_f64().into()),
                    ("exit_codes", codes.into()),
                ],
            );
        } else {
            i += 1;
        }
    }
}

/// Executes tasks on the local machine.
///
/// Core and GPU bindings are published to each rank through environment
/// variables; they are not enforced as OS affinity. GPU indices are virtual.
pub struct LocalBackend {
    id: String,
    sink: Arc<Sink>,
    pool: WorkerPool,
    registry: FunctionRegistry,
    reaper: Option<Reaper>,
    jobs: HashMap<u64, Arc<Job>>,
    next_token: u64,
    ctx: Option<RuntimeContext>,
    output_dir: Option<PathBuf>,
}

impl LocalBackend {
    /// Worker pool sized to the machine's available parallelism.
    pub fn new(clock: RunClock) -> Self {
        let n = thread::available_parallelism().map(|n| n.get()).unwrap_or(4);
        Self::with_workers(clock, n)
    }

    pub fn with_workers(clock: RunClock, workers: usize) -> Self {
        LocalBackend {
            id: "local".into(),
            sink: Arc::new(Sink {
                clock,
                events: Mutex::new(Vec::new()),
                notifier: Mutex::new(Notifier::default()),
            }),
            pool: WorkerPool::new(workers),
            registry: FunctionRegistry::with_builtins(),
            reaper: None,
            jobs: HashMap::new(),
            next_token: 0,
            ctx: None,
            output_dir: None,
        }
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    /// Write each rank's stdout/stderr to `<dir>/<task>.<rank>.{out,err}`
    /// instead of discarding it.
    pub fn with_output_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.output_dir = Some(dir.into());
        self
    }

    pub fn registry(&self) -> &FunctionRegistry {
        &self.registry
    }

    fn context(&self) -> Result<RuntimeContext, BackendError> {
        self.ctx
            .clone()
            .ok_or_else(|| BackendError::SpawnFailure("backend has no runtime context".into()))
    }

    fn spawn_ranks(&self, task: &TaskDescription, placement: &Placement, token: u64) -> Result<Vec<Child>, BackendError> {
        let Payload::Executable(p) = &task.payload else {
            unreachable!("caller checked the category");
        };
        let join = |v: &[u32]| v.iter().map(u32::to_string).collect::<Vec<_>>().join(",");
        let rendezvous = format!("{}-{}-{}", self.id, task.id, token);
        if let Some(dir) = &self.output_dir {
            std::fs::create_dir_all(dir)
                .map_err(|e| BackendError::SpawnFailure(format!("{}: {e}", dir.display())))?;
        }
        let mut children = Vec::with_capacity(placement.bindings.len());
        for b in &placement.bindings {
            let mut cmd = Command::new(&p.command);
            cmd.args(&p.args)
                .env("RHL_RANK", b.rank.to_string())
                .env("RHL_RANKS", task.ranks.to_string())
                .env("RHL_CORES", join(&b.cores))
                .env("RHL_GPUS", join(&b.gpus))
                .env("RHL_TASK_ID", &task.id)
                .env("RHL_RENDEZVOUS", &rendezvous)
                .stdin(Stdio::null());
            match &self.output_dir {
                Some(dir) => {
                    let open = |ext: &str| {
                        File::create(dir.join(format!("{}.{}.{ext}", task.id, b.rank)))
                            .map_err(|e| BackendError::SpawnFailure(e.to_string()))
                    };
                    cmd.stdout(open("out")?).stderr(open("err")?);
                }
                None => {
                    cmd.stdout(Stdio::null()).stderr(Stdio::null());
                }
            }
            match cmd.spawn() {
                Ok(c) => children.push(c),
                Err(e) => {
                    for mut c in children {
                        let _ = c.kill();
                        let _ = c.wait();
                    }
                    return Err(BackendError::SpawnFailure(format!("{}: {e}", p.command)));
                }
            }
        }
        Ok(children)
    }
}

impl Backend for LocalBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn clock(&self) -> &RunClock {
        &self.sink.clock
    }

    fn bind(&mut self, ctx: RuntimeContext) {
        *self.sink.notifier.lock() = ctx.notifier.clone();
        self.ctx = Some(ctx);
    }

    fn launch(&mut self, task: &TaskDescription, placement: &Placement) -> Result<ExecutionHandle, BackendError> {
        let token = self.next_token;
        let job = Arc::new(Job {
            task_id: task.id.clone(),
            finished: AtomicBool::new(false),
            canceled: AtomicBool::new(false),
        });
        let sink = self.sink.clone();
        let submitted = match &task.payload {
            Payload::Executable(_) => {
                let children = self.spawn_ranks(task, placement, token)?;
                job.running(&sink);
                let reaper = self.reaper.get_or_insert_with(|| Reaper::start(sink.clone()));
                let n = children.len();
                reaper.jobs.lock().push(ProcJob {
                    job: job.clone(),
                    children,
                    codes: vec![None; n],
                    started: Instant::now(),
                });
                true
            }
            Payload::Function(p) => {
                let f = self
                    .registry
                    .get(&p.name)
                    .ok_or_else(|| BackendError::UnknownFunction(p.name.clone()))?;
                let (j, args) = (job.clone(), p.args.clone());
                self.pool.submit(Box::new(move || run_function(&j, &sink, &f, &args)))
            }
            Payload::ServiceClient(p) => {
                let ctx = self.context()?;
                // Clients mostly wait on replies; a pool worker would cap the
                // number of requests in flight at the worker count.
                let (j, p) = (job.clone(), p.clone());
                thread::Builder::new()
                    .name(format!("client-{}", task.id))
                    .spawn(move || run_client(&j, &sink, &ctx, &p))
                    .is_ok()
            }
            Payload::Coupled(p) => {
                let ctx = self.context()?;
                let (j, p) = (job.clone(), p.clone());
                self.pool.submit(Box::new(move || run_coupled(&j, &sink, &ctx, &p)))
            }
            Payload::Service(_) => {
                return Err(BackendError::SpawnFailure(
                    "services are launched by the service manager".into(),
                ))
            }
        };
        if !submitted {
            return Err(BackendError::SpawnFailure("worker pool is down".into()));
        }
        self.next_token += 1;
        self.jobs.insert(token, job);
        Ok(ExecutionHandle {
            task_id: task.id.clone(),
            backend_id: self.id.clone(),
            token,
        })
    }

    fn poll_events(&mut self) -> Result<Vec<ExecutionEvent>, BackendError> {
        let events = std::mem::take(&mut *self.sink.events.lock());
        if !events.is_empty() {
            self.jobs.retain(|_, j| !j.finished.load(Ordering::SeqCst));
        }
        Ok(events)
    }

    fn cancel(&mut self, handle: &ExecutionHandle) {
        match self.jobs.get(&handle.token) {
            Some(j) => j.canceled.store(true, Ordering::SeqCst),
            None => tracing::debug!(task = %handle.task_id, "cancel of unknown or finished handle"),
        }
    }

    fn in_flight(&self) -> usize {
        self.jobs.values().filter(|j| !j.finished.load(Ordering::SeqCst)).count()
    }
}

fn run_function(job: &Job, sink: &Sink, f: &TaskFn, args: &Value) {
    if job.is_canceled() {
        job.finish(sink, EventKind::Canceled, vec![]);
        return;
    }
    job.running(sink);
    let t = Instant::now();
    let result = f(args, &job.canceled);
    let compute = t.elapsed().as_secs_f64();
    match result {
        _ if job.is_canceled() => job.finish(sink, EventKind::Canceled, vec![("compute", compute.into())]),
        Ok(()) => job.finish(sink, EventKind::Done, vec![("compute", compute.into())]),
        Err(msg) => job.finish(
            sink,
            EventKind::Failed,
            vec![("compute", compute.into()), ("error", msg.into())],
        ),
    }
}

fn run_client(job: &Job, sink: &Sink, ctx: &RuntimeContext, p: &ServiceClientPayload) {
    if job.is_canceled() {
        job.finish(sink, EventKind::Canceled, vec![]);
        return;
    }
    job.running(sink);
    let t = Instant::now();
    let routes = match ctx.route_client(&job.task_id, p) {
        Ok(r) => r,
        Err(e) => {
            job.finish(sink, EventKind::Failed, vec![("error", e.to_string().into())]);
            return;
        }
    };
    let mut errors = 0u64;
    let mut pending = Vec::with_capacity(routes.len());
    for (req, ep) in routes {
        sink.emit(|ts| {
            ExecutionEvent::new(ts, Entity::Request, req.id.clone(), EventKind::RequestSent)
                .with("endpoint", ep.service_id.clone())
                .with("tokens", req.prompt_tokens)
                .with("client", job.task_id.clone())
        });
        let id = req.id.clone();
        match ctx.services.submit(&ep.service_id, req) {
            Ok(rx) => pending.push((id, ep.service_id, rx)),
            Err(e) => {
                errors += 1;
                request_failed(sink, &id, &ep.service_id, &job.task_id, &e.to_string());
            }
        }
    }
    for (id, endpoint, rx) in pending {
        match rx.recv() {
            Ok(Ok(resp)) => sink.emit(|ts| {
                ExecutionEvent::new(ts, Entity::Request, id, EventKind::RequestDone)
                    .with("endpoint", endpoint)
                    .with("client", job.task_id.clone())
                    .with("total_tokens", resp.total_tokens)
                    .with("queue_latency", resp.queue_latency)
                    .with("service_latency", resp.service_latency)
            }),
            Ok(Err(e)) => {
                errors += 1;
                request_failed(sink, &id, &endpoint, &job.task_id, &e.to_string());
            }
            Err(_) => {
                errors += 1;
                request_failed(sink, &id, &endpoint, &job.task_id, "reply channel closed");
            }
        }
    }
    let compute = t.elapsed().as_secs_f64();
    let kind = if job.is_canceled() {
        EventKind::Canceled
    } else if errors > 0 {
        EventKind::Failed
    } else {
        EventKind::Done
    };
    job.finish(
        sink,
        kind,
        vec![("compute", compute.into()), ("request_errors", errors.into())],
    );
}

fn request_failed(sink: &Sink, id: &str, endpoint: &str, client: &str, error: &str) {
    sink.emit(|ts| {
        ExecutionEvent::new(ts, Entity::Request, id, EventKind::RequestDone)
            .with("endpoint", endpoint)
            .with("client", client)
            .with("error", error)
    });
}

fn run_coupled(job: &Job, sink: &Sink, ctx: &RuntimeContext, p: &CoupledPayload) {
    if job.is_canceled() {
        job.finish(sink, EventKind::Canceled, vec![]);
        return;
    }
    job.running(sink);
    let store = match ctx.stores.instance(&p.store) {
        Ok(s) => s,
        Err(e) => {
            job.finish(sink, EventKind::Failed, vec![("error", e.to_string().into())]);
            return;
        }
    };
    let mut compute = 0.0;
    let mut transfer = 0.0;
    let mut do_compute = |job: &Job| {
        let t = Instant::now();
        let ok = sleep_unless_canceled(p.compute, &job.canceled);
        compute += t.elapsed().as_secs_f64();
        ok
    };
    let result: Result<(), String> = (|| {
        match p.role {
            CoupledRole::Producer => {
                if !do_compute(job) {
                    return Ok(());
                }
                let values: Vec<f32> = (0..p.elements).map(|i| i as f32).collect();
                for key in &p.keys {
                    let rec = TensorRecord::from_f32(key.clone(), &values);
                    let latency = store.put_timed(key, &rec).map_err(|e| e.to_string())?;
                    transfer += latency;
                    store_event(sink, EventKind::Put, key, rec.byte_len(), latency, &job.task_id, &p.store);
                }
            }
            CoupledRole::Consumer => {
                for key in &p.keys {
                    let (rec, latency) = store.get_timed(key).map_err(|e| e.to_string())?;
                    transfer += latency;
                    store_event(sink, EventKind::Get, key, rec.byte_len(), latency, &job.task_id, &p.store);
                }
                do_compute(job);
            }
        }
        Ok(())
    })();
    let mut attrs = vec![("compute", compute.into()), ("transfer", transfer.into())];
    let kind = match result {
        _ if job.is_canceled() => EventKind::Canceled,
        Ok(()) => EventKind::Done,
        Err(e) => {
            attrs.push(("error", e.into()));
            EventKind::Failed
        }
    };
    job.finish(sink, kind, attrs);
}

fn store_event(sink: &Sink, kind: EventKind, key: &str, bytes: u64, latency: f64, task: &str, store: &str) {
    sink.emit(|ts| {
        ExecutionEvent::new(ts, Entity::Store, key, kind)
            .with("key", key)
            .with("bytes", bytes)
            .with("latency", latency)
            .with("task", task)
            .with("store", store)
    });
}
