//! Deterministic discrete-event backend on a shared virtual clock.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap};

use super::{Backend, BackendError, ExecutionHandle, RuntimeContext};
use crate::event::{Entity, EventKind, ExecutionEvent, RunClock, VirtualClock};
use crate::mapper::Placement;
use crate::model::{CoupledRole, Payload, TaskDescription};

struct Due {
    at: f64,
    seq: u64,
    token: u64,
    terminal: bool,
    event: ExecutionEvent,
}

impl PartialEq for Due {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Due {}

impl PartialOrd for Due {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Due {
    fn cmp(&self, other: &Self) -> Ordering {
        self.at.total_cmp(&other.at).then(self.seq.cmp(&other.seq))
    }
}

/// Emulates execution in virtual time: a launched task runs for its
/// `expected_duration` (0 when unset), coupled tasks for their compute time
/// plus a fixed per-key transfer latency, and service clients for as long as
/// their requests take on the booked services.
///
/// Optional launch costs model a serial central dispatcher
/// (`dispatch_overhead` per task) and a serial per-node launcher
/// (`launch_overhead` per task per node). Both default to 0.
pub struct SimulatedBackend {
    id: String,
    clock: RunClock,
    vclock: VirtualClock,
    heap: BinaryHeap<Reverse<Due>>,
    immediate: Vec<ExecutionEvent>,
    live: HashMap<u64, String>,
    seq: u64,
    next_token: u64,
    ctx: Option<RuntimeContext>,
    dispatch_overhead: f64,
    launch_overhead: f64,
    transfer_latency: f64,
    dispatcher_free: f64,
    node_free: HashMap<String, f64>,
}

impl SimulatedBackend {
    /// Panics if `clock` is not virtual.
    pub fn new(clock: RunClock) -> Self {
        let vclock = clock
            .as_virtual()
            .expect("the simulated backend needs a virtual clock")
            .clone();
        SimulatedBackend {
            id: "sim".into(),
            clock,
            vclock,
            heap: BinaryHeap::new(),
            immediate: Vec::new(),
            live: HashMap::new(),
            seq: 0,
            next_token: 0,
            ctx: None,
            dispatch_overhead: 0.0,
            launch_overhead: 0.0,
            transfer_latency: 1e-4,
            dispatcher_free: 0.0,
            node_free: HashMap::new(),
        }
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn with_dispatch_overhead(mut self, seconds: f64) -> Self {
        self.dispatch_overhead = seconds.max(0.0);
        self
    }

    pub fn with_launch_overhead(mut self, seconds: f64) -> Self {
        self.launch_overhead = seconds.max(0.0);
        self
    }

    pub fn with_transfer_latency(mut self, seconds: f64) -> Self {
        self.transfer_latency = seconds.max(0.0);
        self
    }

    /// Move the clock forward by `dt` and return everything now due.
    pub fn advance_virtual_time(&mut self, dt: f64) -> Vec<ExecutionEvent> {
        self.vclock.advance(dt);
        self.drain()
    }

    fn push(&mut self, at: f64, token: u64, terminal: bool, event: ExecutionEvent) {
        let seq = self.seq;
        self.seq += 1;
        self.heap.push(Reverse(Due {
            at,
            seq,
            token,
            terminal,
            event,
        }));
    }

    fn start_time(&mut self, placement: &Placement) -> f64 {
        let now = self.vclock.now();
        let mut d = now;
        if self.dispatch_overhead > 0.0 {
            d = now.max(self.dispatcher_free) + self.dispatch_overhead;
            self.dispatcher_free = d;
        }
        if self.launch_overhead == 0.0 {
            return d;
        }
        let mut start = d;
        for node in placement.nodes() {
            let free = self.node_free.entry(node.to_string()).or_insert(0.0);
            let l = d.max(*free) + self.launch_overhead;
            *free = l;
            start = start.max(l);
        }
        start
    }

    fn drain(&mut self) -> Vec<ExecutionEvent> {
        let now = self.vclock.now();
        let mut out = std::mem::take(&mut self.immediate);
        while let Some(Reverse(top)) = self.heap.peek() {
            if top.at > now {
                break;
            }
            let Reverse(d) = self.heap.pop().expect("peeked");
            if d.terminal {
                self.live.remove(&d.token);
            }
            out.push(d.event);
        }
        out.sort_by(|a, b| a.ts.total_cmp(&b.ts));
        out
    }
}

impl Backend for SimulatedBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn clock(&self) -> &RunClock {
        &self.clock
    }

    fn bind(&mut self, ctx: RuntimeContext) {
        self.ctx = Some(ctx);
    }

    fn launch(&mut self, task: &TaskDescription, placement: &Placement) -> Result<ExecutionHandle, BackendError> {
        if matches!(task.payload, Payload::Service(_)) {
            return Err(BackendError::SpawnFailure(
                "services are launched by the service manager".into(),
            ));
        }
        if matches!(task.payload, Payload::ServiceClient(_)) && self.ctx.is_none() {
            return Err(BackendError::SpawnFailure("backend has no runtime context".into()));
        }
        let token = self.next_token;
        self.next_token += 1;
        let start = self.start_time(placement);
        let id = task.id.clone();
        self.push(start, token, false, ExecutionEvent::task(start, id.clone(), EventKind::Running));

        let (finish, kind, mut attrs): (f64, EventKind, Vec<(&str, serde_json::Value)>) = match &task.payload {
            Payload::Function(f) if f.name == "fail" => {
                let d = task.expected_duration.unwrap_or(0.0);
                (start + d, EventKind::Failed, vec![("compute", d.into()), ("error", "requested failure".into())])
            }
            Payload::Executable(_) | Payload::Function(_) => {
                let d = task.expected_duration.unwrap_or(0.0);
                (start + d, EventKind::Done, vec![("compute", d.into())])
            }
            Payload::Coupled(p) => {
                let tl = self.transfer_latency;
                let bytes = p.elements * 4;
                let (kind, first) = match p.role {
                    CoupledRole::Producer => (EventKind::Put, start + p.compute),
                    CoupledRole::Consumer => (EventKind::Get, start),
                };
                let mut t = first;
                for key in &p.keys {
                    t += tl;
                    let ev = ExecutionEvent::new(t, Entity::Store, key.clone(), kind)
                        .with("key", key.clone())
                        .with("bytes", bytes)
                        .with("latency", tl)
                        .with("task", id.clone())
                        .with("store", p.store.clone());
                    self.push(t, token, false, ev);
                }
                let transfer = tl * p.keys.len() as f64;
                let finish = (start + p.compute + transfer).max(t);
                (finish, EventKind::Done, vec![("compute", p.compute.into()), ("transfer", transfer.into())])
            }
            Payload::ServiceClient(p) => {
                let ctx = self.ctx.clone().expect("checked above");
                match ctx.route_client(&id, p) {
                    Err(e) => (start, EventKind::Failed, vec![("error", e.to_string().into())]),
                    Ok(routes) => {
                        let mut finish = start;
                        let mut errors = 0u64;
                        for (req, ep) in routes {
                            let sent = ExecutionEvent::new(start, Entity::Request, req.id.clone(), EventKind::RequestSent)
                                .with("endpoint", ep.service_id.clone())
                                .with("tokens", req.prompt_tokens)
                                .with("client", id.clone());
                            self.push(start, token, false, sent);
                            let done = ExecutionEvent::new(start, Entity::Request, req.id.clone(), EventKind::RequestDone)
                                .with("endpoint", ep.service_id.clone())
                                .with("client", id.clone());
                            match ctx.services.reserve_virtual(&ep.service_id, req.total_tokens(), start) {
                                Ok((s, f)) => {
                                    let mut done = done
                                        .with("total_tokens", req.total_tokens())
                                        .with("queue_latency", s - start)
                                        .with("service_latency", f - s);
                                    done.ts = f;
                                    self.push(f, token, false, done);
                                    finish = finish.max(f);
                                }
                                Err(e) => {
                                    errors += 1;
                                    self.push(start, token, false, done.with("error", e.to_string()));
                                }
                            }
                        }
                        let kind = if errors > 0 { EventKind::Failed } else { EventKind::Done };
                        (finish, kind, vec![("compute", (finish - start).into()), ("request_errors", errors.into())])
                    }
                }
            }
            Payload::Service(_) => unreachable!("rejected above"),
        };
        let mut ev = ExecutionEvent::task(finish, id.clone(), kind);
        for (k, v) in attrs.drain(..) {
            ev = ev.with(k, v);
        }
        self.push(finish, token, true, ev);
        self.live.insert(token, id.clone());
        Ok(ExecutionHandle {
            task_id: id,
            backend_id: self.id.clone(),
            token,
        })
    }

    fn poll_events(&mut self) -> Result<Vec<ExecutionEvent>, BackendError> {
        Ok(self.drain())
    }

    fn cancel(&mut self, handle: &ExecutionHandle) {
        let Some(task_id) = self.live.remove(&handle.token) else {
            tracing::debug!(task = %handle.task_id, "cancel of unknown or finished handle");
            return;
        };
        let token = handle.token;
        self.heap.retain(|Reverse(d)| d.token != token);
        self.immediate
            .push(ExecutionEvent::task(self.vclock.now(), task_id, EventKind::Canceled));
    }

    fn next_due(&self) -> Option<f64> {
        if !self.immediate.is_empty() {
            return Some(self.vclock.now());
        }
        self.heap.peek().map(|Reverse(d)| d.at)
    }

    fn in_flight(&self) -> usize {
        self.live.len()
    }
}
