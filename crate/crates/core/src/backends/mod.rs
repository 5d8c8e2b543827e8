//! Execution backends: a uniform launch / poll / cancel contract.

mod local;
mod sim;

pub use local::{FunctionRegistry, LocalBackend, TaskFn};
pub use sim::SimulatedBackend;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use indexmap::IndexMap;
use parking_lot::{Condvar, Mutex};

use crate::event::{ExecutionEvent, RunClock};
use crate::mapper::Placement;
use crate::model::{InferenceRequest, RoutingPolicy, ServiceClientPayload, TaskDescription, TaskId};
use crate::router::{self, EndpointLoad, RouteRequest};
use crate::services::{ServiceEndpoint, ServiceError, ServiceManager};
use crate::store::{StoreKind, StoreSet};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ExecutionHandle {
    pub task_id: TaskId,
    pub backend_id: String,
    pub token: u64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackendError {
    #[error("spawn failure: {0}")]
    SpawnFailure(String),
    #[error("unknown function {0}")]
    UnknownFunction(String),
    #[error("backend {0} stopped responding")]
    BackendLost(String),
}

/// Wakes a waiting coordinator when any backend has new events.
#[derive(Clone, Default)]
pub struct Notifier(Arc<(Mutex<u64>, Condvar)>);

impl Notifier {
    pub fn notify(&self) {
        let (m, c) = &*self.0;
        *m.lock() += 1;
        c.notify_all();
    }

    /// Current generation; pass to [`Notifier::wait_past`].
    pub fn generation(&self) -> u64 {
        *self.0 .0.lock()
    }

    /// Block until the generation moves past `seen` or `timeout` elapses.
    pub fn wait_past(&self, seen: u64, timeout: Duration) {
        let (m, c) = &*self.0;
        let mut g = m.lock();
        if *g == seen {
            c.wait_for(&mut g, timeout);
        }
    }
}

/// Shared services a backend needs for client and coupled tasks.
#[derive(Clone)]
pub struct RuntimeContext {
    pub services: ServiceManager,
    pub stores: Arc<StoreSet>,
    pub routing: RoutingPolicy,
    pub seed: u64,
    pub notifier: Notifier,
    book: Arc<Mutex<IndexMap<String, EndpointLoad>>>,
    rr_offset: Arc<AtomicUsize>,
}

impl RuntimeContext {
    pub fn new(services: ServiceManager, stores: Arc<StoreSet>, routing: RoutingPolicy, seed: u64) -> Self {
        RuntimeContext {
            services,
            stores,
            routing,
            seed,
            notifier: Notifier::default(),
            book: Arc::default(),
            rr_offset: Arc::default(),
        }
    }

    /// Context with fresh services and in-memory stores on `clock`.
    pub fn standalone(clock: RunClock) -> Self {
        Self::new(
            ServiceManager::new(clock),
            Arc::new(StoreSet::new(StoreKind::Memory, None)),
            RoutingPolicy::default(),
            0,
        )
    }

    /// Route a client's requests over the Ready endpoints of its service.
    ///
    /// Token-balanced routing starts from the loads already booked by earlier
    /// clients, and round-robin continues where the previous client stopped,
    /// so several clients together behave like one batch.
    pub fn route_client(
        &self,
        task_id: &str,
        payload: &ServiceClientPayload,
    ) -> Result<Vec<(InferenceRequest, ServiceEndpoint)>, ServiceError> {
        let endpoints = self.services.lookup(&payload.service);
        if endpoints.is_empty() {
            return Err(ServiceError::UnknownEntity(payload.service.clone()));
        }
        let ids: Vec<String> = endpoints.iter().map(|e| e.service_id.clone()).collect();
        let reqs: Vec<RouteRequest> = payload.requests.iter().map(RouteRequest::from).collect();
        let assignment = match self.routing {
            RoutingPolicy::Random => router::route_random(&reqs, &ids, self.seed ^ fnv1a(task_id)),
            RoutingPolicy::RoundRobin => {
                let offset = self.rr_offset.fetch_add(reqs.len(), Ordering::SeqCst) % ids.len();
                let mut rotated = ids.clone();
                rotated.rotate_left(offset);
                router::route_round_robin(&reqs, &rotated)
            }
            RoutingPolicy::TokenBalanced => {
                let mut book = self.book.lock();
                let base: Vec<EndpointLoad> = ids.iter().map(|i| book.get(i).copied().unwrap_or_default()).collect();
                let a = router::route_token_balanced_from(&reqs, &ids, &base);
                if let Ok(a) = &a {
                    for (ep, load) in &a.totals {
                        let e = book.entry(ep.clone()).or_default();
                        e.count += load.count;
                        e.tokens += load.tokens;
                    }
                }
                a
            }
        }
        .map_err(|e| ServiceError::Transport(e.to_string()))?;
        let by_id: IndexMap<&str, &ServiceEndpoint> = endpoints.iter().map(|e| (e.service_id.as_str(), e)).collect();
        let mut target: std::collections::HashMap<&str, &ServiceEndpoint> = std::collections::HashMap::new();
        for (ep, reqs) in &assignment.requests {
            for r in reqs {
                target.insert(r.as_str(), by_id[ep.as_str()]);
            }
        }
        Ok(payload
            .requests
            .iter()
            .map(|req| (req.clone(), target[req.id.as_str()].clone()))
            .collect())
    }
}

fn fnv1a(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

pub trait Backend: Send {
    fn id(&self) -> &str;

    fn clock(&self) -> &RunClock;

    /// Give the backend the shared runtime services before a run.
    fn bind(&mut self, ctx: RuntimeContext);

    fn launch(&mut self, task: &TaskDescription, placement: &Placement) -> Result<ExecutionHandle, BackendError>;

    /// Drain events produced since the last poll, ordered by timestamp.
    fn poll_events(&mut self) -> Result<Vec<ExecutionEvent>, BackendError>;

    /// Best-effort kill. A terminal event follows unless one was already
    /// produced; repeated calls are no-ops.
    fn cancel(&mut self, handle: &ExecutionHandle);

    /// Virtual-time backends: timestamp of the next scheduled event.
    fn next_due(&self) -> Option<f64> {
        None
    }

    /// Number of launched handles that have not produced a terminal event.
    fn in_flight(&self) -> usize;
}
