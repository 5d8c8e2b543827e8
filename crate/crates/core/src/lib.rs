//! Runtime for heterogeneous workflow campaigns: executables, functions,
//! long-running services, service clients and coupled producer/consumer
//! pairs share one allocation.
//!
//! [`orchestrator::Orchestrator`] drives a validated [`model::Campaign`] over
//! registered [`backends::Backend`]s and records an [`event::ExecutionEvent`]
//! log, which [`metrics`] turns into throughput, utilization, heterogeneity
//! width and rate series.

pub mod backends;
pub mod event;
pub mod mapper;
pub mod metrics;
pub mod model;
pub mod orchestrator;
pub mod router;
pub mod services;
pub mod store;
pub mod workloads;

pub use event::{Entity, EventKind, ExecutionEvent, RunClock};
pub use model::{validate_campaign, Campaign, ExecutionPolicy, ResourceDescription, TaskDescription, TaskState};
pub use orchestrator::{CampaignReport, Orchestrator, RunError};
pub use workloads::{execute, parse_campaign, CampaignSpec, RunOptions};
