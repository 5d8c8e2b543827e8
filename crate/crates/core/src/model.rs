//! Backend-agnostic domain model: task, resource and policy descriptions,
//! the task lifecycle, the task-type taxonomy and dependency resolution.
//!
//! Everything in here is a plain value type. Validation happens once, in
//! [`validate_campaign`], and produces a [`Campaign`] that the rest of the
//! runtime can trust.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::fmt;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

pub type TaskId = String;

/// Backend ids the runtime knows how to construct.
pub const KNOWN_BACKENDS: &[&str] = &["local", "sim"];

/// Name of the implicit partition holding nodes not claimed by any policy entry.
pub const DEFAULT_PARTITION: &str = "default";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, JsonSchema)]
pub enum TaskCategory {
    Executable,
    Function,
    Service,
    ServiceClient,
    Coupled,
}

impl TaskCategory {
    pub const ALL: [TaskCategory; 5] = [
        TaskCategory::Executable,
        TaskCategory::Function,
        TaskCategory::Service,
        TaskCategory::ServiceClient,
        TaskCategory::Coupled,
    ];

    pub fn all() -> BTreeSet<TaskCategory> {
        Self::ALL.into_iter().collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum CoupledRole {
    Producer,
    Consumer,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum ServiceTransport {
    #[default]
    InProcess,
    Socket,
}

/// Knobs of the mock inference service.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct MockServiceConfig {
    /// Aggregate processing rate in tokens per second.
    pub token_rate: f64,
    pub max_num_seqs: u32,
    pub max_num_batched_tokens: u64,
    /// Seconds after launch before the readiness probe answers affirmatively.
    pub warmup: f64,
    /// When false the service never answers its readiness probe.
    pub answers_probes: bool,
    pub queue_capacity: usize,
    pub transport: ServiceTransport,
}

impl Default for MockServiceConfig {
    fn default() -> Self {
        Self {
            token_rate: 42_000.0,
            max_num_seqs: 256,
            max_num_batched_tokens: 65_536,
            warmup: 0.0,
            answers_probes: true,
            queue_capacity: 10_000,
            transport: ServiceTransport::InProcess,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct InferenceRequest {
    pub id: String,
    pub prompt_tokens: u64,
    pub generate_tokens: u64,
}

impl InferenceRequest {
    pub fn new(id: impl Into<String>, prompt_tokens: u64, generate_tokens: u64) -> Self {
        Self {
            id: id.into(),
            prompt_tokens,
            generate_tokens,
        }
    }

    pub fn total_tokens(&self) -> u64 {
        self.prompt_tokens + self.generate_tokens
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ExecutablePayload {
    pub command: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub args: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct FunctionPayload {
    pub name: String,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub args: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ServicePayload {
    /// Discovery key; clients address the service by this name.
    pub name: String,
    #[serde(default = "default_service_kind")]
    pub kind: String,
    #[serde(default)]
    pub config: MockServiceConfig,
}

fn default_service_kind() -> String {
    "mock-inference".to_string()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ServiceClientPayload {
    pub service: String,
    pub requests: Vec<InferenceRequest>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct CoupledPayload {
    pub role: CoupledRole,
    /// Exchange keys shared by the producer and its consumer.
    pub keys: Vec<String>,
    /// Store instance the keys live in (one instance per node).
    pub store: String,
    /// f32 elements per exchanged tensor.
    pub elements: u64,
    /// Seconds of padded in-task compute.
    #[serde(default)]
    pub compute: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "category")]
pub enum Payload {
    Executable(ExecutablePayload),
    Function(FunctionPayload),
    Service(ServicePayload),
    ServiceClient(ServiceClientPayload),
    Coupled(CoupledPayload),
}

impl Payload {
    pub fn category(&self) -> TaskCategory {
        match self {
            Payload::Executable(_) => TaskCategory::Executable,
            Payload::Function(_) => TaskCategory::Function,
            Payload::Service(_) => TaskCategory::Service,
            Payload::ServiceClient(_) => TaskCategory::ServiceClient,
            Payload::Coupled(_) => TaskCategory::Coupled,
        }
    }
}

fn one() -> u32 {
    1
}

fn is_zero_u32(v: &u32) -> bool {
    *v == 0
}

fn is_zero_u64(v: &u64) -> bool {
    *v == 0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct TaskDescription {
    pub id: TaskId,
    pub payload: Payload,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub dependencies: BTreeSet<TaskId>,
    #[serde(default = "one")]
    pub ranks: u32,
    #[serde(default = "one")]
    pub cores_per_rank: u32,
    #[serde(default, skip_serializing_if = "is_zero_u32")]
    pub gpus_per_rank: u32,
    #[serde(default, skip_serializing_if = "is_zero_u64")]
    pub estimated_input_tokens: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition_hint: Option<String>,
    /// Seconds; consumed only by the simulated backend.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_duration: Option<f64>,
}

impl TaskDescription {
    pub fn new(id: impl Into<TaskId>, payload: Payload) -> Self {
        Self {
            id: id.into(),
            payload,
            dependencies: BTreeSet::new(),
            ranks: 1,
            cores_per_rank: 1,
            gpus_per_rank: 0,
            estimated_input_tokens: 0,
            partition_hint: None,
            expected_duration: None,
        }
    }

    pub fn function(id: impl Into<TaskId>, name: &str) -> Self {
        Self::new(
            id,
            Payload::Function(FunctionPayload {
                name: name.to_string(),
                args: serde_json::Value::Null,
            }),
        )
    }

    pub fn executable(id: impl Into<TaskId>, command: &str, args: &[&str]) -> Self {
        Self::new(
            id,
            Payload::Executable(ExecutablePayload {
                command: command.to_string(),
                args: args.iter().map(|a| a.to_string()).collect(),
            }),
        )
    }

    pub fn with_deps<I, S>(mut self, deps: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<TaskId>,
    {
        self.dependencies.extend(deps.into_iter().map(Into::into));
        self
    }

    pub fn with_shape(mut self, ranks: u32, cores_per_rank: u32, gpus_per_rank: u32) -> Self {
        self.ranks = ranks;
        self.cores_per_rank = cores_per_rank;
        self.gpus_per_rank = gpus_per_rank;
        self
    }

    pub fn with_duration(mut self, seconds: f64) -> Self {
        self.expected_duration = Some(seconds);
        self
    }

    pub fn with_hint(mut self, partition: impl Into<String>) -> Self {
        self.partition_hint = Some(partition.into());
        self
    }

    pub fn category(&self) -> TaskCategory {
        self.payload.category()
    }

    pub fn total_cores(&self) -> u64 {
        self.ranks as u64 * self.cores_per_rank as u64
    }

    pub fn total_gpus(&self) -> u64 {
        self.ranks as u64 * self.gpus_per_rank as u64
    }

    pub fn type_key(&self) -> TaskTypeKey {
        task_type_key(self)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub name: String,
    pub cores: u32,
    #[serde(default)]
    pub gpus: u32,
}

impl NodeSpec {
    pub fn new(name: impl Into<String>, cores: u32, gpus: u32) -> Self {
        Self {
            name: name.into(),
            cores,
            gpus,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ResourceDescription {
    pub nodes: Vec<NodeSpec>,
}

impl ResourceDescription {
    /// `count` identical nodes named `{prefix}-{i}`.
    pub fn uniform(prefix: &str, count: usize, cores: u32, gpus: u32) -> Self {
        Self {
            nodes: (0..count)
                .map(|i| NodeSpec::new(format!("{prefix}-{i}"), cores, gpus))
                .collect(),
        }
    }

    pub fn total_cores(&self) -> u64 {
        self.nodes.iter().map(|n| n.cores as u64).sum()
    }

    pub fn total_gpus(&self) -> u64 {
        self.nodes.iter().map(|n| n.gpus as u64).sum()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub enum SchedulingPolicy {
    FifoExclusive,
    #[default]
    Backfill,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub enum RoutingPolicy {
    Random,
    RoundRobin,
    #[default]
    TokenBalanced,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub name: String,
    pub nodes: Vec<String>,
    pub backend: String,
    #[serde(default = "TaskCategory::all")]
    pub allowed: BTreeSet<TaskCategory>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct ExecutionPolicy {
    pub partitions: Vec<PartitionSpec>,
    /// Ready tasks held schedulable, as a multiple of peak concurrent capacity.
    pub oversubscription_factor: f64,
    pub scheduling: SchedulingPolicy,
    pub routing: RoutingPolicy,
    /// Seconds.
    pub service_ready_timeout: f64,
    /// Width of the sliding metrics window, seconds.
    pub rate_window: f64,
    /// Metric sampling step, seconds.
    pub resolution: f64,
    /// Backend bound to the implicit default partition.
    pub default_backend: String,
}

impl Default for ExecutionPolicy {
    fn default() -> Self {
        Self {
            partitions: Vec::new(),
            oversubscription_factor: 2.0,
            scheduling: SchedulingPolicy::Backfill,
            routing: RoutingPolicy::TokenBalanced,
            service_ready_timeout: 30.0,
            rate_window: 1.0,
            resolution: 0.1,
            default_backend: "local".to_string(),
        }
    }
}

impl ExecutionPolicy {
    /// Rebind every partition, including the implicit one, to `backend`.
    pub fn with_backend(mut self, backend: &str) -> Self {
        self.default_backend = backend.to_string();
        for p in &mut self.partitions {
            p.backend = backend.to_string();
        }
        self
    }

    pub fn with_scheduling(mut self, scheduling: SchedulingPolicy) -> Self {
        self.scheduling = scheduling;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskState {
    New,
    Ready,
    Scheduled,
    Running,
    Done,
    Failed,
    Canceled,
}

impl TaskState {
    pub fn is_terminal(self) -> bool {
        matches!(self, TaskState::Done | TaskState::Failed | TaskState::Canceled)
    }

    pub fn can_transition(self, to: TaskState) -> bool {
        use TaskState::*;
        match (self, to) {
            (from, _) if from.is_terminal() => false,
            (_, Canceled) => true,
            (New, Ready) | (Ready, Scheduled) | (Scheduled, Running) => true,
            (Running, Done) | (Running, Failed) => true,
            _ => false,
        }
    }

    pub fn transition(self, to: TaskState) -> Result<TaskState, IllegalTransition> {
        if self.can_transition(to) {
            Ok(to)
        } else {
            Err(IllegalTransition { from: self, to })
        }
    }
}

impl fmt::Display for TaskState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
#[error("illegal transition {from} -> {to}")]
pub struct IllegalTransition {
    pub from: TaskState,
    pub to: TaskState,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ExecutionModel {
    Serial,
    MPI,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Accelerator {
    CPU,
    GPU,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TaskTypeKey {
    pub execution_model: ExecutionModel,
    pub accelerator: Accelerator,
    pub mpi_scale: u32,
}

impl fmt::Display for TaskTypeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:?}/{:?}/{}",
            self.execution_model, self.accelerator, self.mpi_scale
        )
    }
}

/// Pure function of `(ranks, gpus_per_rank)`.
pub fn task_type_key(task: &TaskDescription) -> TaskTypeKey {
    TaskTypeKey {
        execution_model: if task.ranks > 1 {
            ExecutionModel::MPI
        } else {
            ExecutionModel::Serial
        },
        accelerator: if task.gpus_per_rank > 0 {
            Accelerator::GPU
        } else {
            Accelerator::CPU
        },
        mpi_scale: task.ranks,
    }
}

/// Non-completed tasks whose dependencies are all in `completed`.
pub fn ready_set(tasks: &[TaskDescription], completed: &HashSet<TaskId>) -> BTreeSet<TaskId> {
    tasks
        .iter()
        .filter(|t| !completed.contains(&t.id))
        .filter(|t| t.dependencies.iter().all(|d| completed.contains(d)))
        .map(|t| t.id.clone())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum Violation {
    #[error("task {task} is part of a dependency cycle")]
    CyclicDependency { task: TaskId },
    #[error("task {task} cannot be satisfied: {reason}")]
    UnsatisfiableRequirement { task: TaskId, reason: String },
    #[error("task {task} depends on unknown task {dependency}")]
    UnknownDependency { task: TaskId, dependency: TaskId },
    #[error("{subject}: {reason}")]
    PolicyViolation { subject: String, reason: String },
}

impl Violation {
    fn policy(subject: impl Into<String>, reason: impl Into<String>) -> Self {
        Violation::PolicyViolation {
            subject: subject.into(),
            reason: reason.into(),
        }
    }

    /// The task or partition the violation names.
    pub fn subject(&self) -> &str {
        match self {
            Violation::CyclicDependency { task }
            | Violation::UnsatisfiableRequirement { task, .. }
            | Violation::UnknownDependency { task, .. } => task,
            Violation::PolicyViolation { subject, .. } => subject,
        }
    }
}

/// Partition view used for feasibility checks, after the implicit default
/// partition has been resolved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResolvedPartition {
    pub name: String,
    pub backend: String,
    pub allowed: BTreeSet<TaskCategory>,
    pub nodes: Vec<NodeSpec>,
}

/// Policy partitions in declaration order, followed by the implicit default
/// partition when any node is left unclaimed (or no partition is declared).
pub fn resolve_partitions(
    resources: &ResourceDescription,
    policy: &ExecutionPolicy,
) -> Vec<ResolvedPartition> {
    let by_name: HashMap<&str, &NodeSpec> = resources
        .nodes
        .iter()
        .map(|n| (n.name.as_str(), n))
        .collect();
    let mut claimed = HashSet::new();
    let mut out = Vec::with_capacity(policy.partitions.len() + 1);
    for p in &policy.partitions {
        let nodes = p
            .nodes
            .iter()
            .filter_map(|n| by_name.get(n.as_str()).map(|spec| (*spec).clone()))
            .collect();
        claimed.extend(p.nodes.iter().map(String::as_str));
        out.push(ResolvedPartition {
            name: p.name.clone(),
            backend: p.backend.clone(),
            allowed: p.allowed.clone(),
            nodes,
        });
    }
    let rest: Vec<NodeSpec> = resources
        .nodes
        .iter()
        .filter(|n| !claimed.contains(n.name.as_str()))
        .cloned()
        .collect();
    if !rest.is_empty() || policy.partitions.is_empty() {
        out.push(ResolvedPartition {
            name: DEFAULT_PARTITION.to_string(),
            backend: policy.default_backend.clone(),
            allowed: TaskCategory::all(),
            nodes: rest,
        });
    }
    out
}

/// Number of ranks of `task` that fit on the given nodes, assuming every node
/// is empty and no rank spans nodes.
pub fn packable_ranks(task: &TaskDescription, nodes: &[NodeSpec]) -> u64 {
    nodes
        .iter()
        .map(|n| rank_fit(n.cores as u64, n.gpus as u64, task))
        .sum()
}

pub(crate) fn rank_fit(free_cores: u64, free_gpus: u64, task: &TaskDescription) -> u64 {
    let by_cores = free_cores / task.cores_per_rank.max(1) as u64;
    if task.gpus_per_rank == 0 {
        by_cores
    } else {
        by_cores.min(free_gpus / task.gpus_per_rank as u64)
    }
}

/// A campaign whose tasks, resources and policy passed [`validate_campaign`].
#[derive(Clone, Debug, PartialEq)]
pub struct Campaign {
    pub name: String,
    pub tasks: Vec<TaskDescription>,
    pub resources: ResourceDescription,
    pub policy: ExecutionPolicy,
}

impl Campaign {
    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// A dependency-respecting order of task indices.
    pub fn topological_order(&self) -> Vec<usize> {
        topo_sort(&self.tasks).expect("validated campaign is acyclic")
    }
}

/// Kahn's algorithm over task indices; `Err` carries the indices left unsorted.
fn topo_sort(tasks: &[TaskDescription]) -> Result<Vec<usize>, Vec<usize>> {
    let index: HashMap<&str, usize> = tasks
        .iter()
        .enumerate()
        .map(|(i, t)| (t.id.as_str(), i))
        .collect();
    let mut indegree = vec![0usize; tasks.len()];
    let mut dependents: Vec<Vec<usize>> = vec![Vec::new(); tasks.len()];
    for (i, t) in tasks.iter().enumerate() {
        for d in &t.dependencies {
            if let Some(&j) = index.get(d.as_str()) {
                indegree[i] += 1;
                dependents[j].push(i);
            }
        }
    }
    let mut queue: VecDeque<usize> = (0..tasks.len()).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(tasks.len());
    while let Some(i) = queue.pop_front() {
        order.push(i);
        for &k in &dependents[i] {
            indegree[k] -= 1;
            if indegree[k] == 0 {
                queue.push_back(k);
            }
        }
    }
    if order.len() == tasks.len() {
        return Ok(order);
    }
    // Peel tasks that merely sit downstream of a cycle; what survives lies on one.
    let mut left: HashSet<usize> = (0..tasks.len()).filter(|&i| indegree[i] > 0).collect();
    loop {
        let leaves: Vec<usize> = left
            .iter()
            .copied()
            .filter(|&i| dependents[i].iter().all(|k| !left.contains(k)))
            .collect();
        if leaves.is_empty() {
            break;
        }
        for i in leaves {
            left.remove(&i);
        }
    }
    let mut cyclic: Vec<usize> = left.into_iter().collect();
    cyclic.sort_unstable();
    Err(cyclic)
}

/// Check every type invariant, the DAG property, and per-task feasibility.
/// All violations are reported, each naming the offending task or partition.
pub fn validate_campaign(
    tasks: Vec<TaskDescription>,
    resources: ResourceDescription,
    policy: ExecutionPolicy,
) -> Result<Campaign, Vec<Violation>> {
    let mut violations = validate_policy(&resources, &policy);
    let partitions = resolve_partitions(&resources, &policy);

    let mut ids = HashSet::new();
    for t in &tasks {
        if !ids.insert(t.id.as_str()) {
            violations.push(Violation::policy(&t.id, "duplicate task id"));
        }
    }
    let services_by_name: HashMap<&str, Vec<&str>> =
        tasks.iter().fold(HashMap::new(), |mut acc, t| {
            if let Payload::Service(s) = &t.payload {
                acc.entry(s.name.as_str()).or_default().push(t.id.as_str());
            }
            acc
        });
    let by_id: HashMap<&str, &TaskDescription> =
        tasks.iter().map(|t| (t.id.as_str(), t)).collect();

    for t in &tasks {
        violations.extend(task_violations(t, &ids, &by_id, &services_by_name, &partitions));
    }
    if let Err(cyclic) = topo_sort(&tasks) {
        violations.extend(cyclic.into_iter().map(|i| Violation::CyclicDependency {
            task: tasks[i].id.clone(),
        }));
    }

    if violations.is_empty() {
        Ok(Campaign {
            name: "campaign".to_string(),
            tasks,
            resources,
            policy,
        })
    } else {
        Err(violations)
    }
}

fn validate_policy(resources: &ResourceDescription, policy: &ExecutionPolicy) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut node_names = HashSet::new();
    for n in &resources.nodes {
        if !node_names.insert(n.name.as_str()) {
            out.push(Violation::policy(&n.name, "duplicate node name"));
        }
        if n.cores == 0 {
            out.push(Violation::policy(&n.name, "node must have at least one core"));
        }
    }
    if !(policy.oversubscription_factor >= 1.0) {
        out.push(Violation::policy("policy", "oversubscription_factor must be >= 1"));
    }
    for (field, v) in [
        ("service_ready_timeout", policy.service_ready_timeout),
        ("rate_window", policy.rate_window),
        ("resolution", policy.resolution),
    ] {
        if !(v > 0.0 && v.is_finite()) {
            out.push(Violation::policy("policy", format!("{field} must be positive")));
        }
    }
    if !KNOWN_BACKENDS.contains(&policy.default_backend.as_str()) {
        out.push(Violation::policy(
            "policy",
            format!("unknown default backend {:?}", policy.default_backend),
        ));
    }
    let mut claimed: HashMap<&str, &str> = HashMap::new();
    let mut names = HashSet::new();
    for p in &policy.partitions {
        if !names.insert(p.name.as_str()) || p.name == DEFAULT_PARTITION {
            out.push(Violation::policy(&p.name, "duplicate or reserved partition name"));
        }
        if !KNOWN_BACKENDS.contains(&p.backend.as_str()) {
            out.push(Violation::policy(
                &p.name,
                format!("unknown backend {:?}", p.backend),
            ));
        }
        if p.nodes.is_empty() {
            out.push(Violation::policy(&p.name, "partition has no nodes"));
        }
        for n in &p.nodes {
            if !node_names.contains(n.as_str()) {
                out.push(Violation::policy(&p.name, format!("unknown node {n:?}")));
            }
            if let Some(other) = claimed.insert(n.as_str(), p.name.as_str()) {
                out.push(Violation::policy(
                    &p.name,
                    format!("node {n:?} already belongs to partition {other:?}"),
                ));
            }
        }
    }
    out
}

fn task_violations(
    t: &TaskDescription,
    ids: &HashSet<&str>,
    by_id: &HashMap<&str, &TaskDescription>,
    services_by_name: &HashMap<&str, Vec<&str>>,
    partitions: &[ResolvedPartition],
) -> Vec<Violation> {
    let mut out = Vec::new();
    if t.ranks == 0 || t.cores_per_rank == 0 {
        out.push(Violation::UnsatisfiableRequirement {
            task: t.id.clone(),
            reason: "ranks and cores_per_rank must be >= 1".into(),
        });
    }
    if t.dependencies.contains(&t.id) {
        out.push(Violation::CyclicDependency { task: t.id.clone() });
    }
    for d in &t.dependencies {
        if !ids.contains(d.as_str()) {
            out.push(Violation::UnknownDependency {
                task: t.id.clone(),
                dependency: d.clone(),
            });
        }
    }
    if t.estimated_input_tokens != 0 && t.category() != TaskCategory::ServiceClient {
        out.push(Violation::policy(
            &t.id,
            "estimated_input_tokens is only meaningful for ServiceClient tasks",
        ));
    }
    if let Some(d) = t.expected_duration {
        if !(d >= 0.0 && d.is_finite()) {
            out.push(Violation::policy(&t.id, "expected_duration must be >= 0"));
        }
    }
    match &t.payload {
        Payload::ServiceClient(c) => {
            let targets = services_by_name
                .get(c.service.as_str())
                .cloned()
                .unwrap_or_default();
            if !targets.iter().any(|s| t.dependencies.contains(*s)) {
                out.push(Violation::policy(
                    &t.id,
                    format!(
                        "service client must depend explicitly on a Service named {:?}",
                        c.service
                    ),
                ));
            }
            if c.requests.iter().any(|r| r.prompt_tokens == 0 || r.generate_tokens == 0) {
                out.push(Violation::policy(&t.id, "request token counts must be positive"));
            }
        }
        Payload::Service(s) => {
            for d in &t.dependencies {
                if let Some(Payload::ServiceClient(c)) = by_id.get(d.as_str()).map(|x| &x.payload) {
                    if c.service == s.name {
                        out.push(Violation::policy(
                            &t.id,
                            format!("service depends on its own client {d}"),
                        ));
                    }
                }
            }
            if !(s.config.token_rate > 0.0) || s.config.max_num_seqs == 0 {
                out.push(Violation::policy(&t.id, "service capacity must be positive"));
            }
        }
        Payload::Coupled(c)
            if c.keys.is_empty() => {
                out.push(Violation::policy(&t.id, "coupled task needs exchange keys"));
            }
        _ => {}
    }
    if let Some(hint) = &t.partition_hint {
        if !partitions.iter().any(|p| &p.name == hint) {
            out.push(Violation::policy(&t.id, format!("unknown partition hint {hint:?}")));
        }
    }
    if t.ranks > 0 && t.cores_per_rank > 0 {
        let allowed: Vec<&ResolvedPartition> = partitions
            .iter()
            .filter(|p| p.allowed.contains(&t.category()))
            .collect();
        if allowed.is_empty() {
            out.push(Violation::UnsatisfiableRequirement {
                task: t.id.clone(),
                reason: format!("no partition allows {:?} tasks", t.category()),
            });
        } else if !allowed
            .iter()
            .any(|p| packable_ranks(t, &p.nodes) >= t.ranks as u64)
        {
            out.push(Violation::UnsatisfiableRequirement {
                task: t.id.clone(),
                reason: format!(
                    "{} ranks x ({} cores, {} gpus) do not fit any allowed partition",
                    t.ranks, t.cores_per_rank, t.gpus_per_rank
                ),
            });
        }
    }
    out
}

/// Histogram of task types; its counts always sum to `tasks.len()`.
pub fn type_census(tasks: &[TaskDescription]) -> BTreeMap<TaskTypeKey, usize> {
    let mut census = BTreeMap::new();
    for t in tasks {
        *census.entry(task_type_key(t)).or_insert(0) += 1;
    }
    census
}
