//! Campaign files, synthetic workload generators, the agent driver, and the
//! glue that runs a campaign file end to end.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::backends::{LocalBackend, SimulatedBackend};
use crate::event::{write_jsonl, Entity, EventKind, ExecutionEvent, RunClock};
use crate::metrics;
use crate::model::{
    validate_campaign, Campaign, CoupledPayload, CoupledRole, ExecutablePayload, ExecutionPolicy, FunctionPayload,
    InferenceRequest, MockServiceConfig, NodeSpec, Payload, ResourceDescription, ServiceClientPayload, ServicePayload,
    TaskDescription, Violation,
};
use crate::orchestrator::{CampaignReport, Decision, Orchestrator, RunError, WorkloadDriver};
use crate::store::StoreKind;

/// Elements of the tensor exchanged by each coupled pair (16 KB of f32).
pub const COUPLED_ELEMENTS: u64 = 4000;

pub const SERVICE_NAME: &str = "llm";

fn default_name() -> String {
    "campaign".to_string()
}

/// On-disk campaign description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct CampaignSpec {
    #[serde(default = "default_name")]
    pub name: String,
    pub resources: ResourceDescription,
    #[serde(default)]
    pub policy: ExecutionPolicy,
    #[serde(default)]
    pub tasks: Vec<TaskDescription>,
    #[serde(default)]
    pub seed: u64,
    /// Coupling store backing for Coupled tasks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub store: Option<StoreKind>,
    /// Agents that spawn tasks while the campaign runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agents: Option<AgentWorkload>,
}

impl CampaignSpec {
    pub fn new(name: &str, resources: ResourceDescription, tasks: Vec<TaskDescription>) -> Self {
        CampaignSpec {
            name: name.to_string(),
            resources,
            policy: ExecutionPolicy::default(),
            tasks,
            seed: 0,
            store: None,
            agents: None,
        }
    }

    pub fn with_backend(mut self, backend: &str) -> Self {
        self.policy = self.policy.with_backend(backend);
        self
    }

    pub fn validate(&self) -> Result<Campaign, Vec<Violation>> {
        let c = validate_campaign(self.tasks.clone(), self.resources.clone(), self.policy.clone())?;
        Ok(c.with_name(self.name.clone()))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("spec serializes");
        s.push('\n');
        s
    }
}

/// JSON Schema of [`CampaignSpec`]; shipped as `schema/campaign.schema.json`.
pub fn campaign_schema() -> String {
    let schema = schemars::schema_for!(CampaignSpec);
    let mut s = serde_json::to_string_pretty(&schema).expect("schema serializes");
    s.push('\n');
    s
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParseError {
    /// Field path such as `tasks[3].payload`, `.` for the document root.
    pub path: String,
    pub line: usize,
    pub column: usize,
    pub message: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}: at {}: {}", self.line, self.column, self.path, self.message)
    }
}

impl std::error::Error for ParseError {}

#[derive(Debug, thiserror::Error)]
pub enum SpecError {
    #[error("{0}")]
    Io(#[from] io::Error),
    #[error("parse error {0}")]
    Parse(ParseError),
    #[error("{} validation error(s): {}", .0.len(), .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Validation(Vec<Violation>),
}

/// Strict parse followed by validation.
pub fn parse_campaign(text: &str) -> Result<CampaignSpec, SpecError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let spec: CampaignSpec = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        SpecError::Parse(ParseError {
            path,
            line: inner.line(),
            column: inner.column(),
            message: inner.to_string(),
        })
    })?;
    spec.validate().map_err(SpecError::Validation)?;
    Ok(spec)
}

pub fn load_campaign(path: &Path) -> Result<CampaignSpec, SpecError> {
    parse_campaign(&std::fs::read_to_string(path)?)
}

// ---------------------------------------------------------------------------
// Generators

/// Independent single-core no-op functions over `nodes` nodes.
pub fn gen_noop(tasks: usize, nodes: usize, cores_per_node: u32) -> CampaignSpec {
    assert!(tasks >= 1 && nodes >= 1, "gen_noop needs at least one task and one node");
    let resources = ResourceDescription::uniform("node", nodes, cores_per_node, 0);
    let width = digits(tasks);
    let list = (0..tasks)
        .map(|i| TaskDescription::function(format!("noop-{i:0width$}"), "noop"))
        .collect();
    CampaignSpec::new(&format!("noop-{tasks}x{nodes}"), resources, list)
}

fn digits(n: usize) -> usize {
    n.saturating_sub(1).max(1).to_string().len()
}

/// Node shape used by [`gen_hetero`].
pub const HETERO_CORES: u32 = 56;
pub const HETERO_GPUS: u32 = 8;
pub const HETERO_TASKS: usize = 295;
pub const HETERO_RANKS: [u32; 10] = [1, 32, 64, 128, 256, 512, 1024, 2048, 4096, 7168];

/// Mixed serial/MPI, CPU/GPU executables in concurrent pipelines.
pub fn gen_hetero(seed: u64, nodes: usize) -> CampaignSpec {
    assert!(nodes >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let resources = ResourceDescription::uniform("node", nodes, HETERO_CORES, HETERO_GPUS);
    let max_cpu = resources.total_cores();
    let max_gpu = resources.total_gpus();
    let pipelines = 8;
    let mut tasks: Vec<TaskDescription> = Vec::with_capacity(HETERO_TASKS);
    for i in 0..HETERO_TASKS {
        let gpu = rng.gen_bool(0.5);
        let limit = if gpu { max_gpu } else { max_cpu };
        let choices: Vec<u32> = HETERO_RANKS.iter().copied().filter(|&r| u64::from(r) <= limit).collect();
        // Serial tasks dominate by count; MPI scales are drawn uniformly.
        let ranks = if rng.gen_bool(0.4) { 1 } else { choices[rng.gen_range(0..choices.len())] };
        let duration = if ranks == 1 {
            rng.gen_range(5.0..30.0)
        } else {
            rng.gen_range(60.0..300.0)
        };
        let duration = (duration * 1000.0_f64).round() / 1000.0;
        let mut t = TaskDescription::new(
            format!("het-{i:03}"),
            Payload::Executable(ExecutablePayload {
                command: "sleep".to_string(),
                args: vec![format!("{duration}")],
            }),
        )
        .with_shape(ranks, 1, u32::from(gpu))
        .with_duration(duration);
        if i >= pipelines && rng.gen_bool(0.5) {
            t = t.with_deps([tasks[i - pipelines].id.clone()]);
        }
        tasks.push(t);
    }
    let mut spec = CampaignSpec::new(&format!("hetero-{nodes}"), resources, tasks).with_backend("sim");
    spec.seed = seed;
    spec
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum TokenDistribution {
    Uniform,
    LogUniform,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceWorkload {
    pub services: usize,
    pub clients: usize,
    pub prompts: usize,
    pub distribution: TokenDistribution,
    pub min_tokens: u64,
    pub max_tokens: u64,
    pub generate_tokens: u64,
    pub service: MockServiceConfig,
}

impl Default for InferenceWorkload {
    fn default() -> Self {
        InferenceWorkload {
            services: 1,
            clients: 10,
            prompts: 100,
            distribution: TokenDistribution::Uniform,
            min_tokens: 4_000,
            max_tokens: 50_000,
            generate_tokens: 256,
            service: MockServiceConfig::default(),
        }
    }
}

pub fn sample_tokens(rng: &mut impl Rng, dist: TokenDistribution, lo: u64, hi: u64) -> u64 {
    match dist {
        TokenDistribution::Uniform => rng.gen_range(lo..=hi),
        TokenDistribution::LogUniform => {
            let x = rng.gen_range((lo as f64).ln()..=(hi as f64).ln());
            (x.exp().round() as u64).clamp(lo, hi)
        }
    }
}

/// One node per service instance; clients share the prompt set round-robin
/// and depend on every instance.
pub fn gen_inference(w: &InferenceWorkload, seed: u64) -> CampaignSpec {
    assert!(w.services >= 1 && w.clients >= 1 && w.prompts >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nodes = w.services;
    let per_node_clients = w.clients.div_ceil(nodes) as u32;
    let resources = ResourceDescription::uniform("node", nodes, per_node_clients + 1, 1);
    let mut tasks = Vec::with_capacity(w.services + w.clients);
    let service_ids: Vec<String> = (0..w.services).map(|i| format!("svc-{i}")).collect();
    for id in &service_ids {
        tasks.push(
            TaskDescription::new(
                id.clone(),
                Payload::Service(ServicePayload {
                    name: SERVICE_NAME.to_string(),
                    kind: crate::services::MOCK_KIND.to_string(),
                    config: w.service.clone(),
                }),
            )
            .with_shape(1, 1, 1),
        );
    }
    let requests: Vec<InferenceRequest> = (0..w.prompts)
        .map(|i| {
            let p = sample_tokens(&mut rng, w.distribution, w.min_tokens, w.max_tokens);
            InferenceRequest::new(format!("req-{i:05}"), p, w.generate_tokens)
        })
        .collect();
    for c in 0..w.clients {
        let mine: Vec<InferenceRequest> = requests.iter().skip(c).step_by(w.clients).cloned().collect();
        let mut t = TaskDescription::new(
            format!("client-{c:03}"),
            Payload::ServiceClient(ServiceClientPayload {
                service: SERVICE_NAME.to_string(),
                requests: mine.clone(),
            }),
        )
        .with_deps(service_ids.iter().cloned());
        t.estimated_input_tokens = mine.iter().map(|r| r.prompt_tokens).sum();
        tasks.push(t);
    }
    let mut spec = CampaignSpec::new(
        &format!("infer-{}-{}-{}", w.services, w.clients, w.prompts),
        resources,
        tasks,
    );
    spec.seed = seed;
    spec
}

/// `pairs_per_node` producer/consumer pairs on each node, exchanging one
/// f32[4000] tensor per pair through that node's store instance.
pub fn gen_coupled(pairs_per_node: usize, nodes: usize, store: StoreKind, compute: f64) -> CampaignSpec {
    assert!(pairs_per_node >= 1 && nodes >= 1);
    let cores = (2 * pairs_per_node) as u32;
    let resources = ResourceDescription::uniform("node", nodes, cores, 0);
    let mut tasks = Vec::with_capacity(2 * pairs_per_node * nodes);
    for n in 0..nodes {
        let node = &resources.nodes[n].name;
        for k in 0..pairs_per_node {
            let key = format!("pair-{n}-{k}");
            let prod = format!("prod-{n}-{k}");
            let coupled = |role| {
                Payload::Coupled(CoupledPayload {
                    role,
                    keys: vec![key.clone()],
                    store: node.clone(),
                    elements: COUPLED_ELEMENTS,
                    compute,
                })
            };
            tasks.push(TaskDescription::new(prod.clone(), coupled(CoupledRole::Producer)));
            tasks.push(TaskDescription::new(format!("cons-{n}-{k}"), coupled(CoupledRole::Consumer)).with_deps([prod]));
        }
    }
    let mut spec = CampaignSpec::new(&format!("coupled-{pairs_per_node}x{nodes}"), resources, tasks);
    spec.store = Some(store);
    spec
}

/// Bytes moved by one direction of a coupled campaign.
pub fn coupled_volume(spec: &CampaignSpec) -> u64 {
    spec.tasks
        .iter()
        .filter_map(|t| match &t.payload {
            Payload::Coupled(p) if p.role == CoupledRole::Producer => Some(p.keys.len() as u64 * p.elements * 4),
            _ => None,
        })
        .sum()
}

fn default_true() -> bool {
    true
}
fn default_interval() -> f64 {
    0.2
}
fn default_max_interval() -> f64 {
    3.2
}
fn default_tool() -> f64 {
    1.0
}
fn default_threshold() -> usize {
    2
}

/// Agents issuing decisions that each spawn one short task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct AgentWorkload {
    pub agents: u32,
    /// Seconds during which agents keep deciding.
    pub duration: f64,
    #[serde(default = "default_true")]
    pub feedback: bool,
    /// Base seconds between an agent's decisions (its inference latency).
    #[serde(default = "default_interval")]
    pub decision_interval: f64,
    #[serde(default = "default_max_interval")]
    pub max_interval: f64,
    /// Seconds each spawned task runs.
    #[serde(default = "default_tool")]
    pub tool_duration: f64,
    /// Spawned-but-not-running tasks an agent tolerates before slowing down.
    #[serde(default = "default_threshold")]
    pub backlog_threshold: usize,
}

impl AgentWorkload {
    pub fn new(agents: u32, duration: f64, feedback: bool) -> Self {
        AgentWorkload {
            agents,
            duration,
            feedback,
            decision_interval: default_interval(),
            max_interval: default_max_interval(),
            tool_duration: default_tool(),
            backlog_threshold: default_threshold(),
        }
    }
}

/// Agent campaigns start empty; capacity is sized so that all agents at full
/// speed would keep twice the available cores busy.
pub fn gen_agentic(agents: u32, duration: f64, feedback: bool) -> CampaignSpec {
    assert!(agents >= 1);
    let w = AgentWorkload::new(agents, duration, feedback);
    let demand = f64::from(agents) * w.tool_duration / w.decision_interval;
    let cores = ((demand / 2.0).ceil() as u32).max(1);
    let nodes = cores.div_ceil(64) as usize;
    let resources = ResourceDescription {
        nodes: (0..nodes)
            .map(|i| NodeSpec::new(format!("node-{i}"), cores.div_ceil(nodes as u32), 0))
            .collect(),
    };
    let mut spec = CampaignSpec::new(&format!("agentic-{agents}"), resources, Vec::new());
    spec.agents = Some(w);
    spec
}

struct Agent {
    next: f64,
    interval: f64,
    backlog: usize,
    issued: u64,
}

/// Drives [`AgentWorkload`]. With feedback on, an agent whose backlog
/// exceeds the threshold doubles its interval (up to `max_interval`); any
/// other decision resets it to the base interval.
pub struct AgentDriver {
    cfg: AgentWorkload,
    agents: Vec<Agent>,
    owner: HashMap<String, usize>,
    end: f64,
}

impl AgentDriver {
    /// Agents start at random phases within one interval after `start`.
    pub fn new(cfg: AgentWorkload, seed: u64, start: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa6e7);
        let agents = (0..cfg.agents)
            .map(|_| Agent {
                next: start + rng.gen_range(0.0..cfg.decision_interval),
                interval: cfg.decision_interval,
                backlog: 0,
                issued: 0,
            })
            .collect();
        AgentDriver {
            end: start + cfg.duration,
            cfg,
            agents,
            owner: HashMap::new(),
        }
    }
}

impl WorkloadDriver for AgentDriver {
    fn next_wakeup(&self) -> Option<f64> {
        self.agents
            .iter()
            .map(|a| a.next)
            .filter(|&t| t < self.end)
            .min_by(f64::total_cmp)
    }

    fn wake(&mut self, now: f64) -> Vec<Decision> {
        let mut out = Vec::new();
        for (i, a) in self.agents.iter_mut().enumerate() {
            if a.next > now || a.next >= self.end {
                continue;
            }
            let k = a.issued;
            a.issued += 1;
            a.backlog += 1;
            let task_id = format!("agent-{i:04}-task-{k:05}");
            let d = self.cfg.tool_duration;
            let task = TaskDescription::new(
                task_id.clone(),
                Payload::Function(FunctionPayload {
                    name: "sleep".to_string(),
                    args: serde_json::json!({ "seconds": d }),
                }),
            )
            .with_duration(d);
            self.owner.insert(task_id, i);
            out.push(Decision {
                id: format!("agent-{i:04}-decision-{k:05}"),
                agent: format!("agent-{i:04}"),
                task,
            });
            a.interval = if self.cfg.feedback && a.backlog > self.cfg.backlog_threshold {
                (a.interval * 2.0).min(self.cfg.max_interval)
            } else {
                self.cfg.decision_interval
            };
            a.next = (a.next + a.interval).max(now);
        }
        out
    }

    fn observe(&mut self, e: &ExecutionEvent) {
        if e.entity != Entity::Task || !matches!(e.event, EventKind::Running | EventKind::Canceled | EventKind::Failed) {
            return;
        }
        if let Some(i) = self.owner.remove(&e.id) {
            self.agents[i].backlog -= 1;
        }
    }
}

// ---------------------------------------------------------------------------
// Running and exporting

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Rebind every partition to this backend.
    pub backend: Option<String>,
    pub store: Option<StoreKind>,
    /// Filesystem store root and local task output directory.
    pub work_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    /// Local backend worker threads; defaults to the machine's parallelism.
    pub workers: Option<usize>,
}

#[derive(Debug, thiserror::Error)]
pub enum ExecError {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error("unsupported backend mix: {0}")]
    Backends(String),
}

/// Validate, pick backends and clock, and run the campaign to completion.
pub fn execute(spec: &CampaignSpec, opts: &RunOptions) -> Result<CampaignReport, ExecError> {
    let mut spec = spec.clone();
    if let Some(b) = &opts.backend {
        spec = spec.with_backend(b);
    }
    if let Some(s) = opts.seed {
        spec.seed = s;
    }
    let campaign = spec.validate().map_err(|v| ExecError::Spec(SpecError::Validation(v)))?;
    let mut needed: BTreeSet<String> = spec.policy.partitions.iter().map(|p| p.backend.clone()).collect();
    needed.insert(spec.policy.default_backend.clone());
    let sim = needed.contains("sim");
    if sim && needed.len() > 1 {
        return Err(ExecError::Backends(format!(
            "the simulated backend runs on virtual time and cannot share a run with {:?}",
            needed.iter().filter(|b| *b != "sim").collect::<Vec<_>>()
        )));
    }
    let clock = if sim { RunClock::virtual_time() } else { RunClock::wall() };
    let store = opts.store.or(spec.store).unwrap_or_default();
    let store_root = match (store, &opts.work_dir) {
        (StoreKind::Filesystem, Some(d)) => Some(d.join("store")),
        (StoreKind::Filesystem, None) => Some(std::env::temp_dir().join(format!("rhl-store-{}", std::process::id()))),
        _ => None,
    };
    let mut orch = Orchestrator::new(clock.clone())
        .with_seed(spec.seed)
        .with_store(store, store_root);
    if sim {
        orch.register_backend(Box::new(SimulatedBackend::new(clock.clone())))?;
    } else {
        let mut local = match opts.workers {
            Some(n) => LocalBackend::with_workers(clock.clone(), n),
            None => LocalBackend::new(clock.clone()),
        };
        if let Some(d) = &opts.work_dir {
            local = local.with_output_dir(d.join("output"));
        }
        orch.register_backend(Box::new(local))?;
    }
    let handle = orch.submit(campaign)?;
    if let Some(agents) = &spec.agents {
        let driver = AgentDriver::new(agents.clone(), spec.seed, clock.now());
        orch.attach_driver(&handle, Box::new(driver))?;
    }
    Ok(orch.run(&handle)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportFormat {
    Json,
    CsvBundle,
}

/// Write `report_<run-id>.json` or the per-series CSV files into `dir`.
pub fn export(report: &CampaignReport, format: ExportFormat, dir: &Path) -> io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    match format {
        ExportFormat::Json => {
            let path = dir.join(format!("report_{}.json", report.run_id));
            let mut s = serde_json::to_string_pretty(report).map_err(io::Error::other)?;
            s.push('\n');
            std::fs::write(&path, s)?;
            Ok(vec![path])
        }
        ExportFormat::CsvBundle => {
            let a = metrics::analyze(&report.events, &report.resources, &report.policy)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
            metrics::write_series_csv(dir, &report.run_id, &a.series())
        }
    }
}

/// Write `events_<run-id>.jsonl`.
pub fn export_events(report: &CampaignReport, dir: &Path) -> io::Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("events_{}.jsonl", report.run_id));
    let f = io::BufWriter::new(std::fs::File::create(&path)?);
    write_jsonl(f, &report.events)?;
    Ok(path)
}
