use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use rhl_core::event::read_jsonl;
use rhl_core::metrics::{self, MetricsError, TimeSeries};
use rhl_core::model::{NodeSpec, ResourceDescription, TaskState};
use rhl_core::store::StoreKind;
use rhl_core::workloads::{
    self, export, export_events, gen_agentic, gen_coupled, gen_hetero, gen_inference, gen_noop, load_campaign,
    CampaignSpec, ExecError, ExportFormat, InferenceWorkload, RunOptions, SpecError, TokenDistribution,
};
use rhl_core::{Entity, EventKind, ExecutionEvent, ExecutionPolicy};

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

#[derive(Parser)]
#[command(name = "rhl", version, about = "Run and analyze heterogeneous workflow campaigns")]
struct Cli {
    /// Seed for generators and runs; overrides the campaign file's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Execution backend for every partition.
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendArg>,
    /// Coupling store backing.
    #[arg(long, global = true, value_enum)]
    store: Option<StoreArg>,
    /// Directory for reports, event logs and series files.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Local,
    Sim,
}

impl BackendArg {
    fn id(self) -> &'static str {
        match self {
            BackendArg::Local => "local",
            BackendArg::Sim => "sim",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StoreArg {
    Memory,
    Fs,
}

impl From<StoreArg> for StoreKind {
    fn from(s: StoreArg) -> Self {
        match s {
            StoreArg::Memory => StoreKind::Memory,
            StoreArg::Fs => StoreKind::Filesystem,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Execute a campaign spec and write its report, event log and series.
    Run { spec: PathBuf },
    /// Write a synthetic campaign spec.
    Gen {
        #[command(subcommand)]
        kind: GenKind,
        #[arg(short = 'o', long = "output", global = true)]
        output: Option<PathBuf>,
    },
    /// Compute metrics from an event log.
    Analyze {
        events: PathBuf,
        #[arg(long, value_enum)]
        metric: Option<Metric>,
        /// Spec whose resources and policy apply; needed for exact utilization.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Sample step in seconds.
        #[arg(long)]
        resolution: Option<f64>,
        /// Rate window in seconds.
        #[arg(long)]
        window: Option<f64>,
    },
    /// Rebuild final task states from an event log, checking every transition.
    Replay { events: PathBuf },
}

#[derive(Subcommand)]
enum GenKind {
    /// Independent no-op functions.
    Noop {
        #[arg(long, default_value_t = 2048)]
        tasks: usize,
        #[arg(long, default_value_t = 1)]
        nodes: usize,
        #[arg(long, default_value_t = 128)]
        cores: u32,
    },
    /// Mixed serial/MPI CPU/GPU executables.
    Hetero {
        #[arg(long, default_value_t = 256)]
        nodes: usize,
    },
    /// Inference services with client fan-out.
    Infer {
        #[arg(long, default_value_t = 1)]
        services: usize,
        #[arg(long, default_value_t = 10)]
        clients: usize,
        #[arg(long, default_value_t = 100)]
        prompts: usize,
        #[arg(long, value_enum, default_value_t = DistArg::Uniform)]
        dist: DistArg,
        #[arg(long, default_value_t = 4000)]
        min_tokens: u64,
        #[arg(long, default_value_t = 50000)]
        max_tokens: u64,
    },
    /// Producer/consumer pairs exchanging tensors through a store.
    Coupled {
        #[arg(long, default_value_t = 100)]
        pairs: usize,
        #[arg(long, default_value_t = 1)]
        nodes: usize,
        /// Seconds of padded compute per task.
        #[arg(long, default_value_t = 0.0)]
        compute: f64,
    },
    /// Agents whose decisions spawn tasks during the run.
    Agentic {
        #[arg(long, default_value_t = 50)]
        agents: u32,
        #[arg(long, default_value_t = 30.0)]
        duration: f64,
        #[arg(long)]
        no_feedback: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DistArg {
    Uniform,
    LogUniform,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Hw,
    Arr,
    Util,
    Throughput,
    Decomp,
}

/// Error with its exit code.
struct Failure(u8, String);

impl From<SpecError> for Failure {
    fn from(e: SpecError) -> Self {
        match e {
            SpecError::Io(e) => Failure(EXIT_RUNTIME, e.to_string()),
            other => Failure(EXIT_VALIDATION, other.to_string()),
        }
    }
}

impl From<ExecError> for Failure {
    fn from(e: ExecError) -> Self {
        match e {
            ExecError::Spec(s) => s.into(),
            ExecError::Backends(m) => Failure(EXIT_VALIDATION, m),
            ExecError::Run(r) => Failure(EXIT_RUNTIME, r.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure(EXIT_RUNTIME, e.to_string())
    }
}

impl From<MetricsError> for Failure {
    fn from(e: MetricsError) -> Self {
        Failure(EXIT_VALIDATION, e.to_string())
    }
}

fn main() -> ExitCode {
    let filter = tracing_subscriber::EnvFilter::try_from_env("RHL_LOG_LEVEL")
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn"));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();

    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Run { spec } => run(cli, spec),
        Command::Gen { kind, output } => generate(cli, kind, output.as_deref()),
        Command::Analyze { events, metric, spec, resolution, window } => {
            analyze(cli, events, *metric, spec.as_deref(), *resolution, *window)
        }
        Command::Replay { events } => replay(events),
    }
}

fn out_dir(cli: &Cli) -> PathBuf {
    cli.out_dir.clone().unwrap_or_else(|| PathBuf::from("."))
}

fn run(cli: &Cli, spec_path: &Path) -> Result<(), Failure> {
    let spec = load_campaign(spec_path)?;
    let dir = out_dir(cli);
    let opts = RunOptions {
        backend: cli.backend.map(|b| b.id().to_string()),
        store: cli.store.map(Into::into),
        work_dir: Some(dir.clone()),
        seed: cli.seed,
        workers: None,
    };
    tracing::info!(campaign = %spec.name, tasks = spec.tasks.len(), "running");
    let report = workloads::execute(&spec, &opts)?;
    export(&report, ExportFormat::Json, &dir)?;
    export_events(&report, &dir)?;
    export(&report, ExportFormat::CsvBundle, &dir)?;
    let counts: BTreeMap<String, usize> = [TaskState::Done, TaskState::Failed, TaskState::Canceled]
        .into_iter()
        .map(|s| (s.to_string(), report.count(s)))
        .collect();
    let out = json!({
        "run_id": report.run_id,
        "makespan": report.makespan,
        "tasks": counts,
        "summary": report.summary,
    });
    emit_json(&out);
    if report.count(TaskState::Done) < report.tasks.len() {
        return Err(Failure(EXIT_RUNTIME, "some tasks did not complete".to_string()));
    }
    Ok(())
}

fn generate(cli: &Cli, kind: &GenKind, output: Option<&Path>) -> Result<(), Failure> {
    let seed = cli.seed.unwrap_or(0);
    let mut spec: CampaignSpec = match *kind {
        GenKind::Noop { tasks, nodes, cores } => {
            if tasks == 0 || nodes == 0 || cores == 0 {
                return Err(Failure(EXIT_VALIDATION, "tasks, nodes and cores must be positive".into()));
            }
            gen_noop(tasks, nodes, cores)
        }
        GenKind::Hetero { nodes } => {
            if nodes == 0 {
                return Err(Failure(EXIT_VALIDATION, "nodes must be positive".into()));
            }
            gen_hetero(seed, nodes)
        }
        GenKind::Infer { services, clients, prompts, dist, min_tokens, max_tokens } => {
            if services == 0 || clients == 0 || prompts == 0 || min_tokens == 0 || min_tokens > max_tokens {
                return Err(Failure(EXIT_VALIDATION, "invalid inference workload shape".into()));
            }
            let w = InferenceWorkload {
                services,
                clients,
                prompts,
                distribution: match dist {
                    DistArg::Uniform => TokenDistribution::Uniform,
                    DistArg::LogUniform => TokenDistribution::LogUniform,
                },
                min_tokens,
                max_tokens,
                ..Default::default()
            };
            gen_inference(&w, seed)
        }
        GenKind::Coupled { pairs, nodes, compute } => {
            if pairs == 0 || nodes == 0 || compute < 0.0 {
                return Err(Failure(EXIT_VALIDATION, "invalid coupled workload shape".into()));
            }
            gen_coupled(pairs, nodes, cli.store.map(Into::into).unwrap_or_default(), compute)
        }
        GenKind::Agentic { agents, duration, no_feedback } => {
            if agents == 0 || duration <= 0.0 {
                return Err(Failure(EXIT_VALIDATION, "agents and duration must be positive".into()));
            }
            gen_agentic(agents, duration, !no_feedback)
        }
    };
    spec.seed = seed;
    if let Some(b) = cli.backend {
        spec = spec.with_backend(b.id());
    }
    if let Some(s) = cli.store {
        if spec.store.is_some() {
            spec.store = Some(s.into());
        }
    }
    let text = spec.to_json();
    match output {
        Some(p) => std::fs::write(p, text)?,
        None => emit(&text),
    }
    Ok(())
}

fn read_events(path: &Path) -> Result<Vec<ExecutionEvent>, Failure> {
    let f = File::open(path)?;
    let mut events = read_jsonl(BufReader::new(f)).map_err(|e| Failure(EXIT_VALIDATION, format!("{}: {e}", path.display())))?;
    events.sort_by(|a, b| a.ts.total_cmp(&b.ts));
    Ok(events)
}

/// Capacity lower bound from the placements recorded on Running events.
fn resources_from_log(events: &[ExecutionEvent]) -> ResourceDescription {
    let mut nodes: BTreeMap<String, (u32, u32)> = BTreeMap::new();
    for e in events.iter().filter(|e| e.event == EventKind::Running) {
        let Some(bindings) = e.attrs.get("placement").and_then(|p| p.as_array()) else { continue };
        for b in bindings {
            let Some(name) = b.get(0).and_then(|n| n.as_str()) else { continue };
            let top = |i: usize| {
                b.get(i)
                    .and_then(|v| v.as_array())
                    .map(|a| a.iter().filter_map(|x| x.as_u64()).map(|x| x as u32 + 1).max().unwrap_or(0))
                    .unwrap_or(0)
            };
            let entry = nodes.entry(name.to_string()).or_default();
            entry.0 = entry.0.max(top(1));
            entry.1 = entry.1.max(top(2));
        }
    }
    ResourceDescription {
        nodes: nodes.into_iter().map(|(n, (c, g))| NodeSpec::new(n, c, g)).collect(),
    }
}

fn run_id_of(path: &Path) -> String {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("log");
    stem.strip_prefix("events_").unwrap_or(stem).to_string()
}

fn print_series(s: &TimeSeries) {
    emit(&s.to_csv());
}

fn analyze(
    cli: &Cli,
    path: &Path,
    metric: Option<Metric>,
    spec: Option<&Path>,
    resolution: Option<f64>,
    window: Option<f64>,
) -> Result<(), Failure> {
    let events = read_events(path)?;
    let (resources, mut policy) = match spec {
        Some(p) => {
            let s = load_campaign(p)?;
            (s.resources, s.policy)
        }
        None => {
            if matches!(metric, Some(Metric::Util)) {
                tracing::warn!("no --spec given; utilization uses capacity inferred from placements");
            }
            (resources_from_log(&events), ExecutionPolicy::default())
        }
    };
    if let Some(r) = resolution {
        policy.resolution = r;
    }
    if let Some(w) = window {
        policy.rate_window = w;
    }
    let run_id = run_id_of(path);
    let write = |name: &str, s: &TimeSeries| -> Result<(), Failure> {
        if let Some(d) = &cli.out_dir {
            metrics::write_series_csv(d, &run_id, &[(name, s)])?;
        }
        Ok(())
    };
    match metric {
        None => {
            let a = metrics::analyze(&events, &resources, &policy)?;
            if let Some(d) = &cli.out_dir {
                metrics::write_series_csv(d, &run_id, &a.series())?;
            }
            emit_json(&a.summary());
        }
        Some(Metric::Hw) => {
            let s = metrics::heterogeneity_width(&events, policy.resolution)?;
            write("hw", &s)?;
            print_series(&s);
        }
        Some(Metric::Arr) => {
            let s = metrics::windowed_rate(&events, metrics::is_task_running, policy.rate_window, policy.resolution)?;
            write("arr", &s)?;
            print_series(&s);
        }
        Some(Metric::Util) => {
            let u = metrics::utilization(&events, &resources, policy.resolution)?;
            write("util_cores", &u.cores)?;
            write("util_gpus", &u.gpus)?;
            print_series(&u.cores);
        }
        Some(Metric::Throughput) => {
            let t = metrics::throughput(&events)?;
            emit_json(&serde_json::to_value(t).expect("json"));
        }
        Some(Metric::Decomp) => {
            let d = metrics::decompose_runtime(&events)?;
            let out = json!({
                "computation": d.computation(),
                "data_transfer": d.data_transfer(),
                "orchestration": d.orchestration(),
                "runtime_overhead": d.runtime_overhead(),
                "total": d.total(),
                "fractions": d.fractions(),
            });
            emit_json(&out);
        }
    }
    Ok(())
}

fn replay(path: &Path) -> Result<(), Failure> {
    let events = read_events(path)?;
    let mut states: BTreeMap<&str, TaskState> = BTreeMap::new();
    for e in events.iter().filter(|e| e.entity == Entity::Task) {
        let to = match e.event {
            EventKind::New => {
                if states.insert(&e.id, TaskState::New).is_some() {
                    return Err(Failure(EXIT_VALIDATION, format!("task {} created twice", e.id)));
                }
                continue;
            }
            EventKind::Ready => TaskState::Ready,
            EventKind::Scheduled => TaskState::Scheduled,
            EventKind::Running => TaskState::Running,
            EventKind::Done => TaskState::Done,
            EventKind::Failed => TaskState::Failed,
            EventKind::Canceled => TaskState::Canceled,
            _ => continue,
        };
        let from = *states
            .get(e.id.as_str())
            .ok_or_else(|| Failure(EXIT_VALIDATION, format!("task {} has events before New", e.id)))?;
        let next = from
            .transition(to)
            .map_err(|err| Failure(EXIT_VALIDATION, format!("task {} at t={}: {err}", e.id, e.ts)))?;
        states.insert(&e.id, next);
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for s in states.values() {
        *counts.entry(s.to_string()).or_default() += 1;
    }
    let out = json!({ "tasks": states.len(), "states": counts });
    emit_json(&out);
    Ok(())
}

/// Write to stdout, ignoring a closed pipe (e.g. output piped into `head`).
fn emit(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn emit_json(value: &serde_json::Value) {
    emit(&format!("{}\n", serde_json::to_string_pretty(value).expect("json")));
}
