//! Offline measures over an event log. Every function here is pure.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::event::{Entity, EventKind, ExecutionEvent};
use crate::model::{ExecutionPolicy, ResourceDescription};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("malformed log: {0}")]
    MalformedLog(String),
    #[error("makespan is zero")]
    ZeroMakespan,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Samples at `start + k * step`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub start: f64,
    pub step: f64,
    pub values: Vec<f64>,
}

impl TimeSeries {
    pub fn ts(&self, k: usize) -> f64 {
        self.start + k as f64 * self.step
    }

    pub fn points(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.values.iter().enumerate().map(|(k, &v)| (self.ts(k), v))
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            0.0
        } else {
            self.values.iter().sum::<f64>() / self.values.len() as f64
        }
    }

    /// `ts,value` CSV with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("ts,value\n");
        for (t, v) in self.points() {
            let _ = writeln!(out, "{t},{v}");
        }
        out
    }
}

/// Sample grid spanning the log. An empty log yields the single instant 0.
pub fn grid(log: &[ExecutionEvent], resolution: f64) -> Result<(f64, usize), MetricsError> {
    if !(resolution > 0.0) {
        return Err(MetricsError::InvalidArgument(format!("resolution {resolution}")));
    }
    let Some((lo, hi)) = span(log) else {
        return Ok((0.0, 1));
    };
    let n = ((hi - lo) / resolution).ceil() as usize + 1;
    Ok((lo, n))
}

fn span(log: &[ExecutionEvent]) -> Option<(f64, f64)> {
    let lo = log.iter().map(|e| e.ts).min_by(f64::total_cmp)?;
    let hi = log.iter().map(|e| e.ts).max_by(f64::total_cmp)?;
    Some((lo, hi))
}

pub fn makespan(log: &[ExecutionEvent]) -> f64 {
    span(log).map_or(0.0, |(lo, hi)| hi - lo)
}

/// Execution interval of one task: Running until its terminal event (or
/// forever, when the log ends first).
#[derive(Clone, Debug, PartialEq)]
pub struct RunInterval {
    pub task: String,
    pub type_key: String,
    pub start: f64,
    pub end: f64,
    pub cores: u64,
    pub gpus: u64,
}

impl RunInterval {
    pub fn contains(&self, t: f64) -> bool {
        self.start <= t && t < self.end
    }
}

/// Collect task run intervals in order of their Running events.
pub fn run_intervals(log: &[ExecutionEvent]) -> Result<Vec<RunInterval>, MetricsError> {
    let mut out: Vec<RunInterval> = Vec::new();
    let mut open: HashMap<&str, usize> = HashMap::new();
    for e in log.iter().filter(|e| e.entity == Entity::Task) {
        match e.event {
            EventKind::Running => {
                if open.contains_key(e.id.as_str()) {
                    return Err(MetricsError::MalformedLog(format!("task {} Running twice", e.id)));
                }
                let key = e
                    .attr_str("task_type_key")
                    .ok_or_else(|| MetricsError::MalformedLog(format!("task {} Running without task_type_key", e.id)))?;
                open.insert(&e.id, out.len());
                out.push(RunInterval {
                    task: e.id.clone(),
                    type_key: key.to_string(),
                    start: e.ts,
                    end: f64::INFINITY,
                    cores: count_attr(e, "cores")?,
                    gpus: count_attr(e, "gpus")?,
                });
            }
            k if k.is_task_terminal() => {
                if let Some(&i) = open.get(e.id.as_str()) {
                    if out[i].end.is_finite() {
                        return Err(MetricsError::MalformedLog(format!("task {} terminated twice", e.id)));
                    }
                    if e.ts < out[i].start {
                        return Err(MetricsError::MalformedLog(format!("task {} ends before it runs", e.id)));
                    }
                    out[i].end = e.ts;
                }
            }
            _ => {}
        }
    }
    Ok(out)
}

fn count_attr(e: &ExecutionEvent, key: &str) -> Result<u64, MetricsError> {
    match e.attrs.get(key) {
        None => Ok(0),
        Some(v) => v
            .as_u64()
            .ok_or_else(|| MetricsError::MalformedLog(format!("{} attr {key} is not a count", e.id))),
    }
}

/// Start/end changes sorted by time, starts first at equal times so that
/// zero-length runs balance. Callers apply a whole timestamp before reading.
fn sweep_points(intervals: &[RunInterval]) -> Vec<(f64, bool, usize)> {
    let mut pts: Vec<(f64, bool, usize)> = Vec::with_capacity(intervals.len() * 2);
    for (i, iv) in intervals.iter().enumerate() {
        pts.push((iv.start, true, i));
        if iv.end.is_finite() {
            pts.push((iv.end, false, i));
        }
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)).then(a.2.cmp(&b.2)));
    pts
}

/// Number of distinct task types executing at each sample instant.
pub fn heterogeneity_width(log: &[ExecutionEvent], resolution: f64) -> Result<TimeSeries, MetricsError> {
    let (start, n) = grid(log, resolution)?;
    let intervals = run_intervals(log)?;
    let pts = sweep_points(&intervals);
    let mut live: BTreeMap<&str, usize> = BTreeMap::new();
    let mut next = 0;
    let mut values = Vec::with_capacity(n);
    for k in 0..n {
        let t = start + k as f64 * resolution;
        while next < pts.len() && pts[next].0 <= t {
            let (_, is_start, i) = pts[next];
            let key = intervals[i].type_key.as_str();
            if is_start {
                *live.entry(key).or_default() += 1;
            } else {
                let c = live.get_mut(key).expect("end follows start");
                *c -= 1;
                if *c == 0 {
                    live.remove(key);
                }
            }
            next += 1;
        }
        values.push(live.len() as f64);
    }
    Ok(TimeSeries { start, step: resolution, values })
}

/// Largest heterogeneity width at any instant, sampled or not.
pub fn peak_heterogeneity(log: &[ExecutionEvent]) -> Result<usize, MetricsError> {
    let intervals = run_intervals(log)?;
    let pts = sweep_points(&intervals);
    let mut live: BTreeMap<&str, usize> = BTreeMap::new();
    let mut peak = 0;
    let mut i = 0;
    while i < pts.len() {
        let t = pts[i].0;
        while i < pts.len() && pts[i].0 == t {
            let (_, is_start, j) = pts[i];
            let key = intervals[j].type_key.as_str();
            if is_start {
                *live.entry(key).or_default() += 1;
            } else {
                let c = live.get_mut(key).expect("end follows start");
                *c -= 1;
                if *c == 0 {
                    live.remove(key);
                }
            }
            i += 1;
        }
        peak = peak.max(live.len());
    }
    Ok(peak)
}

pub fn is_decision(e: &ExecutionEvent) -> bool {
    e.event == EventKind::Decision
}

pub fn is_task_running(e: &ExecutionEvent) -> bool {
    e.entity == Entity::Task && e.event == EventKind::Running
}

/// Count of matching events in `(t - window, t]`, divided by `window`.
pub fn windowed_rate<F>(log: &[ExecutionEvent], filter: F, window: f64, resolution: f64) -> Result<TimeSeries, MetricsError>
where
    F: Fn(&ExecutionEvent) -> bool,
{
    if !(window > 0.0) {
        return Err(MetricsError::InvalidArgument(format!("window {window}")));
    }
    let (start, n) = grid(log, resolution)?;
    let mut ts: Vec<f64> = log.iter().filter(|e| filter(e)).map(|e| e.ts).collect();
    ts.sort_by(f64::total_cmp);
    let (mut lo, mut hi) = (0, 0);
    let mut values = Vec::with_capacity(n);
    for k in 0..n {
        let t = start + k as f64 * resolution;
        while hi < ts.len() && ts[hi] <= t {
            hi += 1;
        }
        while lo < hi && ts[lo] <= t - window {
            lo += 1;
        }
        values.push((hi - lo) as f64 / window);
    }
    Ok(TimeSeries { start, step: resolution, values })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingLag {
    /// `(decision id, lag seconds)` in decision order.
    pub samples: Vec<(String, f64)>,
    pub max: f64,
    pub unmatched: Vec<String>,
}

/// Delay from each decision to the Running event of the task it spawned.
pub fn coupling_lag(log: &[ExecutionEvent]) -> Result<CouplingLag, MetricsError> {
    let mut running: HashMap<&str, f64> = HashMap::new();
    for e in log.iter().filter(|e| is_task_running(e)) {
        running.entry(e.id.as_str()).or_insert(e.ts);
    }
    let mut out = CouplingLag { samples: Vec::new(), max: 0.0, unmatched: Vec::new() };
    for e in log.iter().filter(|e| is_decision(e)) {
        let task = e
            .attr_str("task")
            .ok_or_else(|| MetricsError::MalformedLog(format!("decision {} names no task", e.id)))?;
        match running.get(task) {
            Some(&t) => {
                let lag = t - e.ts;
                out.max = out.max.max(lag);
                out.samples.push((e.id.clone(), lag));
            }
            None => out.unmatched.push(e.id.clone()),
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utilization {
    pub cores: TimeSeries,
    pub gpus: TimeSeries,
    /// Busy core-seconds over available core-seconds across the makespan.
    pub mean_cores: f64,
    pub mean_gpus: f64,
}

pub fn utilization(log: &[ExecutionEvent], resources: &ResourceDescription, resolution: f64) -> Result<Utilization, MetricsError> {
    let (start, n) = grid(log, resolution)?;
    let intervals = run_intervals(log)?;
    let total_c = resources.total_cores() as f64;
    let total_g = resources.total_gpus() as f64;
    let pts = sweep_points(&intervals);
    let (mut busy_c, mut busy_g) = (0u64, 0u64);
    let mut next = 0;
    let mut cores = Vec::with_capacity(n);
    let mut gpus = Vec::with_capacity(n);
    for k in 0..n {
        let t = start + k as f64 * resolution;
        while next < pts.len() && pts[next].0 <= t {
            let (_, is_start, i) = pts[next];
            if is_start {
                busy_c += intervals[i].cores;
                busy_g += intervals[i].gpus;
            } else {
                busy_c -= intervals[i].cores;
                busy_g -= intervals[i].gpus;
            }
            next += 1;
        }
        cores.push(if total_c > 0.0 { busy_c as f64 / total_c } else { 0.0 });
        gpus.push(if total_g > 0.0 { busy_g as f64 / total_g } else { 0.0 });
    }
    let (lo, hi) = span(log).unwrap_or((0.0, 0.0));
    let (mut cs, mut gs) = (0.0, 0.0);
    for iv in &intervals {
        let d = iv.end.min(hi) - iv.start.max(lo);
        if d > 0.0 {
            cs += d * iv.cores as f64;
            gs += d * iv.gpus as f64;
        }
    }
    let ms = hi - lo;
    let mean = |s: f64, total: f64| if ms > 0.0 && total > 0.0 { s / (ms * total) } else { 0.0 };
    Ok(Utilization {
        cores: TimeSeries { start, step: resolution, values: cores },
        gpus: TimeSeries { start, step: resolution, values: gpus },
        mean_cores: mean(cs, total_c),
        mean_gpus: mean(gs, total_g),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub tasks_done: u64,
    pub tokens: u64,
    pub makespan: f64,
    pub tasks_per_s: f64,
    pub tokens_per_s: f64,
}

pub fn throughput(log: &[ExecutionEvent]) -> Result<Throughput, MetricsError> {
    if makespan(log) <= 0.0 {
        return Err(MetricsError::ZeroMakespan);
    }
    tally(log)
}

/// Counts and rates; rates are zero for a zero-length log.
fn tally(log: &[ExecutionEvent]) -> Result<Throughput, MetricsError> {
    let ms = makespan(log);
    let rate = |n: u64| if ms > 0.0 { n as f64 / ms } else { 0.0 };
    let done = log
        .iter()
        .filter(|e| e.entity == Entity::Task && e.event == EventKind::Done)
        .count() as u64;
    let mut tokens = 0u64;
    for e in log.iter().filter(|e| e.event == EventKind::RequestDone && !e.attrs.contains_key("error")) {
        tokens += count_attr(e, "total_tokens")?;
    }
    Ok(Throughput {
        tasks_done: done,
        tokens,
        makespan: ms,
        tasks_per_s: rate(done),
        tokens_per_s: rate(tokens),
    })
}

/// Aggregate task time split into four parts. Stored in integer nanoseconds
/// so that the parts sum to the total exactly.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuntimeDecomposition {
    pub computation_ns: i64,
    pub data_transfer_ns: i64,
    pub orchestration_ns: i64,
    pub runtime_overhead_ns: i64,
    pub total_ns: i64,
}

fn ns(seconds: f64) -> i64 {
    (seconds * 1e9).round() as i64
}

impl RuntimeDecomposition {
    pub fn computation(&self) -> f64 {
        self.computation_ns as f64 * 1e-9
    }
    pub fn data_transfer(&self) -> f64 {
        self.data_transfer_ns as f64 * 1e-9
    }
    pub fn orchestration(&self) -> f64 {
        self.orchestration_ns as f64 * 1e-9
    }
    pub fn runtime_overhead(&self) -> f64 {
        self.runtime_overhead_ns as f64 * 1e-9
    }
    pub fn total(&self) -> f64 {
        self.total_ns as f64 * 1e-9
    }

    /// `total - (sum of parts)`, always zero for a computed decomposition.
    pub fn residual_ns(&self) -> i64 {
        self.total_ns - self.computation_ns - self.data_transfer_ns - self.orchestration_ns - self.runtime_overhead_ns
    }

    /// Each part divided by the total, in field order.
    pub fn fractions(&self) -> [f64; 4] {
        if self.total_ns == 0 {
            return [0.0; 4];
        }
        let t = self.total_ns as f64;
        [
            self.computation_ns as f64 / t,
            self.data_transfer_ns as f64 / t,
            self.orchestration_ns as f64 / t,
            self.runtime_overhead_ns as f64 / t,
        ]
    }
}

/// Summed over tasks: total is Scheduled to terminal, orchestration is
/// Scheduled to Running, computation comes from the `compute` attr of
/// terminal events, data transfer from Put/Get `latency` attrs.
pub fn decompose_runtime(log: &[ExecutionEvent]) -> Result<RuntimeDecomposition, MetricsError> {
    let mut scheduled: HashMap<&str, f64> = HashMap::new();
    let mut d = RuntimeDecomposition::default();
    for e in log {
        match (e.entity, e.event) {
            (Entity::Task, EventKind::Scheduled) => {
                scheduled.insert(&e.id, e.ts);
            }
            (Entity::Task, EventKind::Running) => {
                let s = scheduled
                    .get(e.id.as_str())
                    .ok_or_else(|| MetricsError::MalformedLog(format!("task {} Running before Scheduled", e.id)))?;
                d.orchestration_ns += ns(e.ts - s);
            }
            (Entity::Task, k) if k.is_task_terminal() => {
                if let Some(s) = scheduled.get(e.id.as_str()) {
                    d.total_ns += ns(e.ts - s);
                }
                if let Some(c) = e.attrs.get("compute") {
                    let c = c
                        .as_f64()
                        .ok_or_else(|| MetricsError::MalformedLog(format!("task {} compute attr", e.id)))?;
                    d.computation_ns += ns(c);
                }
            }
            (_, EventKind::Put | EventKind::Get) => {
                if let Some(l) = e.attr_f64("latency") {
                    d.data_transfer_ns += ns(l);
                }
            }
            _ => {}
        }
    }
    d.runtime_overhead_ns = d.total_ns - d.computation_ns - d.data_transfer_ns - d.orchestration_ns;
    Ok(d)
}

/// Pearson correlation of `a[t]` with `b[t + lag]` over the overlap.
/// Zero when either side is constant or the overlap is shorter than 2.
pub fn cross_correlation(a: &[f64], b: &[f64], lag: usize) -> f64 {
    let n = a.len().min(b.len().saturating_sub(lag));
    if n < 2 {
        return 0.0;
    }
    let x = &a[..n];
    let y = &b[lag..lag + n];
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (p, q) in x.iter().zip(y) {
        sxy += (p - mx) * (q - my);
        sxx += (p - mx) * (p - mx);
        syy += (q - my) * (q - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// All series and scalars for one log.
pub struct Analysis {
    pub hw: TimeSeries,
    pub decision_rate: TimeSeries,
    pub arr: TimeSeries,
    pub utilization: Utilization,
    pub throughput: Option<Throughput>,
    pub decomposition: RuntimeDecomposition,
    pub coupling: CouplingLag,
    pub peak_hw: usize,
}

pub fn analyze(log: &[ExecutionEvent], resources: &ResourceDescription, policy: &ExecutionPolicy) -> Result<Analysis, MetricsError> {
    let res = policy.resolution;
    Ok(Analysis {
        hw: heterogeneity_width(log, res)?,
        decision_rate: windowed_rate(log, is_decision, policy.rate_window, res)?,
        arr: windowed_rate(log, is_task_running, policy.rate_window, res)?,
        utilization: utilization(log, resources, res)?,
        throughput: tally(log).ok(),
        decomposition: decompose_runtime(log)?,
        coupling: coupling_lag(log)?,
        peak_hw: peak_heterogeneity(log)?,
    })
}

impl Analysis {
    pub fn summary(&self) -> Value {
        let tp = self.throughput.unwrap_or(Throughput {
            tasks_done: 0,
            tokens: 0,
            makespan: 0.0,
            tasks_per_s: 0.0,
            tokens_per_s: 0.0,
        });
        let d = &self.decomposition;
        json!({
            "makespan": tp.makespan,
            "tasks_done": tp.tasks_done,
            "tasks_per_s": tp.tasks_per_s,
            "tokens": tp.tokens,
            "tokens_per_s": tp.tokens_per_s,
            "peak_hw": self.peak_hw,
            "mean_core_utilization": self.utilization.mean_cores,
            "mean_gpu_utilization": self.utilization.mean_gpus,
            "decomposition": {
                "computation": d.computation(),
                "data_transfer": d.data_transfer(),
                "orchestration": d.orchestration(),
                "runtime_overhead": d.runtime_overhead(),
                "total": d.total(),
            },
            "coupling_lag_max": self.coupling.max,
            "decisions_matched": self.coupling.samples.len(),
            "decisions_unmatched": self.coupling.unmatched.len(),
        })
    }

    /// Named series, in export order.
    pub fn series(&self) -> [(&'static str, &TimeSeries); 5] {
        [
            ("hw", &self.hw),
            ("decision_rate", &self.decision_rate),
            ("arr", &self.arr),
            ("util_cores", &self.utilization.cores),
            ("util_gpus", &self.utilization.gpus),
        ]
    }
}

/// Summary for a report; a malformed log produces an `error` field instead.
pub fn summarize(log: &[ExecutionEvent], resources: &ResourceDescription, policy: &ExecutionPolicy) -> Value {
    match analyze(log, resources, policy) {
        Ok(a) => a.summary(),
        Err(e) => json!({ "error": e.to_string() }),
    }
}

/// Write `<metric>_<run_id>.csv` for each series; returns the paths.
pub fn write_series_csv(dir: &Path, run_id: &str, series: &[(&str, &TimeSeries)]) -> io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    for (name, s) in series {
        let path = dir.join(format!("{name}_{run_id}.csv"));
        std::fs::write(&path, s.to_csv())?;
        out.push(path);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn run(id: &str, key: &str, start: f64, end: f64, cores: u64) -> Vec<ExecutionEvent> {
        vec![
            ExecutionEvent::task(start, id, EventKind::Running)
                .with("task_type_key", key)
                .with("cores", cores)
                .with("gpus", 0u64),
            ExecutionEvent::task(end, id, EventKind::Done),
        ]
    }

    fn sorted(mut v: Vec<ExecutionEvent>) -> Vec<ExecutionEvent> {
        v.sort_by(|a, b| a.ts.total_cmp(&b.ts));
        v
    }

    // Distinct keys of intervals covering t, checked one interval at a time.
    fn brute_hw(log: &[ExecutionEvent], t: f64) -> usize {
        let mut start: HashMap<&str, (f64, &str)> = HashMap::new();
        let mut end: HashMap<&str, f64> = HashMap::new();
        for e in log {
            if e.event == EventKind::Running {
                start.insert(&e.id, (e.ts, e.attr_str("task_type_key").unwrap()));
            } else if e.event.is_task_terminal() {
                end.insert(&e.id, e.ts);
            }
        }
        let mut keys: Vec<&str> = start
            .iter()
            .filter(|(id, (s, _))| *s <= t && t < end.get(*id).copied().unwrap_or(f64::INFINITY))
            .map(|(_, (_, k))| *k)
            .collect();
        keys.sort();
        keys.dedup();
        keys.len()
    }

    #[test]
    fn empty_log_gives_zero_series() {
        let hw = heterogeneity_width(&[], 0.1).unwrap();
        assert!(hw.values.iter().all(|&v| v == 0.0));
        let r = windowed_rate(&[], is_decision, 1.0, 0.1).unwrap();
        assert!(r.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn same_type_overlap_counts_once() {
        let log = sorted([run("a", "Serial/CPU/1", 0.0, 2.0, 1), run("b", "Serial/CPU/1", 1.0, 3.0, 1)].concat());
        let hw = heterogeneity_width(&log, 0.5).unwrap();
        assert_eq!(hw.values, vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn three_types_peak() {
        let log = sorted(
            [
                run("a", "Serial/CPU/1", 0.0, 5.0, 1),
                run("b", "MPI/CPU/4", 1.0, 4.0, 4),
                run("c", "Serial/GPU/1", 2.0, 3.0, 1),
                run("d", "Serial/CPU/1", 2.5, 6.0, 1),
            ]
            .concat(),
        );
        let hw = heterogeneity_width(&log, 0.25).unwrap();
        assert_eq!(hw.max(), 3.0);
        assert_eq!(peak_heterogeneity(&log).unwrap(), 3);
        for (t, v) in hw.points() {
            assert_eq!(v as usize, brute_hw(&log, t), "t={t}");
        }
    }

    #[test]
    fn running_without_key_is_malformed() {
        let log = vec![ExecutionEvent::task(0.0, "a", EventKind::Running)];
        assert!(matches!(heterogeneity_width(&log, 0.1), Err(MetricsError::MalformedLog(_))));
    }

    #[test]
    fn uniform_events_rate() {
        let log: Vec<ExecutionEvent> = (0..10)
            .map(|i| ExecutionEvent::new(0.05 + i as f64 * 0.1, Entity::Request, format!("d{i}"), EventKind::Decision).with("task", "x"))
            .chain([ExecutionEvent::task(0.0, "x", EventKind::New), ExecutionEvent::task(1.0, "x", EventKind::Canceled)])
            .collect();
        let r = windowed_rate(&sorted(log), is_decision, 1.0, 0.1).unwrap();
        let (t, v) = r.points().last().unwrap();
        assert!((t - 1.0).abs() < 1e-12);
        assert_eq!(v, 10.0);
    }

    #[test]
    fn lag_and_unmatched() {
        let log = vec![
            ExecutionEvent::new(1.0, Entity::Request, "d1", EventKind::Decision).with("task", "t1"),
            ExecutionEvent::new(1.0, Entity::Request, "d2", EventKind::Decision).with("task", "t2"),
            ExecutionEvent::task(1.2, "t1", EventKind::Running).with("task_type_key", "Serial/CPU/1"),
        ];
        let c = coupling_lag(&log).unwrap();
        assert_eq!(c.samples.len(), 1);
        assert!((c.max - 0.2).abs() < 1e-12);
        assert_eq!(c.unmatched, vec!["d2".to_string()]);
    }

    #[test]
    fn known_injected_delays_recovered() {
        let mut log = Vec::new();
        let mut truth = Vec::new();
        for i in 0..1000u32 {
            let t = f64::from(i) * 0.01;
            let delay = f64::from(i % 37) * 0.003;
            truth.push(delay);
            log.push(ExecutionEvent::new(t, Entity::Request, format!("d{i}"), EventKind::Decision).with("task", format!("t{i}")));
            log.push(ExecutionEvent::task(t + delay, format!("t{i}"), EventKind::Running).with("task_type_key", "Serial/CPU/1"));
        }
        let c = coupling_lag(&sorted(log)).unwrap();
        let mut got: HashMap<String, f64> = c.samples.into_iter().collect();
        for (i, d) in truth.iter().enumerate() {
            let lag = got.remove(&format!("d{i}")).unwrap();
            assert!((lag - d).abs() < 1e-9);
        }
    }

    #[test]
    fn staircase_utilization() {
        let log = sorted((0..4).flat_map(|i| run(&format!("t{i}"), "Serial/CPU/1", f64::from(i), 4.0, 1)).collect());
        let res = ResourceDescription::uniform("n", 1, 4, 0);
        let u = utilization(&log, &res, 1.0).unwrap();
        assert_eq!(u.cores.values, vec![0.25, 0.5, 0.75, 1.0, 0.0]);
        assert!((u.mean_cores - 10.0 / 16.0).abs() < 1e-12);
        assert!(u.gpus.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn whole_node_utilization_is_one() {
        let log = run("a", "MPI/CPU/4", 0.0, 2.0, 4);
        let u = utilization(&log, &ResourceDescription::uniform("n", 1, 4, 0), 0.5).unwrap();
        assert_eq!(&u.cores.values[..4], &[1.0; 4]);
    }

    #[test]
    fn throughput_counts_done_tasks() {
        let log: Vec<ExecutionEvent> = (0..100)
            .map(|i| ExecutionEvent::task(f64::from(i) * 10.0 / 99.0, format!("t{i}"), EventKind::Done))
            .collect();
        let tp = throughput(&log).unwrap();
        assert!((tp.tasks_per_s - 10.0).abs() < 1e-9);
        assert_eq!(tp.tokens_per_s, 0.0);
        assert_eq!(throughput(&log[..1]), Err(MetricsError::ZeroMakespan));
    }

    #[test]
    fn degenerate_decomposition() {
        let log = vec![
            ExecutionEvent::task(0.0, "a", EventKind::Scheduled),
            ExecutionEvent::task(0.3, "a", EventKind::Running).with("task_type_key", "Serial/CPU/1"),
            ExecutionEvent::task(1.0, "a", EventKind::Done).with("compute", 0.0),
        ];
        let d = decompose_runtime(&log).unwrap();
        assert_eq!(d.residual_ns(), 0);
        assert_eq!(d.orchestration_ns, 300_000_000);
        assert_eq!(d.runtime_overhead_ns, 700_000_000);
        assert_eq!(d.total_ns, d.orchestration_ns + d.runtime_overhead_ns);
    }

    #[test]
    fn correlation_of_shifted_copy() {
        let a: Vec<f64> = (0..50).map(|i| (f64::from(i) * 0.4).sin()).collect();
        let mut b = vec![0.0; 3];
        b.extend(&a);
        assert!((cross_correlation(&a, &b, 3) - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = b.iter().map(|x| -x).collect();
        assert!(cross_correlation(&a, &neg, 3) < -0.99);
        assert_eq!(cross_correlation(&[1.0, 1.0], &[1.0, 2.0], 0), 0.0);
    }

    #[test]
    fn csv_layout() {
        let s = TimeSeries { start: 0.0, step: 0.5, values: vec![1.0, 2.0] };
        assert_eq!(s.to_csv(), "ts,value\n0,1\n0.5,2\n");
    }

    fn arb_log() -> impl Strategy<Value = Vec<ExecutionEvent>> {
        prop::collection::vec((0u32..200, 1u32..100, 0usize..5, 1u64..4), 0..40).prop_map(|spec| {
            let keys = ["Serial/CPU/1", "Serial/GPU/1", "MPI/CPU/4", "MPI/GPU/8", "MPI/CPU/32"];
            let mut log = Vec::new();
            for (i, (s, d, k, c)) in spec.into_iter().enumerate() {
                let start = f64::from(s) * 0.05;
                log.push(ExecutionEvent::task(start, format!("t{i}"), EventKind::Scheduled));
                log.extend(run(&format!("t{i}"), keys[k], start, start + f64::from(d) * 0.05, c));
            }
            sorted(log)
        })
    }

    proptest! {
        #[test]
        fn hw_matches_sweep(log in arb_log()) {
            let hw = heterogeneity_width(&log, 0.1).unwrap();
            for (t, v) in hw.points() {
                prop_assert_eq!(v as usize, brute_hw(&log, t));
            }
            let intervals = run_intervals(&log).unwrap();
            for (t, v) in hw.points() {
                let live = intervals.iter().filter(|iv| iv.contains(t)).count();
                prop_assert!(v as usize <= live);
            }
            prop_assert!(hw.max() as usize <= peak_heterogeneity(&log).unwrap());
        }

        #[test]
        fn rate_matches_recount(times in prop::collection::vec(0u32..1000, 0..100), w in 1u32..20) {
            let window = f64::from(w) * 0.1;
            let log: Vec<ExecutionEvent> = sorted(times.iter().enumerate().map(|(i, &t)| {
                // Jitter keeps window edges off the sample grid.
                let ts = f64::from(t) * 0.01 + i as f64 * 1e-5;
                ExecutionEvent::new(ts, Entity::Request, format!("d{i}"), EventKind::Decision).with("task", "x")
            }).collect());
            let r = windowed_rate(&log, is_decision, window, 0.1).unwrap();
            for (t, v) in r.points() {
                let naive = log.iter().filter(|e| e.ts > t - window && e.ts <= t).count();
                prop_assert!((v * window - naive as f64).abs() < 1e-9);
            }
            // Integral over the run counts every event, minus those inside the last window.
            let integral: f64 = r.values.iter().sum::<f64>() * 0.1;
            let n = log.len() as f64;
            let tail = log.iter().filter(|e| e.ts > r.ts(r.values.len() - 1) - window).count() as f64;
            let slot = 0.1 / window;
            prop_assert!(integral <= n + slot + 1e-6);
            prop_assert!(integral + tail >= n - slot - 1e-6);
        }

        #[test]
        fn decomposition_is_exact(log in arb_log()) {
            let d = decompose_runtime(&log).unwrap();
            prop_assert_eq!(d.residual_ns(), 0);
            prop_assert!(d.orchestration_ns >= 0 && d.runtime_overhead_ns >= 0);
            prop_assert_eq!(&decompose_runtime(&log).unwrap(), &d);
        }
    }
}
