//! Execution events, the run clock, and the line-delimited JSON log format.

use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Entity {
    Task,
    Service,
    Request,
    Store,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EventKind {
    New,
    Ready,
    Scheduled,
    Running,
    Done,
    Failed,
    Canceled,
    ServiceStarting,
    ServiceReady,
    ServiceStopped,
    Decision,
    RequestSent,
    RequestDone,
    Put,
    Get,
}

impl EventKind {
    pub fn is_task_terminal(self) -> bool {
        matches!(self, EventKind::Done | EventKind::Failed | EventKind::Canceled)
    }
}

pub type Attrs = BTreeMap<String, Value>;

/// One timestamped transition. Field names are the on-disk format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExecutionEvent {
    pub ts: f64,
    pub entity: Entity,
    pub id: String,
    pub event: EventKind,
    #[serde(default)]
    pub attrs: Attrs,
}

impl ExecutionEvent {
    pub fn new(ts: f64, entity: Entity, id: impl Into<String>, event: EventKind) -> Self {
        Self {
            ts,
            entity,
            id: id.into(),
            event,
            attrs: Attrs::new(),
        }
    }

    pub fn task(ts: f64, id: impl Into<String>, event: EventKind) -> Self {
        Self::new(ts, Entity::Task, id, event)
    }

    pub fn with(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.attrs.insert(key.to_string(), value.into());
        self
    }

    pub fn attr_f64(&self, key: &str) -> Option<f64> {
        self.attrs.get(key).and_then(Value::as_f64)
    }

    pub fn attr_str(&self, key: &str) -> Option<&str> {
        self.attrs.get(key).and_then(Value::as_str)
    }
}

/// Serialize events as one JSON object per line.
pub fn write_jsonl<W: Write>(mut out: W, events: &[ExecutionEvent]) -> io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

#[derive(Debug, thiserror::Error)]
pub enum LogError {
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<ExecutionEvent>, LogError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ev = serde_json::from_str(&line).map_err(|source| LogError::Parse { line: i + 1, source })?;
        out.push(ev);
    }
    Ok(out)
}

/// Shared virtual time, in seconds. Only moves forward.
#[derive(Clone, Debug, Default)]
pub struct VirtualClock(Arc<AtomicU64>);

impl VirtualClock {
    pub fn now(&self) -> f64 {
        f64::from_bits(self.0.load(Ordering::SeqCst))
    }

    pub fn set(&self, t: f64) {
        if t > self.now() {
            self.0.store(t.to_bits(), Ordering::SeqCst);
        }
    }

    pub fn advance(&self, dt: f64) {
        self.set(self.now() + dt.max(0.0));
    }

    /// True when both handles drive the same underlying time.
    pub fn same(&self, other: &VirtualClock) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }
}

/// The single monotonic clock of a run: wall time since an epoch, or virtual time.
#[derive(Clone, Debug)]
pub enum RunClock {
    Wall(Instant),
    Virtual(VirtualClock),
}

impl RunClock {
    pub fn wall() -> Self {
        RunClock::Wall(Instant::now())
    }

    pub fn virtual_time() -> Self {
        RunClock::Virtual(VirtualClock::default())
    }

    pub fn now(&self) -> f64 {
        match self {
            RunClock::Wall(epoch) => epoch.elapsed().as_secs_f64(),
            RunClock::Virtual(v) => v.now(),
        }
    }

    pub fn is_virtual(&self) -> bool {
        matches!(self, RunClock::Virtual(_))
    }

    /// True when both clocks report the same time: wall clocks with one epoch,
    /// or handles to one virtual clock.
    pub fn compatible(&self, other: &RunClock) -> bool {
        match (self, other) {
            (RunClock::Wall(a), RunClock::Wall(b)) => a == b,
            (RunClock::Virtual(a), RunClock::Virtual(b)) => a.same(b),
            _ => false,
        }
    }

    pub fn as_virtual(&self) -> Option<&VirtualClock> {
        match self {
            RunClock::Virtual(v) => Some(v),
            RunClock::Wall(_) => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_field_names_are_exact() {
        let e = ExecutionEvent::task(1.5, "t0", EventKind::Running).with("cores", 2);
        let mut buf = Vec::new();
        write_jsonl(&mut buf, std::slice::from_ref(&e)).unwrap();
        let line = String::from_utf8(buf).unwrap();
        assert_eq!(
            line,
            "{\"ts\":1.5,\"entity\":\"Task\",\"id\":\"t0\",\"event\":\"Running\",\"attrs\":{\"cores\":2}}\n"
        );
        let back = read_jsonl(line.as_bytes()).unwrap();
        assert_eq!(back, vec![e]);
    }

    #[test]
    fn bad_line_is_located() {
        let text = "{\"ts\":0.0,\"entity\":\"Task\",\"id\":\"a\",\"event\":\"New\",\"attrs\":{}}\nnot json\n";
        match read_jsonl(text.as_bytes()) {
            Err(LogError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn virtual_clock_never_goes_back() {
        let c = VirtualClock::default();
        c.set(2.0);
        c.set(1.0);
        assert_eq!(c.now(), 2.0);
        c.advance(0.5);
        assert_eq!(c.now(), 2.5);
    }
}
