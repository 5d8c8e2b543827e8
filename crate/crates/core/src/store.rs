//! Keyed tensor store used for simulation/inference data exchange, with an
//! in-memory backend and a filesystem-directory backend.
//!
//! File layout of the filesystem backend, one file per key:
//!
//! ```text
//! offset 0   u64 LE  dtype tag (f32=0, f64=1, i32=2, u8=3)
//! offset 8   u64 LE  rank
//! offset 16  rank x u64 LE  shape
//! then       raw element bytes
//! ```
//!
//! The file name is the percent-encoded key. Writes land in a dot-prefixed
//! temporary file and are renamed into place.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use parking_lot::{Mutex, RwLock};
use percent_encoding::{percent_decode_str, utf8_percent_encode, NON_ALPHANUMERIC};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
    I32,
    U8,
}

impl DType {
    pub const ALL: [DType; 4] = [DType::F32, DType::F64, DType::I32, DType::U8];

    pub fn size(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }

    pub fn tag(self) -> u64 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
            DType::I32 => 2,
            DType::U8 => 3,
        }
    }

    pub fn from_tag(tag: u64) -> Option<DType> {
        Self::ALL.into_iter().find(|d| d.tag() == tag)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("key {0:?} not found")]
    KeyNotFound(String),
    #[error("store unavailable: {0}")]
    StoreUnavailable(#[source] io::Error),
    #[error("serialization error: {0}")]
    SerializationError(String),
}

/// A dense tensor; `data.len() == dtype.size() * shape.product()`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorRecord {
    pub key: String,
    pub dtype: DType,
    pub shape: Vec<u64>,
    pub data: Vec<u8>,
}

impl TensorRecord {
    pub fn new(
        key: impl Into<String>,
        dtype: DType,
        shape: Vec<u64>,
        data: Vec<u8>,
    ) -> Result<Self, StoreError> {
        let t = Self {
            key: key.into(),
            dtype,
            shape,
            data,
        };
        t.check()?;
        Ok(t)
    }

    pub fn from_f32(key: impl Into<String>, values: &[f32]) -> Self {
        let data = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self {
            key: key.into(),
            dtype: DType::F32,
            shape: vec![values.len() as u64],
            data,
        }
    }

    pub fn elements(&self) -> u64 {
        self.shape.iter().product()
    }

    pub fn byte_len(&self) -> u64 {
        self.data.len() as u64
    }

    fn check(&self) -> Result<(), StoreError> {
        if self.shape.contains(&0) {
            return Err(StoreError::SerializationError("shape dimensions must be positive".into()));
        }
        let expected = self
            .shape
            .iter()
            .try_fold(self.dtype.size() as u64, |acc, &d| acc.checked_mul(d));
        if expected != Some(self.data.len() as u64) {
            return Err(StoreError::SerializationError(format!(
                "{} bytes do not match {:?} x {:?}",
                self.data.len(),
                self.dtype,
                self.shape
            )));
        }
        Ok(())
    }

    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.shape.len() + self.data.len());
        out.extend_from_slice(&self.dtype.tag().to_le_bytes());
        out.extend_from_slice(&(self.shape.len() as u64).to_le_bytes());
        for d in &self.shape {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&self.data);
        out
    }

    fn decode(key: &str, bytes: &[u8]) -> Result<Self, StoreError> {
        let word = |i: usize| -> Result<u64, StoreError> {
            bytes
                .get(i * 8..i * 8 + 8)
                .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| StoreError::SerializationError("truncated header".into()))
        };
        let dtype = DType::from_tag(word(0)?)
            .ok_or_else(|| StoreError::SerializationError("unknown dtype tag".into()))?;
        let rank = word(1)? as usize;
        let shape = (0..rank).map(|i| word(2 + i)).collect::<Result<Vec<_>, _>>()?;
        let data = bytes[16 + 8 * rank..].to_vec();
        Self::new(key, dtype, shape, data)
    }
}

/// Counters and latency samples (seconds) of one store.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StoreStats {
    pub put_count: u64,
    pub get_count: u64,
    pub put_latency: Vec<f64>,
    pub get_latency: Vec<f64>,
    pub bytes_in: u64,
    pub bytes_out: u64,
}

impl StoreStats {
    pub fn mean_put_latency(&self) -> f64 {
        mean(&self.put_latency)
    }

    pub fn mean_get_latency(&self) -> f64 {
        mean(&self.get_latency)
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

#[derive(Default)]
struct StatsCell(Mutex<StoreStats>);

impl StatsCell {
    fn record_put(&self, latency: f64, bytes: u64) {
        let mut s = self.0.lock();
        s.put_count += 1;
        s.put_latency.push(latency);
        s.bytes_in += bytes;
    }

    fn record_get(&self, latency: f64, bytes: u64) {
        let mut s = self.0.lock();
        s.get_count += 1;
        s.get_latency.push(latency);
        s.bytes_out += bytes;
    }
}

pub trait TensorStore: Send + Sync {
    /// Store `tensor` under `key`, returning the sampled latency in seconds.
    fn put_timed(&self, key: &str, tensor: &TensorRecord) -> Result<f64, StoreError>;

    /// Fetch the record under `key` and the sampled latency in seconds.
    fn get_timed(&self, key: &str) -> Result<(TensorRecord, f64), StoreError>;

    /// Remove `key`; missing keys are a no-op.
    fn delete(&self, key: &str) -> Result<(), StoreError>;

    fn stats(&self) -> StoreStats;

    /// Keys currently visible, sorted.
    fn keys(&self) -> Result<Vec<String>, StoreError>;

    fn put(&self, key: &str, tensor: &TensorRecord) -> Result<(), StoreError> {
        self.put_timed(key, tensor).map(|_| ())
    }

    fn get(&self, key: &str) -> Result<TensorRecord, StoreError> {
        self.get_timed(key).map(|(t, _)| t)
    }
}

#[derive(Default)]
pub struct MemoryStore {
    map: RwLock<HashMap<String, Arc<TensorRecord>>>,
    stats: StatsCell,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }
}

impl TensorStore for MemoryStore {
    fn put_timed(&self, key: &str, tensor: &TensorRecord) -> Result<f64, StoreError> {
        let start = Instant::now();
        tensor.check()?;
        let mut rec = tensor.clone();
        rec.key = key.to_string();
        let bytes = rec.byte_len();
        self.map.write().insert(key.to_string(), Arc::new(rec));
        let latency = start.elapsed().as_secs_f64();
        self.stats.record_put(latency, bytes);
        Ok(latency)
    }

    fn get_timed(&self, key: &str) -> Result<(TensorRecord, f64), StoreError> {
        let start = Instant::now();
        let rec = self
            .map
            .read()
            .get(key)
            .cloned()
            .ok_or_else(|| StoreError::KeyNotFound(key.to_string()))?;
        let out = TensorRecord::clone(&rec);
        let latency = start.elapsed().as_secs_f64();
        self.stats.record_get(latency, out.byte_len());
        Ok((out, latency))
    }

    fn delete(&self, key: &str) -> Result<(), StoreError> {
        self.map.write().remove(key);
        Ok(())
    }

    fn stats(&self) -> StoreStats {
        self.stats.0.lock().clone()
    }

    fn keys(&self) -> Result<Vec<String>, StoreError> {
        let mut keys: Vec<String> = self.map.read().keys().cloned().collect();
        keys.sort();
        Ok(keys)
    }
}

pub struct FsStore {
    root: PathBuf,
    stats: StatsCell,
    tmp_counter: AtomicU64,
}

impl FsStore {
    /// Open (creating if needed) a store rooted at `root`.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(StoreError::StoreUnavailable)?;
        Ok(Self {
            root,
            stats: StatsCell::default(),
            tmp_counter: AtomicU64::new(0),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.root.join(utf8_percent_encode(key, NON_ALPHANUMERIC).to_string())
    }
}

impl TensorStore for FsStore {
    fn put_timed(&self, key: &str, tensor: &TensorRecord) -> Result<f64, StoreError> {
        let start = Instant::now();
        tensor.check()?;
        let n = self.tmp_counter.fetch_add(1, Ordering::Relaxed);
        let tmp = self
            .root
            .join(format!(".tmp-{}-{n}", std::process::id()));
        let write = || -> io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&tensor.encode())?;
            drop(f);
            fs::rename(&tmp, self.path_for(key))
        };
        if let Err(e) = write() {
            let _ = fs::remove_file(&tmp);
            return Err(StoreError::StoreUnavailable(e));
        }
        let latency = start.elapsed().as_secs_f64();
        self.stats.record_put(latency, tensor.byte_len());
        Ok(latency)
    }

    fn get_timed(&self, key: &str) -> Result<(TensorRecord, f64), StoreError> {
        let start = Instant::now();
        let bytes = match fs::read(self.path_for(key)) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(StoreError::KeyNotFound(key.to_string()))
            }
            Err(e) => return Err(StoreError::StoreUnavailable(e)),
        };
        let rec = TensorRecord::decode(key, &bytes)?;
        let latency = start.elapsed().as_secs_f64();
        self.stats.record_get(latency, rec.byte_len());
        Ok((rec, latency))
    }

    fn delete(&self, key: &str) -> Result<(), StoreError> {
        match fs::remove_file(self.path_for(key)) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(StoreError::StoreUnavailable(e)),
        }
    }

    fn stats(&self) -> StoreStats {
        self.stats.0.lock().clone()
    }

    fn keys(&self) -> Result<Vec<String>, StoreError> {
        let mut keys = Vec::new();
        for entry in fs::read_dir(&self.root).map_err(StoreError::StoreUnavailable)? {
            let name = entry.map_err(StoreError::StoreUnavailable)?.file_name();
            let name = name.to_string_lossy();
            if name.starts_with('.') {
                continue;
            }
            keys.push(percent_decode_str(&name).decode_utf8_lossy().into_owned());
        }
        keys.sort();
        Ok(keys)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "lowercase")]
pub enum StoreKind {
    #[default]
    Memory,
    #[serde(alias = "fs")]
    Filesystem,
}

/// Lazily created store instances, one per name (typically one per node).
pub struct StoreSet {
    kind: StoreKind,
    root: Option<PathBuf>,
    stores: RwLock<BTreeMap<String, Arc<dyn TensorStore>>>,
}

impl StoreSet {
    /// Filesystem stores need `root`; each instance gets a subdirectory.
    pub fn new(kind: StoreKind, root: Option<PathBuf>) -> Self {
        Self {
            kind,
            root,
            stores: RwLock::new(BTreeMap::new()),
        }
    }

    pub fn kind(&self) -> StoreKind {
        self.kind
    }

    pub fn instance(&self, name: &str) -> Result<Arc<dyn TensorStore>, StoreError> {
        if let Some(s) = self.stores.read().get(name) {
            return Ok(s.clone());
        }
        let mut stores = self.stores.write();
        if let Some(s) = stores.get(name) {
            return Ok(s.clone());
        }
        let store: Arc<dyn TensorStore> = match self.kind {
            StoreKind::Memory => Arc::new(MemoryStore::new()),
            StoreKind::Filesystem => {
                let root = self.root.as_ref().ok_or_else(|| {
                    StoreError::StoreUnavailable(io::Error::new(
                        io::ErrorKind::NotFound,
                        "filesystem store needs a root directory",
                    ))
                })?;
                let dir = root.join(utf8_percent_encode(name, NON_ALPHANUMERIC).to_string());
                Arc::new(FsStore::open(dir)?)
            }
        };
        stores.insert(name.to_string(), store.clone());
        Ok(store)
    }

    /// Stats of every instance created so far, by name.
    pub fn stats(&self) -> BTreeMap<String, StoreStats> {
        self.stores
            .read()
            .iter()
            .map(|(k, s)| (k.clone(), s.stats()))
            .collect()
    }
}
