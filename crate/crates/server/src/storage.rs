//! Flat-file persistence under the data directory.
//!
//! ```text
//! registry.json
//! deployments/index.json          deployment records, newest last
//! deployments/<id>.bpmn           uploaded bytes, verbatim
//! sessions/<id>.json              resolution sessions
//! instances/<id>/instance.json    start record
//! instances/<id>/stimuli.jsonl    replay log
//! instances/<id>/events.jsonl     engine events, one per line
//! notifications.jsonl
//! ```
//!
//! Whole files are replaced by write-then-rename. A change spanning several
//! files undoes the parts already written when a later part fails.

use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use skillflow_core::engine::{EngineEvent, NotificationRecord, StartRecord, Stimulus};
use skillflow_core::model::Diagnostic;
use skillflow_core::registry::RegistryDocument;
use skillflow_core::resolution::{Resolution, SelectionPolicy};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("storage i/o on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
}

pub type StoreResult<T> = Result<T, StoreError>;

/// File operations the store needs. Paths are relative to the data root.
pub trait Backend: Send + Sync + 'static {
    fn read(&self, path: &Path) -> io::Result<Option<Vec<u8>>>;
    /// Replaces the file as a whole or not at all.
    fn write_atomic(&self, path: &Path, bytes: &[u8]) -> io::Result<()>;
    fn append(&self, path: &Path, bytes: &[u8]) -> io::Result<()>;
    fn len(&self, path: &Path) -> io::Result<u64>;
    fn truncate(&self, path: &Path, len: u64) -> io::Result<()>;
    fn remove(&self, path: &Path) -> io::Result<()>;
    /// Names of the entries of a directory, sorted; empty if it is missing.
    fn list(&self, dir: &Path) -> io::Result<Vec<String>>;
}

pub struct FileBackend {
    root: PathBuf,
}

impl FileBackend {
    pub fn new(root: impl Into<PathBuf>) -> FileBackend {
        FileBackend { root: root.into() }
    }

    fn full(&self, path: &Path) -> PathBuf {
        self.root.join(path)
    }

    fn ensure_parent(path: &Path) -> io::Result<()> {
        match path.parent() {
            Some(dir) => fs::create_dir_all(dir),
            None => Ok(()),
        }
    }
}

impl Backend for FileBackend {
    fn read(&self, path: &Path) -> io::Result<Option<Vec<u8>>> {
        match fs::read(self.full(path)) {
            Ok(b) => Ok(Some(b)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn write_atomic(&self, path: &Path, bytes: &[u8]) -> io::Result<()> {
        let target = self.full(path);
        Self::ensure_parent(&target)?;
        let tmp = target.with_extension(format!("tmp-{}", uuid::Uuid::new_v4().simple()));
        let result = (|| {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, &target)
        })();
        if result.is_err() {
            let _ = fs::remove_file(&tmp);
        }
        result
    }

    fn append(&self, path: &Path, bytes: &[u8]) -> io::Result<()> {
        let target = self.full(path);
        Self::ensure_parent(&target)?;
        let mut f = OpenOptions::new().create(true).append(true).open(target)?;
        f.write_all(bytes)?;
        f.sync_data()
    }

    fn len(&self, path: &Path) -> io::Result<u64> {
        match fs::metadata(self.full(path)) {
            Ok(m) => Ok(m.len()),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(0),
            Err(e) => Err(e),
        }
    }

    fn truncate(&self, path: &Path, len: u64) -> io::Result<()> {
        let target = self.full(path);
        if len == 0 {
            return match fs::remove_file(target) {
                Err(e) if e.kind() != io::ErrorKind::NotFound => Err(e),
                _ => Ok(()),
            };
        }
        OpenOptions::new().write(true).open(target)?.set_len(len)
    }

    fn remove(&self, path: &Path) -> io::Result<()> {
        let target = self.full(path);
        let result = if target.is_dir() {
            fs::remove_dir_all(target)
        } else {
            fs::remove_file(target)
        };
        match result {
            Err(e) if e.kind() != io::ErrorKind::NotFound => Err(e),
            _ => Ok(()),
        }
    }

    fn list(&self, dir: &Path) -> io::Result<Vec<String>> {
        let mut names = Vec::new();
        match fs::read_dir(self.full(dir)) {
            Ok(entries) => {
                for e in entries {
                    names.push(e?.file_name().to_string_lossy().into_owned());
                }
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => return Err(e),
        }
        names.sort();
        Ok(names)
    }
}

/// Wraps a backend and fails writes on demand, like a full disk. Removal
/// and truncation keep working so that undo paths can be exercised.
pub struct FaultyBackend {
    inner: Box<dyn Backend>,
    armed: AtomicBool,
    /// Writes still allowed before failures start.
    budget: AtomicU64,
    writes: AtomicU64,
}

impl FaultyBackend {
    pub fn new(inner: impl Backend) -> FaultyBackend {
        FaultyBackend {
            inner: Box::new(inner),
            armed: AtomicBool::new(false),
            budget: AtomicU64::new(0),
            writes: AtomicU64::new(0),
        }
    }

    /// Lets `n` more writes through, then fails every write until disarmed.
    pub fn fail_after(&self, n: u64) {
        self.budget.store(n, Ordering::SeqCst);
        self.armed.store(true, Ordering::SeqCst);
    }

    pub fn disarm(&self) {
        self.armed.store(false, Ordering::SeqCst);
    }

    /// Writes attempted so far, failed ones included.
    pub fn writes(&self) -> u64 {
        self.writes.load(Ordering::SeqCst)
    }

    fn check(&self) -> io::Result<()> {
        self.writes.fetch_add(1, Ordering::SeqCst);
        if !self.armed.load(Ordering::SeqCst) {
            return Ok(());
        }
        let allowed = self
            .budget
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |b| b.checked_sub(1))
            .is_ok();
        if allowed {
            Ok(())
        } else {
            Err(io::Error::other("injected write failure"))
        }
    }
}

impl Backend for FaultyBackend {
    fn read(&self, path: &Path) -> io::Result<Option<Vec<u8>>> {
        self.inner.read(path)
    }
    fn write_atomic(&self, path: &Path, bytes: &[u8]) -> io::Result<()> {
        self.check()?;
        self.inner.write_atomic(path, bytes)
    }
    fn append(&self, path: &Path, bytes: &[u8]) -> io::Result<()> {
        self.check()?;
        self.inner.append(path, bytes)
    }
    fn len(&self, path: &Path) -> io::Result<u64> {
        self.inner.len(path)
    }
    fn truncate(&self, path: &Path, len: u64) -> io::Result<()> {
        self.inner.truncate(path, len)
    }
    fn remove(&self, path: &Path) -> io::Result<()> {
        self.inner.remove(path)
    }
    fn list(&self, dir: &Path) -> io::Result<Vec<String>> {
        self.inner.list(dir)
    }
}

impl<B: Backend> Backend for Arc<B> {
    fn read(&self, path: &Path) -> io::Result<Option<Vec<u8>>> {
        (**self).read(path)
    }
    fn write_atomic(&self, path: &Path, bytes: &[u8]) -> io::Result<()> {
        (**self).write_atomic(path, bytes)
    }
    fn append(&self, path: &Path, bytes: &[u8]) -> io::Result<()> {
        (**self).append(path, bytes)
    }
    fn len(&self, path: &Path) -> io::Result<u64> {
        (**self).len(path)
    }
    fn truncate(&self, path: &Path, len: u64) -> io::Result<()> {
        (**self).truncate(path, len)
    }
    fn remove(&self, path: &Path) -> io::Result<()> {
        (**self).remove(path)
    }
    fn list(&self, dir: &Path) -> io::Result<Vec<String>> {
        (**self).list(dir)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DeploymentRecord {
    pub definition_id: String,
    /// Id of the process element inside the XML.
    pub process_id: String,
    pub name: String,
    pub deployed_at: u64,
    #[serde(default)]
    pub diagnostics: Vec<Diagnostic>,
}

/// Display data for a candidate skill, captured when the session is made.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CandidateInfo {
    pub skill: String,
    pub skill_name: String,
    pub machine: String,
    pub machine_name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ResolutionSession {
    pub session_id: String,
    pub definition_id: String,
    pub policy: SelectionPolicy,
    pub resolution: Resolution,
    #[serde(default)]
    pub candidates: Vec<CandidateInfo>,
    pub created_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct InstanceRecord {
    pub deployment_id: String,
    pub start: StartRecord,
}

/// An instance as found on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredInstance {
    pub record: InstanceRecord,
    pub stimuli: Vec<Stimulus>,
    pub events: Vec<EngineEvent>,
}

pub struct Store {
    backend: Box<dyn Backend>,
    /// Serializes multi-file changes.
    write: Mutex<()>,
}

const REGISTRY: &str = "registry.json";
const DEPLOYMENT_INDEX: &str = "deployments/index.json";
const NOTIFICATIONS: &str = "notifications.jsonl";

fn deployment_xml(id: &str) -> PathBuf {
    PathBuf::from("deployments").join(format!("{id}.bpmn"))
}

fn session_file(id: &str) -> PathBuf {
    PathBuf::from("sessions").join(format!("{id}.json"))
}

fn instance_dir(id: &str) -> PathBuf {
    PathBuf::from("instances").join(id)
}

fn json_line<T: Serialize>(items: impl IntoIterator<Item = T>) -> Vec<u8> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, &item).expect("serializable");
        out.push(b'\n');
    }
    out
}

impl Store {
    pub fn new(backend: impl Backend) -> Store {
        Store {
            backend: Box::new(backend),
            write: Mutex::new(()),
        }
    }

    pub fn open_dir(root: impl Into<PathBuf>) -> StoreResult<Store> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|source| StoreError::Io {
            path: root.clone(),
            source,
        })?;
        Ok(Store::new(FileBackend::new(root)))
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, ()> {
        self.write.lock().expect("store lock poisoned")
    }

    fn io<T>(path: &Path, r: io::Result<T>) -> StoreResult<T> {
        r.map_err(|source| StoreError::Io {
            path: path.to_owned(),
            source,
        })
    }

    fn read_json<T: DeserializeOwned>(&self, path: &Path) -> StoreResult<Option<T>> {
        match Self::io(path, self.backend.read(path))? {
            None => Ok(None),
            Some(bytes) => serde_json::from_slice(&bytes).map(Some).map_err(|e| StoreError::Corrupt {
                path: path.to_owned(),
                reason: e.to_string(),
            }),
        }
    }

    fn write_json<T: Serialize>(&self, path: &Path, value: &T) -> StoreResult<()> {
        let bytes = serde_json::to_vec_pretty(value).expect("serializable");
        Self::io(path, self.backend.write_atomic(path, &bytes))
    }

    /// Parses a JSON-lines file. A torn last line (crash during append) is
    /// dropped; any other bad line is corruption.
    fn read_lines<T: DeserializeOwned>(&self, path: &Path) -> StoreResult<Vec<T>> {
        let Some(bytes) = Self::io(path, self.backend.read(path))? else {
            return Ok(Vec::new());
        };
        let complete = bytes.ends_with(b"\n");
        let lines: Vec<&[u8]> = bytes.split(|&b| b == b'\n').filter(|l| !l.is_empty()).collect();
        let mut out = Vec::with_capacity(lines.len());
        for (i, line) in lines.iter().enumerate() {
            match serde_json::from_slice(line) {
                Ok(v) => out.push(v),
                Err(_) if i + 1 == lines.len() && !complete => break,
                Err(e) => {
                    return Err(StoreError::Corrupt {
                        path: path.to_owned(),
                        reason: format!("line {}: {e}", i + 1),
                    })
                }
            }
        }
        Ok(out)
    }

    // -- registry

    pub fn load_registry(&self) -> StoreResult<Option<RegistryDocument>> {
        self.read_json(Path::new(REGISTRY))
    }

    pub fn save_registry(&self, doc: &RegistryDocument) -> StoreResult<()> {
        let _g = self.lock();
        self.write_json(Path::new(REGISTRY), doc)
    }

    // -- deployments

    pub fn deployments(&self) -> StoreResult<Vec<DeploymentRecord>> {
        Ok(self.read_json(Path::new(DEPLOYMENT_INDEX))?.unwrap_or_default())
    }

    pub fn deployment_xml(&self, id: &str) -> StoreResult<Option<Vec<u8>>> {
        let path = deployment_xml(id);
        Self::io(&path, self.backend.read(&path))
    }

    /// Stores the bytes, then the index that makes them visible.
    pub fn add_deployment(&self, record: &DeploymentRecord, xml: &[u8]) -> StoreResult<()> {
        let _g = self.lock();
        let xml_path = deployment_xml(&record.definition_id);
        Self::io(&xml_path, self.backend.write_atomic(&xml_path, xml))?;
        let mut index = self.deployments()?;
        index.push(record.clone());
        if let Err(e) = self.write_json(Path::new(DEPLOYMENT_INDEX), &index) {
            let _ = self.backend.remove(&xml_path);
            return Err(e);
        }
        Ok(())
    }

    // -- resolution sessions

    pub fn sessions(&self) -> StoreResult<Vec<ResolutionSession>> {
        let dir = Path::new("sessions");
        let mut out = Vec::new();
        for name in Self::io(dir, self.backend.list(dir))? {
            if let Some(id) = name.strip_suffix(".json") {
                if let Some(s) = self.read_json(&session_file(id))? {
                    out.push(s);
                }
            }
        }
        Ok(out)
    }

    pub fn save_session(&self, session: &ResolutionSession) -> StoreResult<()> {
        let _g = self.lock();
        self.write_json(&session_file(&session.session_id), session)
    }

    // -- instances

    pub fn create_instance(&self, record: &InstanceRecord, events: &[EngineEvent]) -> StoreResult<()> {
        let _g = self.lock();
        let dir = instance_dir(&record.start.instance_id);
        let result = self.write_json(&dir.join("instance.json"), record).and_then(|()| {
            let path = dir.join("events.jsonl");
            Self::io(&path, self.backend.append(&path, &json_line(events)))
        });
        if result.is_err() {
            let _ = self.backend.remove(&dir);
        }
        result
    }

    /// Appends the stimulus and the events it produced, or neither.
    pub fn append_stimulus(&self, instance_id: &str, stimulus: &Stimulus, events: &[EngineEvent]) -> StoreResult<()> {
        let _g = self.lock();
        let dir = instance_dir(instance_id);
        let events_path = dir.join("events.jsonl");
        let stimuli_path = dir.join("stimuli.jsonl");
        let before = Self::io(&events_path, self.backend.len(&events_path))?;
        if !events.is_empty() {
            Self::io(&events_path, self.backend.append(&events_path, &json_line(events)))?;
        }
        if let Err(e) = self.backend.append(&stimuli_path, &json_line([stimulus])) {
            let _ = self.backend.truncate(&events_path, before);
            return Err(StoreError::Io {
                path: stimuli_path,
                source: e,
            });
        }
        Ok(())
    }

    pub fn instances(&self) -> StoreResult<Vec<StoredInstance>> {
        let root = Path::new("instances");
        let mut out = Vec::new();
        for id in Self::io(root, self.backend.list(root))? {
            let dir = instance_dir(&id);
            let Some(record) = self.read_json::<InstanceRecord>(&dir.join("instance.json"))? else {
                continue;
            };
            out.push(StoredInstance {
                record,
                stimuli: self.read_lines(&dir.join("stimuli.jsonl"))?,
                events: self.read_lines(&dir.join("events.jsonl"))?,
            });
        }
        Ok(out)
    }

    // -- notifications

    pub fn append_notification(&self, record: &NotificationRecord) -> StoreResult<()> {
        let _g = self.lock();
        let path = Path::new(NOTIFICATIONS);
        Self::io(path, self.backend.append(path, &json_line([record])))
    }

    pub fn notifications(&self) -> StoreResult<Vec<NotificationRecord>> {
        self.read_lines(Path::new(NOTIFICATIONS))
    }
}
