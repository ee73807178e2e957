//! Generic compute interface.
//!
//! A [`ComputeJob`] describes one build or run execution independently of
//! where it runs. Back-ends implement [`Backend`]; the [`Registry`] holds the
//! configured back-ends and routes handles back to their owner.

mod container;
mod engine;
mod local;
mod slot;

use std::collections::BTreeMap;
use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use crate::experiment::ExperimentId;
use crate::sysdef::{check_relative_path, Phase};

pub use container::ContainerBackend;
pub use engine::{EngineClient, EngineError};
pub use local::LocalBackend;

#[derive(Debug, thiserror::Error)]
pub enum ComputeError {
    #[error("back-end unreachable: {0}")]
    BackendUnreachable(String),
    #[error("failed to stage `{path}`: {reason}")]
    StageInFailure { path: String, reason: String },
    #[error("unknown job `{0}`")]
    UnknownJob(String),
    #[error("artifact `{0}` not found")]
    ArtifactNotFound(String),
    #[error("job has not terminated yet")]
    JobNotTerminal,
    #[error("no compute back-end available")]
    NoBackendAvailable,
    #[error("invalid job: {0}")]
    InvalidJob(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Observable state of a job. Terminal variants never change once reached.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Exited { code: i32 },
    TimedOut,
    BackendFailed { reason: String },
}

impl JobStatus {
    pub fn is_terminal(&self) -> bool {
        !matches!(self, JobStatus::Queued | JobStatus::Running)
    }

    pub fn succeeded(&self) -> bool {
        matches!(self, JobStatus::Exited { code: 0 })
    }

    fn rank(&self) -> u8 {
        match self {
            JobStatus::Queued => 0,
            JobStatus::Running => 1,
            _ => 2,
        }
    }

    /// Human-readable reason for a non-successful terminal status.
    pub fn failure_message(&self) -> Option<String> {
        match self {
            JobStatus::Exited { code: 0 } | JobStatus::Queued | JobStatus::Running => None,
            JobStatus::Exited { code } => Some(format!("exited with code {code}")),
            JobStatus::TimedOut => Some("timed out".to_string()),
            JobStatus::BackendFailed { reason } => Some(format!("back-end failure: {reason}")),
        }
    }
}

/// A file or directory copied into the job workspace before the command runs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageIn {
    pub source: PathBuf,
    /// Workspace-relative destination; `.` places a directory's contents at
    /// the workspace root.
    pub dest: String,
}

#[derive(Debug, Clone)]
pub struct ComputeJob {
    pub experiment: ExperimentId,
    pub phase: Phase,
    pub image_ref: String,
    pub command: String,
    pub stage_in: Vec<StageIn>,
    /// Workspace-relative files to keep after the job ends.
    pub fetch_out: Vec<String>,
    /// Keep the whole workspace after the job ends (used for builds).
    pub capture_workspace: bool,
    pub timeout: Option<Duration>,
}

impl ComputeJob {
    pub fn validate(&self) -> Result<(), ComputeError> {
        if self.command.trim().is_empty() {
            return Err(ComputeError::InvalidJob("command is empty".into()));
        }
        for s in &self.stage_in {
            if s.dest != "." {
                check_relative_path(&s.dest)
                    .map_err(|rule| ComputeError::InvalidJob(format!("stage-in `{}` {rule}", s.dest)))?;
            }
        }
        for p in &self.fetch_out {
            check_relative_path(p).map_err(|rule| ComputeError::InvalidJob(format!("fetch `{p}` {rule}")))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct JobHandle {
    pub job_id: String,
    pub backend: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    LocalProcess,
    ContainerEngine,
}

/// Snapshot of one back-end's identity and load.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub name: String,
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    pub max_concurrent_jobs: usize,
    /// Jobs currently executing; never exceeds `max_concurrent_jobs`.
    #[serde(default)]
    pub active_jobs: usize,
    /// Jobs accepted but waiting for a free slot.
    #[serde(default)]
    pub queued_jobs: usize,
}

impl BackendDescriptor {
    /// Jobs this back-end has admitted and not yet finished.
    pub fn load(&self) -> usize {
        self.active_jobs + self.queued_jobs
    }
}

/// Picks the least-loaded back-end, breaking ties by the smallest name.
/// Queued jobs count toward the load so that bursts of submissions spread
/// out before anything starts running.
pub fn select_backend<'a>(
    registry: &'a [BackendDescriptor],
    _job: &ComputeJob,
) -> Result<&'a BackendDescriptor, ComputeError> {
    registry
        .iter()
        .min_by(|a, b| a.load().cmp(&b.load()).then_with(|| a.name.cmp(&b.name)))
        .ok_or(ComputeError::NoBackendAvailable)
}

#[async_trait]
pub trait Backend: Send + Sync {
    fn descriptor(&self) -> BackendDescriptor;

    async fn submit(&self, job: ComputeJob) -> Result<JobHandle, ComputeError>;

    async fn poll(&self, handle: &JobHandle) -> Result<JobStatus, ComputeError>;

    async fn fetch_artifact(&self, handle: &JobHandle, path: &str) -> Result<Vec<u8>, ComputeError>;

    /// Copies one artifact to `dest` without buffering it in memory.
    async fn copy_artifact(&self, handle: &JobHandle, path: &str, dest: &Path) -> Result<u64, ComputeError>;

    async fn fetch_log(&self, handle: &JobHandle) -> Result<String, ComputeError>;

    async fn cancel(&self, handle: &JobHandle) -> Result<JobStatus, ComputeError>;

    /// Copies the captured workspace of a terminated job into `dest`.
    async fn export_workspace(&self, handle: &JobHandle, dest: &Path) -> Result<(), ComputeError>;

    /// Drops all local state of a terminated job.
    async fn release(&self, handle: &JobHandle) -> Result<(), ComputeError>;
}

/// Static back-end configuration, one entry of `backends.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub name: String,
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    pub max_concurrent_jobs: NonZeroUsize,
    /// Host directory for job sandboxes and captured outputs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub work_dir: Option<PathBuf>,
    /// Container engine API version, e.g. `v1.43`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_version: Option<String>,
    /// Working directory inside the container; the image default when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub container_workdir: Option<String>,
}

impl BackendConfig {
    pub fn local(name: impl Into<String>, max_concurrent_jobs: usize) -> Self {
        BackendConfig {
            name: name.into(),
            kind: BackendKind::LocalProcess,
            endpoint: None,
            max_concurrent_jobs: NonZeroUsize::new(max_concurrent_jobs.max(1)).unwrap(),
            work_dir: None,
            api_version: None,
            container_workdir: None,
        }
    }
}

pub fn load_backend_configs(path: &Path) -> Result<Vec<BackendConfig>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let configs: Vec<BackendConfig> =
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut names = std::collections::BTreeSet::new();
    for c in &configs {
        if !names.insert(c.name.as_str()) {
            return Err(format!("{}: duplicate back-end name `{}`", path.display(), c.name));
        }
        if c.kind == BackendKind::ContainerEngine && c.endpoint.is_none() {
            return Err(format!("{}: back-end `{}` needs an endpoint", path.display(), c.name));
        }
    }
    Ok(configs)
}

/// The configured back-ends, keyed by name.
#[derive(Clone, Default)]
pub struct Registry {
    backends: BTreeMap<String, Arc<dyn Backend>>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_configs(configs: &[BackendConfig], default_work_root: &Path) -> Result<Self, ComputeError> {
        let mut reg = Registry::new();
        for c in configs {
            let work_dir = c.work_dir.clone().unwrap_or_else(|| default_work_root.join(&c.name));
            let backend: Arc<dyn Backend> = match c.kind {
                BackendKind::LocalProcess => {
                    Arc::new(LocalBackend::new(&c.name, work_dir, c.max_concurrent_jobs.get())?)
                }
                BackendKind::ContainerEngine => {
                    let endpoint = c.endpoint.as_deref().ok_or_else(|| {
                        ComputeError::BackendUnreachable(format!("back-end `{}` has no endpoint", c.name))
                    })?;
                    let client = EngineClient::new(endpoint, c.api_version.as_deref())
                        .map_err(|e| ComputeError::BackendUnreachable(e.to_string()))?;
                    Arc::new(ContainerBackend::new(
                        &c.name,
                        client,
                        work_dir,
                        c.max_concurrent_jobs.get(),
                        c.container_workdir.clone(),
                    )?)
                }
            };
            reg.insert(backend);
        }
        Ok(reg)
    }

    pub fn insert(&mut self, backend: Arc<dyn Backend>) {
        self.backends.insert(backend.descriptor().name, backend);
    }

    pub fn is_empty(&self) -> bool {
        self.backends.is_empty()
    }

    pub fn descriptors(&self) -> Vec<BackendDescriptor> {
        self.backends.values().map(|b| b.descriptor()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Arc<dyn Backend>> {
        self.backends.get(name)
    }

    fn owner(&self, handle: &JobHandle) -> Result<&Arc<dyn Backend>, ComputeError> {
        self.get(&handle.backend).ok_or_else(|| ComputeError::UnknownJob(handle.job_id.clone()))
    }

    /// Selects a back-end for `job` and submits it there.
    pub async fn dispatch(&self, job: ComputeJob) -> Result<JobHandle, ComputeError> {
        let snapshot = self.descriptors();
        let chosen = select_backend(&snapshot, &job)?;
        let backend = self.get(&chosen.name).ok_or(ComputeError::NoBackendAvailable)?;
        backend.submit(job).await
    }

    pub async fn poll(&self, handle: &JobHandle) -> Result<JobStatus, ComputeError> {
        self.owner(handle)?.poll(handle).await
    }

    pub async fn fetch_artifact(&self, handle: &JobHandle, path: &str) -> Result<Vec<u8>, ComputeError> {
        self.owner(handle)?.fetch_artifact(handle, path).await
    }

    pub async fn copy_artifact(&self, handle: &JobHandle, path: &str, dest: &Path) -> Result<u64, ComputeError> {
        self.owner(handle)?.copy_artifact(handle, path, dest).await
    }

    pub async fn fetch_log(&self, handle: &JobHandle) -> Result<String, ComputeError> {
        self.owner(handle)?.fetch_log(handle).await
    }

    pub async fn cancel(&self, handle: &JobHandle) -> Result<JobStatus, ComputeError> {
        self.owner(handle)?.cancel(handle).await
    }

    pub async fn export_workspace(&self, handle: &JobHandle, dest: &Path) -> Result<(), ComputeError> {
        self.owner(handle)?.export_workspace(handle, dest).await
    }

    pub async fn release(&self, handle: &JobHandle) -> Result<(), ComputeError> {
        self.owner(handle)?.release(handle).await
    }
}

/// Recursively copies `src` into `dest`, creating `dest` if needed.
/// Symlinks are recreated, not followed.
pub(crate) fn copy_tree(src: &Path, dest: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dest)?;
    for entry in walkdir::WalkDir::new(src).min_depth(1) {
        let entry = entry.map_err(std::io::Error::other)?;
        let rel = entry.path().strip_prefix(src).expect("walkdir yields children of src");
        let target = dest.join(rel);
        let ft = entry.file_type();
        if ft.is_dir() {
            std::fs::create_dir_all(&target)?;
        } else if ft.is_symlink() {
            let link = std::fs::read_link(entry.path())?;
            let _ = std::fs::remove_file(&target);
            std::os::unix::fs::symlink(link, &target)?;
        } else {
            if let Some(parent) = target.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::copy(entry.path(), &target)?;
        }
    }
    Ok(())
}

/// Resolves `rel` under `root`, refusing anything that escapes it.
pub(crate) fn resolve_inside(root: &Path, rel: &str) -> Result<PathBuf, ComputeError> {
    check_relative_path(rel).map_err(|rule| ComputeError::InvalidJob(format!("path `{rel}` {rule}")))?;
    let joined = root.join(rel);
    let canon = joined.canonicalize().map_err(|_| ComputeError::ArtifactNotFound(rel.to_string()))?;
    let root = root.canonicalize()?;
    if !canon.starts_with(&root) {
        return Err(ComputeError::ArtifactNotFound(rel.to_string()));
    }
    if !canon.is_file() {
        return Err(ComputeError::ArtifactNotFound(rel.to_string()));
    }
    Ok(canon)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desc(name: &str, active: usize) -> BackendDescriptor {
        BackendDescriptor {
            name: name.into(),
            kind: BackendKind::LocalProcess,
            endpoint: None,
            max_concurrent_jobs: 4,
            active_jobs: active,
            queued_jobs: 0,
        }
    }

    fn job() -> ComputeJob {
        ComputeJob {
            experiment: ExperimentId::new(),
            phase: Phase::Run,
            image_ref: "img".into(),
            command: "true".into(),
            stage_in: vec![],
            fetch_out: vec![],
            capture_workspace: false,
            timeout: None,
        }
    }

    #[test]
    fn selection_rule() {
        let j = job();
        assert_eq!(select_backend(&[desc("a", 2), desc("b", 1)], &j).unwrap().name, "b");
        assert_eq!(select_backend(&[desc("b", 1), desc("a", 1)], &j).unwrap().name, "a");
        assert!(matches!(select_backend(&[], &j), Err(ComputeError::NoBackendAvailable)));
        let mut queued = desc("a", 0);
        queued.queued_jobs = 3;
        assert_eq!(select_backend(&[queued, desc("b", 2)], &j).unwrap().name, "b");
    }

    #[test]
    fn job_validation() {
        let mut j = job();
        assert!(j.validate().is_ok());
        j.fetch_out = vec!["../x".into()];
        assert!(j.validate().is_err());
        let mut j = job();
        j.command = " ".into();
        assert!(j.validate().is_err());
        let mut j = job();
        j.stage_in = vec![StageIn { source: "/tmp".into(), dest: ".".into() }];
        assert!(j.validate().is_ok());
        j.stage_in[0].dest = "/abs".into();
        assert!(j.validate().is_err());
    }

    #[test]
    fn status_serialization() {
        let s = serde_json::to_string(&JobStatus::Exited { code: 3 }).unwrap();
        assert_eq!(s, r#"{"state":"exited","code":3}"#);
        assert!(JobStatus::TimedOut.is_terminal());
        assert!(!JobStatus::Queued.is_terminal());
        assert_eq!(JobStatus::TimedOut.failure_message().unwrap(), "timed out");
    }

    #[test]
    fn backend_config_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("backends.json");
        std::fs::write(
            &path,
            r#"[{"name":"local","kind":"local_process","max_concurrent_jobs":4},
                {"name":"docker","kind":"container_engine","endpoint":"unix:///var/run/docker.sock",
                 "max_concurrent_jobs":2,"api_version":"v1.43"}]"#,
        )
        .unwrap();
        let cfgs = load_backend_configs(&path).unwrap();
        assert_eq!(cfgs.len(), 2);
        assert_eq!(cfgs[1].kind, BackendKind::ContainerEngine);

        std::fs::write(&path, r#"[{"name":"x","kind":"local_process","max_concurrent_jobs":0}]"#).unwrap();
        assert!(load_backend_configs(&path).is_err());
        std::fs::write(&path, r#"[{"name":"x","kind":"container_engine","max_concurrent_jobs":1}]"#).unwrap();
        assert!(load_backend_configs(&path).is_err());
    }
}
