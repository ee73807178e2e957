//! The runtime manager: binds the system catalog, the experiment store and
//! the compute registry.
//!
//! Every experiment has one async mutex that serializes its mutations,
//! including job completion. Readers use a snapshot that is swapped after
//! each successful persist.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::{Arc, RwLock};
use std::time::Duration;

use chrono::Utc;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Mutex;

use crate::compute::{ComputeError, ComputeJob, JobHandle, JobStatus, Registry, StageIn};
use crate::experiment::{
    ActiveJob, Event, Experiment, ExperimentError, ExperimentId, ExperimentState, ExperimentSummary,
    IllegalTransition, JobRecord, ParamChange,
};
use crate::store::{load_catalog, Catalog, Store, StoreError};
use crate::sysdef::{apply_overrides, check_override, derive_syscfg, materialize_syscfg, ParamValue, Phase, SysDef, SysdefError, SystemRef};

pub const RESTART_MESSAGE: &str = "interrupted by service restart";

#[derive(Debug, thiserror::Error)]
pub enum ManagerError {
    #[error("unknown system {0}")]
    UnknownSystem(SystemRef),
    #[error("experiment `{0}` not found")]
    UnknownExperiment(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("parameter `{0}` is not a file parameter")]
    NotAFileParameter(String),
    #[error("{message}")]
    KindMismatch { name: String, message: String },
    #[error("{message}")]
    IllegalState { state: ExperimentState, message: String },
    #[error("result `{name}` is not available")]
    UnknownResult { name: String, declared: bool },
    #[error("compute back-end unavailable: {0}")]
    BackendUnavailable(String),
    #[error("{message}")]
    Validation { message: String, detail: Value },
    #[error("internal error: {0}")]
    Internal(String),
}

impl From<StoreError> for ManagerError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(id) => ManagerError::UnknownExperiment(id.to_string()),
            other => ManagerError::Internal(other.to_string()),
        }
    }
}

impl From<std::io::Error> for ManagerError {
    fn from(e: std::io::Error) -> Self {
        ManagerError::Internal(e.to_string())
    }
}

fn illegal(err: IllegalTransition) -> ManagerError {
    use ExperimentState as S;
    let message = match (err.state, err.event) {
        (S::Created | S::BuildFailed, Event::RunRequested) => "run requires a finished build".to_string(),
        (s, _) if s.is_busy() => format!("experiment is {s}; wait for the job to finish"),
        (S::Archived, _) => "experiment is archived".to_string(),
        (s, ev) => format!("{} is not allowed while the experiment is {s}", ev.as_str()),
    };
    ManagerError::IllegalState { state: err.state, message }
}

/// Errors on the per-experiment edit paths (set parameters, run overrides).
fn param_error(err: SysdefError) -> ManagerError {
    match err {
        SysdefError::UnknownParameter(name) => ManagerError::UnknownParameter(name),
        SysdefError::KindMismatch { ref name, .. } | SysdefError::FileParamInlineValue(ref name) => {
            ManagerError::KindMismatch { name: name.clone(), message: err.to_string() }
        }
        other => ManagerError::Validation { message: other.to_string(), detail: Value::Null },
    }
}

fn experiment_error(err: ExperimentError) -> ManagerError {
    match err {
        ExperimentError::Illegal(e) => illegal(e),
        ExperimentError::Param(e) => param_error(e),
        ExperimentError::NotAFileParameter(name) => ManagerError::NotAFileParameter(name),
        ExperimentError::CfgMismatch(issues) => ManagerError::Validation {
            message: "configuration does not match the system definition".into(),
            detail: json!({ "issues": issues }),
        },
    }
}

fn validation(param: &str, reason: &str, message: String) -> ManagerError {
    ManagerError::Validation { message, detail: json!({ "parameter": param, "reason": reason }) }
}

/// Body of `POST /session`. Omitted parameters take their defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRequest {
    pub system: SystemRef,
    #[serde(default)]
    pub build_parameters: BTreeMap<String, Value>,
    #[serde(default)]
    pub run_parameters: BTreeMap<String, Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuildRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_s: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_s: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub run_parameters: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusResponse {
    pub status: ExperimentState,
    pub since: chrono::DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub job: Option<ActiveJob>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemSummary {
    pub name: String,
    pub version: String,
    pub summary: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BuildOutcome {
    Submitted,
    /// The system has no build step and is already built.
    NotRequired,
}

/// A stored result ready for download.
#[derive(Debug, Clone)]
pub struct ResultFile {
    pub name: String,
    pub declared_type: String,
    pub path: PathBuf,
    pub size: u64,
}

#[derive(Debug, Clone)]
pub struct ManagerConfig {
    pub data_dir: PathBuf,
    pub catalog_dir: PathBuf,
    pub poll_interval: Duration,
}

impl ManagerConfig {
    pub fn new(data_dir: impl Into<PathBuf>, catalog_dir: impl Into<PathBuf>) -> Self {
        ManagerConfig { data_dir: data_dir.into(), catalog_dir: catalog_dir.into(), poll_interval: Duration::from_millis(50) }
    }
}

struct Entry {
    /// `None` once the experiment has been deleted.
    exp: Mutex<Option<Experiment>>,
    snapshot: RwLock<Arc<Experiment>>,
}

impl Entry {
    fn new(exp: Experiment) -> Self {
        Entry { snapshot: RwLock::new(Arc::new(exp.clone())), exp: Mutex::new(Some(exp)) }
    }

    fn snapshot(&self) -> Arc<Experiment> {
        self.snapshot.read().expect("snapshot lock").clone()
    }
}

struct Inner {
    store: Store,
    catalog_dir: PathBuf,
    catalog: RwLock<Arc<Catalog>>,
    registry: Registry,
    experiments: RwLock<HashMap<ExperimentId, Arc<Entry>>>,
    poll_interval: Duration,
}

#[derive(Clone)]
pub struct Manager {
    inner: Arc<Inner>,
}

impl Manager {
    /// Loads the catalog and every persisted experiment. Experiments that
    /// were building or running when the previous process stopped are
    /// marked failed.
    pub fn open(config: ManagerConfig, registry: Registry) -> Result<Self, ManagerError> {
        if registry.is_empty() {
            return Err(ManagerError::BackendUnavailable("no compute back-end configured".into()));
        }
        let store = Store::open(&config.data_dir)?;
        let catalog = load_catalog(&config.catalog_dir)?;
        for problem in &catalog.problems {
            tracing::warn!(?problem, "catalog problem");
        }
        let (loaded, broken) = store.load_all()?;
        for e in broken {
            tracing::error!(error = %e, "skipping unreadable experiment");
        }
        let now = Utc::now();
        let mut experiments = HashMap::new();
        for mut exp in loaded {
            if exp.state().is_busy() {
                let event = match exp.state() {
                    ExperimentState::Building => Event::BuildFailed,
                    _ => Event::RunFailed,
                };
                exp.apply(event, now).map_err(|e| ManagerError::Internal(e.to_string()))?;
                let record = match event {
                    Event::BuildFailed => exp.build_record.as_mut(),
                    _ => exp.run_record.as_mut(),
                };
                if let Some(r) = record {
                    r.ended_at = Some(now);
                    r.status = Some(JobStatus::BackendFailed { reason: RESTART_MESSAGE.into() });
                }
                exp.active_job = None;
                exp.message = Some(RESTART_MESSAGE.into());
                store.persist_experiment(&exp)?;
            }
            experiments.insert(exp.id, Arc::new(Entry::new(exp)));
        }
        Ok(Manager {
            inner: Arc::new(Inner {
                store,
                catalog_dir: config.catalog_dir,
                catalog: RwLock::new(Arc::new(catalog)),
                registry,
                experiments: RwLock::new(experiments),
                poll_interval: config.poll_interval,
            }),
        })
    }

    pub fn store(&self) -> &Store {
        &self.inner.store
    }

    pub fn registry(&self) -> &Registry {
        &self.inner.registry
    }

    pub fn catalog(&self) -> Arc<Catalog> {
        self.inner.catalog.read().expect("catalog lock").clone()
    }

    /// Re-reads the catalog directory and swaps the snapshot.
    pub fn reload_catalog(&self) -> Result<Arc<Catalog>, ManagerError> {
        let fresh = Arc::new(load_catalog(&self.inner.catalog_dir)?);
        *self.inner.catalog.write().expect("catalog lock") = fresh.clone();
        Ok(fresh)
    }

    pub fn systems(&self) -> Vec<SystemSummary> {
        self.catalog()
            .entries
            .iter()
            .map(|e| SystemSummary {
                name: e.def.name.clone(),
                version: e.def.version.clone(),
                summary: e.def.documentation.summary.clone(),
            })
            .collect()
    }

    pub fn system(&self, system: &SystemRef) -> Result<SysDef, ManagerError> {
        self.catalog().lookup(system).cloned().ok_or_else(|| ManagerError::UnknownSystem(system.clone()))
    }

    fn entry(&self, id: ExperimentId) -> Result<Arc<Entry>, ManagerError> {
        self.inner
            .experiments
            .read()
            .expect("experiment map lock")
            .get(&id)
            .cloned()
            .ok_or_else(|| ManagerError::UnknownExperiment(id.to_string()))
    }

    pub fn experiment(&self, id: ExperimentId) -> Result<Arc<Experiment>, ManagerError> {
        Ok(self.entry(id)?.snapshot())
    }

    pub fn status(&self, id: ExperimentId) -> Result<StatusResponse, ManagerError> {
        let exp = self.experiment(id)?;
        Ok(StatusResponse {
            status: exp.state(),
            since: exp.status_since,
            job: exp.active_job.clone(),
            message: exp.message.clone(),
        })
    }

    pub fn list(&self, creator: Option<&str>, status: Option<ExperimentState>) -> Vec<ExperimentSummary> {
        let entries: Vec<_> = self.inner.experiments.read().expect("experiment map lock").values().cloned().collect();
        let mut out: Vec<_> = entries
            .iter()
            .map(|e| e.snapshot().summary())
            .filter(|s| creator.is_none_or(|c| s.creator == c))
            .filter(|s| status.is_none_or(|st| s.status == st))
            .collect();
        out.sort_by(|a, b| (a.created_at, a.id).cmp(&(b.created_at, b.id)));
        out
    }

    /// Persists `next`, publishes it to readers and makes it current.
    fn commit(&self, entry: &Entry, slot: &mut Option<Experiment>, next: Experiment) -> Result<(), ManagerError> {
        self.inner.store.persist_experiment(&next)?;
        *entry.snapshot.write().expect("snapshot lock") = Arc::new(next.clone());
        *slot = Some(next);
        Ok(())
    }

    pub async fn create(&self, req: CreateRequest, creator: &str) -> Result<Experiment, ManagerError> {
        let def = self.system(&req.system)?;
        let mut overrides = BTreeMap::new();
        for (phase, section) in [(Phase::Build, &req.build_parameters), (Phase::Run, &req.run_parameters)] {
            for (name, raw) in section {
                let Some(spec) = def.param(name) else {
                    return Err(validation(name, "unknown_parameter", format!("unknown parameter `{name}`")));
                };
                if spec.phase != phase {
                    return Err(validation(
                        name,
                        "wrong_phase",
                        format!("parameter `{name}` belongs to the {} parameters", spec.phase),
                    ));
                }
                let value = ParamValue::from_json(raw)
                    .map_err(|reason| validation(name, "invalid_value", format!("parameter `{name}`: {reason}")))?;
                overrides.insert(name.clone(), value);
            }
        }
        let cfg = apply_overrides(&derive_syscfg(&def), &def, &overrides).map_err(|e| {
            let (name, reason) = match &e {
                SysdefError::KindMismatch { name, .. } => (name.clone(), "kind_mismatch"),
                SysdefError::FileParamInlineValue(name) => (name.clone(), "file_inline_value"),
                SysdefError::UnknownParameter(name) => (name.clone(), "unknown_parameter"),
                _ => (String::new(), "invalid"),
            };
            validation(&name, reason, e.to_string())
        })?;
        let exp = Experiment::create(cfg, &def, creator, req.description, Utc::now()).map_err(experiment_error)?;
        self.inner.store.allocate(exp.id)?;
        self.inner.store.persist_experiment(&exp)?;
        self.inner
            .experiments
            .write()
            .expect("experiment map lock")
            .insert(exp.id, Arc::new(Entry::new(exp.clone())));
        Ok(exp)
    }

    fn parse_overrides(
        def: &SysDef,
        raw: &BTreeMap<String, Value>,
    ) -> Result<BTreeMap<String, ParamValue>, ManagerError> {
        let mut out = BTreeMap::new();
        for (name, value) in raw {
            let spec = def.param(name).ok_or_else(|| ManagerError::UnknownParameter(name.clone()))?;
            let value = ParamValue::from_json(value).map_err(|reason| ManagerError::KindMismatch {
                name: name.clone(),
                message: format!("parameter `{name}`: {reason}"),
            })?;
            debug_assert_eq!(spec.name, *name);
            check_override(def, name, &value).map_err(param_error)?;
            out.insert(name.clone(), value);
        }
        Ok(out)
    }

    /// Applies parameter overrides outside a run request. Build-phase keys
    /// invalidate the current build.
    pub async fn set_parameters(
        &self,
        id: ExperimentId,
        raw: &BTreeMap<String, Value>,
    ) -> Result<(ExperimentState, ParamChange), ManagerError> {
        let entry = self.entry(id)?;
        let mut guard = entry.exp.lock().await;
        let current = guard.as_ref().ok_or_else(|| ManagerError::UnknownExperiment(id.to_string()))?;
        current.ensure_editable().map_err(illegal)?;
        let def = self.system(&current.system)?;
        let overrides = Self::parse_overrides(&def, raw)?;
        let mut next = current.clone();
        let change = next.set_parameters(&def, &overrides, Utc::now()).map_err(experiment_error)?;
        let state = next.state();
        self.commit(&entry, &mut guard, next)?;
        Ok((state, change))
    }

    /// Fails fast when `param` cannot receive an upload right now.
    pub fn check_upload(&self, id: ExperimentId, param: &str) -> Result<(), ManagerError> {
        let exp = self.experiment(id)?;
        let def = self.system(&exp.system)?;
        exp.check_upload(&def, param).map_err(|e| match e {
            ExperimentError::Param(SysdefError::UnknownParameter(n)) => ManagerError::UnknownParameter(n),
            other => experiment_error(other),
        })?;
        Ok(())
    }

    /// Temporary file that receives upload bytes before [`Manager::commit_upload`].
    pub fn upload_temp(&self, id: ExperimentId) -> Result<tempfile::NamedTempFile, ManagerError> {
        self.entry(id)?;
        Ok(self.inner.store.upload_temp(id)?)
    }

    pub async fn commit_upload(
        &self,
        id: ExperimentId,
        param: &str,
        tmp: tempfile::NamedTempFile,
    ) -> Result<ParamChange, ManagerError> {
        let entry = self.entry(id)?;
        let mut guard = entry.exp.lock().await;
        let current = guard.as_ref().ok_or_else(|| ManagerError::UnknownExperiment(id.to_string()))?;
        let def = self.system(&current.system)?;
        current.check_upload(&def, param).map_err(|e| match e {
            ExperimentError::Param(SysdefError::UnknownParameter(n)) => ManagerError::UnknownParameter(n),
            other => experiment_error(other),
        })?;
        let size = self.inner.store.commit_upload(id, param, tmp)?;
        let mut next = current.clone();
        let change = next.note_upload(&def, param, size, Utc::now()).map_err(experiment_error)?;
        self.commit(&entry, &mut guard, next)?;
        Ok(change)
    }

    fn check_timeout(timeout_s: Option<f64>) -> Result<Option<Duration>, ManagerError> {
        match timeout_s {
            None => Ok(None),
            Some(t) if t.is_finite() && t > 0.0 => Ok(Some(Duration::from_secs_f64(t))),
            Some(t) => Err(ManagerError::Validation {
                message: format!("timeout_s must be a positive number of seconds, got {t}"),
                detail: json!({ "field": "timeout_s" }),
            }),
        }
    }

    /// Writes the materialized configuration next to the workspace and
    /// returns the pending path plus the stage-in list common to both phases.
    fn prepare_workspace(&self, exp: &Experiment) -> Result<(PathBuf, Vec<StageIn>), ManagerError> {
        let ws = self.inner.store.workspace_dir(exp.id);
        let text = materialize_syscfg(&exp.cfg, &exp.staged_files()).map_err(param_error)?;
        let pending = ws.join(".syscfg.pending.json");
        crate::store::write_atomic(&pending, text.as_bytes())?;
        let mut stage = vec![StageIn { source: pending.clone(), dest: "syscfg.json".into() }];
        for (name, upload) in &exp.uploads {
            stage.push(StageIn { source: ws.join(&upload.path), dest: format!("params/{name}") });
        }
        Ok((pending, stage))
    }

    async fn submit(
        &self,
        next: &mut Experiment,
        job: ComputeJob,
        pending: PathBuf,
    ) -> Result<JobHandle, ManagerError> {
        let phase = job.phase;
        let timeout_s = job.timeout.map(|d| d.as_secs_f64());
        let handle = self.inner.registry.dispatch(job).await.map_err(|e| match e {
            ComputeError::BackendUnreachable(r) => ManagerError::BackendUnavailable(r),
            ComputeError::NoBackendAvailable => ManagerError::BackendUnavailable(e.to_string()),
            other => ManagerError::Internal(other.to_string()),
        })?;
        let ws = self.inner.store.workspace_dir(next.id);
        std::fs::rename(&pending, ws.join("syscfg.json"))?;
        let record = JobRecord {
            job_id: handle.job_id.clone(),
            backend: handle.backend.clone(),
            phase,
            started_at: Utc::now(),
            ended_at: None,
            status: None,
            timeout_s,
            log: None,
        };
        match phase {
            Phase::Build => next.build_record = Some(record),
            Phase::Run => next.run_record = Some(record),
        }
        next.active_job = Some(ActiveJob { phase, backend: handle.backend.clone(), job_id: handle.job_id.clone() });
        Ok(handle)
    }

    pub async fn build(&self, id: ExperimentId, req: BuildRequest) -> Result<BuildOutcome, ManagerError> {
        let timeout = Self::check_timeout(req.timeout_s)?;
        let entry = self.entry(id)?;
        let mut guard = entry.exp.lock().await;
        let current = guard.as_ref().ok_or_else(|| ManagerError::UnknownExperiment(id.to_string()))?;
        let def = self.system(&current.system)?;
        let Some(command) = def.build_command.clone() else {
            return match current.state() {
                ExperimentState::Built => Ok(BuildOutcome::NotRequired),
                state => Err(ManagerError::IllegalState {
                    state,
                    message: format!("system has no build step; experiment is {state}"),
                }),
            };
        };
        current.check(Event::BuildRequested).map_err(illegal)?;
        let mut next = current.clone();
        let (pending, stage_in) = self.prepare_workspace(&next)?;
        let job = ComputeJob {
            experiment: id,
            phase: Phase::Build,
            image_ref: def.image_ref.clone(),
            command,
            stage_in,
            fetch_out: Vec::new(),
            capture_workspace: true,
            timeout,
        };
        let handle = self.submit(&mut next, job, pending).await?;
        next.apply(Event::BuildRequested, Utc::now()).map_err(illegal)?;
        if let Err(e) = self.commit(&entry, &mut guard, next) {
            let _ = self.inner.registry.cancel(&handle).await;
            return Err(e);
        }
        drop(guard);
        self.spawn_supervisor(id, handle, Phase::Build);
        Ok(BuildOutcome::Submitted)
    }

    pub async fn run(&self, id: ExperimentId, req: RunRequest) -> Result<(), ManagerError> {
        let timeout = Self::check_timeout(req.timeout_s)?;
        let entry = self.entry(id)?;
        let mut guard = entry.exp.lock().await;
        let current = guard.as_ref().ok_or_else(|| ManagerError::UnknownExperiment(id.to_string()))?;
        current.check(Event::RunRequested).map_err(illegal)?;
        let def = self.system(&current.system)?;
        let overrides = Self::parse_overrides(&def, &req.run_parameters)?;
        if let Some(name) = overrides.keys().find(|n| def.param(n).is_some_and(|p| p.phase == Phase::Build)) {
            return Err(validation(
                name,
                "build_parameter",
                format!("`{name}` is a build parameter; set it on the experiment and rebuild"),
            ));
        }
        let mut next = current.clone();
        if !overrides.is_empty() {
            next.set_parameters(&def, &overrides, Utc::now()).map_err(experiment_error)?;
        }
        let (pending, mut stage_in) = self.prepare_workspace(&next)?;
        let build_dir = self.inner.store.build_dir(id);
        if build_dir.is_dir() {
            stage_in.insert(0, StageIn { source: build_dir, dest: ".".into() });
        }
        let job = ComputeJob {
            experiment: id,
            phase: Phase::Run,
            image_ref: def.image_ref.clone(),
            command: def.run_command.clone(),
            stage_in,
            fetch_out: def.results.iter().map(|r| r.path.clone()).collect(),
            capture_workspace: false,
            timeout,
        };
        let handle = self.submit(&mut next, job, pending).await?;
        next.apply(Event::RunRequested, Utc::now()).map_err(illegal)?;
        // Results of the previous run are replaced, not versioned.
        let artifacts = self.inner.store.artifacts_dir(id);
        let _ = std::fs::remove_dir_all(&artifacts);
        std::fs::create_dir_all(&artifacts)?;
        if let Err(e) = self.commit(&entry, &mut guard, next) {
            let _ = self.inner.registry.cancel(&handle).await;
            return Err(e);
        }
        drop(guard);
        self.spawn_supervisor(id, handle, Phase::Run);
        Ok(())
    }

    fn spawn_supervisor(&self, id: ExperimentId, handle: JobHandle, phase: Phase) {
        let this = self.clone();
        tokio::spawn(async move {
            let status = loop {
                match this.inner.registry.poll(&handle).await {
                    Ok(s) if s.is_terminal() => break s,
                    Ok(_) => tokio::time::sleep(this.inner.poll_interval).await,
                    Err(e) => break JobStatus::BackendFailed { reason: e.to_string() },
                }
            };
            if let Err(e) = this.finish_job(id, &handle, phase, status).await {
                tracing::error!(experiment = %id, error = %e, "failed to record job outcome");
            }
            let _ = this.inner.registry.release(&handle).await;
        });
    }

    async fn finish_job(
        &self,
        id: ExperimentId,
        handle: &JobHandle,
        phase: Phase,
        status: JobStatus,
    ) -> Result<(), ManagerError> {
        let Ok(entry) = self.entry(id) else { return Ok(()) };
        let mut guard = entry.exp.lock().await;
        let Some(current) = guard.as_ref() else { return Ok(()) };
        let owns = current
            .active_job
            .as_ref()
            .is_some_and(|a| a.job_id == handle.job_id && a.backend == handle.backend);
        if !owns {
            return Ok(());
        }
        let store = &self.inner.store;
        let registry = &self.inner.registry;
        let mut next = current.clone();
        let mut failure = status.failure_message();

        let log_name = match phase {
            Phase::Build => "build.log",
            Phase::Run => "run.log",
        };
        let log = registry.fetch_log(handle).await.unwrap_or_default();
        crate::store::write_atomic(&store.logs_dir(id).join(log_name), log.as_bytes())?;

        match phase {
            Phase::Build if failure.is_none() => {
                let dest = store.build_dir(id);
                let _ = std::fs::remove_dir_all(&dest);
                if let Err(e) = registry.export_workspace(handle, &dest).await {
                    failure = Some(format!("failed to capture build output: {e}"));
                }
            }
            Phase::Build => {}
            Phase::Run => {
                let def = self.system(&next.system)?;
                let dir = store.artifacts_dir(id);
                std::fs::create_dir_all(&dir)?;
                for spec in &def.results {
                    let tmp = dir.join(format!(".fetch-{}", spec.name));
                    match registry.copy_artifact(handle, &spec.path, &tmp).await {
                        Ok(_) => {
                            let record = store.adopt_artifact(id, &def, &spec.name, &tmp)?;
                            next.results_index.insert(spec.name.clone(), record);
                        }
                        Err(ComputeError::ArtifactNotFound(_)) => {}
                        Err(e) => {
                            let _ = std::fs::remove_file(&tmp);
                            tracing::warn!(experiment = %id, result = %spec.name, error = %e, "result not collected");
                        }
                    }
                }
            }
        }

        let now = Utc::now();
        let record = match phase {
            Phase::Build => next.build_record.as_mut(),
            Phase::Run => next.run_record.as_mut(),
        };
        if let Some(r) = record {
            r.ended_at = Some(now);
            r.status = Some(status.clone());
            r.log = Some(format!("logs/{log_name}"));
        }
        let event = match (phase, failure.is_none()) {
            (Phase::Build, true) => Event::BuildSucceeded,
            (Phase::Build, false) => Event::BuildFailed,
            (Phase::Run, true) => Event::RunSucceeded,
            (Phase::Run, false) => Event::RunFailed,
        };
        next.apply(event, now).map_err(illegal)?;
        next.message = failure;
        next.active_job = None;
        self.commit(&entry, &mut guard, next)
    }

    /// Combined log of the in-flight job, or of the latest finished one.
    pub async fn log(&self, id: ExperimentId) -> Result<String, ManagerError> {
        let exp = self.experiment(id)?;
        if let Some(active) = &exp.active_job {
            let handle = JobHandle { job_id: active.job_id.clone(), backend: active.backend.clone() };
            if let Ok(text) = self.inner.registry.fetch_log(&handle).await {
                return Ok(text);
            }
        }
        let latest = [&exp.run_record, &exp.build_record]
            .into_iter()
            .flatten()
            .max_by_key(|r| r.started_at)
            .and_then(|r| r.log.clone());
        match latest {
            Some(rel) => match tokio::fs::read(self.inner.store.experiment_dir(id).join(rel)).await {
                Ok(bytes) => Ok(String::from_utf8_lossy(&bytes).into_owned()),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(String::new()),
                Err(e) => Err(e.into()),
            },
            None => Ok(String::new()),
        }
    }

    pub fn result(&self, id: ExperimentId, name: &str) -> Result<ResultFile, ManagerError> {
        let exp = self.experiment(id)?;
        let def = self.system(&exp.system)?;
        let spec = def
            .result(name)
            .ok_or_else(|| ManagerError::UnknownResult { name: name.to_string(), declared: false })?;
        if !exp.state().has_finished_run() {
            return Err(ManagerError::IllegalState {
                state: exp.state(),
                message: "results are available only after a finished run".into(),
            });
        }
        let record = exp
            .results_index
            .get(name)
            .ok_or_else(|| ManagerError::UnknownResult { name: name.to_string(), declared: true })?;
        let path = self.inner.store.experiment_dir(id).join(&record.path);
        if !path.is_file() {
            return Err(ManagerError::UnknownResult { name: name.to_string(), declared: true });
        }
        Ok(ResultFile { name: spec.name.clone(), declared_type: spec.kind.clone(), path, size: record.size })
    }

    /// Freezes the experiment into `archive/<uuid>.zip`.
    pub async fn archive(&self, id: ExperimentId) -> Result<PathBuf, ManagerError> {
        let entry = self.entry(id)?;
        let mut guard = entry.exp.lock().await;
        let current = guard.as_ref().ok_or_else(|| ManagerError::UnknownExperiment(id.to_string()))?;
        current.check(Event::ArchiveRequested).map_err(illegal)?;
        let def = self.system(&current.system)?;
        let store = &self.inner.store;
        let syscfg = match std::fs::read_to_string(store.workspace_dir(id).join("syscfg.json")) {
            Ok(text) => text,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                materialize_syscfg(&current.cfg, &current.staged_files()).map_err(param_error)?
            }
            Err(e) => return Err(e.into()),
        };
        let mut manifest = current
            .archive_manifest(&def, &syscfg)
            .map_err(|e| ManagerError::Internal(format!("workspace syscfg.json is not JSON: {e}")))?;
        manifest.experiment.status = ExperimentState::Archived;
        let mut next = current.clone();
        next.apply(Event::ArchiveRequested, Utc::now()).map_err(illegal)?;

        let target = store.archive_path(id);
        if target.exists() {
            // Left over from an attempt that never reached the state change.
            std::fs::remove_file(&target)?;
        }
        let writer = store.clone();
        let path = tokio::task::spawn_blocking(move || writer.write_archive(&manifest, &syscfg))
            .await
            .map_err(|e| ManagerError::Internal(e.to_string()))??;
        self.commit(&entry, &mut guard, next)?;
        Ok(path)
    }

    pub fn archive_file(&self, id: ExperimentId) -> Result<PathBuf, ManagerError> {
        let exp = self.experiment(id)?;
        if exp.state() != ExperimentState::Archived {
            return Err(ManagerError::IllegalState {
                state: exp.state(),
                message: "experiment has not been archived".into(),
            });
        }
        let path = self.inner.store.archive_path(id);
        if !path.is_file() {
            return Err(ManagerError::Internal(format!("archive bundle for {id} is missing")));
        }
        Ok(path)
    }

    pub async fn delete(&self, id: ExperimentId) -> Result<(), ManagerError> {
        let entry = self.entry(id)?;
        let mut guard = entry.exp.lock().await;
        let current = guard.as_ref().ok_or_else(|| ManagerError::UnknownExperiment(id.to_string()))?;
        let state = current.state();
        if state.is_busy() || state == ExperimentState::Archived {
            return Err(ManagerError::IllegalState { state, message: format!("cannot delete an experiment that is {state}") });
        }
        self.inner.store.delete_experiment(id)?;
        *guard = None;
        self.inner.experiments.write().expect("experiment map lock").remove(&id);
        Ok(())
    }
}
