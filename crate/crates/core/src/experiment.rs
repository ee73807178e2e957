//! Experiment lifecycle: identity, metadata, the per-experiment state
//! machine, and the parameter/upload rules that drive build invalidation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::compute::JobStatus;
use crate::store::ArtifactRecord;
use crate::sysdef::{
    apply_overrides, CfgIssue, ParamKind, ParamValue, Phase, SysCfg, SysDef, SysdefError, SystemRef,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ExperimentId(Uuid);

impl ExperimentId {
    pub fn new() -> Self {
        ExperimentId(Uuid::new_v4())
    }

    pub fn as_uuid(&self) -> &Uuid {
        &self.0
    }
}

impl Default for ExperimentId {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.0.hyphenated(), f)
    }
}

impl FromStr for ExperimentId {
    type Err = uuid::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Uuid::parse_str(s).map(ExperimentId)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentState {
    Created,
    Building,
    Built,
    BuildFailed,
    Running,
    Completed,
    RunFailed,
    Archived,
}

impl ExperimentState {
    pub const ALL: [ExperimentState; 8] = [
        ExperimentState::Created,
        ExperimentState::Building,
        ExperimentState::Built,
        ExperimentState::BuildFailed,
        ExperimentState::Running,
        ExperimentState::Completed,
        ExperimentState::RunFailed,
        ExperimentState::Archived,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentState::Created => "created",
            ExperimentState::Building => "building",
            ExperimentState::Built => "built",
            ExperimentState::BuildFailed => "build_failed",
            ExperimentState::Running => "running",
            ExperimentState::Completed => "completed",
            ExperimentState::RunFailed => "run_failed",
            ExperimentState::Archived => "archived",
        }
    }

    /// A job is in flight; no other mutation is accepted.
    pub fn is_busy(&self) -> bool {
        matches!(self, ExperimentState::Building | ExperimentState::Running)
    }

    /// Declared results may be fetched.
    pub fn has_finished_run(&self) -> bool {
        matches!(self, ExperimentState::Completed | ExperimentState::RunFailed)
    }
}

impl fmt::Display for ExperimentState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ExperimentState::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| format!("unknown state `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Event {
    BuildRequested,
    BuildSucceeded,
    BuildFailed,
    RunRequested,
    RunSucceeded,
    RunFailed,
    BuildParamsChanged,
    RunParamsChanged,
    ArchiveRequested,
}

impl Event {
    pub const ALL: [Event; 9] = [
        Event::BuildRequested,
        Event::BuildSucceeded,
        Event::BuildFailed,
        Event::RunRequested,
        Event::RunSucceeded,
        Event::RunFailed,
        Event::BuildParamsChanged,
        Event::RunParamsChanged,
        Event::ArchiveRequested,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Event::BuildRequested => "build_requested",
            Event::BuildSucceeded => "build_succeeded",
            Event::BuildFailed => "build_failed",
            Event::RunRequested => "run_requested",
            Event::RunSucceeded => "run_succeeded",
            Event::RunFailed => "run_failed",
            Event::BuildParamsChanged => "build_params_changed",
            Event::RunParamsChanged => "run_params_changed",
            Event::ArchiveRequested => "archive_requested",
        }
    }
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("{event} is not allowed in state {state}")]
pub struct IllegalTransition {
    pub state: ExperimentState,
    pub event: Event,
}

/// The experiment state table.
///
/// A build-parameter change sends a usable build back to `Created`; a
/// run-parameter change leaves the state as is. Neither event exists for
/// `BuildFailed`, see [`Experiment::set_parameters`].
pub fn transition(state: ExperimentState, event: Event) -> Result<ExperimentState, IllegalTransition> {
    use Event as E;
    use ExperimentState as S;
    let next = match (state, event) {
        (S::Created | S::BuildFailed, E::BuildRequested) => S::Building,
        (S::Building, E::BuildSucceeded) => S::Built,
        (S::Building, E::BuildFailed) => S::BuildFailed,
        (S::Built | S::Completed | S::RunFailed, E::RunRequested) => S::Running,
        (S::Running, E::RunSucceeded) => S::Completed,
        (S::Running, E::RunFailed) => S::RunFailed,
        (S::Built | S::Completed | S::RunFailed, E::BuildParamsChanged) => S::Created,
        (s @ (S::Created | S::Built | S::Completed | S::RunFailed), E::RunParamsChanged) => s,
        (S::Created | S::Built | S::BuildFailed | S::Completed | S::RunFailed, E::ArchiveRequested) => {
            S::Archived
        }
        _ => return Err(IllegalTransition { state, event }),
    };
    Ok(next)
}

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Illegal(#[from] IllegalTransition),
    #[error(transparent)]
    Param(#[from] SysdefError),
    #[error("configuration does not match the system definition")]
    CfgMismatch(Vec<CfgIssue>),
    #[error("parameter `{0}` is not a file parameter")]
    NotAFileParameter(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentMeta {
    pub creator: String,
    pub created_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub status: ExperimentState,
}

/// Outcome of one build or run job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: String,
    pub backend: String,
    pub phase: Phase,
    pub started_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ended_at: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<JobStatus>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_s: Option<f64>,
    /// Experiment-relative path of the captured log.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UploadRef {
    /// Workspace-relative location, always `params/<name>`.
    pub path: String,
    pub size: u64,
    pub uploaded_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveJob {
    pub phase: Phase,
    pub backend: String,
    pub job_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub id: ExperimentId,
    pub meta: ExperimentMeta,
    pub system: SystemRef,
    pub cfg: SysCfg,
    #[serde(default)]
    pub uploads: BTreeMap<String, UploadRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub build_record: Option<JobRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_record: Option<JobRecord>,
    #[serde(default)]
    pub results_index: BTreeMap<String, ArtifactRecord>,
    pub status_since: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub active_job: Option<ActiveJob>,
}

/// What a parameter edit did to the experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamChange {
    None,
    Run,
    Build,
}

pub fn upload_path(param: &str) -> String {
    format!("params/{param}")
}

impl Experiment {
    pub fn create(
        cfg: SysCfg,
        def: &SysDef,
        creator: impl Into<String>,
        description: Option<String>,
        now: DateTime<Utc>,
    ) -> Result<Self, ExperimentError> {
        let issues = cfg.check_against(def);
        if !issues.is_empty() {
            return Err(ExperimentError::CfgMismatch(issues));
        }
        let status = if def.has_build() { ExperimentState::Created } else { ExperimentState::Built };
        Ok(Experiment {
            id: ExperimentId::new(),
            meta: ExperimentMeta { creator: creator.into(), created_at: now, description, status },
            system: def.system_ref(),
            cfg,
            uploads: BTreeMap::new(),
            build_record: None,
            run_record: None,
            results_index: BTreeMap::new(),
            status_since: now,
            message: None,
            active_job: None,
        })
    }

    pub fn state(&self) -> ExperimentState {
        self.meta.status
    }

    /// Applies `event` to the state machine and the invariants tied to it.
    pub fn apply(&mut self, event: Event, now: DateTime<Utc>) -> Result<ExperimentState, IllegalTransition> {
        let prev = self.meta.status;
        let next = transition(prev, event)?;
        match event {
            Event::BuildParamsChanged | Event::RunRequested | Event::ArchiveRequested => {
                self.results_index.clear();
            }
            _ => {}
        }
        if matches!(event, Event::BuildRequested | Event::RunRequested | Event::BuildParamsChanged) {
            self.message = None;
        }
        if next != prev {
            self.meta.status = next;
            self.status_since = now;
        }
        Ok(next)
    }

    /// Fails unless `event` would be accepted in the current state.
    pub fn check(&self, event: Event) -> Result<ExperimentState, IllegalTransition> {
        transition(self.meta.status, event)
    }

    /// Parameters and uploads may change in every quiescent, non-archived
    /// state. The rejection names `run_params_changed` as the refused event.
    pub fn ensure_editable(&self) -> Result<(), IllegalTransition> {
        use ExperimentState as S;
        match self.meta.status {
            S::Created | S::BuildFailed | S::Built | S::Completed | S::RunFailed => Ok(()),
            state => Err(IllegalTransition { state, event: Event::RunParamsChanged }),
        }
    }

    /// Applies parameter overrides. Any build-phase key invalidates the
    /// current build; run-only edits keep the state. In `Created` and
    /// `BuildFailed` there is no build to invalidate, so only the
    /// configuration changes.
    pub fn set_parameters(
        &mut self,
        def: &SysDef,
        overrides: &BTreeMap<String, ParamValue>,
        now: DateTime<Utc>,
    ) -> Result<ParamChange, ExperimentError> {
        self.ensure_editable()?;
        let cfg = apply_overrides(&self.cfg, def, overrides)?;
        let mut change = ParamChange::None;
        for name in overrides.keys() {
            match def.classify_param(name)?.phase {
                Phase::Build => change = ParamChange::Build,
                Phase::Run if change == ParamChange::None => change = ParamChange::Run,
                Phase::Run => {}
            }
        }
        self.cfg = cfg;
        self.fire_change(change, now)?;
        Ok(change)
    }

    /// Checks that `param` may receive an upload right now and returns its phase.
    pub fn check_upload(&self, def: &SysDef, param: &str) -> Result<Phase, ExperimentError> {
        let class = def.classify_param(param)?;
        if class.kind != ParamKind::File {
            return Err(ExperimentError::NotAFileParameter(param.to_string()));
        }
        self.ensure_editable()?;
        Ok(class.phase)
    }

    /// Records an upload whose bytes are already stored at `params/<param>`.
    pub fn note_upload(
        &mut self,
        def: &SysDef,
        param: &str,
        size: u64,
        now: DateTime<Utc>,
    ) -> Result<ParamChange, ExperimentError> {
        let phase = self.check_upload(def, param)?;
        self.uploads.insert(
            param.to_string(),
            UploadRef { path: upload_path(param), size, uploaded_at: now },
        );
        let change = match phase {
            Phase::Build => ParamChange::Build,
            Phase::Run => ParamChange::Run,
        };
        self.fire_change(change, now)?;
        Ok(change)
    }

    fn fire_change(&mut self, change: ParamChange, now: DateTime<Utc>) -> Result<(), IllegalTransition> {
        if matches!(self.meta.status, ExperimentState::Created | ExperimentState::BuildFailed) {
            return Ok(());
        }
        match change {
            ParamChange::None => Ok(()),
            ParamChange::Run => self.apply(Event::RunParamsChanged, now).map(|_| ()),
            ParamChange::Build => self.apply(Event::BuildParamsChanged, now).map(|_| ()),
        }
    }

    /// Workspace path each file parameter resolves to: the upload when one
    /// exists, otherwise the configured in-image path.
    pub fn staged_files(&self) -> BTreeMap<String, String> {
        let mut staged = BTreeMap::new();
        for (name, value) in self.cfg.build_parameters.iter().chain(&self.cfg.run_parameters) {
            if let ParamValue::File(default) = value {
                let path = self.uploads.get(name).map(|u| u.path.clone()).unwrap_or_else(|| default.clone());
                staged.insert(name.clone(), path);
            }
        }
        staged
    }

    pub fn job_records(&self) -> Vec<JobRecord> {
        self.build_record.iter().chain(&self.run_record).cloned().collect()
    }

    pub fn summary(&self) -> ExperimentSummary {
        ExperimentSummary {
            id: self.id,
            creator: self.meta.creator.clone(),
            created_at: self.meta.created_at,
            description: self.meta.description.clone(),
            status: self.meta.status,
            system: self.system.clone(),
        }
    }

    /// Manifest for the archive bundle. `syscfg_text` is the materialized
    /// document of the last executed configuration.
    pub fn archive_manifest(&self, def: &SysDef, syscfg_text: &str) -> Result<ArchiveManifest, serde_json::Error> {
        Ok(ArchiveManifest {
            experiment: self.summary(),
            system: def.clone(),
            syscfg: serde_json::from_str(syscfg_text)?,
            jobs: self.job_records(),
            results: self.results_index.values().cloned().collect(),
            uploads: self.uploads.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub id: ExperimentId,
    pub creator: String,
    pub created_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub status: ExperimentState,
    pub system: SystemRef,
}

/// `manifest.json` at the root of an archive bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveManifest {
    pub experiment: ExperimentSummary,
    pub system: SysDef,
    pub syscfg: serde_json::Value,
    pub jobs: Vec<JobRecord>,
    pub results: Vec<ArtifactRecord>,
    #[serde(default)]
    pub uploads: BTreeMap<String, UploadRef>,
}

/// A written archive: its manifest and where the ZIP lives.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveBundle {
    pub manifest: ArchiveManifest,
    pub path: std::path::PathBuf,
}
