//! Container-engine back-end.
//!
//! Each job becomes one container: created from the job's image with the
//! command under `sh -c`, stage-in files copied into the working directory
//! before start, declared outputs copied out after exit into a host-side
//! mirror directory, then the container is removed. Artifact and workspace
//! access after termination is served from that mirror.

use std::collections::BTreeMap;
use std::path::{Component, Path, PathBuf};
use std::sync::Arc;

use async_trait::async_trait;

use super::engine::{ContainerSpec, EngineClient, EngineError};
use super::slot::{acquire, Admission, JobSlot, JobTable};
use super::{
    Backend, BackendDescriptor, BackendKind, ComputeError, ComputeJob, JobHandle, JobStatus, StageIn,
};

pub struct ContainerBackend {
    client: EngineClient,
    table: Arc<JobTable>,
    workdir: Option<String>,
    endpoint: String,
}

impl ContainerBackend {
    pub fn new(
        name: &str,
        client: EngineClient,
        work_dir: impl Into<PathBuf>,
        max_concurrent_jobs: usize,
        container_workdir: Option<String>,
    ) -> Result<Self, ComputeError> {
        let endpoint = client.endpoint().to_string();
        let table = JobTable::new(name, work_dir.into(), max_concurrent_jobs.max(1))?;
        Ok(ContainerBackend { client, table: Arc::new(table), workdir: container_workdir, endpoint })
    }
}

/// Builds the stage-in tarball, adding explicit entries for parent
/// directories so the engine never has to invent them.
fn stage_tar(items: &[StageIn]) -> Result<Vec<u8>, ComputeError> {
    let mut builder = tar::Builder::new(Vec::new());
    builder.follow_symlinks(false);
    let mut dirs = std::collections::BTreeSet::new();
    for item in items {
        let fail = |e: std::io::Error| ComputeError::StageInFailure {
            path: item.source.display().to_string(),
            reason: e.to_string(),
        };
        let meta = std::fs::metadata(&item.source).map_err(fail)?;
        let dest = Path::new(&item.dest);
        let mut parent = PathBuf::new();
        if let Some(p) = dest.parent() {
            for comp in p.components() {
                parent.push(comp);
                if dirs.insert(parent.clone()) {
                    let mut header = tar::Header::new_gnu();
                    header.set_entry_type(tar::EntryType::Directory);
                    header.set_mode(0o755);
                    header.set_size(0);
                    builder.append_data(&mut header, &parent, std::io::empty()).map_err(fail)?;
                }
            }
        }
        if meta.is_dir() {
            builder.append_dir_all(dest, &item.source).map_err(fail)?;
        } else {
            builder.append_path_with_name(&item.source, dest).map_err(fail)?;
        }
    }
    builder.into_inner().map_err(|e| ComputeError::StageInFailure { path: "<archive>".into(), reason: e.to_string() })
}

/// Unpacks an engine archive into `dest`, dropping the first `strip`
/// path components of every entry.
fn unpack(tar_bytes: &[u8], dest: &Path, strip: usize) -> std::io::Result<()> {
    std::fs::create_dir_all(dest)?;
    let mut archive = tar::Archive::new(tar_bytes);
    for entry in archive.entries()? {
        let mut entry = entry?;
        let path = entry.path()?.into_owned();
        let rel: PathBuf = path
            .components()
            .filter(|c| !matches!(c, Component::CurDir))
            .skip(strip)
            .collect();
        if rel.as_os_str().is_empty() {
            continue;
        }
        if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
            return Err(std::io::Error::other(format!("refusing archive entry {}", path.display())));
        }
        let target = dest.join(&rel);
        if let Some(parent) = target.parent() {
            std::fs::create_dir_all(parent)?;
        }
        entry.unpack(&target)?;
    }
    Ok(())
}

fn join_container_path(workdir: &str, rel: &str) -> String {
    if rel == "." {
        return workdir.to_string();
    }
    format!("{}/{}", workdir.trim_end_matches('/'), rel)
}

async fn create_with_pull(client: &EngineClient, spec: &ContainerSpec) -> Result<String, EngineError> {
    match client.create_container(spec).await {
        Err(EngineError::NoSuchImage(_)) => {
            client.pull_image(&spec.image).await?;
            client.create_container(spec).await
        }
        other => other,
    }
}

async fn drive(
    client: &EngineClient,
    slot: &JobSlot,
    handle: &JobHandle,
    job: &ComputeJob,
    stage: Vec<u8>,
    fixed_workdir: Option<String>,
) -> Result<JobStatus, EngineError> {
    let spec = ContainerSpec {
        image: job.image_ref.clone(),
        command: job.command.clone(),
        working_dir: fixed_workdir.clone(),
        env: vec![
            ("SUNRISE_JOB_ID".into(), handle.job_id.clone()),
            ("SUNRISE_PHASE".into(), job.phase.to_string()),
            ("SUNRISE_EXPERIMENT_ID".into(), job.experiment.to_string()),
        ],
        labels: BTreeMap::from([
            ("sunrise.job".to_string(), handle.job_id.clone()),
            ("sunrise.experiment".to_string(), job.experiment.to_string()),
        ]),
    };
    let id = create_with_pull(client, &spec).await?;
    *slot.container_id.lock().unwrap() = Some(id.clone());

    let result = async {
        let workdir = match fixed_workdir {
            Some(w) => w,
            None => client.working_dir(&id).await?,
        };
        client.put_archive(&id, &workdir, stage).await?;
        if slot.cancel.is_cancelled() {
            return Ok(JobStatus::BackendFailed { reason: "cancelled".into() });
        }
        client.start(&id).await?;
        slot.advance(JobStatus::Running);

        let timeout = async {
            match job.timeout {
                Some(t) => tokio::time::sleep(t).await,
                None => std::future::pending().await,
            }
        };
        let status = tokio::select! {
            code = client.wait(&id) => JobStatus::Exited { code: code? },
            _ = timeout => {
                client.kill(&id).await?;
                JobStatus::TimedOut
            }
            _ = slot.cancel.cancelled() => {
                client.kill(&id).await?;
                JobStatus::BackendFailed { reason: "cancelled".into() }
            }
        };

        let logs = client.logs(&id).await?;
        tokio::fs::write(&slot.log_path, logs).await.map_err(|e| EngineError::Protocol(e.to_string()))?;

        for rel in &job.fetch_out {
            if let Some(bytes) = client.get_archive(&id, &join_container_path(&workdir, rel)).await? {
                let parent = Path::new(rel).parent().map(|p| slot.dir.join(p)).unwrap_or_else(|| slot.dir.clone());
                unpack(&bytes, &parent, 0).map_err(|e| EngineError::Protocol(e.to_string()))?;
            }
        }
        if job.capture_workspace {
            if let Some(bytes) = client.get_archive(&id, &workdir).await? {
                unpack(&bytes, &slot.dir, 1).map_err(|e| EngineError::Protocol(e.to_string()))?;
            }
        }
        Ok(status)
    }
    .await;

    if let Err(e) = client.remove(&id).await {
        tracing::warn!(container = %id, error = %e, "failed to remove job container");
    }
    result
}

async fn run_job(
    client: EngineClient,
    table: Arc<JobTable>,
    slot: Arc<JobSlot>,
    handle: JobHandle,
    job: ComputeJob,
    stage: Vec<u8>,
    admission: Admission,
    workdir: Option<String>,
) {
    let Some(_guard) = acquire(&table, admission, &slot).await else {
        slot.advance(JobStatus::BackendFailed { reason: "cancelled".into() });
        return;
    };
    let status = match drive(&client, &slot, &handle, &job, stage, workdir).await {
        Ok(status) => status,
        Err(e) => JobStatus::BackendFailed { reason: e.to_string() },
    };
    slot.advance(status);
}

#[async_trait]
impl Backend for ContainerBackend {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor {
            name: self.table.backend.clone(),
            kind: BackendKind::ContainerEngine,
            endpoint: Some(self.endpoint.clone()),
            max_concurrent_jobs: self.table.max_concurrent,
            active_jobs: self.table.running(),
            queued_jobs: self.table.queued(),
        }
    }

    async fn submit(&self, job: ComputeJob) -> Result<JobHandle, ComputeError> {
        job.validate()?;
        self.client.ping().await.map_err(|e| ComputeError::BackendUnreachable(e.to_string()))?;
        // Stage-in sources are captured now; the caller may replace them
        // as soon as submit returns.
        let items = job.stage_in.clone();
        let stage = tokio::task::spawn_blocking(move || stage_tar(&items))
            .await
            .map_err(|e| ComputeError::Io(std::io::Error::other(e.to_string())))??;
        let (handle, slot) = self.table.register()?;
        let admission = self.table.admit();
        tokio::spawn(run_job(
            self.client.clone(),
            self.table.clone(),
            slot,
            handle.clone(),
            job,
            stage,
            admission,
            self.workdir.clone(),
        ));
        Ok(handle)
    }

    async fn poll(&self, handle: &JobHandle) -> Result<JobStatus, ComputeError> {
        Ok(self.table.slot(handle)?.status())
    }

    async fn fetch_artifact(&self, handle: &JobHandle, path: &str) -> Result<Vec<u8>, ComputeError> {
        let file = self.table.artifact_path(handle, path)?;
        Ok(tokio::fs::read(file).await?)
    }

    async fn copy_artifact(&self, handle: &JobHandle, path: &str, dest: &Path) -> Result<u64, ComputeError> {
        let file = self.table.artifact_path(handle, path)?;
        Ok(tokio::fs::copy(file, dest).await?)
    }

    async fn fetch_log(&self, handle: &JobHandle) -> Result<String, ComputeError> {
        let slot = self.table.slot(handle)?;
        if !slot.status().is_terminal() {
            let id = slot.container_id.lock().unwrap().clone();
            if let Some(id) = id {
                if let Ok(bytes) = self.client.logs(&id).await {
                    return Ok(String::from_utf8_lossy(&bytes).into_owned());
                }
            }
        }
        let bytes = tokio::fs::read(&slot.log_path).await?;
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    async fn cancel(&self, handle: &JobHandle) -> Result<JobStatus, ComputeError> {
        self.table.cancel(handle).await
    }

    async fn export_workspace(&self, handle: &JobHandle, dest: &Path) -> Result<(), ComputeError> {
        self.table.export(handle, dest).await
    }

    async fn release(&self, handle: &JobHandle) -> Result<(), ComputeError> {
        self.table.release(handle).await
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_tar_layout() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("cfg"), "{}").unwrap();
        std::fs::create_dir_all(dir.path().join("tree/sub")).unwrap();
        std::fs::write(dir.path().join("tree/sub/f"), "x").unwrap();
        let tar = stage_tar(&[
            StageIn { source: dir.path().join("tree"), dest: ".".into() },
            StageIn { source: dir.path().join("cfg"), dest: "params/deep/app".into() },
        ])
        .unwrap();
        let out = tempfile::tempdir().unwrap();
        unpack(&tar, out.path(), 0).unwrap();
        assert_eq!(std::fs::read_to_string(out.path().join("params/deep/app")).unwrap(), "{}");
        assert_eq!(std::fs::read_to_string(out.path().join("sub/f")).unwrap(), "x");
    }

    #[test]
    fn unpack_strips_leading_component() {
        let mut b = tar::Builder::new(Vec::new());
        let mut h = tar::Header::new_gnu();
        h.set_size(2);
        h.set_mode(0o644);
        b.append_data(&mut h, "workspace/out/a.txt", &b"ok"[..]).unwrap();
        let bytes = b.into_inner().unwrap();
        let out = tempfile::tempdir().unwrap();
        unpack(&bytes, out.path(), 1).unwrap();
        assert_eq!(std::fs::read(out.path().join("out/a.txt")).unwrap(), b"ok");
    }

    #[test]
    fn container_paths() {
        assert_eq!(join_container_path("/work/", "a/b"), "/work/a/b");
        assert_eq!(join_container_path("/", "a"), "/a");
        assert_eq!(join_container_path("/w", "."), "/w");
    }
}
