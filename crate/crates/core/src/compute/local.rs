//! Local-process back-end: runs each job through `sh -c` inside its own
//! sandbox directory with a scrubbed environment. The image reference is
//! not used.

use std::path::{Path, PathBuf};
use std::process::Stdio;
use std::sync::Arc;

use async_trait::async_trait;

use super::slot::{acquire, JobSlot, JobTable};
use super::{
    copy_tree, Backend, BackendDescriptor, BackendKind, ComputeError, ComputeJob, JobHandle,
    JobStatus, StageIn,
};

pub struct LocalBackend {
    table: Arc<JobTable>,
}

impl LocalBackend {
    pub fn new(name: &str, work_dir: impl Into<PathBuf>, max_concurrent_jobs: usize) -> Result<Self, ComputeError> {
        let table = JobTable::new(name, work_dir.into(), max_concurrent_jobs.max(1))?;
        Ok(LocalBackend { table: Arc::new(table) })
    }

    pub fn work_dir(&self) -> &Path {
        &self.table.work_dir
    }
}

pub(crate) fn stage_into(dir: &Path, stage_in: &[StageIn]) -> Result<(), ComputeError> {
    for item in stage_in {
        let fail = |e: std::io::Error| ComputeError::StageInFailure {
            path: item.source.display().to_string(),
            reason: e.to_string(),
        };
        let target = if item.dest == "." { dir.to_path_buf() } else { dir.join(&item.dest) };
        let meta = std::fs::metadata(&item.source).map_err(fail)?;
        if meta.is_dir() {
            copy_tree(&item.source, &target).map_err(fail)?;
        } else {
            if let Some(parent) = target.parent() {
                std::fs::create_dir_all(parent).map_err(fail)?;
            }
            std::fs::copy(&item.source, &target).map_err(fail)?;
        }
    }
    Ok(())
}

/// Environment handed to job processes: PATH, HOME pointing at the
/// sandbox, and the service's own `SUNRISE_*` variables minus secrets.
pub(crate) fn job_env(sandbox: &Path, handle: &JobHandle, job: &ComputeJob) -> Vec<(String, String)> {
    let mut env: Vec<(String, String)> = std::env::vars()
        .filter(|(k, _)| k.starts_with("SUNRISE_") && k != "SUNRISE_AUTH_TOKEN")
        .collect();
    env.push(("PATH".into(), std::env::var("PATH").unwrap_or_else(|_| "/usr/local/bin:/usr/bin:/bin".into())));
    env.push(("HOME".into(), sandbox.display().to_string()));
    env.push(("SUNRISE_JOB_ID".into(), handle.job_id.clone()));
    env.push(("SUNRISE_PHASE".into(), job.phase.to_string()));
    env.push(("SUNRISE_EXPERIMENT_ID".into(), job.experiment.to_string()));
    env
}

fn kill_group(pid: Option<u32>) {
    if let Some(pid) = pid {
        // The child leads its own process group, so this also reaches
        // anything the shell spawned.
        unsafe {
            libc::killpg(pid as libc::pid_t, libc::SIGKILL);
        }
    }
}

fn exit_code(status: std::process::ExitStatus) -> i32 {
    use std::os::unix::process::ExitStatusExt;
    status.code().or_else(|| status.signal().map(|s| 128 + s)).unwrap_or(-1)
}

async fn run_job(table: Arc<JobTable>, slot: Arc<JobSlot>, handle: JobHandle, job: ComputeJob, admission: super::slot::Admission) {
    let Some(_guard) = acquire(&table, admission, &slot).await else {
        slot.advance(JobStatus::BackendFailed { reason: "cancelled".into() });
        return;
    };
    tracing::debug!(job = %handle.job_id, image = %job.image_ref, "local back-end ignores image reference");

    let log = match std::fs::OpenOptions::new().append(true).open(&slot.log_path) {
        Ok(f) => f,
        Err(e) => {
            slot.advance(JobStatus::BackendFailed { reason: format!("cannot open log: {e}") });
            return;
        }
    };
    let stderr = match log.try_clone() {
        Ok(f) => f,
        Err(e) => {
            slot.advance(JobStatus::BackendFailed { reason: format!("cannot open log: {e}") });
            return;
        }
    };

    let mut cmd = tokio::process::Command::new("sh");
    cmd.arg("-c")
        .arg(&job.command)
        .current_dir(&slot.dir)
        .env_clear()
        .envs(job_env(&slot.dir, &handle, &job))
        .stdin(Stdio::null())
        .stdout(Stdio::from(log))
        .stderr(Stdio::from(stderr))
        .process_group(0)
        .kill_on_drop(true);

    let mut child = match cmd.spawn() {
        Ok(c) => c,
        Err(e) => {
            slot.advance(JobStatus::BackendFailed { reason: format!("spawn failed: {e}") });
            return;
        }
    };
    let pid = child.id();
    slot.advance(JobStatus::Running);

    let timeout = async {
        match job.timeout {
            Some(t) => tokio::time::sleep(t).await,
            None => std::future::pending().await,
        }
    };

    let outcome = tokio::select! {
        res = child.wait() => match res {
            Ok(status) => JobStatus::Exited { code: exit_code(status) },
            Err(e) => JobStatus::BackendFailed { reason: format!("wait failed: {e}") },
        },
        _ = timeout => {
            kill_group(pid);
            let _ = child.wait().await;
            JobStatus::TimedOut
        }
        _ = slot.cancel.cancelled() => {
            kill_group(pid);
            let _ = child.wait().await;
            JobStatus::BackendFailed { reason: "cancelled".into() }
        }
    };
    // Reap stragglers that escaped the shell's lifetime.
    kill_group(pid);
    slot.advance(outcome);
}

#[async_trait]
impl Backend for LocalBackend {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor {
            name: self.table.backend.clone(),
            kind: BackendKind::LocalProcess,
            endpoint: None,
            max_concurrent_jobs: self.table.max_concurrent,
            active_jobs: self.table.running(),
            queued_jobs: self.table.queued(),
        }
    }

    async fn submit(&self, job: ComputeJob) -> Result<JobHandle, ComputeError> {
        job.validate()?;
        let (handle, slot) = self.table.register()?;
        let staged = {
            let dir = slot.dir.clone();
            let items = job.stage_in.clone();
            tokio::task::spawn_blocking(move || stage_into(&dir, &items))
                .await
                .map_err(|e| ComputeError::Io(std::io::Error::other(e)))?
        };
        if let Err(e) = staged {
            self.table.unregister(&handle);
            let _ = std::fs::remove_dir_all(&slot.dir);
            let _ = std::fs::remove_file(&slot.log_path);
            return Err(e);
        }
        let admission = self.table.admit();
        tokio::spawn(run_job(self.table.clone(), slot, handle.clone(), job, admission));
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
    use crate::experiment::ExperimentId;
    use crate::sysdef::Phase;
    use std::time::{Duration, Instant};

    fn job(cmd: &str) -> ComputeJob {
        ComputeJob {
            experiment: ExperimentId::new(),
            phase: Phase::Run,
            image_ref: "ignored".into(),
            command: cmd.into(),
            stage_in: vec![],
            fetch_out: vec![],
            capture_workspace: false,
            timeout: None,
        }
    }

    async fn wait(b: &LocalBackend, h: &JobHandle) -> JobStatus {
        loop {
            let s = b.poll(h).await.unwrap();
            if s.is_terminal() {
                return s;
            }
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
    }

    fn backend(max: usize) -> (tempfile::TempDir, LocalBackend) {
        let dir = tempfile::tempdir().unwrap();
        let b = LocalBackend::new("local", dir.path().join("work"), max).unwrap();
        (dir, b)
    }

    #[tokio::test]
    async fn exit_codes_pass_through() {
        let (_d, b) = backend(4);
        let h = b.submit(job("true")).await.unwrap();
        let first = b.poll(&h).await.unwrap();
        assert!(matches!(first, JobStatus::Queued | JobStatus::Running | JobStatus::Exited { .. }));
        assert_eq!(wait(&b, &h).await, JobStatus::Exited { code: 0 });
        let h = b.submit(job("exit 3")).await.unwrap();
        assert_eq!(wait(&b, &h).await, JobStatus::Exited { code: 3 });
        // Terminal status is stable.
        assert_eq!(b.poll(&h).await.unwrap(), JobStatus::Exited { code: 3 });
    }

    #[tokio::test]
    async fn unknown_handle() {
        let (_d, b) = backend(1);
        let forged = JobHandle { job_id: "nope".into(), backend: "local".into() };
        assert!(matches!(b.poll(&forged).await, Err(ComputeError::UnknownJob(_))));
        assert!(matches!(b.fetch_log(&forged).await, Err(ComputeError::UnknownJob(_))));
        assert!(matches!(b.cancel(&forged).await, Err(ComputeError::UnknownJob(_))));
    }

    #[tokio::test]
    async fn stage_in_precedes_command() {
        let (d, b) = backend(1);
        let src = d.path().join("src");
        std::fs::create_dir_all(&src).unwrap();
        std::fs::write(src.join("syscfg.json"), "{}\n").unwrap();
        std::fs::write(src.join("app.bin"), [1u8, 2, 3]).unwrap();
        let mut j = job("ls -R > listing.txt");
        j.stage_in = vec![
            StageIn { source: src.join("syscfg.json"), dest: "syscfg.json".into() },
            StageIn { source: src.join("app.bin"), dest: "params/app".into() },
        ];
        let h = b.submit(j).await.unwrap();
        assert!(wait(&b, &h).await.succeeded());
        let listing = String::from_utf8(b.fetch_artifact(&h, "listing.txt").await.unwrap()).unwrap();
        assert!(listing.contains("syscfg.json"));
        assert!(listing.contains("params:") && listing.contains("app"));
    }

    #[tokio::test]
    async fn stage_in_failure_is_reported() {
        let (d, b) = backend(1);
        let mut j = job("true");
        j.stage_in = vec![StageIn { source: d.path().join("missing"), dest: "x".into() }];
        assert!(matches!(b.submit(j).await, Err(ComputeError::StageInFailure { .. })));
    }

    #[tokio::test]
    async fn artifacts_and_logs() {
        let (_d, b) = backend(2);
        let h = b.submit(job("printf ok > out.txt; echo hi; echo err >&2")).await.unwrap();
        assert!(wait(&b, &h).await.succeeded());
        assert_eq!(b.fetch_artifact(&h, "out.txt").await.unwrap(), b"ok");
        assert!(matches!(b.fetch_artifact(&h, "missing.vcd").await, Err(ComputeError::ArtifactNotFound(_))));
        assert!(b.fetch_artifact(&h, "../x").await.is_err());
        let log = b.fetch_log(&h).await.unwrap();
        assert!(log.lines().any(|l| l == "hi"));
        assert!(log.contains("err"));

        let h = b.submit(job("true")).await.unwrap();
        wait(&b, &h).await;
        assert_eq!(b.fetch_log(&h).await.unwrap(), "");
    }

    #[tokio::test]
    async fn running_job_artifacts_are_not_fetchable() {
        let (_d, b) = backend(1);
        let h = b.submit(job("touch a; sleep 5")).await.unwrap();
        tokio::time::sleep(Duration::from_millis(200)).await;
        assert!(matches!(b.fetch_artifact(&h, "a").await, Err(ComputeError::JobNotTerminal)));
        b.cancel(&h).await.unwrap();
    }

    #[tokio::test]
    async fn log_grows_monotonically() {
        let (_d, b) = backend(1);
        let h = b.submit(job("echo one; sleep 0.4; echo two; sleep 0.4")).await.unwrap();
        tokio::time::sleep(Duration::from_millis(200)).await;
        let early = b.fetch_log(&h).await.unwrap();
        wait(&b, &h).await;
        let late = b.fetch_log(&h).await.unwrap();
        assert!(late.starts_with(&early));
        assert!(early.contains("one") && late.contains("two"));
    }

    #[tokio::test]
    async fn timeout_is_enforced() {
        let (_d, b) = backend(1);
        let mut j = job("sleep 60");
        j.timeout = Some(Duration::from_secs(1));
        let start = Instant::now();
        let h = b.submit(j).await.unwrap();
        assert_eq!(wait(&b, &h).await, JobStatus::TimedOut);
        assert!(start.elapsed() < Duration::from_secs(2));
    }

    #[tokio::test]
    async fn cancel_semantics() {
        let (_d, b) = backend(1);
        let h = b.submit(job("sleep 60")).await.unwrap();
        tokio::time::sleep(Duration::from_millis(100)).await;
        let start = Instant::now();
        let cancelled = JobStatus::BackendFailed { reason: "cancelled".into() };
        assert_eq!(b.cancel(&h).await.unwrap(), cancelled);
        assert!(start.elapsed() < Duration::from_secs(2));
        assert_eq!(b.cancel(&h).await.unwrap(), cancelled);

        let h = b.submit(job("true")).await.unwrap();
        wait(&b, &h).await;
        assert_eq!(b.cancel(&h).await.unwrap(), JobStatus::Exited { code: 0 });
    }

    #[tokio::test]
    async fn queue_respects_limit_and_cancel() {
        let (_d, b) = backend(1);
        let first = b.submit(job("sleep 60")).await.unwrap();
        let second = b.submit(job("true")).await.unwrap();
        tokio::time::sleep(Duration::from_millis(100)).await;
        assert_eq!(b.poll(&second).await.unwrap(), JobStatus::Queued);
        let d = b.descriptor();
        assert_eq!((d.active_jobs, d.queued_jobs), (1, 1));
        b.cancel(&first).await.unwrap();
        assert_eq!(wait(&b, &second).await, JobStatus::Exited { code: 0 });

        let blocker = b.submit(job("sleep 60")).await.unwrap();
        let queued = b.submit(job("true")).await.unwrap();
        let cancelled = b.cancel(&queued).await.unwrap();
        assert_eq!(cancelled, JobStatus::BackendFailed { reason: "cancelled".into() });
        b.cancel(&blocker).await.unwrap();
        tokio::time::sleep(Duration::from_millis(50)).await;
        let d = b.descriptor();
        assert_eq!((d.active_jobs, d.queued_jobs), (0, 0));
    }

    #[tokio::test]
    async fn workspaces_are_isolated() {
        let (_d, b) = backend(2);
        let a = b.submit(job("touch sentinel; sleep 0.3")).await.unwrap();
        let c = b.submit(job("sleep 0.1; ls -a > listing.txt")).await.unwrap();
        wait(&b, &a).await;
        wait(&b, &c).await;
        let listing = String::from_utf8(b.fetch_artifact(&c, "listing.txt").await.unwrap()).unwrap();
        assert!(!listing.contains("sentinel"));
    }

    #[tokio::test]
    async fn environment_is_scrubbed() {
        let (_d, b) = backend(1);
        let h = b.submit(job("env > env.txt")).await.unwrap();
        wait(&b, &h).await;
        let env = String::from_utf8(b.fetch_artifact(&h, "env.txt").await.unwrap()).unwrap();
        for line in env.lines() {
            let key = line.split('=').next().unwrap();
            assert!(
                ["PATH", "HOME", "PWD", "SHLVL", "_", "OLDPWD"].contains(&key) || key.starts_with("SUNRISE_"),
                "unexpected variable {key}"
            );
        }
        assert!(env.contains("SUNRISE_PHASE=run"));
    }

    #[tokio::test]
    async fn export_and_release() {
        let (d, b) = backend(1);
        let h = b.submit(job("mkdir -p out && echo built > out/marker")).await.unwrap();
        wait(&b, &h).await;
        let dest = d.path().join("export");
        b.export_workspace(&h, &dest).await.unwrap();
        assert_eq!(std::fs::read_to_string(dest.join("out/marker")).unwrap(), "built\n");
        b.release(&h).await.unwrap();
        assert!(matches!(b.poll(&h).await, Err(ComputeError::UnknownJob(_))));
    }
}
