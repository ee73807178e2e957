//! Job bookkeeping shared by the back-ends: status cells, cancellation,
//! and FIFO admission up to the concurrency limit.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use tokio::sync::{watch, OwnedSemaphorePermit, Semaphore};
use tokio_util::sync::CancellationToken;

use super::{ComputeError, JobHandle, JobStatus};

pub(crate) struct JobSlot {
    pub dir: PathBuf,
    pub log_path: PathBuf,
    pub cancel: CancellationToken,
    status: watch::Sender<JobStatus>,
    pub container_id: Mutex<Option<String>>,
}

impl JobSlot {
    pub fn status(&self) -> JobStatus {
        self.status.borrow().clone()
    }

    /// Moves the status forward; regressions and changes after a terminal
    /// status are ignored.
    pub fn advance(&self, next: JobStatus) {
        self.status.send_if_modified(|cur| {
            if cur.is_terminal() || next.rank() < cur.rank() || *cur == next {
                false
            } else {
                *cur = next;
                true
            }
        });
    }

    pub async fn wait_terminal(&self) -> JobStatus {
        let mut rx = self.status.subscribe();
        let status = rx.wait_for(|s| s.is_terminal()).await.map(|s| s.clone());
        status.unwrap_or_else(|_| self.status())
    }
}

/// Decrements the running gauge and frees the slot permit when dropped.
pub(crate) struct RunningGuard {
    _permit: OwnedSemaphorePermit,
    running: Arc<AtomicUsize>,
}

impl Drop for RunningGuard {
    fn drop(&mut self) {
        self.running.fetch_sub(1, Ordering::SeqCst);
    }
}

pub(crate) enum Admission {
    Ready(RunningGuard),
    Queued,
}

pub(crate) struct JobTable {
    pub backend: String,
    pub work_dir: PathBuf,
    pub max_concurrent: usize,
    jobs: Mutex<HashMap<String, Arc<JobSlot>>>,
    running: Arc<AtomicUsize>,
    queued: AtomicUsize,
    semaphore: Arc<Semaphore>,
}

impl JobTable {
    pub fn new(backend: &str, work_dir: PathBuf, max_concurrent: usize) -> std::io::Result<Self> {
        std::fs::create_dir_all(&work_dir)?;
        Ok(JobTable {
            backend: backend.to_string(),
            work_dir,
            max_concurrent,
            jobs: Mutex::new(HashMap::new()),
            running: Arc::new(AtomicUsize::new(0)),
            queued: AtomicUsize::new(0),
            semaphore: Arc::new(Semaphore::new(max_concurrent)),
        })
    }

    pub fn running(&self) -> usize {
        self.running.load(Ordering::SeqCst)
    }

    pub fn queued(&self) -> usize {
        self.queued.load(Ordering::SeqCst)
    }

    /// Registers a new job with an empty sandbox directory and log file.
    pub fn register(&self) -> std::io::Result<(JobHandle, Arc<JobSlot>)> {
        let id = uuid::Uuid::new_v4().simple().to_string();
        let dir = self.work_dir.join(&id);
        let log_path = self.work_dir.join(format!("{id}.log"));
        std::fs::create_dir_all(&dir)?;
        std::fs::File::create(&log_path)?;
        let (tx, _) = watch::channel(JobStatus::Queued);
        let slot = Arc::new(JobSlot {
            dir,
            log_path,
            cancel: CancellationToken::new(),
            status: tx,
            container_id: Mutex::new(None),
        });
        self.jobs.lock().unwrap().insert(id.clone(), slot.clone());
        Ok((JobHandle { job_id: id, backend: self.backend.clone() }, slot))
    }

    pub fn unregister(&self, handle: &JobHandle) {
        self.jobs.lock().unwrap().remove(&handle.job_id);
    }

    pub fn slot(&self, handle: &JobHandle) -> Result<Arc<JobSlot>, ComputeError> {
        if handle.backend != self.backend {
            return Err(ComputeError::UnknownJob(handle.job_id.clone()));
        }
        self.jobs
            .lock()
            .unwrap()
            .get(&handle.job_id)
            .cloned()
            .ok_or_else(|| ComputeError::UnknownJob(handle.job_id.clone()))
    }

    /// Takes a free slot immediately if one exists, otherwise joins the queue.
    pub fn admit(&self) -> Admission {
        match self.semaphore.clone().try_acquire_owned() {
            Ok(permit) => {
                self.running.fetch_add(1, Ordering::SeqCst);
                Admission::Ready(RunningGuard { _permit: permit, running: self.running.clone() })
            }
            Err(_) => {
                self.queued.fetch_add(1, Ordering::SeqCst);
                Admission::Queued
            }
        }
    }

    /// Waits in FIFO order for a slot. Returns `None` when cancelled first.
    pub async fn wait_admission(
        semaphore: Arc<Semaphore>,
        running: Arc<AtomicUsize>,
        queued: &AtomicUsize,
        cancel: &CancellationToken,
    ) -> Option<RunningGuard> {
        let permit = tokio::select! {
            p = semaphore.acquire_owned() => p.ok(),
            _ = cancel.cancelled() => None,
        };
        queued.fetch_sub(1, Ordering::SeqCst);
        let permit = permit?;
        running.fetch_add(1, Ordering::SeqCst);
        Some(RunningGuard { _permit: permit, running })
    }

    pub fn semaphore(&self) -> Arc<Semaphore> {
        self.semaphore.clone()
    }

    pub fn running_gauge(&self) -> Arc<AtomicUsize> {
        self.running.clone()
    }

    pub fn queued_gauge(&self) -> &AtomicUsize {
        &self.queued
    }
}

/// Resolves an admission into a running slot, waiting in the queue when
/// needed. `None` means the job was cancelled while queued.
pub(crate) async fn acquire(table: &JobTable, admission: Admission, slot: &JobSlot) -> Option<RunningGuard> {
    match admission {
        Admission::Ready(guard) => Some(guard),
        Admission::Queued => {
            JobTable::wait_admission(table.semaphore(), table.running_gauge(), table.queued_gauge(), &slot.cancel)
                .await
        }
    }
}

impl JobTable {
    /// Host path of a workspace file of a terminated job.
    pub fn artifact_path(&self, handle: &JobHandle, path: &str) -> Result<PathBuf, ComputeError> {
        let slot = self.slot(handle)?;
        if !slot.status().is_terminal() {
            return Err(ComputeError::JobNotTerminal);
        }
        super::resolve_inside(&slot.dir, path)
    }

    pub async fn export(&self, handle: &JobHandle, dest: &std::path::Path) -> Result<(), ComputeError> {
        let slot = self.slot(handle)?;
        if !slot.status().is_terminal() {
            return Err(ComputeError::JobNotTerminal);
        }
        let src = slot.dir.clone();
        let dest = dest.to_path_buf();
        tokio::task::spawn_blocking(move || super::copy_tree(&src, &dest))
            .await
            .map_err(|e| ComputeError::Io(std::io::Error::other(e)))??;
        Ok(())
    }

    pub async fn release(&self, handle: &JobHandle) -> Result<(), ComputeError> {
        let slot = self.slot(handle)?;
        if !slot.status().is_terminal() {
            return Err(ComputeError::JobNotTerminal);
        }
        self.unregister(handle);
        let _ = tokio::fs::remove_dir_all(&slot.dir).await;
        let _ = tokio::fs::remove_file(&slot.log_path).await;
        Ok(())
    }

    pub async fn cancel(&self, handle: &JobHandle) -> Result<JobStatus, ComputeError> {
        let slot = self.slot(handle)?;
        let current = slot.status();
        if current.is_terminal() {
            return Ok(current);
        }
        slot.cancel.cancel();
        Ok(slot.wait_terminal().await)
    }
}
