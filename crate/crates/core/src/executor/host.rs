//! Sandboxed task execution on a device.
//!
//! Layout per task: `<work>/<task_id>/{manifest, app/, logs/stdout, logs/stderr}`.
//! Nothing here isolates tasks; accounting is advisory via the sufferance
//! metric.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};

use thiserror::Error;

use super::archive::{self, ArchiveError, ArchiveManifest};
use super::sim_task::{behavior_for_attempt, SimOutcome, SimTaskRun};
use crate::domain::{ArtifactRef, RuntimeKind, TaskId, TaskSpec, TaskState, Tick};

#[derive(Debug, Error)]
pub enum StageError {
    #[error("archive hash mismatch: expected {expected}, got {actual}")]
    HashMismatch { expected: String, actual: String },
    #[error("not enough disk: need {needed_mb} MB, {free_mb} MB free")]
    NoSpace { needed_mb: u64, free_mb: u64 },
    #[error("missing dependency `{0}`")]
    MissingDependency(String),
    #[error("task {0} already has a sandbox")]
    AlreadyStaged(TaskId),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("no sandbox for task {0}")]
    NotStaged(TaskId),
    #[error("task {0} is not runnable in state {1}")]
    NotRunnable(TaskId, TaskState),
    #[error("failed to spawn task {task}: {reason}")]
    SpawnFailure { task: TaskId, reason: String },
}

/// Interpreter an executor needs for each runtime kind.
pub fn interpreter(runtime: RuntimeKind) -> &'static str {
    match runtime {
        RuntimeKind::JvmApp => "java",
        RuntimeKind::PythonApp => "python3",
        RuntimeKind::NodejsApp | RuntimeKind::BrowserScript => "node",
        RuntimeKind::ShellScript => "sh",
        RuntimeKind::GroovyApp => "groovy",
        RuntimeKind::SimTask => "sim",
    }
}

#[derive(Debug, Clone)]
pub struct ExecutorConfig {
    pub work_dir: PathBuf,
    /// Runtime and dependency names present on this host.
    pub available: BTreeSet<String>,
    pub disk_capacity_mb: u64,
}

impl ExecutorConfig {
    /// Probes the host `PATH` for interpreters. `sim` is never detected; add
    /// it explicitly for simulated hosts.
    pub fn detect(work_dir: impl Into<PathBuf>, disk_capacity_mb: u64) -> Self {
        let path = std::env::var_os("PATH").unwrap_or_default();
        let mut available = BTreeSet::new();
        for kind in RuntimeKind::ALL {
            let bin = interpreter(kind);
            if bin != "sim" && std::env::split_paths(&path).any(|p| p.join(bin).is_file()) {
                available.insert(bin.to_string());
            }
        }
        Self {
            work_dir: work_dir.into(),
            available,
            disk_capacity_mb,
        }
    }
}

#[derive(Debug)]
pub struct Sandbox {
    pub task_id: TaskId,
    pub dir: PathBuf,
    pub manifest: ArchiveManifest,
    pub runtime: RuntimeKind,
    pub size_mb: u64,
    pub state: TaskState,
    pub exit_status: Option<i32>,
    attempt: u32,
}

impl Sandbox {
    pub fn app_dir(&self) -> PathBuf {
        self.dir.join("app")
    }

    pub fn stdout_path(&self) -> PathBuf {
        self.dir.join("logs").join("stdout")
    }

    pub fn stderr_path(&self) -> PathBuf {
        self.dir.join("logs").join("stderr")
    }
}

enum Execution {
    Process(Child),
    Scripted(SimTaskRun),
}

/// Status change reported by the executor host.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ExecEvent {
    pub task_id: TaskId,
    pub state: TaskState,
    pub exit_status: Option<i32>,
    pub reason: Option<String>,
}

pub struct ExecutorHost {
    config: ExecutorConfig,
    sandboxes: BTreeMap<TaskId, Sandbox>,
    running: BTreeMap<TaskId, Execution>,
}

impl ExecutorHost {
    pub fn new(config: ExecutorConfig) -> Self {
        Self {
            config,
            sandboxes: BTreeMap::new(),
            running: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &ExecutorConfig {
        &self.config
    }

    pub fn sandbox(&self, task: &TaskId) -> Option<&Sandbox> {
        self.sandboxes.get(task)
    }

    pub fn sandboxes(&self) -> impl Iterator<Item = &Sandbox> {
        self.sandboxes.values()
    }

    pub fn free_disk_mb(&self) -> u64 {
        let used: u64 = self.sandboxes.values().map(|s| s.size_mb).sum();
        self.config.disk_capacity_mb.saturating_sub(used)
    }

    /// Verifies, unpacks and registers a task's archive.
    pub fn stage(
        &mut self,
        task_id: &TaskId,
        spec: &TaskSpec,
        archive_bytes: &[u8],
        attempt: u32,
    ) -> Result<&Sandbox, StageError> {
        if self.sandboxes.contains_key(task_id) {
            return Err(StageError::AlreadyStaged(task_id.clone()));
        }
        let actual = ArtifactRef::of(archive_bytes);
        if actual.hash != spec.artifact.hash {
            return Err(StageError::HashMismatch {
                expected: spec.artifact.hash.clone(),
                actual: actual.hash,
            });
        }
        let (manifest, unpacked) = archive::inspect(archive_bytes)?;
        let needed_mb = spec.required.disk_mb.max(unpacked.div_ceil(1 << 20));
        let free_mb = self.free_disk_mb();
        if needed_mb > free_mb {
            return Err(StageError::NoSpace { needed_mb, free_mb });
        }
        let runtime_bin = interpreter(spec.runtime);
        if !self.config.available.contains(runtime_bin) {
            return Err(StageError::MissingDependency(runtime_bin.to_string()));
        }
        if let Some(dep) = manifest
            .dependencies
            .iter()
            .find(|d| !self.config.available.contains(&d.name))
        {
            return Err(StageError::MissingDependency(dep.name.clone()));
        }

        let dir = self.config.work_dir.join(task_id.as_str());
        fs::create_dir_all(dir.join("logs"))?;
        archive::unpack(archive_bytes, &dir.join("app"))?;
        fs::write(dir.join(archive::MANIFEST_NAME), serde_json::to_string(&manifest).map_err(ArchiveError::from)?)?;
        File::create(dir.join("logs").join("stdout"))?;
        File::create(dir.join("logs").join("stderr"))?;
        let sandbox = Sandbox {
            task_id: task_id.clone(),
            dir,
            manifest,
            runtime: spec.runtime,
            size_mb: needed_mb,
            state: TaskState::Staging,
            exit_status: None,
            attempt,
        };
        Ok(self.sandboxes.entry(task_id.clone()).or_insert(sandbox))
    }

    /// Starts a staged task. A spawn failure marks the sandbox `Failed`.
    pub fn run(&mut self, task_id: &TaskId, spec: &TaskSpec, now: Tick) -> Result<ExecEvent, RunError> {
        let sandbox = self
            .sandboxes
            .get_mut(task_id)
            .ok_or_else(|| RunError::NotStaged(task_id.clone()))?;
        if sandbox.state != TaskState::Staging {
            return Err(RunError::NotRunnable(task_id.clone(), sandbox.state));
        }
        let spawned = match sandbox.runtime {
            RuntimeKind::SimTask => behavior_for_attempt(&spec.entry, sandbox.attempt)
                .map(|b| Execution::Scripted(SimTaskRun::new(b, now)))
                .map_err(|e| e.to_string()),
            kind => spawn(kind, sandbox, spec).map(Execution::Process),
        };
        match spawned {
            Ok(exec) => {
                sandbox.state = TaskState::Running;
                self.running.insert(task_id.clone(), exec);
                Ok(ExecEvent {
                    task_id: task_id.clone(),
                    state: TaskState::Running,
                    exit_status: None,
                    reason: None,
                })
            }
            Err(reason) => {
                sandbox.state = TaskState::Failed;
                let _ = fs::write(sandbox.stderr_path(), reason.as_bytes());
                Err(RunError::SpawnFailure {
                    task: task_id.clone(),
                    reason,
                })
            }
        }
    }

    /// Collects exits since the last poll.
    pub fn poll(&mut self, now: Tick) -> Vec<ExecEvent> {
        let mut done = Vec::new();
        for (task_id, exec) in self.running.iter_mut() {
            let outcome = match exec {
                Execution::Process(child) => match child.try_wait() {
                    Ok(Some(status)) => Some(status.code()),
                    Ok(None) => None,
                    Err(_) => Some(None),
                },
                Execution::Scripted(run) => run.outcome_at(now).map(|o| match o {
                    SimOutcome::Exited(code) => Some(code),
                    SimOutcome::Crashed => None,
                }),
            };
            if let Some(code) = outcome {
                done.push((task_id.clone(), code));
            }
        }
        let mut events = Vec::with_capacity(done.len());
        for (task_id, code) in done {
            self.running.remove(&task_id);
            let state = if code == Some(0) {
                TaskState::Finished
            } else {
                TaskState::Failed
            };
            if let Some(sb) = self.sandboxes.get_mut(&task_id) {
                sb.state = state;
                sb.exit_status = code;
            }
            events.push(ExecEvent {
                task_id,
                state,
                exit_status: code,
                reason: None,
            });
        }
        events
    }

    /// Kills a running task and its process group, then reaps it.
    pub fn kill(&mut self, task_id: &TaskId) -> Option<ExecEvent> {
        let exec = self.running.remove(task_id)?;
        if let Execution::Process(mut child) = exec {
            kill_tree(&mut child);
        }
        let sandbox = self.sandboxes.get_mut(task_id)?;
        sandbox.state = TaskState::Killed;
        Some(ExecEvent {
            task_id: task_id.clone(),
            state: TaskState::Killed,
            exit_status: None,
            reason: None,
        })
    }

    pub fn is_live(&self, task_id: &TaskId) -> bool {
        self.running.contains_key(task_id)
    }

    pub fn live_tasks(&self) -> Vec<TaskId> {
        self.running.keys().cloned().collect()
    }

    /// Removes the sandbox once its terminal status has been acknowledged.
    pub fn acknowledge(&mut self, task_id: &TaskId) -> std::io::Result<bool> {
        let terminal = self
            .sandboxes
            .get(task_id)
            .is_some_and(|s| !matches!(s.state, TaskState::Staging | TaskState::Running));
        if !terminal {
            return Ok(false);
        }
        let sandbox = self.sandboxes.remove(task_id).expect("checked above");
        if sandbox.dir.exists() {
            fs::remove_dir_all(&sandbox.dir)?;
        }
        Ok(true)
    }

    pub fn logs(&self, task_id: &TaskId) -> Option<(String, String)> {
        let sb = self.sandboxes.get(task_id)?;
        let read = |p: &Path| fs::read_to_string(p).unwrap_or_default();
        Some((read(&sb.stdout_path()), read(&sb.stderr_path())))
    }

    /// Kills everything; used when the host shuts down.
    pub fn shutdown(&mut self) {
        let ids: Vec<TaskId> = self.running.keys().cloned().collect();
        for id in ids {
            self.kill(&id);
        }
    }
}

impl Drop for ExecutorHost {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn spawn(kind: RuntimeKind, sandbox: &Sandbox, spec: &TaskSpec) -> Result<Child, String> {
    let app = sandbox.app_dir();
    let mut cmd = match kind {
        RuntimeKind::JvmApp if spec.entry.ends_with(".jar") => {
            let mut c = Command::new("java");
            c.arg("-jar").arg(&spec.entry);
            c
        }
        RuntimeKind::JvmApp => {
            let mut c = Command::new("java");
            c.arg("-cp").arg(".").arg(&spec.entry);
            c
        }
        other => {
            let mut c = Command::new(interpreter(other));
            c.arg(&spec.entry);
            c
        }
    };
    cmd.args(&spec.args).current_dir(&app).stdin(Stdio::null());
    let stdout = File::create(sandbox.stdout_path()).map_err(|e| e.to_string())?;
    let stderr = File::create(sandbox.stderr_path()).map_err(|e| e.to_string())?;
    cmd.stdout(stdout).stderr(stderr);
    #[cfg(unix)]
    {
        use std::os::unix::process::CommandExt;
        cmd.process_group(0);
    }
    cmd.spawn().map_err(|e| e.to_string())
}

fn kill_tree(child: &mut Child) {
    #[cfg(unix)]
    {
        // The child leads its own process group.
        let pgid = child.id() as i32;
        unsafe {
            libc::kill(-pgid, libc::SIGKILL);
        }
    }
    let _ = child.kill();
    let _ = child.wait();
}
