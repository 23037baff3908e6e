//! Device-tier task execution.

pub mod archive;
mod host;
mod sim;
pub mod sim_task;
mod sufferance;

use serde::{Deserialize, Serialize};

use crate::domain::{TaskId, TaskSpec, TaskState, Tick};

pub use host::{interpreter, ExecEvent, ExecutorConfig, ExecutorHost, RunError, Sandbox, StageError};
pub use sim::SimExecutor;
pub use sufferance::{sufferance, MaxUtilization, SufferanceMetric, SufferanceModel, ZeroCapacity};

/// Captured output of one task.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskLogs {
    pub stdout: String,
    pub stderr: String,
}

pub struct LaunchRequest<'a> {
    pub task_id: &'a TaskId,
    pub spec: &'a TaskSpec,
    pub archive: Option<&'a [u8]>,
    /// Zero-based launch attempt.
    pub attempt: u32,
}

/// What a device uses to run tasks: real processes or scripted ones.
pub trait TaskRunner {
    /// Stages and starts a task. Returns `Running`, or `Failed` when staging
    /// or spawning fails.
    fn launch(&mut self, req: LaunchRequest<'_>, now: Tick) -> ExecEvent;
    fn poll(&mut self, now: Tick) -> Vec<ExecEvent>;
    fn kill(&mut self, task_id: &TaskId) -> Option<ExecEvent>;
    fn live(&self) -> Vec<TaskId>;
    /// Drops the sandbox of a task whose terminal status was delivered.
    fn acknowledge(&mut self, task_id: &TaskId);
    fn logs(&self, task_id: &TaskId) -> Option<TaskLogs>;
    fn kill_all(&mut self) -> Vec<ExecEvent> {
        self.live().iter().filter_map(|t| self.kill(t)).collect()
    }
}

fn failed(task_id: &TaskId, reason: String) -> ExecEvent {
    ExecEvent {
        task_id: task_id.clone(),
        state: TaskState::Failed,
        exit_status: None,
        reason: Some(reason),
    }
}

impl TaskRunner for ExecutorHost {
    fn launch(&mut self, req: LaunchRequest<'_>, now: Tick) -> ExecEvent {
        if self.is_live(req.task_id) {
            return failed(req.task_id, "task already running here".into());
        }
        // a previous attempt may still hold an unacknowledged sandbox
        let _ = self.acknowledge(req.task_id);
        let Some(bytes) = req.archive else {
            return failed(req.task_id, "no archive supplied".into());
        };
        if let Err(e) = self.stage(req.task_id, req.spec, bytes, req.attempt) {
            return failed(req.task_id, e.to_string());
        }
        match self.run(req.task_id, req.spec, now) {
            Ok(ev) => ev,
            Err(e) => failed(req.task_id, e.to_string()),
        }
    }

    fn poll(&mut self, now: Tick) -> Vec<ExecEvent> {
        ExecutorHost::poll(self, now)
    }

    fn kill(&mut self, task_id: &TaskId) -> Option<ExecEvent> {
        ExecutorHost::kill(self, task_id)
    }

    fn live(&self) -> Vec<TaskId> {
        self.live_tasks()
    }

    fn acknowledge(&mut self, task_id: &TaskId) {
        if let Err(e) = ExecutorHost::acknowledge(self, task_id) {
            log::warn!("could not remove sandbox of {task_id}: {e}");
        }
    }

    fn logs(&self, task_id: &TaskId) -> Option<TaskLogs> {
        ExecutorHost::logs(self, task_id).map(|(stdout, stderr)| TaskLogs { stdout, stderr })
    }
}
