//! In-memory runner for scripted `sim-task` workloads.

use std::collections::{BTreeMap, BTreeSet};

use super::host::{interpreter, ExecEvent};
use super::sim_task::{behavior_for_attempt, SimOutcome, SimTaskRun};
use super::{failed, LaunchRequest, TaskLogs, TaskRunner};
use crate::domain::{RuntimeKind, TaskId, TaskState, Tick};

#[derive(Debug, Clone)]
struct Run {
    script: SimTaskRun,
    state: TaskState,
    log: String,
}

/// Runs `sim-task` scripts against the simulation clock. Any other runtime
/// fails staging with a missing dependency unless listed as available, and
/// even then cannot be executed in simulation.
#[derive(Debug, Clone)]
pub struct SimExecutor {
    available: BTreeSet<String>,
    runs: BTreeMap<TaskId, Run>,
}

impl Default for SimExecutor {
    fn default() -> Self {
        Self::new(["sim"])
    }
}

impl SimExecutor {
    pub fn new<I, S>(available: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            available: available.into_iter().map(Into::into).collect(),
            runs: BTreeMap::new(),
        }
    }

    pub fn state(&self, task_id: &TaskId) -> Option<TaskState> {
        self.runs.get(task_id).map(|r| r.state)
    }
}

impl TaskRunner for SimExecutor {
    fn launch(&mut self, req: LaunchRequest<'_>, now: Tick) -> ExecEvent {
        if self
            .runs
            .get(req.task_id)
            .is_some_and(|r| r.state == TaskState::Running)
        {
            return failed(req.task_id, "task already running here".into());
        }
        let bin = interpreter(req.spec.runtime);
        if !self.available.contains(bin) {
            return failed(req.task_id, format!("missing dependency `{bin}`"));
        }
        if req.spec.runtime != RuntimeKind::SimTask {
            return failed(req.task_id, format!("{} cannot run in simulation", req.spec.runtime));
        }
        let behavior = match behavior_for_attempt(&req.spec.entry, req.attempt) {
            Ok(b) => b,
            Err(e) => return failed(req.task_id, e.to_string()),
        };
        self.runs.insert(
            req.task_id.clone(),
            Run {
                script: SimTaskRun::new(behavior, now),
                state: TaskState::Running,
                log: format!("[{now}] start attempt {}: {behavior}\n", req.attempt),
            },
        );
        ExecEvent {
            task_id: req.task_id.clone(),
            state: TaskState::Running,
            exit_status: None,
            reason: None,
        }
    }

    fn poll(&mut self, now: Tick) -> Vec<ExecEvent> {
        let mut events = Vec::new();
        for (task_id, run) in self.runs.iter_mut() {
            if run.state != TaskState::Running {
                continue;
            }
            let Some(outcome) = run.script.outcome_at(now) else {
                continue;
            };
            let (state, exit_status) = match outcome {
                SimOutcome::Exited(0) => (TaskState::Finished, Some(0)),
                SimOutcome::Exited(code) => (TaskState::Failed, Some(code)),
                SimOutcome::Crashed => (TaskState::Failed, None),
            };
            run.state = state;
            run.log.push_str(&format!("[{now}] {}\n", state.label()));
            events.push(ExecEvent {
                task_id: task_id.clone(),
                state,
                exit_status,
                reason: None,
            });
        }
        events
    }

    fn kill(&mut self, task_id: &TaskId) -> Option<ExecEvent> {
        let run = self.runs.get_mut(task_id)?;
        if run.state != TaskState::Running {
            return None;
        }
        run.state = TaskState::Killed;
        run.log.push_str("killed\n");
        Some(ExecEvent {
            task_id: task_id.clone(),
            state: TaskState::Killed,
            exit_status: None,
            reason: None,
        })
    }

    fn live(&self) -> Vec<TaskId> {
        self.runs
            .iter()
            .filter(|(_, r)| r.state == TaskState::Running)
            .map(|(id, _)| id.clone())
            .collect()
    }

    fn acknowledge(&mut self, task_id: &TaskId) {
        if self
            .runs
            .get(task_id)
            .is_some_and(|r| r.state != TaskState::Running)
        {
            self.runs.remove(task_id);
        }
    }

    fn logs(&self, task_id: &TaskId) -> Option<TaskLogs> {
        self.runs.get(task_id).map(|r| TaskLogs {
            stdout: r.log.clone(),
            stderr: String::new(),
        })
    }
}
