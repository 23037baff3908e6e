use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{AgentId, AttributeConstraint, ResourceVector, TaskId, Tick};

/// Runtime an executor uses to start a task's entry point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RuntimeKind {
    JvmApp,
    PythonApp,
    NodejsApp,
    BrowserScript,
    ShellScript,
    GroovyApp,
    /// Scripted behaviour, only accepted by simulated executors.
    SimTask,
}

impl RuntimeKind {
    pub const ALL: [RuntimeKind; 7] = [
        RuntimeKind::JvmApp,
        RuntimeKind::PythonApp,
        RuntimeKind::NodejsApp,
        RuntimeKind::BrowserScript,
        RuntimeKind::ShellScript,
        RuntimeKind::GroovyApp,
        RuntimeKind::SimTask,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            RuntimeKind::JvmApp => "jvm-app",
            RuntimeKind::PythonApp => "python-app",
            RuntimeKind::NodejsApp => "nodejs-app",
            RuntimeKind::BrowserScript => "browser-script",
            RuntimeKind::ShellScript => "shell-script",
            RuntimeKind::GroovyApp => "groovy-app",
            RuntimeKind::SimTask => "sim-task",
        }
    }

    /// Human label used in task listings.
    pub fn label(&self) -> &'static str {
        match self {
            RuntimeKind::JvmApp => "Java",
            RuntimeKind::PythonApp => "Python",
            RuntimeKind::NodejsApp => "Node.js",
            RuntimeKind::BrowserScript => "JavaScript",
            RuntimeKind::ShellScript => "Shell Script",
            RuntimeKind::GroovyApp => "Groovy",
            RuntimeKind::SimTask => "Simulated",
        }
    }
}

impl fmt::Display for RuntimeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown runtime `{0}`")]
pub struct UnknownRuntime(pub String);

impl FromStr for RuntimeKind {
    type Err = UnknownRuntime;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RuntimeKind::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| UnknownRuntime(s.to_string()))
    }
}

/// Content-addressed reference to a task archive.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactRef {
    /// Lowercase hex SHA-256 of the archive bytes.
    pub hash: String,
    pub size: u64,
}

impl ArtifactRef {
    pub fn of(bytes: &[u8]) -> Self {
        use sha2::{Digest, Sha256};
        ArtifactRef {
            hash: hex::encode(Sha256::digest(bytes)),
            size: bytes.len() as u64,
        }
    }
}

/// Data-locality preference: the attribute/value pair identifying the node
/// that holds the task's input, and how long to wait for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Locality {
    pub attribute: String,
    pub value: String,
    pub wait_budget: Tick,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RestartPolicy {
    #[default]
    Auto,
    Manual,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SpecError {
    #[error("instances must be at least 1")]
    ZeroInstances,
    #[error("task name must be non-empty")]
    EmptyName,
    #[error("entry must be non-empty")]
    EmptyEntry,
}

/// What to run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub task_name: String,
    pub runtime: RuntimeKind,
    pub artifact: ArtifactRef,
    pub entry: String,
    #[serde(default)]
    pub args: Vec<String>,
    pub instances: u32,
    #[serde(default)]
    pub required: ResourceVector,
    #[serde(default)]
    pub constraints: Vec<AttributeConstraint>,
    #[serde(default)]
    pub locality: Option<Locality>,
    #[serde(default)]
    pub restart_policy: RestartPolicy,
}

impl TaskSpec {
    /// A single-instance `sim-task` running `script`, with no archive.
    pub fn sim(name: &str, script: &str, required: ResourceVector) -> Self {
        TaskSpec {
            task_name: name.to_string(),
            runtime: RuntimeKind::SimTask,
            artifact: ArtifactRef::of(b""),
            entry: script.to_string(),
            args: Vec::new(),
            instances: 1,
            required,
            constraints: Vec::new(),
            locality: None,
            restart_policy: RestartPolicy::Auto,
        }
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        if self.instances == 0 {
            return Err(SpecError::ZeroInstances);
        }
        if self.task_name.is_empty() {
            return Err(SpecError::EmptyName);
        }
        if self.entry.is_empty() {
            return Err(SpecError::EmptyEntry);
        }
        Ok(())
    }

    /// Stable digest of the canonical form, used in checkpoints.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let text = serde_json::to_string(self).expect("spec serializes");
        hex::encode(&Sha256::digest(text.as_bytes())[..8])
    }
}

/// Task lifecycle.
///
/// `Running`, `Lost` and `Killed` are the states a task table shows to
/// operators; `Queued` and `Staging` exist so that requeue and launch can be
/// expressed, and `Finished`/`Failed` distinguish clean and nonzero exits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskState {
    Queued,
    Staging,
    Running,
    Finished,
    Failed,
    Lost,
    Killed,
}

impl TaskState {
    pub const ALL: [TaskState; 7] = [
        TaskState::Queued,
        TaskState::Staging,
        TaskState::Running,
        TaskState::Finished,
        TaskState::Failed,
        TaskState::Lost,
        TaskState::Killed,
    ];

    pub fn is_terminal(&self) -> bool {
        matches!(self, TaskState::Finished | TaskState::Killed)
    }

    /// Holds resources on an agent.
    pub fn is_active(&self) -> bool {
        matches!(self, TaskState::Staging | TaskState::Running)
    }

    /// Operator-facing label in the style of the task table.
    pub fn label(&self) -> &'static str {
        match self {
            TaskState::Queued => "TASK_QUEUED",
            TaskState::Staging => "TASK_STAGING",
            TaskState::Running => "TASK_RUNNING",
            TaskState::Finished => "TASK_FINISHED",
            TaskState::Failed => "TASK_FAILED",
            TaskState::Lost => "TASK_LOST",
            TaskState::Killed => "TASK_KILLED",
        }
    }
}

impl fmt::Display for TaskState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Who asked for a `Failed -> Queued` move.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Initiator {
    System,
    Operator,
}

/// The legal-transition relation, ignoring restart-policy guards.
pub fn is_legal(from: TaskState, to: TaskState) -> bool {
    use TaskState::*;
    matches!(
        (from, to),
        (Queued, Staging)
            | (Queued, Killed)
            | (Staging, Running)
            | (Staging, Failed)
            | (Staging, Lost)
            | (Staging, Killed)
            | (Running, Finished)
            | (Running, Failed)
            | (Running, Lost)
            | (Running, Killed)
            | (Lost, Queued)
            // a lost task that resurfaces on its agent is adopted back
            | (Lost, Running)
            | (Failed, Queued)
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransitionError {
    #[error("illegal transition {from} -> {to}")]
    IllegalTransition { from: TaskState, to: TaskState },
    #[error("restart of a failed task with manual policy needs an operator")]
    ManualRestartRequired,
    #[error("tick {tick} precedes last transition at {last}")]
    TimeWentBackwards { tick: Tick, last: Tick },
}

/// A task and its lifecycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskRecord {
    pub task_id: TaskId,
    pub spec: TaskSpec,
    pub state: TaskState,
    pub assigned_agent: Option<AgentId>,
    pub state_history: Vec<(TaskState, Tick)>,
    pub replica_group: Option<TaskId>,
}

impl TaskRecord {
    pub fn queued(task_id: TaskId, spec: TaskSpec, tick: Tick) -> Self {
        TaskRecord {
            task_id,
            spec,
            state: TaskState::Queued,
            assigned_agent: None,
            state_history: vec![(TaskState::Queued, tick)],
            replica_group: None,
        }
    }

    pub fn transition(&mut self, to: TaskState, tick: Tick) -> Result<(), TransitionError> {
        self.transition_as(to, tick, Initiator::System, None)
    }

    /// Moves to an active state on `agent`.
    pub fn assign(&mut self, to: TaskState, agent: AgentId, tick: Tick) -> Result<(), TransitionError> {
        self.transition_as(to, tick, Initiator::System, Some(agent))
    }

    pub fn operator_restart(&mut self, tick: Tick) -> Result<(), TransitionError> {
        self.transition_as(TaskState::Queued, tick, Initiator::Operator, None)
    }

    /// Applies a transition; on error the record is untouched.
    pub fn transition_as(
        &mut self,
        to: TaskState,
        tick: Tick,
        initiator: Initiator,
        agent: Option<AgentId>,
    ) -> Result<(), TransitionError> {
        let from = self.state;
        if !is_legal(from, to) {
            return Err(TransitionError::IllegalTransition { from, to });
        }
        if from == TaskState::Failed
            && self.spec.restart_policy == RestartPolicy::Manual
            && initiator == Initiator::System
        {
            return Err(TransitionError::ManualRestartRequired);
        }
        if let Some(&(_, last)) = self.state_history.last() {
            if tick < last {
                return Err(TransitionError::TimeWentBackwards { tick, last });
            }
        }
        self.state = to;
        self.state_history.push((to, tick));
        if to.is_active() {
            if let Some(agent) = agent {
                self.assigned_agent = Some(agent);
            }
        } else {
            self.assigned_agent = None;
        }
        Ok(())
    }

    /// Number of times the task has been lost.
    pub fn losses(&self) -> u32 {
        self.state_history
            .iter()
            .filter(|(s, _)| *s == TaskState::Lost)
            .count() as u32
    }

    /// Number of launches so far.
    pub fn launches(&self) -> u32 {
        self.state_history
            .iter()
            .filter(|(s, _)| *s == TaskState::Staging)
            .count() as u32
    }

    pub fn created_at(&self) -> Tick {
        self.state_history.first().map(|(_, t)| *t).unwrap_or(0)
    }

    /// Checks the record's internal invariants.
    pub fn check_invariants(&self) -> Result<(), String> {
        match self.state_history.last() {
            Some((s, _)) if *s == self.state => {}
            _ => return Err(format!("{}: state does not match history", self.task_id)),
        }
        if self.state.is_active() != self.assigned_agent.is_some() {
            return Err(format!("{}: agent assignment mismatch", self.task_id));
        }
        for pair in self.state_history.windows(2) {
            let ((a, ta), (b, tb)) = (pair[0], pair[1]);
            if !is_legal(a, b) {
                return Err(format!("{}: illegal step {a} -> {b}", self.task_id));
            }
            if tb < ta {
                return Err(format!("{}: history not monotone", self.task_id));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::AttributeConstraint;
    use proptest::prelude::*;

    pub(crate) fn spec(policy: RestartPolicy) -> TaskSpec {
        TaskSpec {
            task_name: "t".into(),
            runtime: RuntimeKind::SimTask,
            artifact: ArtifactRef::of(b""),
            entry: "forever".into(),
            args: vec![],
            instances: 1,
            required: ResourceVector::new(1.0, 64),
            constraints: vec![AttributeConstraint::exists("gps")],
            locality: None,
            restart_policy: policy,
        }
    }

    fn running() -> TaskRecord {
        let mut r = TaskRecord::queued("t-1".into(), spec(RestartPolicy::Auto), 0);
        r.assign(TaskState::Staging, "a".into(), 1).unwrap();
        r.assign(TaskState::Running, "a".into(), 2).unwrap();
        r
    }

    #[test]
    fn running_to_lost() {
        let mut r = running();
        r.transition(TaskState::Lost, 3).unwrap();
        assert_eq!(r.state_history.len(), 4);
        assert_eq!(r.assigned_agent, None);
        r.check_invariants().unwrap();
    }

    #[test]
    fn terminal_states_have_no_exits() {
        let mut r = running();
        r.transition(TaskState::Finished, 3).unwrap();
        let before = r.clone();
        assert_eq!(
            r.transition(TaskState::Running, 4),
            Err(TransitionError::IllegalTransition {
                from: TaskState::Finished,
                to: TaskState::Running
            })
        );
        assert_eq!(r, before);
    }

    #[test]
    fn manual_failed_needs_operator() {
        let mut r = TaskRecord::queued("t".into(), spec(RestartPolicy::Manual), 0);
        r.assign(TaskState::Staging, "a".into(), 0).unwrap();
        r.transition(TaskState::Failed, 1).unwrap();
        assert_eq!(r.transition(TaskState::Queued, 2), Err(TransitionError::ManualRestartRequired));
        r.operator_restart(2).unwrap();
        assert_eq!(r.state, TaskState::Queued);
    }

    #[test]
    fn transition_table_is_exactly_the_declared_set() {
        use TaskState::*;
        // Enumerated independently of `is_legal`.
        let declared = [
            (Queued, Staging),
            (Queued, Killed),
            (Staging, Running),
            (Staging, Failed),
            (Staging, Lost),
            (Staging, Killed),
            (Running, Finished),
            (Running, Failed),
            (Running, Lost),
            (Running, Killed),
            (Lost, Queued),
            (Lost, Running),
            (Failed, Queued),
        ];
        let mut legal_count = 0;
        for from in TaskState::ALL {
            for to in TaskState::ALL {
                let expected = declared.contains(&(from, to));
                assert_eq!(is_legal(from, to), expected, "{from} -> {to}");
                legal_count += usize::from(expected);
                let mut r = TaskRecord::queued("x".into(), spec(RestartPolicy::Auto), 0);
                r.state = from;
                r.state_history = vec![(from, 0)];
                r.assigned_agent = from.is_active().then(|| "a".into());
                let result = r.transition(to, 1);
                assert_eq!(result.is_ok(), expected, "{from} -> {to}");
            }
        }
        assert_eq!(legal_count, declared.len());
        for s in [Finished, Killed] {
            assert!(TaskState::ALL.iter().all(|t| !is_legal(s, *t)));
        }
    }

    proptest! {
        #[test]
        fn reachable_histories_are_legal(steps in prop::collection::vec(0usize..7, 0..40)) {
            let mut r = TaskRecord::queued("p".into(), spec(RestartPolicy::Auto), 0);
            for (i, s) in steps.into_iter().enumerate() {
                let to = TaskState::ALL[s];
                let agent = to.is_active().then(|| AgentId::from("a"));
                let _ = r.transition_as(to, i as u64 + 1, Initiator::System, agent);
                prop_assert!(r.check_invariants().is_ok());
            }
        }
    }
}
