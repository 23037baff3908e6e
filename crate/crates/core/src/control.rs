//! Operator surface shared by the HTTP service, the CLI and the simulator:
//! deploy, list, act on tasks, and inspect agents and their attributes.
//!
//! Reads come from the store. Every mutation is a message to the scheduler,
//! so nothing here changes cluster state directly.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    AgentId, ArtifactRef, AttributeConstraint, AttributeSet, AttributeValue, Locality, NodeId, Predicate,
    ResourceVector, RestartPolicy, RuntimeKind, TaskId, TaskRecord, TaskSpec, TaskState, Tick,
};
use crate::events::Outbox;
use crate::executor::archive::Dependency;
use crate::executor::sim_task::validate_script;
use crate::executor::TaskLogs;
use crate::master::{AgentRecord, Liveness, AGENT_ID_ATTRIBUTE};
use crate::persistence::{Store, StoreError, StoreExt};
use crate::protocol::{Body, OperatorCommand};

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("unknown agent {0}")]
    UnknownAgent(AgentId),
    #[error("unknown task {0}")]
    UnknownTask(TaskId),
    #[error("action not allowed while the task is {0}")]
    IllegalAction(TaskState),
    #[error(transparent)]
    Store(#[from] StoreError),
}

fn one() -> u32 {
    1
}

/// The deploy form: a task spec without the artifact, which comes from the
/// uploaded archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeploymentManifest {
    pub task_name: String,
    pub runtime: RuntimeKind,
    pub entry: String,
    #[serde(default)]
    pub args: Vec<String>,
    #[serde(default = "one")]
    pub instances: u32,
    #[serde(default)]
    pub required: ResourceVector,
    #[serde(default)]
    pub constraints: Vec<AttributeConstraint>,
    #[serde(default)]
    pub locality: Option<Locality>,
    #[serde(default)]
    pub restart_policy: RestartPolicy,
    #[serde(default)]
    pub dependencies: Vec<Dependency>,
}

impl DeploymentManifest {
    pub fn parse(text: &str) -> Result<Self, ControlError> {
        serde_json::from_str(text).map_err(|e| ControlError::InvalidManifest(e.to_string()))
    }

    pub fn to_spec(&self, archive: &[u8]) -> Result<TaskSpec, ControlError> {
        let spec = TaskSpec {
            task_name: self.task_name.clone(),
            runtime: self.runtime,
            artifact: ArtifactRef::of(archive),
            entry: self.entry.clone(),
            args: self.args.clone(),
            instances: self.instances,
            required: self.required.clone(),
            constraints: self.constraints.clone(),
            locality: self.locality.clone(),
            restart_policy: self.restart_policy,
        };
        spec.validate().map_err(|e| ControlError::InvalidManifest(e.to_string()))?;
        if spec.runtime == RuntimeKind::SimTask {
            validate_script(&spec.entry).map_err(|e| ControlError::InvalidManifest(e.to_string()))?;
        }
        if spec.task_name.contains(['/', ' ']) {
            return Err(ControlError::InvalidManifest("task names may not contain '/' or spaces".into()));
        }
        Ok(spec)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum Placement {
    #[default]
    Auto,
    Manual { agents: Vec<AgentId> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeploymentRequest {
    pub manifest: DeploymentManifest,
    pub archive: Vec<u8>,
    pub placement: Placement,
    /// Client-chosen id; a retry with the same id returns the first answer.
    /// Without one there is no de-duplication.
    pub request_id: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskAction {
    Kill,
    Restart,
    Logs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum ActionOutcome {
    /// Forwarded to the scheduler.
    Accepted { task_id: TaskId, action: TaskAction },
    Logs { task_id: TaskId, logs: TaskLogs },
}

/// One line of the task table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    pub task_id: TaskId,
    pub name: String,
    pub runtime: String,
    pub status: TaskState,
    pub started: Option<Tick>,
    pub stopped: Option<Tick>,
    pub agent: Option<AgentId>,
    /// Lost under the automatic policy: the scheduler will redeploy it.
    pub requeue_pending: bool,
    pub created: Tick,
}

impl TaskRow {
    pub fn from_record(r: &TaskRecord) -> Self {
        let last_of = |pred: &dyn Fn(TaskState) -> bool| {
            r.state_history.iter().rev().find(|(s, _)| pred(*s)).map(|(_, t)| *t)
        };
        let stopped = if r.state.is_active() || r.state == TaskState::Queued {
            None
        } else {
            r.state_history.last().map(|(_, t)| *t)
        };
        TaskRow {
            task_id: r.task_id.clone(),
            name: r.spec.task_name.clone(),
            runtime: r.spec.runtime.label().to_string(),
            status: r.state,
            started: last_of(&|s| s == TaskState::Running),
            stopped,
            agent: r.assigned_agent.clone(),
            requeue_pending: r.state == TaskState::Lost && r.spec.restart_policy == RestartPolicy::Auto,
            created: r.created_at(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskFilter {
    #[serde(default)]
    pub agent: Option<AgentId>,
    #[serde(default)]
    pub status: Option<TaskState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentRow {
    pub agent_id: AgentId,
    pub gateway: NodeId,
    pub liveness: String,
    pub advertised: ResourceVector,
    pub allocated: ResourceVector,
    pub attributes: AttributeSet,
}

impl From<&AgentRecord> for AgentRow {
    fn from(a: &AgentRecord) -> Self {
        let liveness = match a.liveness {
            Liveness::Connected => "connected",
            Liveness::Suspect { .. } => "suspect",
            Liveness::Disconnected { .. } => "disconnected",
        };
        AgentRow {
            agent_id: a.agent_id.clone(),
            gateway: a.gateway_id.clone(),
            liveness: liveness.to_string(),
            advertised: a.advertised.clone(),
            allocated: a.allocated.clone(),
            attributes: a.attributes.clone(),
        }
    }
}

/// What the control plane cannot learn from the store.
pub trait Cluster {
    /// Sandbox logs of a task, from whichever device ran it.
    fn logs(&self, agent: Option<&AgentId>, task: &TaskId) -> Option<TaskLogs>;
}

/// A cluster with nowhere to fetch logs from.
pub struct NoLogs;

impl Cluster for NoLogs {
    fn logs(&self, _: Option<&AgentId>, _: &TaskId) -> Option<TaskLogs> {
        None
    }
}

pub struct ControlPlane {
    store: Arc<dyn Store>,
    scheduler: NodeId,
    submitted: BTreeMap<String, Vec<TaskId>>,
    actions: BTreeMap<String, ActionOutcome>,
    next_seq: u64,
}

impl ControlPlane {
    pub fn new(store: Arc<dyn Store>, scheduler: impl Into<NodeId>) -> Result<Self, ControlError> {
        // continue numbering after whatever the store already holds
        let next_seq = store
            .tasks()?
            .iter()
            .filter_map(|t| t.task_id.as_str().rsplit('.').next()?.parse::<u64>().ok())
            .max()
            .map_or(1, |n| n + 1);
        Ok(Self {
            store,
            scheduler: scheduler.into(),
            submitted: BTreeMap::new(),
            actions: BTreeMap::new(),
            next_seq,
        })
    }

    pub fn scheduler(&self) -> &NodeId {
        &self.scheduler
    }

    /// Persists one Queued record per instance and hands them to the
    /// scheduler.
    pub fn submit(&mut self, req: DeploymentRequest, now: Tick, out: &mut Outbox) -> Result<Vec<TaskId>, ControlError> {
        if let Some(ids) = req.request_id.as_ref().and_then(|r| self.submitted.get(r)) {
            return Ok(ids.clone());
        }
        let mut spec = req.manifest.to_spec(&req.archive)?;
        if let Placement::Manual { agents } = &req.placement {
            if agents.is_empty() {
                return Err(ControlError::InvalidManifest("manual placement needs at least one agent".into()));
            }
            let known: BTreeSet<AgentId> = self.store.agents()?.into_iter().map(|a| a.agent_id).collect();
            if let Some(unknown) = agents.iter().find(|a| !known.contains(a)) {
                return Err(ControlError::UnknownAgent(unknown.clone()));
            }
            let values: Vec<AttributeValue> = agents.iter().map(|a| AttributeValue::text(a.as_str())).collect();
            let predicate = match values.as_slice() {
                [single] => Predicate::Equals(single.clone()),
                _ => Predicate::OneOf(values),
            };
            spec.constraints.push(AttributeConstraint::new(AGENT_ID_ATTRIBUTE, predicate).expect("non-empty name"));
        }
        if !req.archive.is_empty() {
            self.store.put_artifact(&spec.artifact.hash, &req.archive)?;
        }
        let mut ids = Vec::new();
        for _ in 0..spec.instances {
            let id = TaskId(format!("{}.{}", spec.task_name, self.next_seq));
            self.next_seq += 1;
            self.store.put_task(&TaskRecord::queued(id.clone(), spec.clone(), now))?;
            ids.push(id);
        }
        out.send(
            self.scheduler.clone(),
            Body::Operator(OperatorCommand::Submit { task_ids: ids.clone() }),
        );
        if let Some(r) = req.request_id {
            self.submitted.insert(r, ids.clone());
        }
        Ok(ids)
    }

    /// Task table, newest first.
    pub fn list_tasks(&self, filter: &TaskFilter) -> Result<Vec<TaskRow>, ControlError> {
        let mut rows: Vec<TaskRow> = self
            .store
            .tasks()?
            .iter()
            .map(TaskRow::from_record)
            .filter(|r| filter.agent.as_ref().is_none_or(|a| r.agent.as_ref() == Some(a)))
            .filter(|r| filter.status.is_none_or(|s| r.status == s))
            .collect();
        rows.sort_by(|a, b| (b.created, &b.task_id).cmp(&(a.created, &a.task_id)));
        Ok(rows)
    }

    pub fn task(&self, id: &TaskId) -> Result<TaskRecord, ControlError> {
        match self.store.get_task(id.as_str()) {
            Ok(r) => Ok(r),
            Err(StoreError::NotFound(_)) => Err(ControlError::UnknownTask(id.clone())),
            Err(e) => Err(e.into()),
        }
    }

    pub fn task_action(
        &mut self,
        cluster: &dyn Cluster,
        id: &TaskId,
        action: TaskAction,
        request_id: Option<&str>,
        out: &mut Outbox,
    ) -> Result<ActionOutcome, ControlError> {
        if let Some(done) = request_id.and_then(|r| self.actions.get(r)) {
            return Ok(done.clone());
        }
        let record = self.task(id)?;
        let outcome = match action {
            TaskAction::Kill => {
                if !matches!(record.state, TaskState::Queued | TaskState::Staging | TaskState::Running) {
                    return Err(ControlError::IllegalAction(record.state));
                }
                out.send(
                    self.scheduler.clone(),
                    Body::Operator(OperatorCommand::Kill { task_id: id.clone() }),
                );
                ActionOutcome::Accepted {
                    task_id: id.clone(),
                    action,
                }
            }
            TaskAction::Restart => {
                // Killed is terminal: an operator resubmits instead
                if !matches!(record.state, TaskState::Failed | TaskState::Lost) {
                    return Err(ControlError::IllegalAction(record.state));
                }
                out.send(
                    self.scheduler.clone(),
                    Body::Operator(OperatorCommand::Restart { task_id: id.clone() }),
                );
                ActionOutcome::Accepted {
                    task_id: id.clone(),
                    action,
                }
            }
            TaskAction::Logs => ActionOutcome::Logs {
                task_id: id.clone(),
                logs: cluster
                    .logs(record.assigned_agent.as_ref(), id)
                    .unwrap_or_default(),
            },
        };
        if let (Some(r), TaskAction::Kill | TaskAction::Restart) = (request_id, action) {
            self.actions.insert(r.to_string(), outcome.clone());
        }
        Ok(outcome)
    }

    /// Agent rows. `allocated` is summed from the persisted active tasks,
    /// since the master only persists agents on membership changes.
    pub fn list_agents(&self) -> Result<Vec<AgentRow>, ControlError> {
        let mut held: BTreeMap<AgentId, ResourceVector> = BTreeMap::new();
        for t in self.store.tasks()? {
            if let (true, Some(agent)) = (t.state.is_active(), t.assigned_agent) {
                let sum = held.entry(agent).or_insert_with(ResourceVector::zero);
                *sum = &*sum + &t.spec.required;
            }
        }
        Ok(self
            .store
            .agents()?
            .iter()
            .map(|a| AgentRow {
                allocated: held.remove(&a.agent_id).unwrap_or_else(ResourceVector::zero),
                ..AgentRow::from(a)
            })
            .collect())
    }

    /// Attribute names and values across the registered devices matching
    /// every constraint in `filter`.
    pub fn list_attributes(
        &self,
        filter: &[AttributeConstraint],
    ) -> Result<BTreeMap<String, BTreeSet<String>>, ControlError> {
        let mut union: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for agent in self.store.agents()? {
            if !filter.iter().all(|c| c.is_satisfied_by(&agent.attributes)) {
                continue;
            }
            for (name, value) in agent.attributes.iter() {
                let values = union.entry(name.clone()).or_default();
                match value {
                    AttributeValue::TextSet(set) => values.extend(set.iter().cloned()),
                    other => {
                        values.insert(other.to_string());
                    }
                }
            }
        }
        Ok(union)
    }
}
