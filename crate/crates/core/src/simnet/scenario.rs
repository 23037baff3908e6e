//! Scenario files: topology, faults, workload and the checks to run.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::control::{DeploymentManifest, Placement, TaskAction};
use crate::domain::{
    AgentId, AttributeSet, DeviceId, FrameworkId, NodeId, ResourceVector, TaskId, TaskState, Tick,
};
use crate::master::MasterConfig;
use crate::protocol::{Envelope, Observation};

use super::SimError;

fn one() -> Tick {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkParams {
    #[serde(default = "one")]
    pub delay: Tick,
    #[serde(default)]
    pub loss: f64,
}

impl Default for NetworkParams {
    fn default() -> Self {
        Self { delay: 1, loss: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameworkSpec {
    pub id: FrameworkId,
    #[serde(default)]
    pub replication_threshold: Option<u32>,
    #[serde(default)]
    pub replica_count: Option<u32>,
    #[serde(default)]
    pub recovery_grace: Option<Tick>,
    #[serde(default)]
    pub probe_interval: Option<Tick>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewaySpec {
    pub id: NodeId,
    #[serde(default)]
    pub peers: Vec<NodeId>,
    #[serde(default)]
    pub fraction: Option<f64>,
    #[serde(default)]
    pub watchdog_period: Option<Tick>,
    #[serde(default)]
    pub dsm_period: Option<Tick>,
    #[serde(default)]
    pub device_timeout: Option<Tick>,
    #[serde(default)]
    pub checkpoint_every: Option<Tick>,
    /// Defaults to on exactly when the master lacks transient support.
    #[serde(default)]
    pub self_kill: Option<bool>,
    #[serde(default)]
    pub direct_mode: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    pub id: DeviceId,
    pub gateway: NodeId,
    pub resources: ResourceVector,
    #[serde(default)]
    pub attributes: AttributeSet,
    /// The device powers on at this tick.
    #[serde(default)]
    pub join_at: Tick,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    #[serde(default)]
    pub master: MasterConfig,
    pub frameworks: Vec<FrameworkSpec>,
    #[serde(default)]
    pub gateways: Vec<GatewaySpec>,
    #[serde(default)]
    pub devices: Vec<DeviceSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SimEventKind {
    Deliver(Envelope),
    /// Cuts the listed nodes off from everyone else.
    PartitionStart { nodes: Vec<NodeId> },
    PartitionEnd { nodes: Vec<NodeId> },
    Crash { node: NodeId },
    Restart { node: NodeId },
    AddressChange { node: NodeId },
    TimerFire { node: NodeId },
    CorruptCheckpoint { agent: AgentId },
    /// Hands observations to a gateway as if a peer had sent them.
    Observe { gateway: NodeId, observations: Vec<Observation> },
    SetDirectMode { gateway: NodeId, direct: bool },
    Workload(WorkloadOp),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimEvent {
    pub at: Tick,
    pub kind: SimEventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum WorkloadOp {
    Submit {
        manifest: DeploymentManifest,
        #[serde(default)]
        placement: Placement,
        #[serde(default)]
        request_id: Option<String>,
    },
    Action {
        task: TaskId,
        action: TaskAction,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadItem {
    pub at: Tick,
    pub op: WorkloadOp,
}

/// Selects node events in the trace by tag and field values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventMatch {
    pub event: String,
    #[serde(default)]
    pub node: Option<NodeId>,
    /// Field name to expected JSON value, compared on the serialized event.
    #[serde(default)]
    pub fields: serde_json::Map<String, serde_json::Value>,
}

impl EventMatch {
    pub fn new(event: &str) -> Self {
        Self {
            event: event.to_string(),
            ..Self::default()
        }
    }

    pub fn on(mut self, node: &str) -> Self {
        self.node = Some(node.into());
        self
    }

    pub fn with(mut self, field: &str, value: impl Into<serde_json::Value>) -> Self {
        self.fields.insert(field.to_string(), value.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Check {
    /// Final persisted state of one task.
    TaskState { task: TaskId, state: TaskState },
    /// Every persisted task ends in this state.
    AllTasks { state: TaskState },
    /// Number of matching events lies in `[min, max]`.
    Occurs {
        #[serde(rename = "match")]
        matcher: EventMatch,
        #[serde(default)]
        min: Option<usize>,
        #[serde(default)]
        max: Option<usize>,
    },
    /// The steps occur in this order, optionally all within `within` ticks
    /// of the first.
    Sequence {
        steps: Vec<EventMatch>,
        #[serde(default)]
        within: Option<Tick>,
    },
    NoConservationViolations,
    /// No task ever has more than `max` live executors.
    MaxLiveExecutors { max: usize },
    /// Live executors of a task at the end of the run.
    FinalLiveExecutors { task: TaskId, count: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedAssertion {
    pub name: String,
    pub check: Check,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    pub seed: u64,
    pub until: Tick,
    #[serde(default)]
    pub network: NetworkParams,
    pub topology: Topology,
    #[serde(default)]
    pub faults: Vec<SimEvent>,
    #[serde(default)]
    pub workload: Vec<WorkloadItem>,
    #[serde(default)]
    pub assertions: Vec<NamedAssertion>,
}

pub const CONTROL_NODE: &str = "control";

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, SimError> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| SimError::MalformedScenario(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    /// Every declared node address.
    pub fn nodes(&self) -> BTreeSet<NodeId> {
        let t = &self.topology;
        let mut nodes = BTreeSet::from([t.master.node_id.clone(), NodeId::from(CONTROL_NODE)]);
        nodes.extend(t.frameworks.iter().map(|f| NodeId(f.id.0.clone())));
        nodes.extend(t.gateways.iter().map(|g| g.id.clone()));
        nodes.extend(t.devices.iter().map(|d| NodeId(d.id.0.clone())));
        nodes
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::MalformedScenario(m));
        let t = &self.topology;
        let declared = t.frameworks.len() + t.gateways.len() + t.devices.len() + 2;
        let nodes = self.nodes();
        if nodes.len() != declared {
            return bad("node ids must be unique".into());
        }
        if t.frameworks.is_empty() {
            return bad("at least one framework is required".into());
        }
        if self.network.delay == 0 {
            return bad("network delay must be at least one tick".into());
        }
        if !(0.0..1.0).contains(&self.network.loss) {
            return bad(format!("loss {} outside [0, 1)", self.network.loss));
        }
        let gateways: BTreeSet<&NodeId> = t.gateways.iter().map(|g| &g.id).collect();
        for d in &t.devices {
            if !gateways.contains(&d.gateway) {
                return bad(format!("device {} names undeclared gateway {}", d.id, d.gateway));
            }
        }
        for g in &t.gateways {
            if let Some(p) = g.peers.iter().find(|p| !gateways.contains(p)) {
                return bad(format!("gateway {} names undeclared peer {p}", g.id));
            }
            if g.fraction.is_some_and(|f| !(f > 0.0 && f <= 1.0)) {
                return bad(format!("gateway {} fraction must be in (0, 1]", g.id));
            }
        }
        let check_node = |n: &NodeId| {
            if nodes.contains(n) {
                Ok(())
            } else {
                Err(SimError::MalformedScenario(format!("undeclared node {n}")))
            }
        };
        for e in &self.faults {
            match &e.kind {
                SimEventKind::Deliver(env) => {
                    check_node(&env.from)?;
                    check_node(&env.to)?;
                }
                SimEventKind::PartitionStart { nodes: set } | SimEventKind::PartitionEnd { nodes: set } => {
                    if set.is_empty() {
                        return bad("empty partition".into());
                    }
                    set.iter().try_for_each(check_node)?;
                }
                SimEventKind::Crash { node }
                | SimEventKind::Restart { node }
                | SimEventKind::AddressChange { node }
                | SimEventKind::TimerFire { node } => check_node(node)?,
                SimEventKind::Observe { gateway, .. } | SimEventKind::SetDirectMode { gateway, .. } => {
                    if !gateways.contains(gateway) {
                        return bad(format!("{gateway} is not a gateway"));
                    }
                }
                SimEventKind::CorruptCheckpoint { .. } | SimEventKind::Workload(_) => {}
            }
        }
        Ok(())
    }
}
