//! Messages exchanged between tiers, shared by the simulated and socket
//! transports.

use serde::{Deserialize, Serialize};

use crate::domain::{
    AgentId, AttributeSet, DeviceId, FrameworkId, NodeId, ResourceVector, TaskId, TaskSpec,
    TaskState, Tick,
};
use crate::executor::SufferanceMetric;

/// Transport wrapper around every message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Envelope {
    pub from: NodeId,
    pub to: NodeId,
    /// Per-sender sequence number, strictly increasing.
    pub seq: u64,
    pub sent_at: Tick,
    /// Address epoch of the receiver the sender believes current. Delivery
    /// to a newer epoch drops the message.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub to_epoch: Option<u64>,
    pub body: Body,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Body {
    Register(Registration),
    Heartbeat(Heartbeat),
    Offer(OfferBatch),
    Accept(Accept),
    Decline(Decline),
    Launch(Launch),
    Status(StatusUpdate),
    Probe(Probe),
    ProbeReply(ProbeReply),
    Kill(Kill),
    Observations(ObservationBatch),
    Operator(OperatorCommand),
}

impl Body {
    pub fn kind(&self) -> &'static str {
        match self {
            Body::Register(_) => "REGISTER",
            Body::Heartbeat(_) => "HEARTBEAT",
            Body::Offer(_) => "OFFER",
            Body::Accept(_) => "ACCEPT",
            Body::Decline(_) => "DECLINE",
            Body::Launch(_) => "LAUNCH",
            Body::Status(_) => "STATUS",
            Body::Probe(_) => "PROBE",
            Body::ProbeReply(_) => "PROBE_REPLY",
            Body::Kill(_) => "KILL",
            Body::Observations(_) => "OBSERVATIONS",
            Body::Operator(_) => "OPERATOR",
        }
    }
}

/// A task an agent reports as present when (re-)registering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportedTask {
    pub task_id: TaskId,
    pub framework_id: FrameworkId,
    pub resources: ResourceVector,
    pub attempt: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Registration {
    /// Agent to master.
    Agent {
        agent_id: AgentId,
        gateway_id: NodeId,
        resources: ResourceVector,
        attributes: AttributeSet,
        #[serde(default)]
        running: Vec<ReportedTask>,
        #[serde(default)]
        reregister: bool,
        #[serde(default)]
        epoch: u64,
    },
    /// Scheduler to master.
    Framework {
        framework_id: FrameworkId,
        #[serde(default)]
        reregister: bool,
    },
    /// Device to gateway.
    Device {
        device_id: DeviceId,
        resources: ResourceVector,
        attributes: AttributeSet,
    },
    /// Gateway to device. `direct` tells the device to register with the
    /// master itself.
    DeviceAccepted {
        device_id: DeviceId,
        direct: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        master: Option<NodeId>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Heartbeat {
    Agent {
        agent_id: AgentId,
    },
    AgentAck {
        agent_id: AgentId,
        #[serde(default)]
        acks: Vec<String>,
        #[serde(default)]
        reregister: bool,
    },
    Framework {
        framework_id: FrameworkId,
    },
    FrameworkAck {
        framework_id: FrameworkId,
        #[serde(default)]
        reregister: bool,
    },
    /// Device to gateway, listing the tasks it is executing.
    Device {
        device_id: DeviceId,
        live: Vec<TaskId>,
    },
    DeviceAck {
        device_id: DeviceId,
        #[serde(default)]
        acks: Vec<String>,
        #[serde(default)]
        reregister: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OfferMsg {
    pub offer_id: String,
    pub agent_id: AgentId,
    pub granted: ResourceVector,
    pub attributes: AttributeSet,
    pub issued_at: Tick,
    pub ttl: Tick,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OfferBatch {
    pub framework_id: FrameworkId,
    pub offers: Vec<OfferMsg>,
}

/// One task the scheduler wants started from an accepted offer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskLaunch {
    pub task_id: TaskId,
    pub spec: TaskSpec,
    pub attempt: u32,
    /// Base64 of the task archive, when the runtime needs one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub archive: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Accept {
    pub framework_id: FrameworkId,
    pub offer_id: String,
    pub launches: Vec<TaskLaunch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Decline {
    pub framework_id: FrameworkId,
    pub offer_ids: Vec<String>,
}

/// Master to agent, and proxy agent to device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Launch {
    pub agent_id: AgentId,
    pub framework_id: FrameworkId,
    pub task: TaskLaunch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisconnectClass {
    Transient,
    Permanent,
    Undetermined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatusUpdate {
    /// Unique per status; used for acknowledgements and de-duplication.
    pub update_id: String,
    pub task_id: TaskId,
    pub state: TaskState,
    pub agent_id: AgentId,
    pub framework_id: FrameworkId,
    pub attempt: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<DisconnectClass>,
    /// For transient losses, ticks to wait before requeueing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grace: Option<Tick>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_status: Option<i32>,
    /// Sent by the master while reconciling rather than on a state change.
    #[serde(default)]
    pub reconcile: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Probe {
    pub probe_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub framework_id: Option<FrameworkId>,
    pub agent_ids: Vec<AgentId>,
    pub sketch: ResourceVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeResult {
    pub agent_id: AgentId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric: Option<f64>,
    pub responded: bool,
    pub rtt: Tick,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeReply {
    pub probe_id: String,
    /// A single agent's answer on its way up, or the collected results on
    /// their way to the scheduler.
    pub results: Vec<ProbeResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<SufferanceMetric>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Kill {
    pub task_id: TaskId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent_id: Option<AgentId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub framework_id: Option<FrameworkId>,
    /// Restricts the kill to one launch attempt.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attempt: Option<u32>,
}

/// A peer's view of a node's health.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Observation {
    pub observer_id: NodeId,
    pub subject_id: DeviceId,
    pub score: f64,
    pub at: Tick,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationBatch {
    pub observations: Vec<Observation>,
}

/// Control-plane to scheduler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum OperatorCommand {
    /// Picks up freshly persisted `Queued` records.
    Submit { task_ids: Vec<TaskId> },
    Kill { task_id: TaskId },
    Restart { task_id: TaskId },
}

/// A message a node wants sent; the transport fills in the envelope.
#[derive(Debug, Clone, PartialEq)]
pub struct Outgoing {
    pub to: NodeId,
    pub to_epoch: Option<u64>,
    pub body: Body,
}

impl Outgoing {
    pub fn new(to: NodeId, body: Body) -> Self {
        Self {
            to,
            to_epoch: None,
            body,
        }
    }

    pub fn at_epoch(mut self, epoch: Option<u64>) -> Self {
        self.to_epoch = epoch;
        self
    }
}

pub mod base64_bytes {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;

    pub fn encode(bytes: &[u8]) -> String {
        STANDARD.encode(bytes)
    }

    pub fn decode(text: &str) -> Result<Vec<u8>, base64::DecodeError> {
        STANDARD.decode(text)
    }
}
