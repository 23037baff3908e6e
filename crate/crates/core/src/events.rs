//! Observable events every node emits while handling messages and ticks.
//! The simulator writes them to its trace; the demo runtime logs them.

use serde::{Deserialize, Serialize};

use crate::domain::{AgentId, DeviceId, FrameworkId, NodeId, ResourceVector, TaskId, TaskState, Tick};
use crate::protocol::{Body, DisconnectClass, Outgoing, ProbeResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WatchdogAction {
    Restart,
    Reregister,
    Reconnect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    // master
    AgentRegistered {
        agent: AgentId,
        reregister: bool,
        epoch: u64,
    },
    RegistrationRejected {
        agent: AgentId,
        reason: String,
    },
    AgentSuspect {
        agent: AgentId,
    },
    AgentRecovered {
        agent: AgentId,
        after: Tick,
    },
    AgentDisconnected {
        agent: AgentId,
        class: DisconnectClass,
    },
    FrameworkRegistered {
        framework: FrameworkId,
        reregister: bool,
    },
    OfferIssued {
        offer_id: String,
        agent: AgentId,
        framework: FrameworkId,
        granted: ResourceVector,
    },
    OfferExpired {
        offer_id: String,
    },
    AcceptRejected {
        offer_id: String,
        reason: String,
    },
    TaskLaunched {
        task: TaskId,
        agent: AgentId,
        attempt: u32,
    },
    LaunchResent {
        task: TaskId,
        agent: AgentId,
        attempt: u32,
    },
    OrphanKilled {
        task: TaskId,
        agent: AgentId,
    },
    MasterStatus {
        task: TaskId,
        agent: AgentId,
        state: TaskState,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        class: Option<DisconnectClass>,
    },
    TaskAdopted {
        task: TaskId,
        agent: AgentId,
    },
    ReconcileKill {
        task: TaskId,
        agent: AgentId,
        attempt: u32,
    },
    ProbeCompleted {
        probe_id: String,
        results: Vec<ProbeResult>,
    },
    // scheduler
    TaskState {
        task: TaskId,
        state: TaskState,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        agent: Option<AgentId>,
    },
    RequeueDeferred {
        task: TaskId,
        until: Tick,
    },
    Requeued {
        task: TaskId,
        replicas: Vec<TaskId>,
    },
    Placed {
        task: TaskId,
        agent: AgentId,
        local: Option<bool>,
    },
    Waiting {
        task: TaskId,
        deadline: Tick,
    },
    OfferReceived {
        offer_id: String,
        agent: AgentId,
    },
    Notify {
        task: TaskId,
        message: String,
    },
    // gateway
    DeviceRegistered {
        device: DeviceId,
        opinion: f64,
        avoided: bool,
    },
    ProxyLaunched {
        agent: AgentId,
        device: DeviceId,
        advertised: ResourceVector,
    },
    ProxiesStopped {
        gateway: NodeId,
    },
    Watchdog {
        gateway: NodeId,
        action: WatchdogAction,
    },
    CheckpointRecovered {
        agent: AgentId,
        adopted: Vec<TaskId>,
        lost: Vec<TaskId>,
        orphans: Vec<TaskId>,
        corrupt: bool,
    },
    SelfKill {
        agent: AgentId,
        tasks: Vec<TaskId>,
        gap: Tick,
    },
    // device
    Exec {
        device: DeviceId,
        task: TaskId,
        state: TaskState,
        attempt: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        exit_status: Option<i32>,
    },
    Error {
        message: String,
    },
}

/// Messages and events produced by one handler call.
#[derive(Debug, Default)]
pub struct Outbox {
    pub messages: Vec<Outgoing>,
    pub events: Vec<Event>,
}

impl Outbox {
    pub fn send(&mut self, to: NodeId, body: Body) {
        self.messages.push(Outgoing::new(to, body));
    }

    pub fn send_at(&mut self, to: NodeId, epoch: Option<u64>, body: Body) {
        self.messages.push(Outgoing::new(to, body).at_epoch(epoch));
    }

    pub fn emit(&mut self, event: Event) {
        self.events.push(event);
    }

    pub fn error(&mut self, message: impl Into<String>) {
        self.events.push(Event::Error {
            message: message.into(),
        });
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty() && self.events.is_empty()
    }
}
