//! Edge device: registers with its gateway, runs what its proxy launches and
//! reports every status change until it is acknowledged.
//!
//! In direct mode the gateway hands the device over to the master and the
//! device acts as its own agent.

use std::collections::{BTreeMap, BTreeSet};

use crate::domain::{AgentId, AttributeSet, DeviceId, FrameworkId, NodeId, ResourceVector, TaskId, Tick};
use crate::events::{Event, Outbox};
use crate::executor::{ExecEvent, LaunchRequest, MaxUtilization, SufferanceModel, TaskLogs, TaskRunner};
use crate::protocol::{
    base64_bytes, Body, Envelope, Heartbeat, Kill, Launch, Probe, ProbeReply, ProbeResult, Registration,
    ReportedTask, StatusUpdate,
};

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceConfig {
    pub id: DeviceId,
    pub gateway: NodeId,
    pub resources: ResourceVector,
    pub attributes: AttributeSet,
    pub heartbeat_period: Tick,
    pub status_resend: Tick,
    pub register_retry: Tick,
}

impl DeviceConfig {
    pub fn new(id: impl Into<DeviceId>, gateway: impl Into<NodeId>, resources: ResourceVector) -> Self {
        Self {
            id: id.into(),
            gateway: gateway.into(),
            resources,
            attributes: AttributeSet::new(),
            heartbeat_period: 1,
            status_resend: 2,
            register_retry: 3,
        }
    }

    pub fn with_attributes(mut self, attributes: AttributeSet) -> Self {
        self.attributes = attributes;
        self
    }

    pub fn node_id(&self) -> NodeId {
        NodeId(self.id.0.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Link {
    Unregistered,
    Gateway,
    Direct { master: NodeId, acked: bool },
}

#[derive(Debug, Clone)]
struct Assigned {
    agent_id: AgentId,
    framework_id: FrameworkId,
    attempt: u32,
    resources: ResourceVector,
}

pub struct Device {
    config: DeviceConfig,
    runner: Box<dyn TaskRunner + Send>,
    model: Box<dyn SufferanceModel>,
    link: Link,
    epoch: u64,
    down: bool,
    last_register: Option<Tick>,
    last_heartbeat: Option<Tick>,
    assigned: BTreeMap<TaskId, Assigned>,
    /// Every (task, attempt) launched since boot; the master may resend.
    launched: BTreeSet<(TaskId, u32)>,
    pending: BTreeMap<String, (StatusUpdate, Tick)>,
}

impl Device {
    pub fn new(config: DeviceConfig, runner: Box<dyn TaskRunner + Send>) -> Self {
        Self {
            config,
            runner,
            model: Box::new(MaxUtilization),
            link: Link::Unregistered,
            epoch: 0,
            down: false,
            last_register: None,
            last_heartbeat: None,
            assigned: BTreeMap::new(),
            launched: BTreeSet::new(),
            pending: BTreeMap::new(),
        }
    }

    pub fn with_model(mut self, model: Box<dyn SufferanceModel>) -> Self {
        self.model = model;
        self
    }

    pub fn config(&self) -> &DeviceConfig {
        &self.config
    }

    pub fn id(&self) -> &DeviceId {
        &self.config.id
    }

    pub fn live(&self) -> Vec<TaskId> {
        if self.down {
            Vec::new()
        } else {
            self.runner.live()
        }
    }

    pub fn logs(&self, task: &TaskId) -> Option<TaskLogs> {
        self.runner.logs(task)
    }

    pub fn is_registered(&self) -> bool {
        self.link != Link::Unregistered
    }

    pub fn is_direct(&self) -> bool {
        matches!(self.link, Link::Direct { .. })
    }

    pub fn is_down(&self) -> bool {
        self.down
    }

    pub fn pending_statuses(&self) -> usize {
        self.pending.len()
    }

    pub fn set_epoch(&mut self, epoch: u64) {
        self.epoch = epoch;
        if let Link::Direct { acked, .. } = &mut self.link {
            *acked = false;
        }
    }

    /// Power loss: every executor dies without a status.
    pub fn crash(&mut self, out: &mut Outbox) {
        for ev in self.runner.kill_all() {
            self.exec_event(&ev, out);
        }
        self.down = true;
    }

    /// Boots again with no tasks and registers anew.
    pub fn restart(&mut self) {
        self.down = false;
        self.link = Link::Unregistered;
        self.last_register = None;
        self.last_heartbeat = None;
        self.assigned.clear();
        self.launched.clear();
        self.pending.clear();
    }

    fn upstream(&self) -> NodeId {
        match &self.link {
            Link::Direct { master, .. } => master.clone(),
            _ => self.config.gateway.clone(),
        }
    }

    fn exec_event(&self, ev: &ExecEvent, out: &mut Outbox) {
        let attempt = self.assigned.get(&ev.task_id).map_or(0, |a| a.attempt);
        out.emit(Event::Exec {
            device: self.config.id.clone(),
            task: ev.task_id.clone(),
            state: ev.state,
            attempt,
            exit_status: ev.exit_status,
        });
    }

    fn report(&mut self, ev: ExecEvent, fallback: Option<&Kill>, now: Tick, out: &mut Outbox) {
        self.exec_event(&ev, out);
        let (agent_id, framework_id, attempt) = match self.assigned.get(&ev.task_id) {
            Some(a) => (a.agent_id.clone(), a.framework_id.clone(), a.attempt),
            None => match fallback {
                Some(k) => (
                    k.agent_id.clone().unwrap_or_else(|| AgentId(self.config.id.0.clone())),
                    k.framework_id.clone().unwrap_or_else(|| FrameworkId(String::new())),
                    k.attempt.unwrap_or(0),
                ),
                None => return,
            },
        };
        if !ev.state.is_active() {
            self.assigned.remove(&ev.task_id);
        }
        let st = StatusUpdate {
            update_id: format!(
                "{}:{}:{}:{}",
                self.config.id,
                ev.task_id,
                attempt,
                format!("{:?}", ev.state).to_lowercase()
            ),
            task_id: ev.task_id,
            state: ev.state,
            agent_id,
            framework_id,
            attempt,
            class: None,
            grace: None,
            reason: ev.reason,
            exit_status: ev.exit_status,
            reconcile: false,
        };
        out.send(self.upstream(), Body::Status(st.clone()));
        self.pending.insert(st.update_id.clone(), (st, now));
    }

    fn register(&mut self, now: Tick, out: &mut Outbox) {
        self.last_register = Some(now);
        match &self.link {
            Link::Unregistered | Link::Gateway => out.send(
                self.config.gateway.clone(),
                Body::Register(Registration::Device {
                    device_id: self.config.id.clone(),
                    resources: self.config.resources.clone(),
                    attributes: self.config.attributes.clone(),
                }),
            ),
            Link::Direct { master, .. } => {
                let running = self
                    .assigned
                    .iter()
                    .filter(|(id, _)| self.runner.live().contains(id))
                    .map(|(id, a)| ReportedTask {
                        task_id: id.clone(),
                        framework_id: a.framework_id.clone(),
                        resources: a.resources.clone(),
                        attempt: a.attempt,
                    })
                    .collect();
                out.send(
                    master.clone(),
                    Body::Register(Registration::Agent {
                        agent_id: AgentId(self.config.id.0.clone()),
                        gateway_id: self.config.node_id(),
                        resources: self.config.resources.clone(),
                        attributes: self.config.attributes.clone(),
                        running,
                        // harmless on first contact, needed after any loss
                        reregister: true,
                        epoch: self.epoch,
                    }),
                );
            }
        }
    }

    fn on_acks(&mut self, acks: &[String]) {
        for id in acks {
            if let Some((st, _)) = self.pending.remove(id) {
                if !st.state.is_active() && !self.assigned.contains_key(&st.task_id) {
                    self.runner.acknowledge(&st.task_id);
                }
            }
        }
    }

    fn on_launch(&mut self, launch: &Launch, now: Tick, out: &mut Outbox) {
        let task = &launch.task;
        if !self.launched.insert((task.task_id.clone(), task.attempt)) {
            return;
        }
        // a newer attempt supersedes whatever still runs under an older one
        if self.assigned.get(&task.task_id).is_some_and(|a| a.attempt < task.attempt) {
            if let Some(ev) = self.runner.kill(&task.task_id) {
                self.report(ev, None, now, out);
            }
        }
        let archive = match task.archive.as_deref().map(base64_bytes::decode) {
            Some(Ok(bytes)) => Some(bytes),
            Some(Err(_)) => None,
            None => None,
        };
        self.assigned.insert(
            task.task_id.clone(),
            Assigned {
                agent_id: launch.agent_id.clone(),
                framework_id: launch.framework_id.clone(),
                attempt: task.attempt,
                resources: task.spec.required.clone(),
            },
        );
        let ev = self.runner.launch(
            LaunchRequest {
                task_id: &task.task_id,
                spec: &task.spec,
                archive: archive.as_deref(),
                attempt: task.attempt.saturating_sub(1),
            },
            now,
        );
        self.report(ev, None, now, out);
    }

    fn on_kill(&mut self, kill: &Kill, now: Tick, out: &mut Outbox) {
        let current = self.assigned.get(&kill.task_id).map(|a| a.attempt);
        if let Some(want) = kill.attempt {
            if current != Some(want) {
                // overtook its launch; refuse that launch when it lands
                if current.is_none_or(|have| want > have) {
                    self.launched.insert((kill.task_id.clone(), want));
                }
                return;
            }
        }
        if let Some(ev) = self.runner.kill(&kill.task_id) {
            self.report(ev, Some(kill), now, out);
        }
    }

    fn on_probe(&self, from: &NodeId, probe: &Probe, out: &mut Outbox) {
        let live = self.runner.live();
        let current: Vec<ResourceVector> = self
            .assigned
            .iter()
            .filter(|(id, _)| live.contains(id))
            .map(|(_, a)| a.resources.clone())
            .collect();
        let estimate = self.model.estimate(&current, &self.config.resources, &probe.sketch);
        let metric = estimate.as_ref().ok().map(|m| m.value);
        out.send(
            from.clone(),
            Body::ProbeReply(ProbeReply {
                probe_id: probe.probe_id.clone(),
                results: probe
                    .agent_ids
                    .iter()
                    .map(|agent| ProbeResult {
                        agent_id: agent.clone(),
                        metric,
                        responded: true,
                        rtt: 0,
                    })
                    .collect(),
                detail: estimate.ok(),
            }),
        );
    }

    pub fn handle(&mut self, env: &Envelope, now: Tick, out: &mut Outbox) {
        if self.down {
            return;
        }
        match &env.body {
            Body::Register(Registration::DeviceAccepted { device_id, direct, master }) if device_id == &self.config.id => {
                match (direct, master) {
                    (true, Some(master)) => {
                        self.link = Link::Direct {
                            master: master.clone(),
                            acked: false,
                        };
                        self.register(now, out);
                    }
                    _ => self.link = Link::Gateway,
                }
            }
            Body::Heartbeat(Heartbeat::DeviceAck { acks, reregister, .. }) => {
                self.on_acks(acks);
                if *reregister && !self.is_direct() {
                    self.link = Link::Unregistered;
                    self.register(now, out);
                }
            }
            Body::Heartbeat(Heartbeat::AgentAck { acks, reregister, .. }) => {
                self.on_acks(acks);
                if let Link::Direct { acked, .. } = &mut self.link {
                    *acked = !reregister;
                    if *reregister {
                        self.register(now, out);
                    }
                }
            }
            Body::Launch(launch) => self.on_launch(launch, now, out),
            Body::Kill(kill) => self.on_kill(kill, now, out),
            Body::Probe(probe) => self.on_probe(&env.from, probe, out),
            _ => {}
        }
    }

    pub fn tick(&mut self, now: Tick, out: &mut Outbox) {
        if self.down {
            return;
        }
        for ev in self.runner.poll(now) {
            self.report(ev, None, now, out);
        }
        let retry_due = self
            .last_register
            .is_none_or(|t| now >= t + self.config.register_retry);
        match &self.link {
            Link::Unregistered if retry_due => self.register(now, out),
            Link::Direct { acked: false, .. } if retry_due => self.register(now, out),
            Link::Unregistered | Link::Direct { acked: false, .. } => {}
            link => {
                if self
                    .last_heartbeat
                    .is_none_or(|t| now >= t + self.config.heartbeat_period)
                {
                    self.last_heartbeat = Some(now);
                    let body = match link {
                        Link::Gateway => Heartbeat::Device {
                            device_id: self.config.id.clone(),
                            live: self.runner.live(),
                        },
                        _ => Heartbeat::Agent {
                            agent_id: AgentId(self.config.id.0.clone()),
                        },
                    };
                    out.send(self.upstream(), Body::Heartbeat(body));
                }
            }
        }
        let up = self.upstream();
        for (st, sent) in self.pending.values_mut() {
            if now >= *sent + self.config.status_resend {
                *sent = now;
                out.send(up.clone(), Body::Status(st.clone()));
            }
        }
    }
}
