//! Edge gateway: discovers devices, runs one proxy agent per device towards
//! the master, checkpoints what each proxy believes is running and restarts
//! the proxies from those checkpoints when they die.

pub mod checkpoint;
pub mod dsm;

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::domain::{
    AgentId, AttributeConstraint, AttributeSet, DeviceId, FrameworkId, NodeId, PortSet, ResourceVector, TaskId,
    TaskState, Tick,
};
use crate::events::{Event, Outbox, WatchdogAction};
use crate::protocol::{
    Body, Envelope, Heartbeat, Kill, Launch, Observation, ObservationBatch, Probe, Registration,
    ReportedTask, StatusUpdate,
};

pub use checkpoint::{Checkpoint, CheckpointEntry, CheckpointError, CheckpointIo, FsCheckpoints, MemCheckpoints};
pub use dsm::{merge_opinions, DeviceRecord, Discovery, DiscoveryConfig, NoData};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("a proxy already runs for device {0}")]
    AlreadyLaunched(DeviceId),
    #[error("device {0} is avoided")]
    DeviceAvoided(DeviceId),
    #[error("unknown device {0}")]
    UnknownDevice(DeviceId),
}

/// How much of a device a proxy advertises, given the raw capacity of the
/// devices already pooled behind this gateway.
pub trait ExposurePolicy: Send {
    fn expose(&self, pooled: &ResourceVector, device: &ResourceVector) -> ResourceVector;
}

/// Keeps the gateway's total advertisement at `floor(fraction * pooled)`
/// per component: each new device adds the growth of that floor. A single
/// proxy therefore gets `floor` or `ceil` of its own share, and rounding
/// never leaks away across a fleet.
#[derive(Debug, Clone, Copy)]
pub struct FixedFraction(pub f64);

impl ExposurePolicy for FixedFraction {
    fn expose(&self, pooled: &ResourceVector, device: &ResourceVector) -> ResourceVector {
        let f = self.0;
        let grow = |before: u64, add: u64| {
            let scale = |v: u64| (v as f64 * f).floor() as u64;
            (scale(before + add) - scale(before)).min(add)
        };
        ResourceVector::zero()
            .with_cpu_millis(grow(pooled.cpu_millis(), device.cpu_millis()))
            .with_mem(grow(pooled.mem_mb, device.mem_mb))
            .with_disk(grow(pooled.disk_mb, device.disk_mb))
            .with_gpus(grow(pooled.gpus, device.gpus))
            .with_ports(device.ports.clone())
    }
}

/// Countable resources only; ports are per-device and never pooled.
fn quantities(r: &ResourceVector) -> ResourceVector {
    r.clone().with_ports(PortSet::default())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatewayConfig {
    pub node: NodeId,
    pub master: NodeId,
    /// Gateways that receive this gateway's device observations.
    pub peers: Vec<NodeId>,
    pub fraction: f64,
    pub discovery: DiscoveryConfig,
    pub heartbeat_period: Tick,
    /// A device not heard for longer than this is considered gone.
    pub device_timeout: Tick,
    pub dsm_period: Tick,
    pub watchdog_period: Tick,
    pub checkpoint_every: Tick,
    pub status_resend: Tick,
    pub register_retry: Tick,
    /// Ticks without a master ack before the watchdog reconnects.
    pub reconnect_after: Tick,
    /// Set when the master has no transient support: an ack arriving after
    /// this long a silence means our tasks were given up on.
    pub self_kill_after: Option<Tick>,
    pub direct_mode: bool,
}

impl GatewayConfig {
    pub fn new(node: impl Into<NodeId>, master: impl Into<NodeId>) -> Self {
        Self {
            node: node.into(),
            master: master.into(),
            peers: Vec::new(),
            fraction: 0.5,
            discovery: DiscoveryConfig::default(),
            heartbeat_period: 1,
            device_timeout: 3,
            dsm_period: 5,
            watchdog_period: 10,
            checkpoint_every: 10,
            status_resend: 2,
            register_retry: 3,
            reconnect_after: 3,
            self_kill_after: None,
            direct_mode: false,
        }
    }
}

pub fn proxy_agent_id(gateway: &NodeId, device: &DeviceId) -> AgentId {
    AgentId(format!("{gateway}:{device}"))
}

pub fn device_node(device: &DeviceId) -> NodeId {
    NodeId(device.0.clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProxyTask {
    pub framework_id: FrameworkId,
    pub spec_hash: String,
    pub state: TaskState,
    pub attempt: u32,
    pub resources: ResourceVector,
}

/// The master-facing stand-in for one device.
#[derive(Debug, Clone)]
pub struct Proxy {
    pub agent_id: AgentId,
    pub device_id: DeviceId,
    pub advertised: ResourceVector,
    /// Raw device capacity this proxy accounts for in the pool.
    pub device_total: ResourceVector,
    pub attributes: AttributeSet,
    pub registered: bool,
    /// Address epoch we last registered with.
    pub epoch: u64,
    pub tasks: BTreeMap<TaskId, ProxyTask>,
    last_register: Option<Tick>,
    last_ack: Option<Tick>,
    last_heartbeat: Option<Tick>,
    last_checkpoint: Option<Tick>,
    /// Statuses this proxy generated itself, until the master acks them.
    pending: BTreeMap<String, (StatusUpdate, Tick)>,
}

impl Proxy {
    pub fn pending_statuses(&self) -> impl Iterator<Item = &StatusUpdate> {
        self.pending.values().map(|(s, _)| s)
    }

    fn checkpoint(&self, now: Tick) -> Checkpoint {
        Checkpoint {
            agent_id: self.agent_id.clone(),
            tasks: self
                .tasks
                .iter()
                .map(|(id, t)| CheckpointEntry {
                    task_id: id.clone(),
                    framework_id: t.framework_id.clone(),
                    spec_hash: t.spec_hash.clone(),
                    state: t.state,
                    attempt: t.attempt,
                    resources: t.resources.clone(),
                })
                .collect(),
            written_at: now,
        }
    }
}

pub struct Gateway {
    config: GatewayConfig,
    exposure: Box<dyn ExposurePolicy>,
    discovery: Discovery,
    checkpoints: Box<dyn CheckpointIo>,
    proxies: BTreeMap<DeviceId, Proxy>,
    /// Raw capacity of every device with a proxy.
    pooled: ResourceVector,
    /// False after a crash until the watchdog restarts the proxies.
    running: bool,
    epoch: u64,
    timer_fired: bool,
}

impl Gateway {
    pub fn new(config: GatewayConfig, checkpoints: Box<dyn CheckpointIo>) -> Self {
        let exposure = Box::new(FixedFraction(config.fraction));
        let discovery = Discovery::new(config.discovery.clone());
        Self {
            config,
            exposure,
            discovery,
            checkpoints,
            proxies: BTreeMap::new(),
            pooled: ResourceVector::zero(),
            running: true,
            epoch: 0,
            timer_fired: false,
        }
    }

    pub fn with_exposure(mut self, policy: Box<dyn ExposurePolicy>) -> Self {
        self.exposure = policy;
        self
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn node_id(&self) -> &NodeId {
        &self.config.node
    }

    pub fn discovery(&self) -> &Discovery {
        &self.discovery
    }

    pub fn proxies(&self) -> impl Iterator<Item = &Proxy> {
        self.proxies.values()
    }

    pub fn proxy(&self, device: &DeviceId) -> Option<&Proxy> {
        self.proxies.get(device)
    }

    pub fn is_running(&self) -> bool {
        self.running
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn set_epoch(&mut self, epoch: u64) {
        self.epoch = epoch;
    }

    pub fn set_direct_mode(&mut self, direct: bool) {
        self.config.direct_mode = direct;
    }

    /// Makes the watchdog run on the next tick regardless of its period.
    pub fn fire_timer(&mut self) {
        self.timer_fired = true;
    }

    pub fn find_providers(&self, constraints: &[AttributeConstraint]) -> BTreeSet<DeviceId> {
        self.discovery.find_providers(constraints)
    }

    /// Feeds observations from outside (peers or a test) and merges them.
    pub fn observe(&mut self, observations: &[Observation]) {
        self.discovery.receive(observations);
        self.discovery.merge_all();
    }

    fn device_alive(&self, device: &DeviceId, now: Tick) -> bool {
        self.discovery
            .device(device)
            .is_some_and(|d| now.saturating_sub(d.last_seen) <= self.config.device_timeout)
    }

    fn device_of(&self, agent: &AgentId) -> Option<DeviceId> {
        self.proxies
            .values()
            .find(|p| &p.agent_id == agent)
            .map(|p| p.device_id.clone())
    }

    /// Kills the proxies. Discovery and the watchdog keep going.
    pub fn crash(&mut self, out: &mut Outbox) {
        self.proxies.clear();
        self.pooled = ResourceVector::zero();
        self.running = false;
        out.emit(Event::ProxiesStopped {
            gateway: self.config.node.clone(),
        });
    }

    /// Starts a proxy for a registered, non-avoided device.
    pub fn launch_proxy(&mut self, device: &DeviceId, now: Tick, out: &mut Outbox) -> Result<AgentId, GatewayError> {
        if self.proxies.contains_key(device) {
            return Err(GatewayError::AlreadyLaunched(device.clone()));
        }
        let record = self
            .discovery
            .device(device)
            .ok_or_else(|| GatewayError::UnknownDevice(device.clone()))?;
        if record.avoided {
            return Err(GatewayError::DeviceAvoided(device.clone()));
        }
        let proxy = Proxy {
            agent_id: proxy_agent_id(&self.config.node, device),
            device_id: device.clone(),
            advertised: self.exposure.expose(&self.pooled, &record.resources),
            device_total: quantities(&record.resources),
            attributes: record.attributes.clone(),
            registered: false,
            epoch: self.epoch,
            tasks: BTreeMap::new(),
            last_register: None,
            last_ack: None,
            last_heartbeat: None,
            last_checkpoint: None,
            pending: BTreeMap::new(),
        };
        let agent = proxy.agent_id.clone();
        out.emit(Event::ProxyLaunched {
            agent: agent.clone(),
            device: device.clone(),
            advertised: proxy.advertised.clone(),
        });
        self.pooled = &self.pooled + &proxy.device_total;
        self.proxies.insert(device.clone(), proxy);
        self.send_register(device, false, now, out);
        self.write_checkpoint(device, now, out);
        Ok(agent)
    }

    fn send_register(&mut self, device: &DeviceId, reregister: bool, now: Tick, out: &mut Outbox) {
        let epoch = self.epoch;
        let node = self.config.node.clone();
        let Some(p) = self.proxies.get_mut(device) else {
            return;
        };
        p.last_register = Some(now);
        p.epoch = epoch;
        let running = p
            .tasks
            .iter()
            .map(|(id, t)| ReportedTask {
                task_id: id.clone(),
                framework_id: t.framework_id.clone(),
                resources: t.resources.clone(),
                attempt: t.attempt,
            })
            .collect();
        out.send(
            self.config.master.clone(),
            Body::Register(Registration::Agent {
                agent_id: p.agent_id.clone(),
                gateway_id: node,
                resources: p.advertised.clone(),
                attributes: p.attributes.clone(),
                running,
                reregister,
                epoch,
            }),
        );
    }

    fn write_checkpoint(&mut self, device: &DeviceId, now: Tick, out: &mut Outbox) {
        let Some(p) = self.proxies.get_mut(device) else {
            return;
        };
        p.last_checkpoint = Some(now);
        let cp = p.checkpoint(now);
        if let Err(e) = self.checkpoints.write(&cp) {
            out.error(format!("checkpoint of {}: {e}", cp.agent_id));
        }
    }

    fn proxy_status(&mut self, device: &DeviceId, task: &TaskId, t: &ProxyTask, now: Tick, out: &mut Outbox) {
        let master = self.config.master.clone();
        let Some(p) = self.proxies.get_mut(device) else {
            return;
        };
        let st = StatusUpdate {
            update_id: format!("{}:{}:{}:lost", p.agent_id, task, t.attempt),
            task_id: task.clone(),
            state: TaskState::Lost,
            agent_id: p.agent_id.clone(),
            framework_id: t.framework_id.clone(),
            attempt: t.attempt,
            class: None,
            grace: None,
            reason: Some("executor gone".into()),
            exit_status: None,
            reconcile: false,
        };
        out.send(master, Body::Status(st.clone()));
        p.pending.insert(st.update_id.clone(), (st, now));
    }

    /// Rebuilds every proxy from its checkpoint and what its device reports
    /// as live: checkpointed and live tasks are adopted, checkpointed but
    /// gone tasks are reported lost, and live tasks nobody knows are killed.
    pub fn recover(&mut self, now: Tick, out: &mut Outbox) {
        self.running = true;
        let devices: Vec<(DeviceId, Vec<TaskId>)> = self
            .discovery
            .devices()
            .filter(|d| !d.avoided)
            .map(|d| (d.device_id.clone(), d.live.clone()))
            .collect();
        for (device, live) in devices {
            if self.proxies.contains_key(&device) {
                continue;
            }
            let agent = proxy_agent_id(&self.config.node, &device);
            let (entries, corrupt) = match self.checkpoints.read(&agent) {
                Ok(Some(cp)) => (cp.tasks, false),
                Ok(None) => (Vec::new(), false),
                Err(e) => {
                    out.error(e.to_string());
                    (Vec::new(), true)
                }
            };
            let live: BTreeSet<TaskId> = live.into_iter().collect();
            let known: BTreeSet<TaskId> = entries.iter().map(|e| e.task_id.clone()).collect();
            let mut adopted = Vec::new();
            let mut lost = Vec::new();
            for e in entries {
                let t = ProxyTask {
                    framework_id: e.framework_id,
                    spec_hash: e.spec_hash,
                    state: e.state,
                    attempt: e.attempt,
                    resources: e.resources,
                };
                if live.contains(&e.task_id) {
                    adopted.push((e.task_id, t));
                } else {
                    lost.push((e.task_id, t));
                }
            }
            let orphans: Vec<TaskId> = live.difference(&known).cloned().collect();
            if self.launch_proxy(&device, now, &mut Outbox::default()).is_err() {
                continue;
            }
            // launch_proxy registered with an empty task list; redo it with
            // the adopted tasks in place
            out.emit(Event::ProxyLaunched {
                agent: agent.clone(),
                device: device.clone(),
                advertised: self.proxies[&device].advertised.clone(),
            });
            let p = self.proxies.get_mut(&device).expect("just launched");
            p.tasks = adopted.iter().cloned().collect();
            out.emit(Event::CheckpointRecovered {
                agent: agent.clone(),
                adopted: adopted.iter().map(|(id, _)| id.clone()).collect(),
                lost: lost.iter().map(|(id, _)| id.clone()).collect(),
                orphans: orphans.clone(),
                corrupt,
            });
            self.send_register(&device, true, now, out);
            for (id, t) in &lost {
                self.proxy_status(&device, id, t, now, out);
            }
            for id in orphans {
                out.send(
                    device_node(&device),
                    Body::Kill(Kill {
                        task_id: id,
                        agent_id: Some(agent.clone()),
                        framework_id: None,
                        attempt: None,
                    }),
                );
            }
            self.write_checkpoint(&device, now, out);
        }
    }

    /// What the watchdog would do right now. Empty when all is well.
    pub fn watchdog_actions(&self, now: Tick) -> Vec<WatchdogAction> {
        if !self.running {
            return vec![WatchdogAction::Restart];
        }
        if self.proxies.values().any(|p| p.epoch != self.epoch) {
            return vec![WatchdogAction::Reregister];
        }
        let stale = self.proxies.values().any(|p| {
            p.registered
                && self.device_alive(&p.device_id, now)
                && p
                    .last_ack
                    .is_some_and(|a| now.saturating_sub(a) > self.config.reconnect_after)
        });
        if stale {
            vec![WatchdogAction::Reconnect]
        } else {
            Vec::new()
        }
    }

    pub fn run_watchdog(&mut self, now: Tick, out: &mut Outbox) {
        for action in self.watchdog_actions(now) {
            out.emit(Event::Watchdog {
                gateway: self.config.node.clone(),
                action,
            });
            match action {
                WatchdogAction::Restart => self.recover(now, out),
                WatchdogAction::Reregister => {
                    let stale: Vec<DeviceId> = self
                        .proxies
                        .values()
                        .filter(|p| p.epoch != self.epoch)
                        .map(|p| p.device_id.clone())
                        .collect();
                    for d in stale {
                        if let Some(p) = self.proxies.get_mut(&d) {
                            p.registered = false;
                        }
                        self.send_register(&d, true, now, out);
                    }
                }
                WatchdogAction::Reconnect => {
                    let limit = self.config.reconnect_after;
                    let stale: Vec<AgentId> = self
                        .proxies
                        .values()
                        .filter(|p| p.registered && p.last_ack.is_some_and(|a| now.saturating_sub(a) > limit))
                        .filter(|p| self.device_alive(&p.device_id, now))
                        .map(|p| p.agent_id.clone())
                        .collect();
                    for agent in stale {
                        out.send(self.config.master.clone(), Body::Heartbeat(Heartbeat::Agent { agent_id: agent }));
                    }
                }
            }
        }
    }

    fn on_device_register(
        &mut self,
        device: &DeviceId,
        resources: &ResourceVector,
        attributes: &AttributeSet,
        now: Tick,
        out: &mut Outbox,
    ) {
        let record = self
            .discovery
            .register_device(device.clone(), resources.clone(), attributes.clone(), now);
        let avoided = record.avoided;
        out.emit(Event::DeviceRegistered {
            device: device.clone(),
            opinion: record.opinion,
            avoided,
        });
        let direct = self.config.direct_mode;
        out.send(
            device_node(device),
            Body::Register(Registration::DeviceAccepted {
                device_id: device.clone(),
                direct,
                master: direct.then(|| self.config.master.clone()),
            }),
        );
        if direct || avoided || !self.running {
            return;
        }
        if !self.proxies.contains_key(device) {
            let _ = self.launch_proxy(device, now, out);
            return;
        }
        // the device came back from a restart, or only resent a registration
        // whose acceptance was lost; either way its tasks are reported lost
        // and killed in case they still run
        let tasks = std::mem::take(&mut self.proxies.get_mut(device).expect("present").tasks);
        let agent = self.proxies[device].agent_id.clone();
        for (id, t) in &tasks {
            self.proxy_status(device, id, t, now, out);
            out.send(
                device_node(device),
                Body::Kill(Kill {
                    task_id: id.clone(),
                    agent_id: Some(agent.clone()),
                    framework_id: Some(t.framework_id.clone()),
                    attempt: Some(t.attempt),
                }),
            );
        }
        let p = self.proxies.get_mut(device).expect("present");
        let others = self.pooled.checked_sub(&p.device_total).unwrap_or_default();
        let advertised = self.exposure.expose(&others, resources);
        p.device_total = quantities(resources);
        self.pooled = &others + &p.device_total;
        if p.advertised != advertised || &p.attributes != attributes {
            p.advertised = advertised;
            p.attributes = attributes.clone();
            p.registered = false;
            self.send_register(device, true, now, out);
        }
        self.write_checkpoint(device, now, out);
    }

    fn on_agent_ack(&mut self, agent: &AgentId, acks: &[String], reregister: bool, now: Tick, out: &mut Outbox) {
        let Some(device) = self.device_of(agent) else {
            return;
        };
        let limit = self.config.self_kill_after;
        let p = self.proxies.get_mut(&device).expect("present");
        let gap = p.last_ack.map(|a| now.saturating_sub(a));
        p.last_ack = Some(now);
        let mut relay = Vec::new();
        for id in acks {
            if p.pending.remove(id).is_none() {
                relay.push(id.clone());
            }
        }
        if let (Some(limit), Some(gap)) = (limit, gap) {
            if gap >= limit && !p.tasks.is_empty() {
                // the master gave up on these long ago
                let tasks = std::mem::take(&mut p.tasks);
                for (id, t) in &tasks {
                    out.send(
                        device_node(&device),
                        Body::Kill(Kill {
                            task_id: id.clone(),
                            agent_id: Some(agent.clone()),
                            framework_id: Some(t.framework_id.clone()),
                            attempt: Some(t.attempt),
                        }),
                    );
                }
                out.emit(Event::SelfKill {
                    agent: agent.clone(),
                    tasks: tasks.keys().cloned().collect(),
                    gap,
                });
                self.write_checkpoint(&device, now, out);
            }
        }
        let p = self.proxies.get_mut(&device).expect("present");
        if reregister {
            p.registered = false;
            self.send_register(&device, true, now, out);
        } else {
            p.registered = true;
        }
        if !relay.is_empty() {
            out.send(
                device_node(&device),
                Body::Heartbeat(Heartbeat::DeviceAck {
                    device_id: device.clone(),
                    acks: relay,
                    reregister: false,
                }),
            );
        }
    }

    fn on_device_status(&mut self, st: &StatusUpdate, now: Tick, out: &mut Outbox) {
        let Some(device) = self.device_of(&st.agent_id) else {
            return;
        };
        let p = self.proxies.get_mut(&device).expect("present");
        let mut changed = false;
        match p.tasks.get_mut(&st.task_id) {
            Some(t) if t.attempt == st.attempt => {
                if st.state.is_active() {
                    changed = t.state != st.state;
                    t.state = st.state;
                } else {
                    p.tasks.remove(&st.task_id);
                    changed = true;
                }
            }
            _ => {}
        }
        if changed {
            self.write_checkpoint(&device, now, out);
        }
        out.send(self.config.master.clone(), Body::Status(st.clone()));
    }

    /// Kills tasks a device runs that its proxy no longer tracks, such as
    /// ones already reported lost.
    fn kill_orphans(&self, device: &DeviceId, live: &[TaskId], out: &mut Outbox) {
        if !self.running || self.config.direct_mode {
            return;
        }
        let Some(p) = self.proxies.get(device) else {
            return;
        };
        for id in live.iter().filter(|id| !p.tasks.contains_key(*id)) {
            out.emit(Event::OrphanKilled {
                task: id.clone(),
                agent: p.agent_id.clone(),
            });
            out.send(
                device_node(device),
                Body::Kill(Kill {
                    task_id: id.clone(),
                    agent_id: Some(p.agent_id.clone()),
                    framework_id: None,
                    attempt: None,
                }),
            );
        }
    }

    fn on_launch(&mut self, launch: &Launch, now: Tick, out: &mut Outbox) {
        let Some(device) = self.device_of(&launch.agent_id) else {
            return;
        };
        let p = self.proxies.get_mut(&device).expect("present");
        p.tasks.insert(
            launch.task.task_id.clone(),
            ProxyTask {
                framework_id: launch.framework_id.clone(),
                spec_hash: launch.task.spec.digest(),
                state: TaskState::Staging,
                attempt: launch.task.attempt,
                resources: launch.task.spec.required.clone(),
            },
        );
        self.write_checkpoint(&device, now, out);
        out.send(device_node(&device), Body::Launch(launch.clone()));
    }

    pub fn handle(&mut self, env: &Envelope, now: Tick, out: &mut Outbox) {
        match &env.body {
            Body::Register(Registration::Device {
                device_id,
                resources,
                attributes,
            }) => self.on_device_register(device_id, resources, attributes, now, out),
            Body::Heartbeat(Heartbeat::Device { device_id, live }) => {
                self.kill_orphans(device_id, live, out);
                if !self.discovery.heard(device_id, live.clone(), now) {
                    out.send(
                        env.from.clone(),
                        Body::Heartbeat(Heartbeat::DeviceAck {
                            device_id: device_id.clone(),
                            acks: vec![],
                            reregister: true,
                        }),
                    );
                }
            }
            Body::Observations(batch) => self.discovery.receive(&batch.observations),
            // proxies are down: the device resends, the master times us out
            _ if !self.running => {}
            Body::Heartbeat(Heartbeat::AgentAck {
                agent_id,
                acks,
                reregister,
            }) => self.on_agent_ack(agent_id, acks, *reregister, now, out),
            Body::Status(st) => self.on_device_status(st, now, out),
            Body::Launch(launch) => self.on_launch(launch, now, out),
            Body::Kill(kill) => {
                if let Some(device) = kill.agent_id.as_ref().and_then(|a| self.device_of(a)) {
                    out.send(device_node(&device), Body::Kill(kill.clone()));
                }
            }
            Body::Probe(probe) => {
                for agent in &probe.agent_ids {
                    if let Some(device) = self.device_of(agent) {
                        out.send(
                            device_node(&device),
                            Body::Probe(Probe {
                                agent_ids: vec![agent.clone()],
                                ..probe.clone()
                            }),
                        );
                    }
                }
            }
            Body::ProbeReply(reply) => {
                out.send(self.config.master.clone(), Body::ProbeReply(reply.clone()));
            }
            _ => {}
        }
    }

    pub fn tick(&mut self, now: Tick, out: &mut Outbox) {
        if self.config.dsm_period > 0 && now.is_multiple_of(self.config.dsm_period) {
            self.share_observations(now, out);
        }
        let due = self.config.watchdog_period > 0 && now > 0 && now.is_multiple_of(self.config.watchdog_period);
        if due || std::mem::take(&mut self.timer_fired) {
            self.run_watchdog(now, out);
        }
        if !self.running {
            return;
        }
        let devices: Vec<DeviceId> = self.proxies.keys().cloned().collect();
        for d in devices {
            self.tick_proxy(&d, now, out);
        }
    }

    fn share_observations(&mut self, now: Tick, out: &mut Outbox) {
        let scored: Vec<Observation> = self
            .discovery
            .devices()
            .map(|d| Observation {
                observer_id: self.config.node.clone(),
                subject_id: d.device_id.clone(),
                score: if now.saturating_sub(d.last_seen) <= self.config.device_timeout {
                    1.0
                } else {
                    0.0
                },
                at: now,
            })
            .collect();
        if scored.is_empty() {
            return;
        }
        for peer in &self.config.peers {
            out.send(
                peer.clone(),
                Body::Observations(ObservationBatch {
                    observations: scored.clone(),
                }),
            );
        }
        for o in scored {
            self.discovery.observe(o);
        }
        self.discovery.merge_all();
    }

    fn tick_proxy(&mut self, device: &DeviceId, now: Tick, out: &mut Outbox) {
        let alive = self.device_alive(device, now);
        let cfg = self.config.clone();
        let p = self.proxies.get_mut(device).expect("present");
        if !p.registered {
            if p.last_register.is_none_or(|t| now >= t + cfg.register_retry) {
                self.send_register(device, true, now, out);
            }
        } else if alive && p.last_heartbeat.is_none_or(|t| now >= t + cfg.heartbeat_period) {
            p.last_heartbeat = Some(now);
            out.send(
                cfg.master.clone(),
                Body::Heartbeat(Heartbeat::Agent {
                    agent_id: p.agent_id.clone(),
                }),
            );
        }
        let p = self.proxies.get_mut(device).expect("present");
        for (st, sent) in p.pending.values_mut() {
            if now >= *sent + cfg.status_resend {
                *sent = now;
                out.send(cfg.master.clone(), Body::Status(st.clone()));
            }
        }
        if p.last_checkpoint.is_none_or(|t| now >= t + cfg.checkpoint_every) {
            self.write_checkpoint(device, now, out);
        }
    }
}
