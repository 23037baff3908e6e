//! Deterministic single-process simulation of every tier: a virtual clock,
//! a message network with delay, loss, partitions and address changes, and
//! fault injection.
//!
//! Each tick runs the events due at that tick in insertion order, then every
//! live node's `tick` in node-id order, then the cluster-wide checks.

mod scenario;
mod trace;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{Cluster, ControlError, ControlPlane, DeploymentRequest, TaskAction};
use crate::device::{Device, DeviceConfig};
use crate::domain::{
    AgentId, AttributeValue, NodeId, TaskId, TaskRecord, Tick, EXECUTORS_ATTRIBUTE,
};
use crate::events::Outbox;
use crate::executor::{SimExecutor, TaskLogs};
use crate::gateway::{Gateway, GatewayConfig, MemCheckpoints};
use crate::master::{Master, MasterConfig};
use crate::persistence::{MemStore, Store, StoreExt};
use crate::protocol::{Envelope, Outgoing};
use crate::scheduler::{Notification, RecordingNotifier, Scheduler, SchedulerConfig};

pub use scenario::{
    Check, DeviceSpec, EventMatch, FrameworkSpec, GatewaySpec, NamedAssertion, NetworkParams, Scenario, SimEvent,
    SimEventKind, Topology, WorkloadItem, WorkloadOp, CONTROL_NODE,
};
pub use trace::{event_matches, event_tag, Trace, TraceEvent, TraceLine};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("malformed scenario: {0}")]
    MalformedScenario(String),
    #[error("event at tick {at} is in the past (now {now})")]
    PastTick { at: Tick, now: Tick },
}

enum NodeState {
    Master {
        config: MasterConfig,
        node: Option<Master>,
    },
    Scheduler {
        config: SchedulerConfig,
        node: Option<Scheduler>,
    },
    Gateway(Gateway),
    Device(Device),
    Control,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssertionResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct SimReport {
    pub name: String,
    pub trace: Trace,
    pub assertions: Vec<AssertionResult>,
    pub tasks: Vec<TaskRecord>,
    pub violations: Vec<(Tick, String)>,
    /// Agent-ticks checked for resource conservation.
    pub conservation_checks: u64,
    pub max_live: BTreeMap<TaskId, usize>,
    pub notifications: Vec<Notification>,
}

impl SimReport {
    pub fn passed(&self) -> bool {
        self.assertions.iter().all(|a| a.passed)
    }
}

struct DeviceLogs<'a>(&'a BTreeMap<NodeId, NodeState>);

impl Cluster for DeviceLogs<'_> {
    fn logs(&self, agent: Option<&AgentId>, task: &TaskId) -> Option<TaskLogs> {
        // proxy agents are named "<gateway>:<device>"
        let preferred = agent.map(|a| NodeId(a.as_str().rsplit(':').next().unwrap_or_default().to_string()));
        if let Some(NodeState::Device(d)) = preferred.as_ref().and_then(|n| self.0.get(n)) {
            if let Some(logs) = d.logs(task) {
                return Some(logs);
            }
        }
        self.0.values().find_map(|n| match n {
            NodeState::Device(d) => d.logs(task),
            _ => None,
        })
    }
}

pub struct Sim {
    scenario: Scenario,
    now: Tick,
    rng: ChaCha8Rng,
    store: Arc<MemStore>,
    nodes: BTreeMap<NodeId, NodeState>,
    dormant: BTreeMap<NodeId, Tick>,
    control: ControlPlane,
    checkpoints: MemCheckpoints,
    queue: BTreeMap<(Tick, u64), SimEventKind>,
    next_event: u64,
    cuts: Vec<BTreeSet<NodeId>>,
    epochs: BTreeMap<NodeId, u64>,
    send_seq: BTreeMap<NodeId, u64>,
    trace: Trace,
    notifier: RecordingNotifier,
    violations: Vec<(Tick, String)>,
    conservation_checks: u64,
    max_live: BTreeMap<TaskId, usize>,
}

impl Sim {
    pub fn new(scenario: Scenario) -> Result<Self, SimError> {
        scenario.validate()?;
        let store = Arc::new(MemStore::new());
        let dyn_store: Arc<dyn Store> = store.clone();
        let notifier = RecordingNotifier::new();
        let checkpoints = MemCheckpoints::new();
        let t = &scenario.topology;
        let master_cfg = t.master.clone();
        let master_id = master_cfg.node_id.clone();
        let mut nodes = BTreeMap::new();
        let mut dormant = BTreeMap::new();
        nodes.insert(
            master_id.clone(),
            NodeState::Master {
                node: Some(Master::new(master_cfg.clone(), dyn_store.clone(), 0)),
                config: master_cfg.clone(),
            },
        );
        for f in &t.frameworks {
            let mut cfg = SchedulerConfig::new(f.id.as_str());
            cfg.master = master_id.clone();
            if let Some(v) = f.replication_threshold {
                cfg.replication_threshold = v;
            }
            if let Some(v) = f.replica_count {
                cfg.replica_count = v;
            }
            if let Some(v) = f.recovery_grace {
                cfg.recovery_grace = v;
            }
            cfg.probe_interval = f.probe_interval;
            let node = Scheduler::new(cfg.clone(), dyn_store.clone(), Box::new(notifier.clone()));
            nodes.insert(
                cfg.node_id(),
                NodeState::Scheduler {
                    config: cfg,
                    node: Some(node),
                },
            );
        }
        for g in &t.gateways {
            let mut cfg = GatewayConfig::new(g.id.clone(), master_id.clone());
            cfg.peers = g.peers.clone();
            if let Some(v) = g.fraction {
                cfg.fraction = v;
            }
            if let Some(v) = g.watchdog_period {
                cfg.watchdog_period = v;
            }
            if let Some(v) = g.dsm_period {
                cfg.dsm_period = v;
            }
            if let Some(v) = g.device_timeout {
                cfg.device_timeout = v;
            }
            if let Some(v) = g.checkpoint_every {
                cfg.checkpoint_every = v;
            }
            if g.self_kill.unwrap_or(!master_cfg.transient_support) {
                cfg.self_kill_after = Some(master_cfg.loss_threshold());
            }
            cfg.direct_mode = g.direct_mode;
            nodes.insert(
                g.id.clone(),
                NodeState::Gateway(Gateway::new(cfg, Box::new(checkpoints.clone()))),
            );
        }
        for d in &t.devices {
            let mut attributes = d.attributes.clone();
            if !attributes.contains(EXECUTORS_ATTRIBUTE) {
                let _ = attributes.insert(EXECUTORS_ATTRIBUTE, AttributeValue::set(["sim-task"]));
            }
            let cfg = DeviceConfig::new(d.id.clone(), d.gateway.clone(), d.resources.clone()).with_attributes(attributes);
            let node = cfg.node_id();
            if d.join_at > 0 {
                dormant.insert(node.clone(), d.join_at);
            }
            nodes.insert(node, NodeState::Device(Device::new(cfg, Box::new(SimExecutor::default()))));
        }
        nodes.insert(NodeId::from(CONTROL_NODE), NodeState::Control);
        let scheduler = NodeId(t.frameworks[0].id.0.clone());
        let control = ControlPlane::new(dyn_store, scheduler).expect("empty store");
        let mut sim = Self {
            rng: ChaCha8Rng::seed_from_u64(scenario.seed),
            now: 0,
            store,
            nodes,
            dormant,
            control,
            checkpoints,
            queue: BTreeMap::new(),
            next_event: 0,
            cuts: Vec::new(),
            epochs: BTreeMap::new(),
            send_seq: BTreeMap::new(),
            trace: Trace::default(),
            notifier,
            violations: Vec::new(),
            conservation_checks: 0,
            max_live: BTreeMap::new(),
            scenario,
        };
        let faults = sim.scenario.faults.clone();
        for e in faults {
            sim.schedule(e.at, e.kind);
        }
        let workload = sim.scenario.workload.clone();
        for w in workload {
            sim.schedule(w.at, SimEventKind::Workload(w.op));
        }
        Ok(sim)
    }

    fn schedule(&mut self, at: Tick, kind: SimEventKind) {
        self.queue.insert((at, self.next_event), kind);
        self.next_event += 1;
    }

    /// Adds an event to a running simulation.
    pub fn inject(&mut self, event: SimEvent) -> Result<(), SimError> {
        if event.at < self.now {
            return Err(SimError::PastTick {
                at: event.at,
                now: self.now,
            });
        }
        self.schedule(event.at, event.kind);
        Ok(())
    }

    /// The tick the next `step` will run.
    pub fn now(&self) -> Tick {
        self.now
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn store(&self) -> Arc<MemStore> {
        self.store.clone()
    }

    pub fn control(&self) -> &ControlPlane {
        &self.control
    }

    pub fn notifications(&self) -> Vec<Notification> {
        self.notifier.snapshot()
    }

    pub fn violations(&self) -> &[(Tick, String)] {
        &self.violations
    }

    pub fn checkpoints(&self) -> &MemCheckpoints {
        &self.checkpoints
    }

    pub fn master(&self) -> Option<&Master> {
        self.nodes.values().find_map(|n| match n {
            NodeState::Master { node, .. } => node.as_ref(),
            _ => None,
        })
    }

    pub fn scheduler(&self, id: &str) -> Option<&Scheduler> {
        match self.nodes.get(&NodeId::from(id)) {
            Some(NodeState::Scheduler { node, .. }) => node.as_ref(),
            _ => None,
        }
    }

    pub fn gateway(&self, id: &str) -> Option<&Gateway> {
        match self.nodes.get(&NodeId::from(id)) {
            Some(NodeState::Gateway(g)) => Some(g),
            _ => None,
        }
    }

    pub fn device(&self, id: &str) -> Option<&Device> {
        match self.nodes.get(&NodeId::from(id)) {
            Some(NodeState::Device(d)) => Some(d),
            _ => None,
        }
    }

    pub fn tasks(&self) -> Vec<TaskRecord> {
        self.store.tasks().unwrap_or_default()
    }

    /// Live executors per task across all devices.
    pub fn live_executors(&self) -> BTreeMap<TaskId, usize> {
        let mut live: BTreeMap<TaskId, usize> = BTreeMap::new();
        for n in self.nodes.values() {
            if let NodeState::Device(d) = n {
                for t in d.live() {
                    *live.entry(t).or_default() += 1;
                }
            }
        }
        live
    }

    /// Submits through the control plane as an operator would.
    pub fn submit(&mut self, req: DeploymentRequest) -> Result<Vec<TaskId>, ControlError> {
        let mut out = Outbox::default();
        let result = self.control.submit(req, self.now, &mut out);
        match &result {
            Ok(ids) => self.trace.push(self.now, TraceEvent::Submitted { ids: ids.clone() }),
            Err(e) => self.trace.push(self.now, TraceEvent::Rejected { reason: e.to_string() }),
        }
        self.dispatch(&NodeId::from(CONTROL_NODE), out);
        result
    }

    pub fn task_action(
        &mut self,
        task: &TaskId,
        action: TaskAction,
        request_id: Option<&str>,
    ) -> Result<crate::control::ActionOutcome, ControlError> {
        let mut out = Outbox::default();
        let cluster = DeviceLogs(&self.nodes);
        let result = self.control.task_action(&cluster, task, action, request_id, &mut out);
        match &result {
            Ok(o) => self.trace.push(
                self.now,
                TraceEvent::Action {
                    task: task.clone(),
                    outcome: serde_json::to_value(o)
                        .ok()
                        .and_then(|v| v.get("result").and_then(|r| r.as_str()).map(str::to_string))
                        .unwrap_or_default(),
                },
            ),
            Err(e) => self.trace.push(self.now, TraceEvent::Rejected { reason: e.to_string() }),
        }
        self.dispatch(&NodeId::from(CONTROL_NODE), out);
        result
    }

    fn is_cut(&self, a: &NodeId, b: &NodeId) -> bool {
        self.cuts.iter().any(|c| c.contains(a) != c.contains(b))
    }

    fn is_down(&self, node: &NodeId) -> bool {
        if self.dormant.contains_key(node) {
            return true;
        }
        match self.nodes.get(node) {
            Some(NodeState::Master { node, .. }) => node.is_none(),
            Some(NodeState::Scheduler { node, .. }) => node.is_none(),
            Some(NodeState::Device(d)) => d.is_down(),
            Some(_) => false,
            None => true,
        }
    }

    fn dispatch(&mut self, from: &NodeId, out: Outbox) {
        for event in out.events {
            self.trace.push(
                self.now,
                TraceEvent::Node {
                    node: from.clone(),
                    event,
                },
            );
        }
        for msg in out.messages {
            self.route(from, msg);
        }
    }

    fn route(&mut self, from: &NodeId, msg: Outgoing) {
        let seq = self.send_seq.entry(from.clone()).or_default();
        *seq += 1;
        let env = Envelope {
            from: from.clone(),
            to: msg.to,
            seq: *seq,
            sent_at: self.now,
            to_epoch: msg.to_epoch,
            body: msg.body,
        };
        let loss = self.scenario.network.loss;
        if loss > 0.0 && self.rng.gen::<f64>() < loss {
            self.trace.push(
                self.now,
                TraceEvent::Drop {
                    from: env.from,
                    to: env.to,
                    msg: env.body.kind().to_string(),
                    reason: "loss".into(),
                },
            );
            return;
        }
        let at = self.now + self.scenario.network.delay;
        self.schedule(at, SimEventKind::Deliver(env));
    }

    fn deliver(&mut self, env: Envelope) {
        let drop_reason = if !self.nodes.contains_key(&env.to) {
            Some("unknown node")
        } else if self.is_cut(&env.from, &env.to) {
            Some("partition")
        } else if self.is_down(&env.to) {
            Some("down")
        } else if env
            .to_epoch
            .is_some_and(|e| e < self.epochs.get(&env.to).copied().unwrap_or(0))
        {
            Some("stale address")
        } else {
            None
        };
        let msg = env.body.kind().to_string();
        if let Some(reason) = drop_reason {
            self.trace.push(
                self.now,
                TraceEvent::Drop {
                    from: env.from,
                    to: env.to,
                    msg,
                    reason: reason.into(),
                },
            );
            return;
        }
        self.trace.push(
            self.now,
            TraceEvent::Deliver {
                from: env.from.clone(),
                to: env.to.clone(),
                msg,
            },
        );
        let now = self.now;
        let mut out = Outbox::default();
        match self.nodes.get_mut(&env.to).expect("checked") {
            NodeState::Master { node: Some(m), .. } => m.handle(&env, now, &mut out),
            NodeState::Scheduler { node: Some(s), .. } => s.handle(&env, now, &mut out),
            NodeState::Gateway(g) => g.handle(&env, now, &mut out),
            NodeState::Device(d) => d.handle(&env, now, &mut out),
            _ => {}
        }
        let to = env.to;
        self.dispatch(&to, out);
    }

    fn fault(&mut self, name: &str, nodes: Vec<NodeId>) {
        self.trace.push(
            self.now,
            TraceEvent::Fault {
                fault: name.to_string(),
                nodes,
            },
        );
    }

    fn apply(&mut self, kind: SimEventKind) {
        let now = self.now;
        match kind {
            SimEventKind::Deliver(env) => self.deliver(env),
            SimEventKind::PartitionStart { nodes } => {
                self.fault("partition_start", nodes.clone());
                self.cuts.push(nodes.into_iter().collect());
            }
            SimEventKind::PartitionEnd { nodes } => {
                self.fault("partition_end", nodes.clone());
                let set: BTreeSet<NodeId> = nodes.into_iter().collect();
                if let Some(i) = self.cuts.iter().position(|c| c == &set) {
                    self.cuts.remove(i);
                }
            }
            SimEventKind::Crash { node } => {
                self.fault("crash", vec![node.clone()]);
                let mut out = Outbox::default();
                match self.nodes.get_mut(&node) {
                    Some(NodeState::Master { node, .. }) => *node = None,
                    Some(NodeState::Scheduler { node, .. }) => *node = None,
                    Some(NodeState::Gateway(g)) => g.crash(&mut out),
                    Some(NodeState::Device(d)) => d.crash(&mut out),
                    _ => {}
                }
                self.dispatch(&node, out);
            }
            SimEventKind::Restart { node } => {
                self.fault("restart", vec![node.clone()]);
                let store: Arc<dyn Store> = self.store.clone();
                let notifier = self.notifier.clone();
                let mut out = Outbox::default();
                match self.nodes.get_mut(&node) {
                    Some(NodeState::Master { config, node }) if node.is_none() => {
                        *node = Some(Master::recover(config.clone(), store, now));
                    }
                    Some(NodeState::Scheduler { config, node }) if node.is_none() => {
                        match Scheduler::recover(config.clone(), store, Box::new(notifier), now, &mut out) {
                            Ok(s) => *node = Some(s),
                            Err(e) => out.error(format!("scheduler recovery failed: {e}")),
                        }
                    }
                    // the host restarts the proxies right away
                    Some(NodeState::Gateway(g)) => g.fire_timer(),
                    Some(NodeState::Device(d)) => d.restart(),
                    _ => {}
                }
                self.dispatch(&node, out);
            }
            SimEventKind::AddressChange { node } => {
                self.fault("address_change", vec![node.clone()]);
                let epoch = self.epochs.entry(node.clone()).or_default();
                *epoch += 1;
                let epoch = *epoch;
                match self.nodes.get_mut(&node) {
                    Some(NodeState::Gateway(g)) => g.set_epoch(epoch),
                    Some(NodeState::Device(d)) => d.set_epoch(epoch),
                    _ => {}
                }
            }
            SimEventKind::TimerFire { node } => {
                self.fault("timer_fire", vec![node.clone()]);
                if let Some(NodeState::Gateway(g)) = self.nodes.get_mut(&node) {
                    g.fire_timer();
                }
            }
            SimEventKind::CorruptCheckpoint { agent } => {
                self.fault("corrupt_checkpoint", vec![]);
                if !self.checkpoints.corrupt(&agent) {
                    self.trace.push(
                        now,
                        TraceEvent::Rejected {
                            reason: format!("no checkpoint for {agent}"),
                        },
                    );
                }
            }
            SimEventKind::Observe { gateway, observations } => {
                self.fault("observe", vec![gateway.clone()]);
                if let Some(NodeState::Gateway(g)) = self.nodes.get_mut(&gateway) {
                    g.observe(&observations);
                }
            }
            SimEventKind::SetDirectMode { gateway, direct } => {
                self.fault(if direct { "direct_mode_on" } else { "direct_mode_off" }, vec![gateway.clone()]);
                if let Some(NodeState::Gateway(g)) = self.nodes.get_mut(&gateway) {
                    g.set_direct_mode(direct);
                }
            }
            SimEventKind::Workload(WorkloadOp::Submit {
                manifest,
                placement,
                request_id,
            }) => {
                let archive = Vec::new();
                let _ = self.submit(DeploymentRequest {
                    manifest,
                    archive,
                    placement,
                    request_id,
                });
            }
            SimEventKind::Workload(WorkloadOp::Action { task, action }) => {
                let _ = self.task_action(&task, action, None);
            }
        }
    }

    /// Runs one tick.
    pub fn step(&mut self) {
        let now = self.now;
        while let Some(entry) = self.queue.first_entry() {
            if entry.key().0 != now {
                break;
            }
            let kind = entry.remove();
            self.apply(kind);
        }
        let woken: Vec<NodeId> = self
            .dormant
            .iter()
            .filter(|(_, at)| **at <= now)
            .map(|(n, _)| n.clone())
            .collect();
        for n in woken {
            self.dormant.remove(&n);
            self.fault("join", vec![n]);
        }
        let ids: Vec<NodeId> = self.nodes.keys().cloned().collect();
        for id in ids {
            if self.dormant.contains_key(&id) {
                continue;
            }
            let mut out = Outbox::default();
            match self.nodes.get_mut(&id).expect("present") {
                NodeState::Master { node: Some(m), .. } => m.tick(now, &mut out),
                NodeState::Scheduler { node: Some(s), .. } => s.tick(now, &mut out),
                NodeState::Gateway(g) => g.tick(now, &mut out),
                NodeState::Device(d) => d.tick(now, &mut out),
                _ => {}
            }
            self.dispatch(&id, out);
        }
        self.check();
        self.now += 1;
    }

    fn check(&mut self) {
        let now = self.now;
        if let Some(m) = self.master() {
            let found = m.check_invariants();
            let agents = m.agents().count() as u64;
            self.conservation_checks += agents;
            for v in found {
                self.trace.push(now, TraceEvent::Violation { message: v.clone() });
                self.violations.push((now, v));
            }
        }
        for (task, live) in self.live_executors() {
            let max = self.max_live.entry(task.clone()).or_default();
            *max = (*max).max(live);
            if live > 1 {
                self.trace.push(now, TraceEvent::Duplicate { task, live });
            }
        }
    }

    pub fn run_until(&mut self, until: Tick) {
        while self.now <= until {
            self.step();
        }
    }

    /// Runs to the scenario's end.
    pub fn run(&mut self) {
        let until = self.scenario.until;
        self.run_until(until);
    }

    pub fn evaluate(&self) -> Vec<AssertionResult> {
        let tasks = self.tasks();
        let live = self.live_executors();
        self.scenario
            .assertions
            .iter()
            .map(|a| {
                let (passed, detail) = self.check_one(&a.check, &tasks, &live);
                AssertionResult {
                    name: a.name.clone(),
                    passed,
                    detail,
                }
            })
            .collect()
    }

    fn check_one(&self, check: &Check, tasks: &[TaskRecord], live: &BTreeMap<TaskId, usize>) -> (bool, String) {
        match check {
            Check::TaskState { task, state } => match tasks.iter().find(|t| &t.task_id == task) {
                Some(t) => (t.state == *state, format!("{task} is {:?}", t.state)),
                None => (false, format!("{task} not found")),
            },
            Check::AllTasks { state } => {
                let off: Vec<String> = tasks
                    .iter()
                    .filter(|t| t.state != *state)
                    .map(|t| format!("{}={:?}", t.task_id, t.state))
                    .collect();
                (!tasks.is_empty() && off.is_empty(), format!("{} tasks, off: {off:?}", tasks.len()))
            }
            Check::Occurs { matcher, min, max } => {
                let n = self.trace.matching(matcher).len();
                let ok = min.is_none_or(|m| n >= m) && max.is_none_or(|m| n <= m);
                (ok, format!("{n} occurrences of {}", matcher.event))
            }
            Check::Sequence { steps, within } => match self.trace.sequence(steps) {
                Ok(ticks) => {
                    let span = ticks.last().copied().unwrap_or(0) - ticks.first().copied().unwrap_or(0);
                    let ok = within.is_none_or(|w| span <= w);
                    (ok, format!("at ticks {ticks:?}, span {span}"))
                }
                Err(i) => (false, format!("step {i} ({}) never follows", steps[i].event)),
            },
            Check::NoConservationViolations => (
                self.violations.is_empty(),
                format!(
                    "{} violations over {} agent-ticks",
                    self.violations.len(),
                    self.conservation_checks
                ),
            ),
            Check::MaxLiveExecutors { max } => {
                let worst = self.max_live.values().copied().max().unwrap_or(0);
                (worst <= *max, format!("at most {worst} live executors per task"))
            }
            Check::FinalLiveExecutors { task, count } => {
                let n = live.get(task).copied().unwrap_or(0);
                (n == *count, format!("{task} has {n} live executors"))
            }
        }
    }

    pub fn report(&self) -> SimReport {
        SimReport {
            name: self.scenario.name.clone(),
            trace: self.trace.clone(),
            assertions: self.evaluate(),
            tasks: self.tasks(),
            violations: self.violations.clone(),
            conservation_checks: self.conservation_checks,
            max_live: self.max_live.clone(),
            notifications: self.notifier.snapshot(),
        }
    }
}

/// Runs a scenario to completion.
pub fn run_scenario(scenario: &Scenario) -> Result<SimReport, SimError> {
    let mut sim = Sim::new(scenario.clone())?;
    sim.run();
    Ok(sim.report())
}
