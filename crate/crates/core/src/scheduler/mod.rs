//! Framework scheduler: task queue, offer matching with delayed scheduling,
//! replication on redeploy, and the lost/failed recovery paths.
//!
//! Every state change is written to the store before it is announced to
//! the master or an operator.

mod matcher;
mod notify;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    AgentId, FrameworkId, Initiator, NodeId, ResourceVector, RestartPolicy, RuntimeKind, TaskId,
    TaskRecord, TaskState, Tick, TransitionError,
};
use crate::events::{Event, Outbox};
use crate::master::Offer;
use crate::persistence::{recover_framework, Store, StoreError, StoreExt};
use crate::protocol::{
    base64_bytes, Accept, Body, Decline, DisconnectClass, Envelope, Heartbeat, Kill, OfferBatch,
    OperatorCommand, Probe, ProbeReply, Registration, StatusUpdate, TaskLaunch,
};

pub use matcher::{
    decide, locality_satisfied, match_offer, BuiltinMatcher, Candidate, Decision,
    HookAlreadyInstalled, MatchFailure, MatchReport, Matcher, MatcherSlot, QueueEntry,
};
pub use notify::{LogNotifier, Notification, NotificationKind, Notifier, RecordingNotifier};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerConfig {
    pub framework_id: FrameworkId,
    pub master: NodeId,
    pub heartbeat_period: Tick,
    /// Losses after which a requeue also starts replicas.
    pub replication_threshold: u32,
    /// Copies running side by side once replication kicks in.
    pub replica_count: u32,
    /// After a restart, how long an in-flight task may go unconfirmed
    /// before it is treated as lost.
    pub recovery_grace: Tick,
    #[serde(default)]
    pub probe_interval: Option<Tick>,
}

impl SchedulerConfig {
    pub fn new(framework_id: &str) -> Self {
        Self {
            framework_id: framework_id.into(),
            master: "master".into(),
            heartbeat_period: 1,
            replication_threshold: 2,
            replica_count: 2,
            recovery_grace: 20,
            probe_interval: None,
        }
    }

    pub fn node_id(&self) -> NodeId {
        NodeId(self.framework_id.0.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SchedulerError {
    #[error("unknown task {0}")]
    UnknownTask(TaskId),
    #[error("task {task}: {source}")]
    Transition {
        task: TaskId,
        #[source]
        source: TransitionError,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
}

struct Working {
    offer: Offer,
    remaining: ResourceVector,
    launches: Vec<TaskLaunch>,
}

pub struct Scheduler {
    config: SchedulerConfig,
    store: Arc<dyn Store>,
    notifier: Box<dyn Notifier>,
    matcher: MatcherSlot,
    records: BTreeMap<TaskId, TaskRecord>,
    queue: VecDeque<QueueEntry>,
    waiting: BTreeSet<TaskId>,
    deferred: BTreeMap<TaskId, Tick>,
    awaiting: BTreeMap<TaskId, Tick>,
    metrics: BTreeMap<AgentId, f64>,
    seen_agents: BTreeSet<AgentId>,
    registered: bool,
    recovered: bool,
    last_contact: Option<Tick>,
    next_probe: u64,
    last_probe: Option<Tick>,
}

impl Scheduler {
    pub fn new(config: SchedulerConfig, store: Arc<dyn Store>, notifier: Box<dyn Notifier>) -> Self {
        Self {
            config,
            store,
            notifier,
            matcher: MatcherSlot::default(),
            records: BTreeMap::new(),
            queue: VecDeque::new(),
            waiting: BTreeSet::new(),
            deferred: BTreeMap::new(),
            awaiting: BTreeMap::new(),
            metrics: BTreeMap::new(),
            seen_agents: BTreeSet::new(),
            registered: false,
            recovered: false,
            last_contact: None,
            next_probe: 0,
            last_probe: None,
        }
    }

    /// Rebuilds a scheduler from the store after a restart. Queued tasks go
    /// back in the queue, in-flight tasks wait for the master to confirm
    /// them, and lost ones are requeued.
    pub fn recover(
        config: SchedulerConfig,
        store: Arc<dyn Store>,
        notifier: Box<dyn Notifier>,
        now: Tick,
        out: &mut Outbox,
    ) -> Result<Self, SchedulerError> {
        let rec = recover_framework(store.as_ref())?;
        let mut s = Self::new(config, store, notifier);
        s.recovered = true;
        for r in rec.queued {
            let entry = QueueEntry::new(r.task_id.clone(), &r.spec, now, r.losses());
            s.records.insert(r.task_id.clone(), r);
            s.queue.push_back(entry);
        }
        for r in rec.in_flight {
            s.awaiting.insert(r.task_id.clone(), now + s.config.recovery_grace);
            s.records.insert(r.task_id.clone(), r);
        }
        for r in rec.terminal {
            s.records.insert(r.task_id.clone(), r);
        }
        for r in rec.failed {
            let id = r.task_id.clone();
            let auto = r.spec.restart_policy == RestartPolicy::Auto;
            s.records.insert(id.clone(), r);
            if auto {
                s.requeue(&id, now, out)?;
            }
        }
        for r in rec.lost {
            let id = r.task_id.clone();
            let was_active = r.state.is_active();
            s.records.insert(id.clone(), r);
            if was_active {
                s.apply(&id, TaskState::Lost, None, now, out)?;
            }
            s.requeue(&id, now, out)?;
        }
        Ok(s)
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.config
    }

    pub fn node_id(&self) -> NodeId {
        self.config.node_id()
    }

    pub fn matcher_mut(&mut self) -> &mut MatcherSlot {
        &mut self.matcher
    }

    pub fn record(&self, id: &TaskId) -> Option<&TaskRecord> {
        self.records.get(id)
    }

    pub fn records(&self) -> impl Iterator<Item = &TaskRecord> {
        self.records.values()
    }

    pub fn queue(&self) -> impl Iterator<Item = &QueueEntry> {
        self.queue.iter()
    }

    pub fn deferred(&self) -> &BTreeMap<TaskId, Tick> {
        &self.deferred
    }

    pub fn is_registered(&self) -> bool {
        self.registered
    }

    fn master(&self) -> NodeId {
        self.config.master.clone()
    }

    /// Applies a transition, persists it, then emits it.
    fn apply(
        &mut self,
        id: &TaskId,
        to: TaskState,
        agent: Option<AgentId>,
        now: Tick,
        out: &mut Outbox,
    ) -> Result<(), SchedulerError> {
        self.apply_as(id, to, agent, Initiator::System, now, out)
    }

    fn apply_as(
        &mut self,
        id: &TaskId,
        to: TaskState,
        agent: Option<AgentId>,
        initiator: Initiator,
        now: Tick,
        out: &mut Outbox,
    ) -> Result<(), SchedulerError> {
        let record = self
            .records
            .get_mut(id)
            .ok_or_else(|| SchedulerError::UnknownTask(id.clone()))?;
        let mut next = record.clone();
        next.transition_as(to, now, initiator, agent)
            .map_err(|source| SchedulerError::Transition {
                task: id.clone(),
                source,
            })?;
        self.store.put_task(&next)?;
        out.emit(Event::TaskState {
            task: id.clone(),
            state: to,
            agent: next.assigned_agent.clone(),
        });
        *record = next;
        Ok(())
    }

    fn notify(&self, kind: NotificationKind, task: &TaskId, message: String, now: Tick, out: &mut Outbox) {
        out.emit(Event::Notify {
            task: task.clone(),
            message: message.clone(),
        });
        self.notifier.notify(&Notification {
            kind,
            task_id: task.clone(),
            message,
            at: now,
        });
    }

    fn enqueue(&mut self, id: &TaskId, now: Tick) {
        let record = &self.records[id];
        self.queue.retain(|e| &e.task_id != id);
        self.waiting.remove(id);
        self.queue
            .push_back(QueueEntry::new(id.clone(), &record.spec, now, record.losses()));
    }

    /// Moves a Lost or Failed task back to Queued, starting replicas once it
    /// has been lost more than the replication threshold allows.
    fn requeue(&mut self, id: &TaskId, now: Tick, out: &mut Outbox) -> Result<(), SchedulerError> {
        self.deferred.remove(id);
        self.apply(id, TaskState::Queued, None, now, out)?;
        self.enqueue(id, now);
        let record = &self.records[id];
        let losses = record.losses();
        let mut replicas = Vec::new();
        if losses > self.config.replication_threshold && self.live_siblings(id).is_empty() {
            let group = record.replica_group.clone().unwrap_or_else(|| id.clone());
            let spec = record.spec.clone();
            if self.records[id].replica_group.is_none() {
                let mut grouped = self.records[id].clone();
                grouped.replica_group = Some(group.clone());
                self.store.put_task(&grouped)?;
                self.records.insert(id.clone(), grouped);
            }
            for i in 1..self.config.replica_count {
                let rid = TaskId(format!("{}~r{}-{}", group, losses, i));
                if self.records.contains_key(&rid) {
                    continue;
                }
                let mut replica = TaskRecord::queued(rid.clone(), spec.clone(), now);
                replica.replica_group = Some(group.clone());
                self.store.put_task(&replica)?;
                out.emit(Event::TaskState {
                    task: rid.clone(),
                    state: TaskState::Queued,
                    agent: None,
                });
                self.records.insert(rid.clone(), replica);
                self.enqueue(&rid, now);
                replicas.push(rid);
            }
        }
        out.emit(Event::Requeued {
            task: id.clone(),
            replicas,
        });
        Ok(())
    }

    /// Non-terminal members of `id`'s replica group, other than `id`.
    fn live_siblings(&self, id: &TaskId) -> Vec<TaskId> {
        let Some(group) = self.records.get(id).and_then(|r| r.replica_group.clone()) else {
            return Vec::new();
        };
        self.records
            .values()
            .filter(|r| &r.task_id != id && r.replica_group.as_ref() == Some(&group))
            .filter(|r| !r.state.is_terminal())
            .map(|r| r.task_id.clone())
            .collect()
    }

    fn send_kill(&self, id: &TaskId, agent: Option<AgentId>, attempt: u32, out: &mut Outbox) {
        out.send(
            self.master(),
            Body::Kill(Kill {
                task_id: id.clone(),
                agent_id: agent,
                framework_id: Some(self.config.framework_id.clone()),
                attempt: Some(attempt),
            }),
        );
    }

    /// Stops a task on the scheduler's side: queued and parked tasks are
    /// marked Killed, active ones get a Kill sent to the master.
    fn cancel(&mut self, id: &TaskId, initiator: Initiator, now: Tick, out: &mut Outbox) -> Result<(), SchedulerError> {
        let record = self
            .records
            .get(id)
            .ok_or_else(|| SchedulerError::UnknownTask(id.clone()))?;
        match record.state {
            TaskState::Queued => {
                self.queue.retain(|e| &e.task_id != id);
                self.waiting.remove(id);
                self.apply_as(id, TaskState::Killed, None, initiator, now, out)
            }
            TaskState::Staging | TaskState::Running => {
                let (agent, attempt) = (record.assigned_agent.clone(), record.launches());
                self.send_kill(id, agent, attempt, out);
                Ok(())
            }
            TaskState::Lost | TaskState::Failed => {
                self.deferred.remove(id);
                self.apply_as(id, TaskState::Queued, None, Initiator::Operator, now, out)?;
                self.apply_as(id, TaskState::Killed, None, initiator, now, out)
            }
            TaskState::Finished | TaskState::Killed => Ok(()),
        }
    }

    /// First replica to run wins; the rest are stopped.
    fn kill_siblings(&mut self, id: &TaskId, now: Tick, out: &mut Outbox) -> Result<(), SchedulerError> {
        for sibling in self.live_siblings(id) {
            self.cancel(&sibling, Initiator::System, now, out)?;
        }
        Ok(())
    }

    /// The lost-task path: notify, then requeue now or after the master's
    /// grace period for transient losses.
    pub fn on_task_lost(
        &mut self,
        id: &TaskId,
        class: Option<DisconnectClass>,
        grace: Option<Tick>,
        now: Tick,
        out: &mut Outbox,
    ) -> Result<(), SchedulerError> {
        let record = self
            .records
            .get(id)
            .ok_or_else(|| SchedulerError::UnknownTask(id.clone()))?;
        if record.state.is_active() {
            self.apply(id, TaskState::Lost, None, now, out)?;
        }
        if self.records[id].state != TaskState::Lost {
            return Ok(());
        }
        let why = match class {
            Some(c) => format!("Task Lost ({c:?})"),
            None => "Task Lost".to_string(),
        };
        self.notify(NotificationKind::TaskLost, id, why, now, out);
        match (class, grace) {
            (Some(DisconnectClass::Transient), Some(g)) if g > 0 => {
                let until = now + g;
                self.deferred.insert(id.clone(), until);
                out.emit(Event::RequeueDeferred {
                    task: id.clone(),
                    until,
                });
                Ok(())
            }
            _ => self.requeue(id, now, out),
        }
    }

    /// The failed-task path: notify the administrator, then requeue under
    /// the auto policy.
    pub fn on_task_failed(
        &mut self,
        id: &TaskId,
        reason: Option<&str>,
        now: Tick,
        out: &mut Outbox,
    ) -> Result<(), SchedulerError> {
        let record = self
            .records
            .get(id)
            .ok_or_else(|| SchedulerError::UnknownTask(id.clone()))?;
        if record.state.is_active() {
            self.apply(id, TaskState::Failed, None, now, out)?;
        }
        let record = &self.records[id];
        if record.state != TaskState::Failed {
            return Ok(());
        }
        let auto = record.spec.restart_policy == RestartPolicy::Auto;
        let message = match reason {
            Some(r) => format!("Task Failure: {r}"),
            None => "Task Failure".to_string(),
        };
        self.notify(NotificationKind::TaskFailure, id, message, now, out);
        if auto {
            self.requeue(id, now, out)?;
        }
        Ok(())
    }

    pub fn handle(&mut self, env: &Envelope, now: Tick, out: &mut Outbox) {
        let result = match &env.body {
            Body::Heartbeat(Heartbeat::FrameworkAck { reregister, .. }) => {
                self.last_contact = Some(now);
                self.registered = !reregister;
                Ok(())
            }
            Body::Offer(batch) => {
                self.last_contact = Some(now);
                self.on_offers(batch, now, out)
            }
            Body::Status(status) => self.on_status(status, now, out),
            Body::ProbeReply(reply) => {
                self.on_probe_reply(reply);
                Ok(())
            }
            Body::Operator(cmd) => self.on_operator(cmd, now, out),
            other => {
                out.error(format!("scheduler ignores {} from {}", other.kind(), env.from));
                Ok(())
            }
        };
        if let Err(e) = result {
            out.error(e.to_string());
        }
    }

    pub fn tick(&mut self, now: Tick, out: &mut Outbox) {
        let period = self.config.heartbeat_period.max(1);
        let due = self.last_contact.is_none_or(|t| now.saturating_sub(t) >= period);
        if !self.registered {
            if now.is_multiple_of(period) || self.last_contact.is_none() {
                out.send(
                    self.master(),
                    Body::Register(Registration::Framework {
                        framework_id: self.config.framework_id.clone(),
                        reregister: self.recovered,
                    }),
                );
            }
        } else if due && now.is_multiple_of(period) {
            out.send(
                self.master(),
                Body::Heartbeat(Heartbeat::Framework {
                    framework_id: self.config.framework_id.clone(),
                }),
            );
        }

        let ready: Vec<TaskId> = self
            .deferred
            .iter()
            .filter(|(_, until)| **until <= now)
            .map(|(id, _)| id.clone())
            .collect();
        for id in ready {
            if let Err(e) = self.requeue(&id, now, out) {
                out.error(e.to_string());
            }
        }

        let unconfirmed: Vec<TaskId> = self
            .awaiting
            .iter()
            .filter(|(_, deadline)| **deadline <= now)
            .map(|(id, _)| id.clone())
            .collect();
        for id in unconfirmed {
            self.awaiting.remove(&id);
            if let Err(e) = self.on_task_lost(&id, None, None, now, out) {
                out.error(e.to_string());
            }
        }

        if let (Some(interval), true) = (self.config.probe_interval, self.registered) {
            let due = self.last_probe.is_none_or(|t| now.saturating_sub(t) >= interval);
            if due && !self.seen_agents.is_empty() {
                self.last_probe = Some(now);
                self.next_probe += 1;
                let sketch = self
                    .queue
                    .front()
                    .map(|e| self.records[&e.task_id].spec.required.clone())
                    .unwrap_or_default();
                out.send(
                    self.master(),
                    Body::Probe(Probe {
                        probe_id: format!("{}-p{}", self.config.framework_id, self.next_probe),
                        framework_id: Some(self.config.framework_id.clone()),
                        agent_ids: self.seen_agents.iter().cloned().collect(),
                        sketch,
                    }),
                );
            }
        }
    }

    fn on_probe_reply(&mut self, reply: &ProbeReply) {
        for r in &reply.results {
            match r.metric {
                Some(m) if r.responded => {
                    self.metrics.insert(r.agent_id.clone(), m);
                }
                _ => {
                    self.metrics.remove(&r.agent_id);
                }
            }
        }
    }

    fn on_operator(&mut self, cmd: &OperatorCommand, now: Tick, out: &mut Outbox) -> Result<(), SchedulerError> {
        match cmd {
            OperatorCommand::Submit { task_ids } => {
                for id in task_ids {
                    if self.records.contains_key(id) {
                        continue;
                    }
                    let record = self.store.get_task(id.as_str())?;
                    if record.state != TaskState::Queued {
                        continue;
                    }
                    out.emit(Event::TaskState {
                        task: id.clone(),
                        state: TaskState::Queued,
                        agent: None,
                    });
                    self.records.insert(id.clone(), record);
                    self.enqueue(id, now);
                }
                Ok(())
            }
            OperatorCommand::Kill { task_id } => self.cancel(task_id, Initiator::Operator, now, out),
            OperatorCommand::Restart { task_id } => {
                let state = self
                    .records
                    .get(task_id)
                    .ok_or_else(|| SchedulerError::UnknownTask(task_id.clone()))?
                    .state;
                match state {
                    TaskState::Failed | TaskState::Lost => {
                        self.deferred.remove(task_id);
                        self.apply_as(task_id, TaskState::Queued, None, Initiator::Operator, now, out)?;
                        self.enqueue(task_id, now);
                        out.emit(Event::Requeued {
                            task: task_id.clone(),
                            replicas: vec![],
                        });
                        Ok(())
                    }
                    other => Err(SchedulerError::Transition {
                        task: task_id.clone(),
                        source: TransitionError::IllegalTransition {
                            from: other,
                            to: TaskState::Queued,
                        },
                    }),
                }
            }
        }
    }

    fn on_status(&mut self, st: &StatusUpdate, now: Tick, out: &mut Outbox) -> Result<(), SchedulerError> {
        self.last_contact = Some(now);
        let Some(record) = self.records.get(&st.task_id) else {
            if st.state.is_active() {
                // not ours, or forgotten: make sure it does not run
                self.send_kill(&st.task_id, Some(st.agent_id.clone()), st.attempt, out);
            }
            return Ok(());
        };
        let current = record.launches();
        let state = record.state;
        let id = st.task_id.clone();
        if st.attempt != current {
            if st.state.is_active() {
                self.send_kill(&id, Some(st.agent_id.clone()), st.attempt, out);
            }
            return Ok(());
        }
        self.awaiting.remove(&id);
        match st.state {
            TaskState::Running => match state {
                TaskState::Running if record.assigned_agent.as_ref() == Some(&st.agent_id) => Ok(()),
                TaskState::Staging | TaskState::Lost => {
                    let rival_running = self
                        .live_siblings(&id)
                        .iter()
                        .any(|s| self.records[s].state == TaskState::Running);
                    if rival_running {
                        self.send_kill(&id, Some(st.agent_id.clone()), st.attempt, out);
                        return Ok(());
                    }
                    self.deferred.remove(&id);
                    self.apply(&id, TaskState::Running, Some(st.agent_id.clone()), now, out)?;
                    self.kill_siblings(&id, now, out)
                }
                _ => {
                    self.send_kill(&id, Some(st.agent_id.clone()), st.attempt, out);
                    Ok(())
                }
            },
            TaskState::Finished | TaskState::Killed | TaskState::Failed => {
                if state == TaskState::Lost {
                    if st.state == TaskState::Killed {
                        // killed while we thought it lost; the requeue stands
                        return Ok(());
                    }
                    self.deferred.remove(&id);
                    self.apply(&id, TaskState::Running, Some(st.agent_id.clone()), now, out)?;
                } else if state == TaskState::Staging && st.state == TaskState::Finished {
                    self.apply(&id, TaskState::Running, Some(st.agent_id.clone()), now, out)?;
                }
                if !self.records[&id].state.is_active() {
                    return Ok(());
                }
                if st.state == TaskState::Failed {
                    let reason = st
                        .reason
                        .clone()
                        .or_else(|| st.exit_status.map(|c| format!("exit status {c}")));
                    self.on_task_failed(&id, reason.as_deref(), now, out)
                } else {
                    self.apply(&id, st.state, None, now, out)
                }
            }
            TaskState::Lost => self.on_task_lost(&id, st.class, st.grace, now, out),
            TaskState::Queued | TaskState::Staging => Ok(()),
        }
    }

    fn on_offers(&mut self, batch: &OfferBatch, now: Tick, out: &mut Outbox) -> Result<(), SchedulerError> {
        let mut working: Vec<Working> = batch
            .offers
            .iter()
            .map(|o| {
                out.emit(Event::OfferReceived {
                    offer_id: o.offer_id.clone(),
                    agent: o.agent_id.clone(),
                });
                self.seen_agents.insert(o.agent_id.clone());
                Working {
                    offer: o.clone(),
                    remaining: o.granted.clone(),
                    launches: Vec::new(),
                }
            })
            .collect();
        let entries: Vec<QueueEntry> = self.queue.iter().cloned().collect();
        for entry in entries {
            let id = entry.task_id.clone();
            let Some(record) = self.records.get(&id) else {
                self.queue.retain(|e| e.task_id != id);
                continue;
            };
            if record.state != TaskState::Queued {
                self.queue.retain(|e| e.task_id != id);
                continue;
            }
            let spec = record.spec.clone();
            let avoid: BTreeSet<AgentId> = self
                .live_siblings(&id)
                .iter()
                .filter_map(|s| self.records[s].assigned_agent.clone())
                .collect();
            let views: Vec<(usize, Offer)> = working
                .iter()
                .enumerate()
                .filter(|(_, w)| !avoid.contains(&w.offer.agent_id))
                .map(|(i, w)| {
                    let mut view = w.offer.clone();
                    view.granted = w.remaining.clone();
                    (i, view)
                })
                .collect();
            let candidates: Vec<Candidate<'_>> = views
                .iter()
                .map(|(_, o)| Candidate {
                    offer: o,
                    metric: self.metrics.get(&o.agent_id).copied(),
                })
                .collect();
            match decide(&entry, &spec, &candidates, now, &self.matcher) {
                Decision::Accept { index, local } => {
                    let slot = views[index].0;
                    let agent = working[slot].offer.agent_id.clone();
                    self.apply(&id, TaskState::Staging, Some(agent.clone()), now, out)?;
                    self.queue.retain(|e| e.task_id != id);
                    self.waiting.remove(&id);
                    let archive = self.archive_for(&spec, out);
                    let w = &mut working[slot];
                    w.remaining = w
                        .remaining
                        .checked_sub(&spec.required)
                        .unwrap_or_else(|_| ResourceVector::zero());
                    w.launches.push(TaskLaunch {
                        task_id: id.clone(),
                        spec,
                        attempt: self.records[&id].launches(),
                        archive,
                    });
                    out.emit(Event::Placed { task: id, agent, local });
                }
                Decision::Wait { deadline } => {
                    if self.waiting.insert(id.clone()) {
                        out.emit(Event::Waiting { task: id, deadline });
                    }
                }
                Decision::Decline => {}
            }
        }
        let mut declined = Vec::new();
        for w in working {
            if w.launches.is_empty() {
                declined.push(w.offer.offer_id);
            } else {
                out.send(
                    self.master(),
                    Body::Accept(Accept {
                        framework_id: self.config.framework_id.clone(),
                        offer_id: w.offer.offer_id,
                        launches: w.launches,
                    }),
                );
            }
        }
        if !declined.is_empty() {
            out.send(
                self.master(),
                Body::Decline(Decline {
                    framework_id: self.config.framework_id.clone(),
                    offer_ids: declined,
                }),
            );
        }
        Ok(())
    }

    fn archive_for(&self, spec: &crate::domain::TaskSpec, out: &mut Outbox) -> Option<String> {
        if spec.runtime == RuntimeKind::SimTask {
            return None;
        }
        match self.store.get_artifact(&spec.artifact.hash) {
            Ok(bytes) => Some(base64_bytes::encode(&bytes)),
            Err(e) => {
                out.error(format!("archive {} unavailable: {e}", spec.artifact.hash));
                None
            }
        }
    }
}

#[cfg(test)]
mod tests;
