//! Cloud-tier controller: agent registry, resource pool, offers, task status
//! tracking, failure detection and scout probes.
//!
//! The master is a single event loop. [`Master::handle`] and [`Master::tick`]
//! are deterministic functions of the current state and their input.

mod failure;
mod probe;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    AgentId, AttributeSet, AttributeValue, FrameworkId, NodeId, ResourceVector, TaskId, TaskState, Tick,
};
use crate::events::{Event, Outbox};
use crate::persistence::{Store, StoreExt};
use crate::protocol::{
    Accept, Body, DisconnectClass, Envelope, Heartbeat, Kill, Launch, OfferBatch, OfferMsg, Probe,
    ProbeReply, Registration, ReportedTask, StatusUpdate,
};

pub use failure::{adaptive_timeout, classify, classify_plain, median, ClassifyParams};
pub use probe::{ProbeHold, ProbeOutcome};

/// Attribute the master adds to every offer so tasks can be pinned to
/// particular agents.
pub const AGENT_ID_ATTRIBUTE: &str = "agent_id";

/// A time-limited grant of one agent's free resources.
pub type Offer = OfferMsg;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MasterConfig {
    pub node_id: NodeId,
    pub heartbeat_period: Tick,
    /// Missed heartbeats before an agent becomes Suspect.
    pub missed_heartbeats: u32,
    pub base_timeout: Tick,
    pub timeout_multiplier: f64,
    pub quorum: f64,
    pub correlation_window: Tick,
    pub offer_ttl: Tick,
    pub probe_timeout: Tick,
    /// When off, every disconnection is Permanent after the base timeout
    /// and resurfacing tasks are always killed.
    pub transient_support: bool,
    /// A launch still unconfirmed after this many ticks is sent again.
    pub launch_retry: Tick,
}

impl Default for MasterConfig {
    fn default() -> Self {
        Self {
            node_id: NodeId::from("master"),
            heartbeat_period: 1,
            missed_heartbeats: 3,
            base_timeout: 10,
            timeout_multiplier: 2.0,
            quorum: 0.5,
            correlation_window: 2,
            offer_ttl: 30,
            probe_timeout: 5,
            transient_support: true,
            launch_retry: 6,
        }
    }
}

impl MasterConfig {
    /// Ticks of silence after which a disconnected agent's tasks are
    /// considered lost by a master without transient support.
    pub fn loss_threshold(&self) -> Tick {
        self.heartbeat_period * Tick::from(self.missed_heartbeats) + self.base_timeout
    }

    fn classify_params(&self) -> ClassifyParams {
        ClassifyParams {
            window: self.correlation_window,
            quorum: self.quorum,
            base_timeout: self.base_timeout,
            k: self.timeout_multiplier,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Liveness {
    Connected,
    Suspect { since: Tick },
    Disconnected { since: Tick },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentEvent {
    Registered,
    Reregistered,
    Suspected,
    Recovered { after: Tick },
    Disconnected { class: DisconnectClass },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentRecord {
    pub agent_id: AgentId,
    /// Node that carries the agent's traffic: its gateway, or the device
    /// itself in direct mode.
    pub gateway_id: NodeId,
    pub advertised: ResourceVector,
    pub attributes: AttributeSet,
    pub allocated: ResourceVector,
    pub liveness: Liveness,
    pub failure_history: Vec<(Tick, AgentEvent)>,
    pub recovery_durations: Vec<Tick>,
    /// Start of the current or most recent suspect episode.
    #[serde(default)]
    pub suspect_since: Option<Tick>,
    #[serde(default)]
    pub epoch: u64,
}

impl AgentRecord {
    pub fn new(agent_id: AgentId, gateway_id: NodeId, advertised: ResourceVector, attributes: AttributeSet) -> Self {
        Self {
            agent_id,
            gateway_id,
            advertised,
            attributes,
            allocated: ResourceVector::zero(),
            liveness: Liveness::Connected,
            failure_history: Vec::new(),
            recovery_durations: Vec::new(),
            suspect_since: None,
            epoch: 0,
        }
    }

    pub fn unallocated(&self) -> ResourceVector {
        self.advertised
            .checked_sub(&self.allocated)
            .unwrap_or_else(|_| ResourceVector::zero())
    }

    pub fn is_connected(&self) -> bool {
        self.liveness == Liveness::Connected
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MasterError {
    #[error("agent {0} is already connected")]
    DuplicateRegistration(AgentId),
    #[error("unknown agent {0}")]
    UnknownAgent(AgentId),
    #[error("unknown task {0}")]
    UnknownTask(TaskId),
    #[error("agent {0} is not suspect")]
    NotSuspect(AgentId),
    #[error("resources of agent {0} do not fit")]
    NoCapacity(AgentId),
}

/// The master's view of one launched task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MasterTask {
    pub task_id: TaskId,
    pub framework_id: FrameworkId,
    pub agent_id: AgentId,
    pub resources: ResourceVector,
    pub attempt: u32,
    pub state: TaskState,
    pub class: Option<DisconnectClass>,
}

#[derive(Debug, Clone, Default)]
struct AgentRuntime {
    last_heard: Tick,
    needs_reregister: bool,
}

#[derive(Debug, Clone)]
struct OutstandingOffer {
    framework: FrameworkId,
    offer: Offer,
}

pub struct Master {
    config: MasterConfig,
    store: Arc<dyn Store>,
    agents: BTreeMap<AgentId, AgentRecord>,
    runtime: BTreeMap<AgentId, AgentRuntime>,
    frameworks: BTreeMap<FrameworkId, Tick>,
    tasks: BTreeMap<TaskId, MasterTask>,
    offers: BTreeMap<String, OutstandingOffer>,
    probes: probe::Probes,
    seen_updates: BTreeSet<String>,
    /// Launches not yet confirmed by a status, with the tick last sent.
    unconfirmed: BTreeMap<TaskId, (Launch, Tick)>,
    rr_cursor: usize,
    next_offer: u64,
    started_at: Tick,
}

/// A report for the current attempt that would move the task backwards.
fn is_stale(current: TaskState, reported: TaskState) -> bool {
    reported.is_active() && (!current.is_active() || (current == TaskState::Running && reported == TaskState::Staging))
}

fn node_of(framework: &FrameworkId) -> NodeId {
    NodeId(framework.0.clone())
}

impl Master {
    pub fn new(config: MasterConfig, store: Arc<dyn Store>, now: Tick) -> Self {
        Self {
            config,
            store,
            agents: BTreeMap::new(),
            runtime: BTreeMap::new(),
            frameworks: BTreeMap::new(),
            tasks: BTreeMap::new(),
            offers: BTreeMap::new(),
            probes: probe::Probes::default(),
            seen_updates: BTreeSet::new(),
            unconfirmed: BTreeMap::new(),
            rr_cursor: 0,
            next_offer: 0,
            started_at: now,
        }
    }

    /// Rebuilds a master after a restart. Agents not known to be
    /// disconnected are asked to re-register so their tasks can be
    /// reconciled; allocations are rebuilt from those registrations.
    pub fn recover(config: MasterConfig, store: Arc<dyn Store>, now: Tick) -> Self {
        let mut master = Self::new(config, store, now);
        match master.store.agents() {
            Ok(agents) => {
                for mut agent in agents {
                    agent.allocated = ResourceVector::zero();
                    let needs = !matches!(agent.liveness, Liveness::Disconnected { .. });
                    if needs {
                        agent.liveness = Liveness::Connected;
                    }
                    master.runtime.insert(
                        agent.agent_id.clone(),
                        AgentRuntime {
                            last_heard: now,
                            needs_reregister: needs,
                        },
                    );
                    master.agents.insert(agent.agent_id.clone(), agent);
                }
            }
            Err(e) => log::error!("master recovery could not read agents: {e}"),
        }
        master
    }

    pub fn config(&self) -> &MasterConfig {
        &self.config
    }

    pub fn agents(&self) -> impl Iterator<Item = &AgentRecord> {
        self.agents.values()
    }

    pub fn agent(&self, id: &AgentId) -> Option<&AgentRecord> {
        self.agents.get(id)
    }

    pub fn tasks(&self) -> impl Iterator<Item = &MasterTask> {
        self.tasks.values()
    }

    pub fn task(&self, id: &TaskId) -> Option<&MasterTask> {
        self.tasks.get(id)
    }

    pub fn outstanding_offers(&self) -> impl Iterator<Item = (&FrameworkId, &Offer)> {
        self.offers.values().map(|o| (&o.framework, &o.offer))
    }

    pub fn frameworks(&self) -> impl Iterator<Item = &FrameworkId> {
        self.frameworks.keys()
    }

    pub fn adaptive_timeout_for(&self, agent: &AgentId) -> Tick {
        let history = self
            .agents
            .get(agent)
            .map(|a| a.recovery_durations.as_slice())
            .unwrap_or(&[]);
        adaptive_timeout(history, self.config.base_timeout, self.config.timeout_multiplier)
    }

    fn persist_agent(&self, id: &AgentId) {
        if let Some(agent) = self.agents.get(id) {
            if let Err(e) = self.store.put_agent(agent) {
                log::error!("could not persist agent {id}: {e}");
            }
        }
    }

    /// Registers an agent that is not currently connected. Re-registration of
    /// a Suspect or Disconnected agent keeps its failure history.
    pub fn register_agent(
        &mut self,
        id: AgentId,
        gateway: NodeId,
        advertised: ResourceVector,
        attributes: AttributeSet,
        now: Tick,
    ) -> Result<&AgentRecord, MasterError> {
        self.admit(id, gateway, advertised, attributes, 0, false, now)
    }

    #[allow(clippy::too_many_arguments)]
    fn admit(
        &mut self,
        id: AgentId,
        gateway: NodeId,
        advertised: ResourceVector,
        attributes: AttributeSet,
        epoch: u64,
        reregister: bool,
        now: Tick,
    ) -> Result<&AgentRecord, MasterError> {
        let needs_reregister = self.runtime.get(&id).is_some_and(|r| r.needs_reregister);
        match self.agents.get_mut(&id) {
            Some(agent) => {
                if agent.is_connected() && !reregister && !needs_reregister {
                    return Err(MasterError::DuplicateRegistration(id));
                }
                if let Some(since) = agent.suspect_since.filter(|_| !agent.is_connected()) {
                    let after = now.saturating_sub(since);
                    agent.recovery_durations.push(after);
                    agent.failure_history.push((now, AgentEvent::Recovered { after }));
                }
                agent.gateway_id = gateway;
                agent.advertised = advertised;
                agent.attributes = attributes;
                agent.liveness = Liveness::Connected;
                agent.suspect_since = None;
                agent.epoch = epoch;
                agent.failure_history.push((now, AgentEvent::Reregistered));
            }
            None => {
                let mut agent = AgentRecord::new(id.clone(), gateway, advertised, attributes);
                agent.epoch = epoch;
                agent.failure_history.push((now, AgentEvent::Registered));
                self.agents.insert(id.clone(), agent);
            }
        }
        self.runtime.insert(
            id.clone(),
            AgentRuntime {
                last_heard: now,
                needs_reregister: false,
            },
        );
        self.persist_agent(&id);
        Ok(&self.agents[&id])
    }

    /// Builds offers for every connected agent with free resources and no
    /// outstanding offer or probe hold, rotating across frameworks.
    pub fn make_offers(&mut self, now: Tick) -> Vec<(FrameworkId, Offer)> {
        let frameworks: Vec<FrameworkId> = self.frameworks.keys().cloned().collect();
        if frameworks.is_empty() {
            return Vec::new();
        }
        let offered: BTreeSet<AgentId> = self.offers.values().map(|o| o.offer.agent_id.clone()).collect();
        let mut out = Vec::new();
        for agent in self.agents.values() {
            let ready = agent.is_connected()
                && !self.runtime.get(&agent.agent_id).is_some_and(|r| r.needs_reregister)
                && !offered.contains(&agent.agent_id)
                && !self.probes.is_held(&agent.agent_id);
            if !ready {
                continue;
            }
            let free = agent.unallocated();
            if free.is_zero() {
                continue;
            }
            let framework = frameworks[self.rr_cursor % frameworks.len()].clone();
            self.rr_cursor = self.rr_cursor.wrapping_add(1);
            self.next_offer += 1;
            let offer = Offer {
                offer_id: format!("o{}-{}", self.started_at, self.next_offer),
                agent_id: agent.agent_id.clone(),
                granted: free,
                attributes: agent
                    .attributes
                    .clone()
                    .with(AGENT_ID_ATTRIBUTE, AttributeValue::text(agent.agent_id.as_str())),
                issued_at: now,
                ttl: self.config.offer_ttl,
            };
            out.push((framework, offer));
        }
        for (framework, offer) in &out {
            self.offers.insert(
                offer.offer_id.clone(),
                OutstandingOffer {
                    framework: framework.clone(),
                    offer: offer.clone(),
                },
            );
        }
        out
    }

    /// Applies a status report to the master's task table, releasing the
    /// allocation when the task stops holding resources.
    pub fn record_status(
        &mut self,
        agent_id: &AgentId,
        task_id: &TaskId,
        state: TaskState,
    ) -> Result<&MasterTask, MasterError> {
        if !self.agents.contains_key(agent_id) {
            return Err(MasterError::UnknownAgent(agent_id.clone()));
        }
        let task = self
            .tasks
            .get_mut(task_id)
            .ok_or_else(|| MasterError::UnknownTask(task_id.clone()))?;
        let was_active = task.state.is_active();
        task.state = state;
        if was_active && !state.is_active() {
            let agent = self.agents.get_mut(&task.agent_id).expect("task agent is known");
            agent.allocated = agent
                .allocated
                .checked_sub(&task.resources)
                .unwrap_or_else(|_| ResourceVector::zero());
        }
        Ok(&self.tasks[task_id])
    }

    /// Classifies an agent's disconnection with an explicit window and
    /// quorum.
    pub fn classify_disconnect(
        &self,
        agent_id: &AgentId,
        now: Tick,
        window: Tick,
        quorum: f64,
    ) -> Result<DisconnectClass, MasterError> {
        let agent = self
            .agents
            .get(agent_id)
            .ok_or_else(|| MasterError::UnknownAgent(agent_id.clone()))?;
        let params = ClassifyParams {
            window,
            quorum,
            ..self.config.classify_params()
        };
        let class = if self.config.transient_support {
            classify(agent, self.agents.values(), now, params)
        } else {
            classify_plain(agent, now, self.config.base_timeout)
        };
        class.ok_or_else(|| MasterError::NotSuspect(agent_id.clone()))
    }

    /// Starts a scout probe: holds each connected agent's free resources and
    /// returns the agents to contact. Agents that cannot be held are
    /// answered immediately with `responded = false`.
    pub fn scout_probe(
        &mut self,
        probe_id: &str,
        framework: Option<FrameworkId>,
        agent_ids: &[AgentId],
        sketch: ResourceVector,
        now: Tick,
    ) -> Vec<AgentId> {
        let eligible: Vec<AgentId> = agent_ids
            .iter()
            .filter(|a| self.agents.get(a).is_some_and(AgentRecord::is_connected))
            .cloned()
            .collect();
        // held agents get no offers, so retract any they already have
        self.probes
            .begin(probe_id, framework, agent_ids, &eligible, sketch, now)
            .into_iter()
            .inspect(|a| self.offers.retain(|_, o| &o.offer.agent_id != a))
            .collect()
    }

    /// Records one agent's answer; returns the outcome once every agent has
    /// answered.
    pub fn probe_reply(&mut self, probe_id: &str, agent: &AgentId, metric: f64, now: Tick) -> Option<ProbeOutcome> {
        self.probes.reply(probe_id, agent, metric, now)
    }

    /// Completes probes whose timeout passed.
    pub fn expire_probes(&mut self, now: Tick) -> Vec<ProbeOutcome> {
        self.probes.expire(now, self.config.probe_timeout)
    }

    pub fn probe_holds(&self) -> Vec<ProbeHold> {
        self.probes.holds()
    }

    /// Conservation and no-double-grant checks; returns violations.
    pub fn check_invariants(&self) -> Vec<String> {
        let mut violations = Vec::new();
        let mut expected: BTreeMap<&AgentId, ResourceVector> = BTreeMap::new();
        for task in self.tasks.values().filter(|t| t.state.is_active()) {
            let entry = expected.entry(&task.agent_id).or_default();
            *entry = &*entry + &task.resources;
        }
        for agent in self.agents.values() {
            let id = &agent.agent_id;
            let Ok(free) = agent.advertised.checked_sub(&agent.allocated) else {
                violations.push(format!("agent {id}: allocated exceeds advertised"));
                continue;
            };
            if &free + &agent.allocated != agent.advertised {
                violations.push(format!("agent {id}: allocated + unallocated != advertised"));
            }
            let tasks_total = expected.remove(id).unwrap_or_default();
            if tasks_total != agent.allocated {
                violations.push(format!(
                    "agent {id}: allocated {} but active tasks hold {}",
                    agent.allocated, tasks_total
                ));
            }
            let granted: ResourceVector = self
                .offers
                .values()
                .filter(|o| &o.offer.agent_id == id)
                .map(|o| o.offer.granted.clone())
                .sum();
            let grants = self.offers.values().filter(|o| &o.offer.agent_id == id).count();
            if !granted.fits_within(&free) || grants > 1 {
                violations.push(format!("agent {id}: outstanding offers exceed free resources"));
            }
        }
        for (id, _) in expected {
            violations.push(format!("active tasks on unknown agent {id}"));
        }
        violations
    }

    /// Handles one delivered message.
    pub fn handle(&mut self, env: &Envelope, now: Tick, out: &mut Outbox) {
        match &env.body {
            Body::Register(Registration::Agent {
                agent_id,
                gateway_id,
                resources,
                attributes,
                running,
                reregister,
                epoch,
            }) => self.on_agent_register(
                agent_id,
                gateway_id,
                resources,
                attributes,
                running,
                *reregister,
                *epoch,
                now,
                out,
            ),
            Body::Register(Registration::Framework {
                framework_id,
                reregister,
            }) => self.on_framework_register(framework_id, *reregister, now, out),
            Body::Heartbeat(Heartbeat::Agent { agent_id }) => {
                let reregister = self.heard(agent_id, now, out);
                if let Some(agent) = self.agents.get(agent_id) {
                    out.send_at(
                        agent.gateway_id.clone(),
                        Some(agent.epoch),
                        Body::Heartbeat(Heartbeat::AgentAck {
                            agent_id: agent_id.clone(),
                            acks: vec![],
                            reregister,
                        }),
                    );
                } else {
                    out.send(
                        env.from.clone(),
                        Body::Heartbeat(Heartbeat::AgentAck {
                            agent_id: agent_id.clone(),
                            acks: vec![],
                            reregister: true,
                        }),
                    );
                }
            }
            Body::Heartbeat(Heartbeat::Framework { framework_id }) => {
                let known = self.frameworks.contains_key(framework_id);
                if known {
                    self.frameworks.insert(framework_id.clone(), now);
                }
                out.send(
                    env.from.clone(),
                    Body::Heartbeat(Heartbeat::FrameworkAck {
                        framework_id: framework_id.clone(),
                        reregister: !known,
                    }),
                );
            }
            Body::Status(status) => self.on_status(env, status, now, out),
            Body::Accept(accept) => self.on_accept(accept, now, out),
            Body::Decline(decline) => {
                for id in &decline.offer_ids {
                    if self
                        .offers
                        .get(id)
                        .is_some_and(|o| o.framework == decline.framework_id)
                    {
                        self.offers.remove(id);
                    }
                }
            }
            Body::Kill(kill) => self.on_kill(kill, out),
            Body::Probe(probe) => self.on_probe(probe, now, out),
            Body::ProbeReply(reply) => {
                for result in &reply.results {
                    let metric = result.metric.unwrap_or(f64::INFINITY);
                    if let Some(outcome) = self.probe_reply(&reply.probe_id, &result.agent_id, metric, now) {
                        self.finish_probe(outcome, out);
                    }
                }
            }
            other => out.error(format!("master ignores {} from {}", other.kind(), env.from)),
        }
    }

    /// Periodic work: liveness, classification, offer expiry, probes and new
    /// offers.
    pub fn tick(&mut self, now: Tick, out: &mut Outbox) {
        let limit = self.config.heartbeat_period * Tick::from(self.config.missed_heartbeats);
        let newly_suspect: Vec<AgentId> = self
            .agents
            .values()
            .filter(|a| a.is_connected())
            .filter(|a| {
                let heard = self.runtime.get(&a.agent_id).map_or(0, |r| r.last_heard);
                now.saturating_sub(heard) >= limit
            })
            .map(|a| a.agent_id.clone())
            .collect();
        for id in newly_suspect {
            let agent = self.agents.get_mut(&id).expect("listed above");
            agent.liveness = Liveness::Suspect { since: now };
            agent.suspect_since = Some(now);
            agent.failure_history.push((now, AgentEvent::Suspected));
            self.offers.retain(|_, o| o.offer.agent_id != id);
            out.emit(Event::AgentSuspect { agent: id.clone() });
            self.persist_agent(&id);
        }

        let decisions: Vec<(AgentId, DisconnectClass)> = self
            .agents
            .values()
            .filter(|a| matches!(a.liveness, Liveness::Suspect { .. }))
            .filter_map(|a| {
                let class = if self.config.transient_support {
                    classify(a, self.agents.values(), now, self.config.classify_params())
                } else {
                    classify_plain(a, now, self.config.base_timeout)
                }?;
                (class != DisconnectClass::Undetermined).then(|| (a.agent_id.clone(), class))
            })
            .collect();
        for (id, class) in decisions {
            self.disconnect(&id, class, now, out);
        }

        let expired: Vec<String> = self
            .offers
            .iter()
            .filter(|(_, o)| now > o.offer.issued_at + o.offer.ttl)
            .map(|(id, _)| id.clone())
            .collect();
        for id in expired {
            self.offers.remove(&id);
            out.emit(Event::OfferExpired { offer_id: id });
        }

        for outcome in self.expire_probes(now) {
            self.finish_probe(outcome, out);
        }

        self.resend_launches(now, out);

        let mut batches: BTreeMap<FrameworkId, Vec<Offer>> = BTreeMap::new();
        for (framework, offer) in self.make_offers(now) {
            out.emit(Event::OfferIssued {
                offer_id: offer.offer_id.clone(),
                agent: offer.agent_id.clone(),
                framework: framework.clone(),
                granted: offer.granted.clone(),
            });
            batches.entry(framework).or_default().push(offer);
        }
        for (framework, offers) in batches {
            out.send(
                node_of(&framework),
                Body::Offer(OfferBatch {
                    framework_id: framework,
                    offers,
                }),
            );
        }
    }

    /// Notes that an agent was heard from. Returns whether the agent must
    /// re-register before its messages are trusted.
    fn heard(&mut self, id: &AgentId, now: Tick, out: &mut Outbox) -> bool {
        let Some(agent) = self.agents.get_mut(id) else {
            return true;
        };
        let runtime = self.runtime.entry(id.clone()).or_default();
        runtime.last_heard = now;
        if let Liveness::Suspect { since } = agent.liveness {
            let after = now.saturating_sub(since);
            agent.liveness = Liveness::Connected;
            agent.suspect_since = None;
            agent.recovery_durations.push(after);
            agent.failure_history.push((now, AgentEvent::Recovered { after }));
            out.emit(Event::AgentRecovered {
                agent: id.clone(),
                after,
            });
            self.persist_agent(id);
        }
        let agent = &self.agents[id];
        matches!(agent.liveness, Liveness::Disconnected { .. }) || self.runtime[id].needs_reregister
    }

    fn disconnect(&mut self, id: &AgentId, class: DisconnectClass, now: Tick, out: &mut Outbox) {
        let agent = self.agents.get_mut(id).expect("known agent");
        agent.liveness = Liveness::Disconnected { since: now };
        agent.failure_history.push((now, AgentEvent::Disconnected { class }));
        out.emit(Event::AgentDisconnected {
            agent: id.clone(),
            class,
        });
        self.persist_agent(id);
        let grace = (class == DisconnectClass::Transient).then(|| self.adaptive_timeout_for(id));
        let lost: Vec<TaskId> = self
            .tasks
            .values()
            .filter(|t| &t.agent_id == id && t.state.is_active())
            .map(|t| t.task_id.clone())
            .collect();
        for task_id in lost {
            self.lose_task(&task_id, class, grace, "agent disconnected", now, out);
        }
    }

    fn lose_task(
        &mut self,
        task_id: &TaskId,
        class: DisconnectClass,
        grace: Option<Tick>,
        reason: &str,
        _now: Tick,
        out: &mut Outbox,
    ) {
        let Some(task) = self.tasks.get(task_id).cloned() else {
            return;
        };
        if self.record_status(&task.agent_id, task_id, TaskState::Lost).is_err() {
            return;
        }
        self.tasks.get_mut(task_id).expect("present").class = Some(class);
        out.emit(Event::MasterStatus {
            task: task_id.clone(),
            agent: task.agent_id.clone(),
            state: TaskState::Lost,
            class: Some(class),
        });
        out.send(
            node_of(&task.framework_id),
            Body::Status(StatusUpdate {
                update_id: format!("lost:{}:{}:{}", task_id, task.attempt, task.agent_id),
                task_id: task_id.clone(),
                state: TaskState::Lost,
                agent_id: task.agent_id.clone(),
                framework_id: task.framework_id.clone(),
                attempt: task.attempt,
                class: Some(class),
                grace,
                reason: Some(reason.to_string()),
                exit_status: None,
                reconcile: false,
            }),
        );
    }

    #[allow(clippy::too_many_arguments)]
    fn on_agent_register(
        &mut self,
        agent_id: &AgentId,
        gateway: &NodeId,
        resources: &ResourceVector,
        attributes: &AttributeSet,
        running: &[ReportedTask],
        reregister: bool,
        epoch: u64,
        now: Tick,
        out: &mut Outbox,
    ) {
        // allocations are rebuilt from the report below
        let held: Vec<TaskId> = self
            .tasks
            .values()
            .filter(|t| &t.agent_id == agent_id && t.state.is_active())
            .map(|t| t.task_id.clone())
            .collect();
        match self.admit(
            agent_id.clone(),
            gateway.clone(),
            resources.clone(),
            attributes.clone(),
            epoch,
            reregister,
            now,
        ) {
            Ok(_) => {}
            Err(e) => {
                out.emit(Event::RegistrationRejected {
                    agent: agent_id.clone(),
                    reason: e.to_string(),
                });
                return;
            }
        }
        out.emit(Event::AgentRegistered {
            agent: agent_id.clone(),
            reregister,
            epoch,
        });
        self.offers.retain(|_, o| &o.offer.agent_id != agent_id);
        out.send_at(
            gateway.clone(),
            Some(epoch),
            Body::Heartbeat(Heartbeat::AgentAck {
                agent_id: agent_id.clone(),
                acks: vec![],
                reregister: false,
            }),
        );
        self.reconcile(agent_id, running, &held, now, out);
    }

    /// Compares what an agent reports with what the master believes.
    fn reconcile(&mut self, agent_id: &AgentId, running: &[ReportedTask], held: &[TaskId], now: Tick, out: &mut Outbox) {
        let reported: BTreeSet<&TaskId> = running.iter().map(|r| &r.task_id).collect();
        for task_id in held {
            let t = &self.tasks[task_id];
            let in_flight = t.state == TaskState::Staging
                && self.unconfirmed.get(task_id).is_some_and(|(l, _)| l.task.attempt == t.attempt);
            if in_flight {
                // the launch retry covers it if it was dropped
                continue;
            }
            if !reported.contains(task_id) {
                self.lose_task(task_id, DisconnectClass::Permanent, None, "not reported on re-registration", now, out);
                // its launch may still be in flight
                let t = &self.tasks[task_id];
                let (framework, attempt) = (t.framework_id.clone(), t.attempt);
                self.kill_attempt(agent_id, task_id, &framework, attempt, out);
            }
        }
        for r in running {
            let verdict = match self.tasks.get(&r.task_id) {
                Some(t) if &t.agent_id == agent_id && t.attempt == r.attempt && t.state.is_active() => Verdict::Keep,
                Some(t)
                    if &t.agent_id == agent_id
                        && t.attempt == r.attempt
                        && t.state == TaskState::Lost
                        && t.class == Some(DisconnectClass::Transient)
                        && self.config.transient_support =>
                {
                    Verdict::Adopt
                }
                Some(_) => Verdict::Kill,
                None => Verdict::Adopt,
            };
            let verdict = match verdict {
                Verdict::Adopt if !self.fits(agent_id, &r.resources) => Verdict::Kill,
                Verdict::Keep if !held.contains(&r.task_id) => Verdict::Kill,
                v => v,
            };
            match verdict {
                Verdict::Keep => {
                    // allocation still stands
                }
                Verdict::Adopt => {
                    let agent = self.agents.get_mut(agent_id).expect("registered");
                    agent.allocated = &agent.allocated + &r.resources;
                    self.tasks.insert(
                        r.task_id.clone(),
                        MasterTask {
                            task_id: r.task_id.clone(),
                            framework_id: r.framework_id.clone(),
                            agent_id: agent_id.clone(),
                            resources: r.resources.clone(),
                            attempt: r.attempt,
                            state: TaskState::Running,
                            class: None,
                        },
                    );
                    out.emit(Event::TaskAdopted {
                        task: r.task_id.clone(),
                        agent: agent_id.clone(),
                    });
                    out.send(
                        node_of(&r.framework_id),
                        Body::Status(StatusUpdate {
                            update_id: format!("adopt:{}:{}:{}", r.task_id, r.attempt, now),
                            task_id: r.task_id.clone(),
                            state: TaskState::Running,
                            agent_id: agent_id.clone(),
                            framework_id: r.framework_id.clone(),
                            attempt: r.attempt,
                            class: None,
                            grace: None,
                            reason: Some("resurfaced".into()),
                            exit_status: None,
                            reconcile: true,
                        }),
                    );
                }
                Verdict::Kill => self.kill_attempt(agent_id, &r.task_id, &r.framework_id, r.attempt, out),
            }
        }
        let _ = self.check_agent(agent_id);
    }

    /// Tells an agent to stop one specific attempt of a task.
    fn kill_attempt(&self, agent_id: &AgentId, task_id: &TaskId, framework: &FrameworkId, attempt: u32, out: &mut Outbox) {
        let Some(agent) = self.agents.get(agent_id) else {
            return;
        };
        out.emit(Event::ReconcileKill {
            task: task_id.clone(),
            agent: agent_id.clone(),
            attempt,
        });
        out.send_at(
            agent.gateway_id.clone(),
            Some(agent.epoch),
            Body::Kill(Kill {
                task_id: task_id.clone(),
                agent_id: Some(agent_id.clone()),
                framework_id: Some(framework.clone()),
                attempt: Some(attempt),
            }),
        );
    }

    fn fits(&self, agent_id: &AgentId, resources: &ResourceVector) -> bool {
        self.agents
            .get(agent_id)
            .is_some_and(|a| resources.fits_within(&a.unallocated()))
    }

    fn check_agent(&self, agent_id: &AgentId) -> Result<(), MasterError> {
        let agent = self
            .agents
            .get(agent_id)
            .ok_or_else(|| MasterError::UnknownAgent(agent_id.clone()))?;
        if agent.allocated.fits_within(&agent.advertised) {
            Ok(())
        } else {
            Err(MasterError::NoCapacity(agent_id.clone()))
        }
    }

    fn on_framework_register(&mut self, framework: &FrameworkId, reregister: bool, now: Tick, out: &mut Outbox) {
        self.frameworks.insert(framework.clone(), now);
        out.emit(Event::FrameworkRegistered {
            framework: framework.clone(),
            reregister,
        });
        out.send(
            node_of(framework),
            Body::Heartbeat(Heartbeat::FrameworkAck {
                framework_id: framework.clone(),
                reregister: false,
            }),
        );
        for task in self.tasks.values().filter(|t| &t.framework_id == framework) {
            out.send(
                node_of(framework),
                Body::Status(StatusUpdate {
                    update_id: format!("reconcile:{}:{}:{}", task.task_id, task.attempt, now),
                    task_id: task.task_id.clone(),
                    state: task.state,
                    agent_id: task.agent_id.clone(),
                    framework_id: framework.clone(),
                    attempt: task.attempt,
                    class: task.class,
                    grace: None,
                    reason: None,
                    exit_status: None,
                    reconcile: true,
                }),
            );
        }
    }

    fn on_status(&mut self, env: &Envelope, status: &StatusUpdate, now: Tick, out: &mut Outbox) {
        let agent_id = &status.agent_id;
        let reregister = self.heard(agent_id, now, out);
        let Some(agent) = self.agents.get(agent_id) else {
            out.send(
                env.from.clone(),
                Body::Heartbeat(Heartbeat::AgentAck {
                    agent_id: agent_id.clone(),
                    acks: vec![],
                    reregister: true,
                }),
            );
            return;
        };
        let (gateway, epoch) = (agent.gateway_id.clone(), agent.epoch);
        if reregister {
            // unacknowledged; the agent resends after re-registering
            out.send_at(
                gateway,
                Some(epoch),
                Body::Heartbeat(Heartbeat::AgentAck {
                    agent_id: agent_id.clone(),
                    acks: vec![],
                    reregister: true,
                }),
            );
            return;
        }
        out.send_at(
            gateway,
            Some(epoch),
            Body::Heartbeat(Heartbeat::AgentAck {
                agent_id: agent_id.clone(),
                acks: vec![status.update_id.clone()],
                reregister: false,
            }),
        );
        if !self.seen_updates.insert(status.update_id.clone()) {
            return;
        }
        let current = self
            .tasks
            .get(&status.task_id)
            .map(|t| (&t.agent_id == agent_id && t.attempt == status.attempt, t.state));
        match current {
            Some((true, state)) if state == status.state => {}
            Some((true, state)) if is_stale(state, status.state) => {
                // Resent out of order, or an attempt written off while its
                // launch was still in flight. The latter must not keep running.
                let resurfacing = state == TaskState::Lost
                    && self.config.transient_support
                    && self.tasks[&status.task_id].class == Some(DisconnectClass::Transient);
                if !state.is_active() && !resurfacing {
                    self.kill_attempt(agent_id, &status.task_id, &status.framework_id, status.attempt, out);
                }
            }
            Some((true, _)) => {
                if self.record_status(agent_id, &status.task_id, status.state).is_ok() {
                    out.emit(Event::MasterStatus {
                        task: status.task_id.clone(),
                        agent: agent_id.clone(),
                        state: status.state,
                        class: None,
                    });
                    out.send(node_of(&status.framework_id), Body::Status(status.clone()));
                }
            }
            Some((false, _)) => {
                // a previous launch attempt; its resources were released already
                if status.state.is_active() {
                    self.kill_attempt(agent_id, &status.task_id, &status.framework_id, status.attempt, out);
                }
            }
            None => {
                out.send(node_of(&status.framework_id), Body::Status(status.clone()));
            }
        }
    }

    fn reject_accept(&self, accept: &Accept, reason: &str, out: &mut Outbox) {
        out.emit(Event::AcceptRejected {
            offer_id: accept.offer_id.clone(),
            reason: reason.to_string(),
        });
        for launch in &accept.launches {
            out.send(
                node_of(&accept.framework_id),
                Body::Status(StatusUpdate {
                    update_id: format!("rejected:{}:{}", launch.task_id, launch.attempt),
                    task_id: launch.task_id.clone(),
                    state: TaskState::Lost,
                    agent_id: AgentId::from(""),
                    framework_id: accept.framework_id.clone(),
                    attempt: launch.attempt,
                    class: Some(DisconnectClass::Permanent),
                    grace: None,
                    reason: Some(reason.to_string()),
                    exit_status: None,
                    reconcile: false,
                }),
            );
        }
    }

    fn on_accept(&mut self, accept: &Accept, now: Tick, out: &mut Outbox) {
        let Some(held) = self.offers.get(&accept.offer_id) else {
            self.reject_accept(accept, "unknown or rescinded offer", out);
            return;
        };
        if held.framework != accept.framework_id {
            self.reject_accept(accept, "offer belongs to another framework", out);
            return;
        }
        let offer = self.offers.remove(&accept.offer_id).expect("checked").offer;
        if now > offer.issued_at + offer.ttl {
            out.emit(Event::OfferExpired {
                offer_id: offer.offer_id.clone(),
            });
            self.reject_accept(accept, "offer expired", out);
            return;
        }
        let agent_id = offer.agent_id.clone();
        let connected = self.agents.get(&agent_id).is_some_and(AgentRecord::is_connected);
        if !connected {
            self.reject_accept(accept, "agent not connected", out);
            return;
        }
        let total: ResourceVector = accept.launches.iter().map(|l| l.spec.required.clone()).sum();
        if !total.fits_within(&offer.granted) || !self.fits(&agent_id, &total) {
            self.reject_accept(accept, "launches exceed the offer", out);
            return;
        }
        for launch in &accept.launches {
            if let Some(prev) = self.tasks.get(&launch.task_id).cloned() {
                if prev.state.is_active() {
                    let _ = self.record_status(&prev.agent_id, &prev.task_id, TaskState::Killed);
                    if let Some(a) = self.agents.get(&prev.agent_id) {
                        out.send_at(
                            a.gateway_id.clone(),
                            Some(a.epoch),
                            Body::Kill(Kill {
                                task_id: prev.task_id.clone(),
                                agent_id: Some(prev.agent_id.clone()),
                                framework_id: Some(prev.framework_id.clone()),
                                attempt: Some(prev.attempt),
                            }),
                        );
                    }
                }
            }
            let agent = self.agents.get_mut(&agent_id).expect("connected");
            agent.allocated = &agent.allocated + &launch.spec.required;
            self.tasks.insert(
                launch.task_id.clone(),
                MasterTask {
                    task_id: launch.task_id.clone(),
                    framework_id: accept.framework_id.clone(),
                    agent_id: agent_id.clone(),
                    resources: launch.spec.required.clone(),
                    attempt: launch.attempt,
                    state: TaskState::Staging,
                    class: None,
                },
            );
            out.emit(Event::TaskLaunched {
                task: launch.task_id.clone(),
                agent: agent_id.clone(),
                attempt: launch.attempt,
            });
            let agent = &self.agents[&agent_id];
            let msg = Launch {
                agent_id: agent_id.clone(),
                framework_id: accept.framework_id.clone(),
                task: launch.clone(),
            };
            out.send_at(agent.gateway_id.clone(), Some(agent.epoch), Body::Launch(msg.clone()));
            self.unconfirmed.insert(launch.task_id.clone(), (msg, now));
        }
    }

    /// Launch messages are not acknowledged, so a launch lost on the way is
    /// resent until the agent reports any status for that attempt. Devices
    /// drop duplicates.
    fn resend_launches(&mut self, now: Tick, out: &mut Outbox) {
        let tasks = &self.tasks;
        self.unconfirmed.retain(|id, (launch, _)| {
            tasks
                .get(id)
                .is_some_and(|t| t.state == TaskState::Staging && t.attempt == launch.task.attempt)
        });
        for (launch, sent) in self.unconfirmed.values_mut() {
            if now < *sent + self.config.launch_retry {
                continue;
            }
            let Some(agent) = self.agents.get(&launch.agent_id).filter(|a| a.is_connected()) else {
                continue;
            };
            *sent = now;
            out.send_at(agent.gateway_id.clone(), Some(agent.epoch), Body::Launch(launch.clone()));
            out.emit(Event::LaunchResent {
                task: launch.task.task_id.clone(),
                agent: launch.agent_id.clone(),
                attempt: launch.task.attempt,
            });
        }
    }

    fn on_kill(&mut self, kill: &Kill, out: &mut Outbox) {
        let Some(task) = self.tasks.get(&kill.task_id) else {
            return;
        };
        if !task.state.is_active() {
            return;
        }
        if kill.attempt.is_some_and(|a| a != task.attempt) {
            // an older attempt the scheduler wants gone; route it anyway
            if let Some(agent) = kill.agent_id.as_ref().and_then(|a| self.agents.get(a)) {
                out.send_at(agent.gateway_id.clone(), Some(agent.epoch), Body::Kill(kill.clone()));
            }
            return;
        }
        let Some(agent) = self.agents.get(&task.agent_id) else {
            return;
        };
        out.send_at(
            agent.gateway_id.clone(),
            Some(agent.epoch),
            Body::Kill(Kill {
                task_id: task.task_id.clone(),
                agent_id: Some(task.agent_id.clone()),
                framework_id: Some(task.framework_id.clone()),
                attempt: Some(task.attempt),
            }),
        );
    }

    fn on_probe(&mut self, probe: &Probe, now: Tick, out: &mut Outbox) {
        let contacted = self.scout_probe(
            &probe.probe_id,
            probe.framework_id.clone(),
            &probe.agent_ids,
            probe.sketch.clone(),
            now,
        );
        for agent_id in &contacted {
            let agent = &self.agents[agent_id];
            out.send_at(
                agent.gateway_id.clone(),
                Some(agent.epoch),
                Body::Probe(Probe {
                    probe_id: probe.probe_id.clone(),
                    framework_id: None,
                    agent_ids: vec![agent_id.clone()],
                    sketch: probe.sketch.clone(),
                }),
            );
        }
        if contacted.is_empty() {
            if let Some(outcome) = self.probes.take_if_complete(&probe.probe_id) {
                self.finish_probe(outcome, out);
            }
        }
    }

    fn finish_probe(&mut self, outcome: ProbeOutcome, out: &mut Outbox) {
        out.emit(Event::ProbeCompleted {
            probe_id: outcome.probe_id.clone(),
            results: outcome.results.clone(),
        });
        if let Some(framework) = &outcome.framework {
            out.send(
                node_of(framework),
                Body::ProbeReply(ProbeReply {
                    probe_id: outcome.probe_id,
                    results: outcome.results,
                    detail: None,
                }),
            );
        }
    }
}

enum Verdict {
    Keep,
    Adopt,
    Kill,
}


#[cfg(test)]
mod tests;
