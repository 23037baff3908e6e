//! Scout probes: hold agents out of the offer cycle while they answer how a
//! sketched task would affect them.

use std::collections::BTreeMap;

use crate::domain::{AgentId, FrameworkId, ResourceVector, Tick};
use crate::protocol::ProbeResult;

/// One agent reserved by an in-flight probe.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeHold {
    pub probe_id: String,
    pub agent_id: AgentId,
    pub sketch: ResourceVector,
}

/// Collected answers of a finished probe, in request order.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOutcome {
    pub probe_id: String,
    pub framework: Option<FrameworkId>,
    pub results: Vec<ProbeResult>,
}

#[derive(Debug)]
struct Pending {
    framework: Option<FrameworkId>,
    started: Tick,
    sketch: ResourceVector,
    order: Vec<AgentId>,
    answers: BTreeMap<AgentId, Option<ProbeResult>>,
}

#[derive(Debug, Default)]
pub(super) struct Probes {
    pending: BTreeMap<String, Pending>,
    held: BTreeMap<AgentId, String>,
}

impl Probes {
    pub fn is_held(&self, agent: &AgentId) -> bool {
        self.held.contains_key(agent)
    }

    pub fn holds(&self) -> Vec<ProbeHold> {
        self.held
            .iter()
            .map(|(agent, probe)| ProbeHold {
                probe_id: probe.clone(),
                agent_id: agent.clone(),
                sketch: self.pending[probe].sketch.clone(),
            })
            .collect()
    }

    /// Holds every eligible agent not already held by another probe and
    /// returns them. The rest are answered as unresponsive right away.
    pub fn begin(
        &mut self,
        probe_id: &str,
        framework: Option<FrameworkId>,
        requested: &[AgentId],
        eligible: &[AgentId],
        sketch: ResourceVector,
        now: Tick,
    ) -> Vec<AgentId> {
        if self.pending.contains_key(probe_id) {
            return Vec::new();
        }
        let mut order = Vec::new();
        let mut answers = BTreeMap::new();
        let mut contacted = Vec::new();
        for agent in requested {
            if answers.contains_key(agent) {
                continue;
            }
            order.push(agent.clone());
            if eligible.contains(agent) && !self.held.contains_key(agent) {
                self.held.insert(agent.clone(), probe_id.to_string());
                answers.insert(agent.clone(), None);
                contacted.push(agent.clone());
            } else {
                answers.insert(agent.clone(), Some(unanswered(agent)));
            }
        }
        self.pending.insert(
            probe_id.to_string(),
            Pending {
                framework,
                started: now,
                sketch,
                order,
                answers,
            },
        );
        contacted
    }

    pub fn reply(&mut self, probe_id: &str, agent: &AgentId, metric: f64, now: Tick) -> Option<ProbeOutcome> {
        let pending = self.pending.get_mut(probe_id)?;
        let slot = pending.answers.get_mut(agent)?;
        if slot.is_some() {
            return None;
        }
        *slot = Some(ProbeResult {
            agent_id: agent.clone(),
            metric: metric.is_finite().then_some(metric),
            responded: true,
            rtt: now.saturating_sub(pending.started),
        });
        self.held.remove(agent);
        self.take_if_complete(probe_id)
    }

    pub fn take_if_complete(&mut self, probe_id: &str) -> Option<ProbeOutcome> {
        let done = self.pending.get(probe_id)?.answers.values().all(Option::is_some);
        done.then(|| self.finish(probe_id))
    }

    /// Finishes probes older than `timeout`; silent agents count as
    /// unresponsive.
    pub fn expire(&mut self, now: Tick, timeout: Tick) -> Vec<ProbeOutcome> {
        let stale: Vec<String> = self
            .pending
            .iter()
            .filter(|(_, p)| now.saturating_sub(p.started) >= timeout)
            .map(|(id, _)| id.clone())
            .collect();
        stale.iter().map(|id| self.finish(id)).collect()
    }

    fn finish(&mut self, probe_id: &str) -> ProbeOutcome {
        let pending = self.pending.remove(probe_id).expect("pending probe");
        self.held.retain(|_, p| p != probe_id);
        let mut answers = pending.answers;
        let results = pending
            .order
            .iter()
            .map(|a| answers.remove(a).flatten().unwrap_or_else(|| unanswered(a)))
            .collect();
        ProbeOutcome {
            probe_id: probe_id.to_string(),
            framework: pending.framework,
            results,
        }
    }
}

fn unanswered(agent: &AgentId) -> ProbeResult {
    ProbeResult {
        agent_id: agent.clone(),
        metric: None,
        responded: false,
        rtt: 0,
    }
}
