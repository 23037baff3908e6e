//! Device discovery with opinion sharing between gateways.
//!
//! Each gateway scores the devices it hears from, sends its local
//! observations to its peers, and folds every observation of a device into
//! an opinion: the plain mean of all observations plus the previous opinion.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{AttributeConstraint, AttributeSet, DeviceId, ResourceVector, TaskId, Tick};
use crate::protocol::Observation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("no observations and no previous opinion")]
pub struct NoData;

/// Mean of every score about `subject` in `local` and `shared`, with the
/// previous opinion counted as one more observation.
pub fn merge_opinions(
    local: &[Observation],
    shared: &[Observation],
    previous: Option<f64>,
    subject: &DeviceId,
) -> Result<f64, NoData> {
    let scores = local
        .iter()
        .chain(shared)
        .filter(|o| &o.subject_id == subject)
        .map(|o| o.score.clamp(0.0, 1.0))
        .chain(previous);
    let (sum, n) = scores.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        return Err(NoData);
    }
    Ok((sum / n as f64).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceRecord {
    pub device_id: DeviceId,
    pub resources: ResourceVector,
    pub attributes: AttributeSet,
    pub last_seen: Tick,
    pub opinion: f64,
    /// Decided at registration: avoided devices get no proxy.
    pub avoided: bool,
    /// Tasks the device said it was executing in its last heartbeat.
    pub live: Vec<TaskId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscoveryConfig {
    pub default_opinion: f64,
    pub avoidance_threshold: f64,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        Self {
            default_opinion: 0.5,
            avoidance_threshold: 0.2,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Discovery {
    config: DiscoveryConfig,
    devices: BTreeMap<DeviceId, DeviceRecord>,
    /// Opinions, including about devices not registered here.
    opinions: BTreeMap<DeviceId, f64>,
    local: Vec<Observation>,
    shared: Vec<Observation>,
}

impl Discovery {
    pub fn new(config: DiscoveryConfig) -> Self {
        Self {
            config,
            ..Self::default()
        }
    }

    pub fn device(&self, id: &DeviceId) -> Option<&DeviceRecord> {
        self.devices.get(id)
    }

    pub fn device_mut(&mut self, id: &DeviceId) -> Option<&mut DeviceRecord> {
        self.devices.get_mut(id)
    }

    pub fn devices(&self) -> impl Iterator<Item = &DeviceRecord> {
        self.devices.values()
    }

    pub fn opinion(&self, id: &DeviceId) -> f64 {
        self.opinions.get(id).copied().unwrap_or(self.config.default_opinion)
    }

    /// Upserts a device. Pending observations about it are merged first, and
    /// the device is avoided if its opinion is below the threshold.
    pub fn register_device(
        &mut self,
        id: DeviceId,
        resources: ResourceVector,
        attributes: AttributeSet,
        now: Tick,
    ) -> &DeviceRecord {
        self.merge_subject(&id);
        let opinion = self.opinion(&id);
        let avoided = opinion < self.config.avoidance_threshold;
        let record = self.devices.entry(id.clone()).or_insert_with(|| DeviceRecord {
            device_id: id.clone(),
            resources: ResourceVector::zero(),
            attributes: AttributeSet::new(),
            last_seen: now,
            opinion,
            avoided,
            live: Vec::new(),
        });
        record.resources = resources;
        record.attributes = attributes;
        record.last_seen = record.last_seen.max(now);
        record.opinion = opinion;
        record.avoided = avoided;
        record
    }

    pub fn heard(&mut self, id: &DeviceId, live: Vec<TaskId>, now: Tick) -> bool {
        match self.devices.get_mut(id) {
            Some(d) => {
                d.last_seen = d.last_seen.max(now);
                d.live = live;
                true
            }
            None => false,
        }
    }

    pub fn observe(&mut self, observation: Observation) {
        self.local.push(observation);
    }

    pub fn receive(&mut self, observations: &[Observation]) {
        self.shared.extend_from_slice(observations);
    }

    /// Local observations not yet sent to peers.
    pub fn local_observations(&self) -> &[Observation] {
        &self.local
    }

    fn merge_subject(&mut self, subject: &DeviceId) {
        let previous = self.opinions.get(subject).copied();
        let touched = self
            .local
            .iter()
            .chain(&self.shared)
            .any(|o| &o.subject_id == subject);
        if !touched {
            return;
        }
        if let Ok(op) = merge_opinions(&self.local, &self.shared, previous.or(Some(self.config.default_opinion)), subject) {
            self.opinions.insert(subject.clone(), op);
            if let Some(d) = self.devices.get_mut(subject) {
                d.opinion = op;
            }
        }
        self.local.retain(|o| &o.subject_id != subject);
        self.shared.retain(|o| &o.subject_id != subject);
    }

    /// Folds every pending observation into the opinions.
    pub fn merge_all(&mut self) {
        let subjects: BTreeSet<DeviceId> = self
            .local
            .iter()
            .chain(&self.shared)
            .map(|o| o.subject_id.clone())
            .collect();
        for s in subjects {
            self.merge_subject(&s);
        }
    }

    /// Devices that can provide the needed capabilities: for each constraint,
    /// every non-avoided device satisfying it.
    pub fn find_providers(&self, constraints: &[AttributeConstraint]) -> BTreeSet<DeviceId> {
        constraints
            .iter()
            .flat_map(|c| {
                self.devices
                    .values()
                    .filter(|d| !d.avoided && c.is_satisfied_by(&d.attributes))
                    .map(|d| d.device_id.clone())
            })
            .collect()
    }
}
