//! Offer matching and the delayed-scheduling decision.

use std::cmp::Ordering;

use thiserror::Error;

use crate::domain::{
    AttributeConstraint, AttributeSet, AttributeValue, Component, RuntimeKind, TaskSpec, Tick,
};
use crate::master::Offer;

/// Why an offer does not match.
#[derive(Debug, Clone, PartialEq)]
pub enum MatchFailure {
    Resource(Component),
    Constraint(AttributeConstraint),
    /// No executor for the task's runtime is advertised.
    Runtime(RuntimeKind),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchReport {
    pub matched: bool,
    pub failed_constraint: Option<MatchFailure>,
    /// Whether the offer sits on the node holding the task's data; `None`
    /// when the task has no locality preference.
    pub locality_satisfied: Option<bool>,
}

impl MatchReport {
    pub fn matched(locality_satisfied: Option<bool>) -> Self {
        Self {
            matched: true,
            failed_constraint: None,
            locality_satisfied,
        }
    }

    pub fn failed(reason: MatchFailure, locality_satisfied: Option<bool>) -> Self {
        Self {
            matched: false,
            failed_constraint: Some(reason),
            locality_satisfied,
        }
    }
}

pub fn locality_satisfied(spec: &TaskSpec, attributes: &AttributeSet) -> Option<bool> {
    let locality = spec.locality.as_ref()?;
    Some(
        attributes
            .get(&locality.attribute)
            .is_some_and(|v| v.matches(&AttributeValue::text(locality.value.clone()))),
    )
}

/// The built-in matcher: resources, then constraints in order, then the
/// runtime's executor.
pub fn match_offer(spec: &TaskSpec, offer: &Offer) -> MatchReport {
    let local = locality_satisfied(spec, &offer.attributes);
    if let Some(component) = spec.required.first_shortfall(&offer.granted) {
        return MatchReport::failed(MatchFailure::Resource(component), local);
    }
    if let Some(c) = spec.constraints.iter().find(|c| !c.is_satisfied_by(&offer.attributes)) {
        return MatchReport::failed(MatchFailure::Constraint(c.clone()), local);
    }
    if !offer.attributes.executors().contains(spec.runtime.as_str()) {
        return MatchReport::failed(MatchFailure::Runtime(spec.runtime), local);
    }
    MatchReport::matched(local)
}

/// A custom matching function.
pub trait Matcher: Send {
    fn report(&self, spec: &TaskSpec, offer: &Offer) -> MatchReport;
}

impl<F> Matcher for F
where
    F: Fn(&TaskSpec, &Offer) -> MatchReport + Send,
{
    fn report(&self, spec: &TaskSpec, offer: &Offer) -> MatchReport {
        self(spec, offer)
    }
}

/// The built-in matcher as a [`Matcher`] value, for explicit installation.
#[derive(Debug, Clone, Copy, Default)]
pub struct BuiltinMatcher;

impl Matcher for BuiltinMatcher {
    fn report(&self, spec: &TaskSpec, offer: &Offer) -> MatchReport {
        match_offer(spec, offer)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("a custom matcher is already installed")]
pub struct HookAlreadyInstalled;

/// Holds at most one custom matcher; falls back to [`match_offer`].
#[derive(Default)]
pub struct MatcherSlot {
    custom: Option<Box<dyn Matcher>>,
}

impl MatcherSlot {
    pub fn install(&mut self, matcher: Box<dyn Matcher>) -> Result<(), HookAlreadyInstalled> {
        if self.custom.is_some() {
            return Err(HookAlreadyInstalled);
        }
        self.custom = Some(matcher);
        Ok(())
    }

    pub fn restore_builtin(&mut self) {
        self.custom = None;
    }

    pub fn is_custom(&self) -> bool {
        self.custom.is_some()
    }

    pub fn report(&self, spec: &TaskSpec, offer: &Offer) -> MatchReport {
        match &self.custom {
            Some(m) => m.report(spec, offer),
            None => match_offer(spec, offer),
        }
    }
}

/// A task waiting for placement.
#[derive(Debug, Clone, PartialEq)]
pub struct QueueEntry {
    pub task_id: crate::domain::TaskId,
    pub enqueued_at: Tick,
    /// `enqueued_at + wait_budget`; present iff the spec has locality.
    pub locality_deadline: Option<Tick>,
    pub attempts: u32,
}

impl QueueEntry {
    pub fn new(task_id: crate::domain::TaskId, spec: &TaskSpec, now: Tick, attempts: u32) -> Self {
        Self {
            task_id,
            enqueued_at: now,
            locality_deadline: spec.locality.as_ref().map(|l| now + l.wait_budget),
            attempts,
        }
    }
}

/// An offer under consideration, with the most recent probe metric for its
/// agent.
#[derive(Debug, Clone)]
pub struct Candidate<'a> {
    pub offer: &'a Offer,
    pub metric: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Decision {
    /// Index into the candidate list.
    Accept { index: usize, local: Option<bool> },
    Wait { deadline: Tick },
    Decline,
}

fn preference(a: &Candidate<'_>, b: &Candidate<'_>) -> Ordering {
    let by_metric = match (a.metric, b.metric) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        (Some(_), None) => Ordering::Less,
        (None, Some(_)) => Ordering::Greater,
        (None, None) => Ordering::Equal,
    };
    by_metric.then_with(|| a.offer.agent_id.cmp(&b.offer.agent_id))
}

/// Delayed scheduling: take a local match if there is one, wait for one
/// until the deadline, then settle for the best match.
pub fn decide(
    entry: &QueueEntry,
    spec: &TaskSpec,
    candidates: &[Candidate<'_>],
    now: Tick,
    matcher: &MatcherSlot,
) -> Decision {
    let mut matching: Vec<(usize, Option<bool>)> = candidates
        .iter()
        .enumerate()
        .filter_map(|(i, c)| {
            let report = matcher.report(spec, c.offer);
            report.matched.then_some((i, report.locality_satisfied))
        })
        .collect();
    if matching.is_empty() {
        return Decision::Decline;
    }
    matching.sort_by(|a, b| preference(&candidates[a.0], &candidates[b.0]));
    if let Some(&(index, local)) = matching.iter().find(|(_, l)| *l == Some(true)) {
        return Decision::Accept { index, local };
    }
    match entry.locality_deadline {
        Some(deadline) if now < deadline => Decision::Wait { deadline },
        _ => {
            let (index, local) = matching[0];
            Decision::Accept { index, local }
        }
    }
}
