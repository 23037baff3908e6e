//! Disconnection classification and adaptive timeouts.

use super::{AgentRecord, Liveness};
use crate::domain::Tick;
use crate::protocol::DisconnectClass;

/// Middle value of the sorted history; mean of the two middles for even
/// lengths.
pub fn median(history: &[Tick]) -> Option<f64> {
    if history.is_empty() {
        return None;
    }
    let mut sorted = history.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    Some(if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    })
}

/// `base` for an empty history, else `max(base, ceil(k * median))`.
pub fn adaptive_timeout(history: &[Tick], base: Tick, k: f64) -> Tick {
    assert!(base > 0, "base timeout must be positive");
    match median(history) {
        None => base,
        Some(m) => base.max((k * m).ceil() as Tick),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifyParams {
    pub window: Tick,
    pub quorum: f64,
    pub base_timeout: Tick,
    pub k: f64,
}

/// Tick an agent entered its current suspect episode.
fn suspect_since(agent: &AgentRecord) -> Option<Tick> {
    match agent.liveness {
        Liveness::Connected => None,
        Liveness::Suspect { since } => Some(since),
        Liveness::Disconnected { .. } => agent.suspect_since,
    }
}

/// Classifies one agent's disconnection against the whole pool.
///
/// Correlated rule: at least two agents, and at least `quorum` of the agents
/// that were connected when this episode began, entered Suspect within
/// `window` ticks of this agent. History rule: once the suspect duration
/// exceeds the adaptive timeout, a median past recovery shorter than that
/// timeout means Transient, otherwise Permanent. Before the timeout and
/// without correlation the answer is Undetermined.
pub fn classify<'a>(
    agent: &AgentRecord,
    pool: impl IntoIterator<Item = &'a AgentRecord>,
    now: Tick,
    params: ClassifyParams,
) -> Option<DisconnectClass> {
    let since = suspect_since(agent)?;
    let lo = since.saturating_sub(params.window);
    let hi = since + params.window;
    let mut population = 0usize;
    let mut correlated = 0usize;
    for other in pool {
        match suspect_since(other) {
            None => {
                if matches!(other.liveness, Liveness::Connected) {
                    population += 1;
                }
            }
            Some(t) if t >= lo => {
                population += 1;
                if t <= hi {
                    correlated += 1;
                }
            }
            Some(_) => {}
        }
    }
    if correlated >= 2 && correlated as f64 >= params.quorum * population as f64 {
        return Some(DisconnectClass::Transient);
    }
    let timeout = adaptive_timeout(&agent.recovery_durations, params.base_timeout, params.k);
    if now.saturating_sub(since) <= timeout {
        return Some(DisconnectClass::Undetermined);
    }
    match median(&agent.recovery_durations) {
        Some(m) if m < timeout as f64 => Some(DisconnectClass::Transient),
        _ => Some(DisconnectClass::Permanent),
    }
}

/// Classification when the master has no transient support: Permanent once
/// the base timeout passes, Undetermined before.
pub fn classify_plain(agent: &AgentRecord, now: Tick, base_timeout: Tick) -> Option<DisconnectClass> {
    let since = suspect_since(agent)?;
    Some(if now.saturating_sub(since) > base_timeout {
        DisconnectClass::Permanent
    } else {
        DisconnectClass::Undetermined
    })
}
