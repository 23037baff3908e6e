//! The ordered record of a run, written as one JSON object per line.

use serde::{Deserialize, Serialize};

use crate::domain::{NodeId, TaskId, Tick};
use crate::events::Event;

use super::scenario::EventMatch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceEvent {
    Deliver {
        from: NodeId,
        to: NodeId,
        msg: String,
    },
    Drop {
        from: NodeId,
        to: NodeId,
        msg: String,
        reason: String,
    },
    Fault {
        fault: String,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        nodes: Vec<NodeId>,
    },
    Node {
        node: NodeId,
        event: Event,
    },
    Submitted {
        ids: Vec<TaskId>,
    },
    Action {
        task: TaskId,
        outcome: String,
    },
    Rejected {
        reason: String,
    },
    Violation {
        message: String,
    },
    Duplicate {
        task: TaskId,
        live: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceLine {
    pub tick: Tick,
    pub seq: u64,
    #[serde(flatten)]
    pub event: TraceEvent,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub lines: Vec<TraceLine>,
}

impl Trace {
    pub fn push(&mut self, tick: Tick, event: TraceEvent) {
        let seq = self.lines.len() as u64;
        self.lines.push(TraceLine { tick, seq, event });
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    pub fn to_jsonl(&self) -> String {
        let mut text = String::new();
        for line in &self.lines {
            text.push_str(&crate::codec::encode(line));
            text.push('\n');
        }
        text
    }

    pub fn from_jsonl(text: &str) -> Result<Self, crate::codec::CodecError> {
        let lines = crate::codec::read_lines(text.as_bytes())?;
        Ok(Self { lines })
    }

    /// Node events with their tick and emitting node.
    pub fn node_events(&self) -> impl Iterator<Item = (Tick, &NodeId, &Event)> {
        self.lines.iter().filter_map(|l| match &l.event {
            TraceEvent::Node { node, event } => Some((l.tick, node, event)),
            _ => None,
        })
    }

    /// Ticks of every node event matching `m`, in trace order.
    pub fn matching(&self, m: &EventMatch) -> Vec<Tick> {
        self.node_events()
            .filter(|(_, node, event)| event_matches(m, node, event))
            .map(|(tick, _, _)| tick)
            .collect()
    }

    /// Finds the steps in order. Returns the tick of each step, or the index
    /// of the first step that never occurs.
    pub fn sequence(&self, steps: &[EventMatch]) -> Result<Vec<Tick>, usize> {
        let mut found = Vec::new();
        let mut events = self.node_events();
        for (i, step) in steps.iter().enumerate() {
            match events.by_ref().find(|(_, node, event)| event_matches(step, node, event)) {
                Some((tick, _, _)) => found.push(tick),
                None => return Err(i),
            }
        }
        Ok(found)
    }
}

pub fn event_tag(event: &Event) -> String {
    match serde_json::to_value(event) {
        Ok(serde_json::Value::Object(map)) => map
            .get("event")
            .and_then(|v| v.as_str())
            .unwrap_or_default()
            .to_string(),
        _ => String::new(),
    }
}

pub fn event_matches(m: &EventMatch, node: &NodeId, event: &Event) -> bool {
    if m.node.as_ref().is_some_and(|n| n != node) {
        return false;
    }
    let Ok(serde_json::Value::Object(map)) = serde_json::to_value(event) else {
        return false;
    };
    if map.get("event").and_then(|v| v.as_str()) != Some(m.event.as_str()) {
        return false;
    }
    m.fields.iter().all(|(k, v)| map.get(k) == Some(v))
}
