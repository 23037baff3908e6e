//! Vocabulary shared by every tier: resources, attributes, task specs and the
//! task lifecycle.

mod attributes;
mod resources;
mod task;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use attributes::{
    AttributeConstraint, AttributeError, AttributeSet, AttributeValue, Predicate,
    EXECUTORS_ATTRIBUTE,
};
pub use resources::{
    normalize as normalize_ports, Component, InsufficientResources, InvalidPortRange, PortRange,
    PortSet, ResourceVector, COMPONENTS,
};
pub use task::{
    is_legal, ArtifactRef, Initiator, Locality, RestartPolicy, RuntimeKind, SpecError, TaskRecord,
    TaskSpec, TaskState, TransitionError, UnknownRuntime,
};

/// Abstract time, supplied by the environment.
pub type Tick = u64;

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                $name(s.to_string())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                $name(s)
            }
        }
    };
}

string_id!(TaskId);
string_id!(AgentId);
string_id!(FrameworkId);
string_id!(DeviceId);
string_id!(
    /// Address of a process on the network (simulated or real).
    NodeId
);

/// Subtracts `b` from `a`, failing with the first short component.
pub fn resource_subtract(
    a: &ResourceVector,
    b: &ResourceVector,
) -> Result<ResourceVector, InsufficientResources> {
    a.checked_sub(b)
}

/// Applies a lifecycle transition, leaving the record untouched on error.
pub fn transition(
    record: &mut TaskRecord,
    to: TaskState,
    tick: Tick,
) -> Result<(), TransitionError> {
    record.transition(to, tick)
}
