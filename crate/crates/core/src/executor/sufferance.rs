//! Projected-utilization metric a device reports instead of isolating tasks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Component, ResourceVector, COMPONENTS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("zero capacity for {0}")]
pub struct ZeroCapacity(pub Component);

/// How much a candidate task would suffer on a device.
///
/// `value <= 1` means the candidate fits next to the current tasks without
/// degrading them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SufferanceMetric {
    pub value: f64,
    pub components: BTreeMap<Component, f64>,
}

/// Pluggable metric; [`MaxUtilization`] is the default.
pub trait SufferanceModel: Send + Sync {
    fn estimate(
        &self,
        current: &[ResourceVector],
        capacity: &ResourceVector,
        candidate: &ResourceVector,
    ) -> Result<SufferanceMetric, ZeroCapacity>;
}

/// `max_r (sum(current_r) + candidate_r) / capacity_r`.
#[derive(Debug, Clone, Copy, Default)]
pub struct MaxUtilization;

impl SufferanceModel for MaxUtilization {
    fn estimate(
        &self,
        current: &[ResourceVector],
        capacity: &ResourceVector,
        candidate: &ResourceVector,
    ) -> Result<SufferanceMetric, ZeroCapacity> {
        sufferance(current, capacity, candidate)
    }
}

pub fn sufferance(
    current: &[ResourceVector],
    capacity: &ResourceVector,
    candidate: &ResourceVector,
) -> Result<SufferanceMetric, ZeroCapacity> {
    let mut components = BTreeMap::new();
    for c in COMPONENTS {
        let cap = capacity.amount(c);
        let wanted = candidate.amount(c);
        if cap <= 0.0 {
            if wanted > 0.0 {
                return Err(ZeroCapacity(c));
            }
            // nothing to measure against
            continue;
        }
        let used: f64 = current.iter().map(|r| r.amount(c)).sum();
        components.insert(c, (used + wanted) / cap);
    }
    let value = components.values().copied().fold(0.0, f64::max);
    Ok(SufferanceMetric { value, components })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cap() -> ResourceVector {
        ResourceVector::new(4.0, 1024).with_disk(100)
    }

    #[test]
    fn idle_exact_fit_is_one() {
        let m = sufferance(&[], &cap(), &cap()).unwrap();
        assert_eq!(m.value, 1.0);
    }

    #[test]
    fn half_plus_three_quarters() {
        let current = [ResourceVector::new(2.0, 0)];
        let m = sufferance(&current, &cap(), &ResourceVector::new(3.0, 0)).unwrap();
        assert_eq!(m.value, 1.25);
        assert_eq!(m.components[&Component::Cpus], 1.25);
        assert_eq!(m.components[&Component::Mem], 0.0);
    }

    #[test]
    fn zero_candidate_reports_current_peak() {
        let current = [ResourceVector::new(1.0, 768)];
        let m = sufferance(&current, &cap(), &ResourceVector::zero()).unwrap();
        assert_eq!(m.value, 0.75);
    }

    #[test]
    fn candidate_needing_absent_component() {
        let err = sufferance(&[], &cap(), &ResourceVector::zero().with_gpus(1)).unwrap_err();
        assert_eq!(err, ZeroCapacity(Component::Gpus));
    }

    proptest! {
        #[test]
        fn adding_a_task_never_lowers_the_metric(
            tasks in prop::collection::vec((0u64..4000, 0u64..1024), 0..6),
            extra in (0u64..4000, 0u64..1024),
            cand in (0u64..4000, 0u64..1024),
        ) {
            let rv = |(c, m): (u64, u64)| ResourceVector::zero().with_cpu_millis(c).with_mem(m);
            let current: Vec<_> = tasks.into_iter().map(rv).collect();
            let mut more = current.clone();
            more.push(rv(extra));
            let before = sufferance(&current, &cap(), &rv(cand)).unwrap();
            let after = sufferance(&more, &cap(), &rv(cand)).unwrap();
            prop_assert!(after.value >= before.value);
        }
    }
}
