use std::fmt;
use std::ops::Add;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// One quantitative dimension of a [`ResourceVector`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Cpus,
    Mem,
    Disk,
    Ports,
    Gpus,
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Component::Cpus => "cpus",
            Component::Mem => "mem",
            Component::Disk => "disk",
            Component::Ports => "ports",
            Component::Gpus => "gpus",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("insufficient resources: {0}")]
pub struct InsufficientResources(pub Component);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid port range {start}-{end}")]
pub struct InvalidPortRange {
    pub start: u32,
    pub end: u32,
}

/// Inclusive port range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PortRange {
    pub start: u16,
    pub end: u16,
}

impl PortRange {
    pub fn new(start: u16, end: u16) -> Result<Self, InvalidPortRange> {
        if start == 0 || start > end {
            return Err(InvalidPortRange {
                start: start.into(),
                end: end.into(),
            });
        }
        Ok(Self { start, end })
    }

    pub fn len(&self) -> u32 {
        u32::from(self.end) - u32::from(self.start) + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn contains_range(&self, other: &PortRange) -> bool {
        self.start <= other.start && other.end <= self.end
    }
}

/// A set of ports kept as sorted, disjoint, coalesced ranges.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct PortSet {
    ranges: Vec<PortRange>,
}

impl PortSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn from_ranges<I>(ranges: I) -> Result<Self, InvalidPortRange>
    where
        I: IntoIterator<Item = (u16, u16)>,
    {
        let ranges = ranges
            .into_iter()
            .map(|(s, e)| PortRange::new(s, e))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            ranges: normalize(ranges),
        })
    }

    pub fn range(start: u16, end: u16) -> Result<Self, InvalidPortRange> {
        Self::from_ranges([(start, end)])
    }

    pub fn ranges(&self) -> &[PortRange] {
        &self.ranges
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn count(&self) -> u32 {
        self.ranges.iter().map(PortRange::len).sum()
    }

    pub fn union(&self, other: &PortSet) -> PortSet {
        let mut all = self.ranges.clone();
        all.extend_from_slice(&other.ranges);
        PortSet {
            ranges: normalize(all),
        }
    }

    /// Every port of `other` is in `self`.
    pub fn contains(&self, other: &PortSet) -> bool {
        // Both sides are coalesced, so each range of `other` must sit inside
        // a single range of `self`.
        other
            .ranges
            .iter()
            .all(|r| self.ranges.iter().any(|mine| mine.contains_range(r)))
    }

    /// Removes `other` from `self`; `None` unless `other ⊆ self`.
    pub fn difference(&self, other: &PortSet) -> Option<PortSet> {
        if !self.contains(other) {
            return None;
        }
        let mut out = Vec::new();
        for mine in &self.ranges {
            let mut cursor = u32::from(mine.start);
            let end = u32::from(mine.end);
            for cut in other
                .ranges
                .iter()
                .filter(|c| mine.contains_range(c))
            {
                if u32::from(cut.start) > cursor {
                    out.push(PortRange {
                        start: cursor as u16,
                        end: cut.start - 1,
                    });
                }
                cursor = u32::from(cut.end) + 1;
            }
            if cursor <= end {
                out.push(PortRange {
                    start: cursor as u16,
                    end: mine.end,
                });
            }
        }
        Some(PortSet { ranges: out })
    }
}

/// Sorts and coalesces overlapping or adjacent ranges.
pub fn normalize(mut ranges: Vec<PortRange>) -> Vec<PortRange> {
    ranges.sort();
    let mut out: Vec<PortRange> = Vec::with_capacity(ranges.len());
    for r in ranges {
        match out.last_mut() {
            Some(last) if u32::from(r.start) <= u32::from(last.end) + 1 => {
                last.end = last.end.max(r.end);
            }
            _ => out.push(r),
        }
    }
    out
}

impl Serialize for PortSet {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let pairs: Vec<[u16; 2]> = self.ranges.iter().map(|r| [r.start, r.end]).collect();
        pairs.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for PortSet {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let pairs = Vec::<[u32; 2]>::deserialize(deserializer)?;
        let mut ranges = Vec::with_capacity(pairs.len());
        for [start, end] in pairs {
            if start == 0 || start > end || end > u32::from(u16::MAX) {
                return Err(serde::de::Error::custom(InvalidPortRange { start, end }));
            }
            ranges.push(PortRange {
                start: start as u16,
                end: end as u16,
            });
        }
        Ok(PortSet {
            ranges: normalize(ranges),
        })
    }
}

/// Quantitative capacity: cpus, memory, disk, ports and gpus.
///
/// Cpus are held in thousandths of a core so that arithmetic stays exact.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct ResourceVector {
    cpu_millis: u64,
    pub mem_mb: u64,
    pub disk_mb: u64,
    pub ports: PortSet,
    pub gpus: u64,
}

impl ResourceVector {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn new(cpus: f64, mem_mb: u64) -> Self {
        Self::default().with_cpus(cpus).with_mem(mem_mb)
    }

    pub fn with_cpus(mut self, cpus: f64) -> Self {
        self.cpu_millis = cpus_to_millis(cpus);
        self
    }

    pub fn with_cpu_millis(mut self, millis: u64) -> Self {
        self.cpu_millis = millis;
        self
    }

    pub fn with_mem(mut self, mem_mb: u64) -> Self {
        self.mem_mb = mem_mb;
        self
    }

    pub fn with_disk(mut self, disk_mb: u64) -> Self {
        self.disk_mb = disk_mb;
        self
    }

    pub fn with_ports(mut self, ports: PortSet) -> Self {
        self.ports = ports;
        self
    }

    pub fn with_gpus(mut self, gpus: u64) -> Self {
        self.gpus = gpus;
        self
    }

    pub fn cpus(&self) -> f64 {
        self.cpu_millis as f64 / 1000.0
    }

    pub fn cpu_millis(&self) -> u64 {
        self.cpu_millis
    }

    pub fn is_zero(&self) -> bool {
        self.cpu_millis == 0
            && self.mem_mb == 0
            && self.disk_mb == 0
            && self.ports.is_empty()
            && self.gpus == 0
    }

    /// First component in which `self` does not fit inside `capacity`.
    pub fn first_shortfall(&self, capacity: &ResourceVector) -> Option<Component> {
        if self.cpu_millis > capacity.cpu_millis {
            Some(Component::Cpus)
        } else if self.mem_mb > capacity.mem_mb {
            Some(Component::Mem)
        } else if self.disk_mb > capacity.disk_mb {
            Some(Component::Disk)
        } else if !capacity.ports.contains(&self.ports) {
            Some(Component::Ports)
        } else if self.gpus > capacity.gpus {
            Some(Component::Gpus)
        } else {
            None
        }
    }

    pub fn fits_within(&self, capacity: &ResourceVector) -> bool {
        self.first_shortfall(capacity).is_none()
    }

    pub fn checked_sub(&self, other: &ResourceVector) -> Result<ResourceVector, InsufficientResources> {
        if let Some(c) = other.first_shortfall(self) {
            return Err(InsufficientResources(c));
        }
        Ok(ResourceVector {
            cpu_millis: self.cpu_millis - other.cpu_millis,
            mem_mb: self.mem_mb - other.mem_mb,
            disk_mb: self.disk_mb - other.disk_mb,
            ports: self
                .ports
                .difference(&other.ports)
                .expect("containment checked above"),
            gpus: self.gpus - other.gpus,
        })
    }

    /// Scales every quantity by `fraction`, rounding down; ports pass through.
    pub fn scale_floor(&self, fraction: f64) -> ResourceVector {
        let scale = |v: u64| (v as f64 * fraction).floor() as u64;
        ResourceVector {
            cpu_millis: scale(self.cpu_millis),
            mem_mb: scale(self.mem_mb),
            disk_mb: scale(self.disk_mb),
            ports: self.ports.clone(),
            gpus: scale(self.gpus),
        }
    }

    /// Quantity of one component as a plain number (ports are counted).
    pub fn amount(&self, component: Component) -> f64 {
        match component {
            Component::Cpus => self.cpus(),
            Component::Mem => self.mem_mb as f64,
            Component::Disk => self.disk_mb as f64,
            Component::Ports => f64::from(self.ports.count()),
            Component::Gpus => self.gpus as f64,
        }
    }
}

pub const COMPONENTS: [Component; 5] = [
    Component::Cpus,
    Component::Mem,
    Component::Disk,
    Component::Ports,
    Component::Gpus,
];

fn cpus_to_millis(cpus: f64) -> u64 {
    if !cpus.is_finite() || cpus <= 0.0 {
        return 0;
    }
    (cpus * 1000.0).round() as u64
}

impl Add for &ResourceVector {
    type Output = ResourceVector;

    fn add(self, rhs: &ResourceVector) -> ResourceVector {
        ResourceVector {
            cpu_millis: self.cpu_millis + rhs.cpu_millis,
            mem_mb: self.mem_mb + rhs.mem_mb,
            disk_mb: self.disk_mb + rhs.disk_mb,
            ports: self.ports.union(&rhs.ports),
            gpus: self.gpus + rhs.gpus,
        }
    }
}

impl Add for ResourceVector {
    type Output = ResourceVector;

    fn add(self, rhs: ResourceVector) -> ResourceVector {
        &self + &rhs
    }
}

impl std::iter::Sum for ResourceVector {
    fn sum<I: Iterator<Item = ResourceVector>>(iter: I) -> Self {
        iter.fold(ResourceVector::zero(), |acc, r| &acc + &r)
    }
}

impl<'a> std::iter::Sum<&'a ResourceVector> for ResourceVector {
    fn sum<I: Iterator<Item = &'a ResourceVector>>(iter: I) -> Self {
        iter.fold(ResourceVector::zero(), |acc, r| &acc + r)
    }
}

impl fmt::Display for ResourceVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "cpus={} mem={}MB disk={}MB gpus={}",
            self.cpus(),
            self.mem_mb,
            self.disk_mb,
            self.gpus
        )?;
        for r in self.ports.ranges() {
            write!(f, " ports={}-{}", r.start, r.end)?;
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireResources {
    #[serde(default)]
    cpus: f64,
    #[serde(default)]
    mem_mb: u64,
    #[serde(default)]
    disk_mb: u64,
    #[serde(default)]
    ports: PortSet,
    #[serde(default)]
    gpus: u64,
}

impl Serialize for ResourceVector {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        WireResources {
            cpus: self.cpus(),
            mem_mb: self.mem_mb,
            disk_mb: self.disk_mb,
            ports: self.ports.clone(),
            gpus: self.gpus,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ResourceVector {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let w = WireResources::deserialize(deserializer)?;
        if !w.cpus.is_finite() || w.cpus < 0.0 {
            return Err(serde::de::Error::custom("cpus must be a non-negative number"));
        }
        Ok(ResourceVector {
            cpu_millis: cpus_to_millis(w.cpus),
            mem_mb: w.mem_mb,
            disk_mb: w.disk_mb,
            ports: w.ports,
            gpus: w.gpus,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rv(cpus: f64, mem: u64) -> ResourceVector {
        ResourceVector::new(cpus, mem)
    }

    #[test]
    fn self_subtraction_is_zero() {
        let a = rv(2.0, 1024);
        assert!(a.checked_sub(&a).unwrap().is_zero());
    }

    #[test]
    fn subtract_cpus_and_ports() {
        let a = ResourceVector::zero()
            .with_cpus(4.0)
            .with_ports(PortSet::range(8000, 8010).unwrap());
        let b = ResourceVector::zero()
            .with_cpus(1.5)
            .with_ports(PortSet::range(8000, 8001).unwrap());
        let diff = a.checked_sub(&b).unwrap();
        assert_eq!(diff.cpus(), 2.5);
        assert_eq!(diff.ports, PortSet::range(8002, 8010).unwrap());
        // re-adding restores the minuend
        assert_eq!(&diff + &b, a);
    }

    #[test]
    fn subtract_too_much_names_component() {
        let err = rv(1.0, 0).checked_sub(&rv(2.0, 0)).unwrap_err();
        assert_eq!(err, InsufficientResources(Component::Cpus));
        let err = rv(1.0, 10).checked_sub(&rv(1.0, 11)).unwrap_err();
        assert_eq!(err.0, Component::Mem);
        let a = ResourceVector::zero().with_ports(PortSet::range(10, 20).unwrap());
        let b = ResourceVector::zero().with_ports(PortSet::range(19, 21).unwrap());
        assert_eq!(a.checked_sub(&b).unwrap_err().0, Component::Ports);
    }

    #[test]
    fn port_difference_splits_ranges() {
        let a = PortSet::from_ranges([(1, 100)]).unwrap();
        let b = PortSet::from_ranges([(10, 20), (50, 50)]).unwrap();
        let d = a.difference(&b).unwrap();
        assert_eq!(d, PortSet::from_ranges([(1, 9), (21, 49), (51, 100)]).unwrap());
        assert_eq!(d.count() + b.count(), a.count());
    }

    #[test]
    fn ports_coalesce_adjacent() {
        let p = PortSet::from_ranges([(5, 6), (1, 3), (4, 4), (10, 12)]).unwrap();
        assert_eq!(p.ranges().len(), 2);
        assert_eq!(p.ranges()[0], PortRange { start: 1, end: 6 });
    }

    #[test]
    fn rejects_bad_ranges() {
        assert!(PortRange::new(0, 4).is_err());
        assert!(PortRange::new(9, 4).is_err());
        assert!(serde_json::from_str::<PortSet>("[[70000, 70001]]").is_err());
    }

    #[test]
    fn wire_form_rejects_unknown_fields() {
        let ok: ResourceVector = serde_json::from_str(r#"{"cpus":0.5,"mem_mb":64}"#).unwrap();
        assert_eq!(ok.cpu_millis(), 500);
        assert!(serde_json::from_str::<ResourceVector>(r#"{"cpus":1,"bogus":1}"#).is_err());
        assert!(serde_json::from_str::<ResourceVector>(r#"{"cpus":-1}"#).is_err());
    }

    #[test]
    fn floor_scaling() {
        let d = rv(2.0, 2048).with_disk(3).with_gpus(1);
        let s = d.scale_floor(0.5);
        assert_eq!(s.cpus(), 1.0);
        assert_eq!(s.mem_mb, 1024);
        assert_eq!(s.disk_mb, 1);
        assert_eq!(s.gpus, 0);
        assert_eq!(d.scale_floor(1.0), d);
    }

    pub(crate) fn arb_ports() -> impl Strategy<Value = PortSet> {
        prop::collection::vec((1u16..2000, 0u16..50), 0..4).prop_map(|v| {
            PortSet::from_ranges(v.into_iter().map(|(s, len)| (s, s.saturating_add(len))))
                .unwrap()
        })
    }

    pub(crate) fn arb_resources() -> impl Strategy<Value = ResourceVector> {
        (0u64..16_000, 0u64..1 << 20, 0u64..1 << 20, arb_ports(), 0u64..8).prop_map(
            |(c, m, d, p, g)| {
                ResourceVector::zero()
                    .with_cpu_millis(c)
                    .with_mem(m)
                    .with_disk(d)
                    .with_ports(p)
                    .with_gpus(g)
            },
        )
    }

    proptest! {
        #[test]
        fn addition_is_a_commutative_monoid(a in arb_resources(), b in arb_resources(), c in arb_resources()) {
            prop_assert_eq!(&a + &b, &b + &a);
            prop_assert_eq!(&(&a + &b) + &c, &a + &(&b + &c));
            prop_assert_eq!(&a + &ResourceVector::zero(), a.clone());
        }

        #[test]
        fn subtraction_inverts_addition(a in arb_resources(), b in arb_resources()) {
            // port union is not injective, so only quantities are checked here
            let b = b.with_ports(PortSet::empty());
            let sum = &a + &b;
            prop_assert_eq!(sum.checked_sub(&b).unwrap(), a);
        }

        #[test]
        fn normalize_is_idempotent(v in prop::collection::vec((1u16..500, 0u16..20), 0..8)) {
            let ranges: Vec<PortRange> = v.into_iter()
                .map(|(s, l)| PortRange::new(s, s + l).unwrap())
                .collect();
            let once = normalize(ranges);
            prop_assert_eq!(normalize(once.clone()), once);
        }

        #[test]
        fn wire_round_trip(a in arb_resources()) {
            let text = serde_json::to_string(&a).unwrap();
            prop_assert_eq!(serde_json::from_str::<ResourceVector>(&text).unwrap(), a);
        }
    }
}
