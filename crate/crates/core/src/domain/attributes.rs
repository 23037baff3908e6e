use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

/// Attribute name under which a node lists the runtimes it can execute.
pub const EXECUTORS_ATTRIBUTE: &str = "executors";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AttributeError {
    #[error("attribute names must be non-empty")]
    EmptyName,
    #[error("text-set value for `{0}` must be non-empty")]
    EmptySet(String),
    #[error("numeric range for `{0}` has lo > hi")]
    InvertedRange(String),
}

/// Value of a node attribute.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum AttributeValue {
    Text(String),
    Number(f64),
    TextSet(BTreeSet<String>),
}

impl AttributeValue {
    pub fn text(s: impl Into<String>) -> Self {
        AttributeValue::Text(s.into())
    }

    pub fn set<I, S>(items: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        AttributeValue::TextSet(items.into_iter().map(Into::into).collect())
    }

    pub fn as_number(&self) -> Option<f64> {
        match self {
            AttributeValue::Number(n) => Some(*n),
            _ => None,
        }
    }

    /// Equality used by `Equals`/`OneOf`: a text-set attribute equals a text
    /// value when it contains it.
    pub fn matches(&self, wanted: &AttributeValue) -> bool {
        match (self, wanted) {
            (AttributeValue::Text(a), AttributeValue::Text(b)) => a == b,
            (AttributeValue::Number(a), AttributeValue::Number(b)) => a == b,
            (AttributeValue::TextSet(set), AttributeValue::Text(b)) => set.contains(b),
            (AttributeValue::TextSet(a), AttributeValue::TextSet(b)) => a == b,
            _ => false,
        }
    }
}

impl Eq for AttributeValue {}

impl fmt::Display for AttributeValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttributeValue::Text(s) => f.write_str(s),
            AttributeValue::Number(n) => write!(f, "{n}"),
            AttributeValue::TextSet(set) => {
                let items: Vec<&str> = set.iter().map(String::as_str).collect();
                write!(f, "{{{}}}", items.join(","))
            }
        }
    }
}

impl<'de> Deserialize<'de> for AttributeValue {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Text(String),
            Number(f64),
            TextSet(BTreeSet<String>),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Text(s) => Ok(AttributeValue::Text(s)),
            Raw::Number(n) if n.is_finite() => Ok(AttributeValue::Number(n)),
            Raw::Number(_) => Err(serde::de::Error::custom("attribute numbers must be finite")),
            Raw::TextSet(s) if s.is_empty() => {
                Err(serde::de::Error::custom("text-set attribute values must be non-empty"))
            }
            Raw::TextSet(s) => Ok(AttributeValue::TextSet(s)),
        }
    }
}

/// Key-value descriptors of a node: sensors, OS, location, interfaces.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct AttributeSet {
    entries: BTreeMap<String, AttributeValue>,
}

impl AttributeSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        value: AttributeValue,
    ) -> Result<(), AttributeError> {
        let name = name.into();
        if name.is_empty() {
            return Err(AttributeError::EmptyName);
        }
        if let AttributeValue::TextSet(s) = &value {
            if s.is_empty() {
                return Err(AttributeError::EmptySet(name));
            }
        }
        self.entries.insert(name, value);
        Ok(())
    }

    /// Builder-style insert; panics on invalid input, intended for literals.
    pub fn with(mut self, name: &str, value: AttributeValue) -> Self {
        self.insert(name, value).expect("valid attribute");
        self
    }

    pub fn get(&self, name: &str) -> Option<&AttributeValue> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &AttributeValue)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn remove(&mut self, name: &str) -> Option<AttributeValue> {
        self.entries.remove(name)
    }

    /// Runtimes advertised under [`EXECUTORS_ATTRIBUTE`].
    pub fn executors(&self) -> BTreeSet<String> {
        match self.entries.get(EXECUTORS_ATTRIBUTE) {
            Some(AttributeValue::TextSet(s)) => s.clone(),
            Some(AttributeValue::Text(s)) => BTreeSet::from([s.clone()]),
            _ => BTreeSet::new(),
        }
    }
}

impl<'de> Deserialize<'de> for AttributeSet {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let entries = BTreeMap::<String, AttributeValue>::deserialize(deserializer)?;
        if entries.keys().any(String::is_empty) {
            return Err(serde::de::Error::custom(AttributeError::EmptyName));
        }
        Ok(AttributeSet { entries })
    }
}

impl FromIterator<(String, AttributeValue)> for AttributeSet {
    fn from_iter<I: IntoIterator<Item = (String, AttributeValue)>>(iter: I) -> Self {
        let mut set = AttributeSet::new();
        for (k, v) in iter {
            let _ = set.insert(k, v);
        }
        set
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Predicate {
    Exists,
    Equals(AttributeValue),
    OneOf(Vec<AttributeValue>),
    NumericRange { lo: f64, hi: f64 },
}

/// A requirement on one named attribute of a node.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeConstraint {
    pub name: String,
    pub predicate: Predicate,
}

impl AttributeConstraint {
    pub fn new(name: impl Into<String>, predicate: Predicate) -> Result<Self, AttributeError> {
        let name = name.into();
        if name.is_empty() {
            return Err(AttributeError::EmptyName);
        }
        if let Predicate::NumericRange { lo, hi } = predicate {
            if !(lo <= hi) {
                return Err(AttributeError::InvertedRange(name));
            }
        }
        Ok(Self { name, predicate })
    }

    pub fn exists(name: &str) -> Self {
        Self::new(name, Predicate::Exists).expect("valid constraint")
    }

    pub fn equals(name: &str, value: AttributeValue) -> Self {
        Self::new(name, Predicate::Equals(value)).expect("valid constraint")
    }

    pub fn range(name: &str, lo: f64, hi: f64) -> Self {
        Self::new(name, Predicate::NumericRange { lo, hi }).expect("valid constraint")
    }

    pub fn is_satisfied_by(&self, attributes: &AttributeSet) -> bool {
        let Some(value) = attributes.get(&self.name) else {
            return false;
        };
        match &self.predicate {
            Predicate::Exists => true,
            Predicate::Equals(wanted) => value.matches(wanted),
            Predicate::OneOf(options) => options.iter().any(|o| value.matches(o)),
            Predicate::NumericRange { lo, hi } => value
                .as_number()
                .is_some_and(|n| *lo <= n && n <= *hi),
        }
    }
}

impl fmt::Display for AttributeConstraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.predicate {
            Predicate::Exists => write!(f, "exists({})", self.name),
            Predicate::Equals(v) => write!(f, "{} == {}", self.name, v),
            Predicate::OneOf(vs) => {
                let vs: Vec<String> = vs.iter().map(ToString::to_string).collect();
                write!(f, "{} in [{}]", self.name, vs.join(", "))
            }
            Predicate::NumericRange { lo, hi } => write!(f, "{} in {}..={}", self.name, lo, hi),
        }
    }
}

impl<'de> Deserialize<'de> for AttributeConstraint {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            name: String,
            predicate: Predicate,
        }
        let raw = Raw::deserialize(deserializer)?;
        AttributeConstraint::new(raw.name, raw.predicate).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn device() -> AttributeSet {
        AttributeSet::new()
            .with("os", AttributeValue::text("linux-arm"))
            .with("accelerometer", AttributeValue::text("bmi160"))
            .with("sensors", AttributeValue::set(["gps", "gyroscope"]))
            .with("lat", AttributeValue::Number(41.2))
    }

    #[test]
    fn predicates() {
        let d = device();
        assert!(AttributeConstraint::exists("accelerometer").is_satisfied_by(&d));
        assert!(!AttributeConstraint::exists("camera").is_satisfied_by(&d));
        assert!(AttributeConstraint::equals("os", AttributeValue::text("linux-arm")).is_satisfied_by(&d));
        assert!(AttributeConstraint::equals("sensors", AttributeValue::text("gps")).is_satisfied_by(&d));
        assert!(!AttributeConstraint::equals("lat", AttributeValue::text("41.2")).is_satisfied_by(&d));
        assert!(AttributeConstraint::range("lat", 41.0, 42.0).is_satisfied_by(&d));
        assert!(AttributeConstraint::range("lat", 41.2, 41.2).is_satisfied_by(&d));
        assert!(!AttributeConstraint::range("os", 0.0, 1.0).is_satisfied_by(&d));
        let one_of = AttributeConstraint::new(
            "os",
            Predicate::OneOf(vec![AttributeValue::text("android"), AttributeValue::text("linux-arm")]),
        )
        .unwrap();
        assert!(one_of.is_satisfied_by(&d));
    }

    #[test]
    fn invalid_inputs_rejected() {
        assert_eq!(
            AttributeConstraint::new("x", Predicate::NumericRange { lo: 2.0, hi: 1.0 }),
            Err(AttributeError::InvertedRange("x".into()))
        );
        let mut set = AttributeSet::new();
        assert_eq!(set.insert("", AttributeValue::text("a")), Err(AttributeError::EmptyName));
        assert!(set.insert("s", AttributeValue::TextSet(BTreeSet::new())).is_err());
        assert!(serde_json::from_str::<AttributeSet>(r#"{"s": []}"#).is_err());
        assert!(serde_json::from_str::<AttributeSet>(r#"{"": "x"}"#).is_err());
        assert!(serde_json::from_str::<AttributeConstraint>(
            r#"{"name":"x","predicate":{"numeric_range":{"lo":3,"hi":1}}}"#
        )
        .is_err());
    }

    #[test]
    fn wire_form_is_self_describing() {
        let d = device();
        let text = serde_json::to_string(&d).unwrap();
        assert_eq!(serde_json::from_str::<AttributeSet>(&text).unwrap(), d);
        let c = AttributeConstraint::exists("gps");
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(text, r#"{"name":"gps","predicate":"exists"}"#);
    }
}
