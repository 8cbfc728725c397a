//! Three-component versions and the four supported range forms.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::vocab::is_identifier;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum VersionError {
    #[error("invalid version `{0}`: expected major.minor.patch with non-negative integers")]
    Version(String),
    #[error("invalid version range `{0}`: expected one of ^x.y.z, ~x.y.z, =x.y.z, >=x.y.z")]
    Range(String),
    #[error("invalid method query `{0}`: expected capability@range")]
    Query(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Version {
    pub major: u64,
    pub minor: u64,
    pub patch: u64,
}

impl Version {
    pub const fn new(major: u64, minor: u64, patch: u64) -> Self {
        Version { major, minor, patch }
    }
}

impl fmt::Display for Version {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}.{}", self.major, self.minor, self.patch)
    }
}

fn component(s: &str) -> Option<u64> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) || (s.len() > 1 && s.starts_with('0')) {
        return None;
    }
    s.parse().ok()
}

impl FromStr for Version {
    type Err = VersionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split('.').collect();
        match parts.as_slice() {
            [a, b, c] => match (component(a), component(b), component(c)) {
                (Some(major), Some(minor), Some(patch)) => Ok(Version { major, minor, patch }),
                _ => Err(VersionError::Version(s.to_string())),
            },
            _ => Err(VersionError::Version(s.to_string())),
        }
    }
}

impl Serialize for Version {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Version {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum VersionRange {
    /// `^x.y.z`: compatible updates, left-most non-zero component fixed.
    Caret(Version),
    /// `~x.y.z`: patch updates only.
    Tilde(Version),
    /// `=x.y.z`
    Exact(Version),
    /// `>=x.y.z`
    AtLeast(Version),
}

impl VersionRange {
    pub fn matches(&self, v: &Version) -> bool {
        match *self {
            VersionRange::Exact(b) => *v == b,
            VersionRange::AtLeast(b) => *v >= b,
            VersionRange::Tilde(b) => *v >= b && v.major == b.major && v.minor == b.minor,
            VersionRange::Caret(b) => {
                *v >= b
                    && if b.major > 0 {
                        v.major == b.major
                    } else if b.minor > 0 {
                        v.major == 0 && v.minor == b.minor
                    } else {
                        v.major == 0 && v.minor == 0 && v.patch == b.patch
                    }
            }
        }
    }
}

impl fmt::Display for VersionRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VersionRange::Caret(v) => write!(f, "^{v}"),
            VersionRange::Tilde(v) => write!(f, "~{v}"),
            VersionRange::Exact(v) => write!(f, "={v}"),
            VersionRange::AtLeast(v) => write!(f, ">={v}"),
        }
    }
}

impl FromStr for VersionRange {
    type Err = VersionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || VersionError::Range(s.to_string());
        let (ctor, rest): (fn(Version) -> VersionRange, &str) = if let Some(r) = s.strip_prefix(">=") {
            (VersionRange::AtLeast, r)
        } else if let Some(r) = s.strip_prefix('^') {
            (VersionRange::Caret, r)
        } else if let Some(r) = s.strip_prefix('~') {
            (VersionRange::Tilde, r)
        } else if let Some(r) = s.strip_prefix('=') {
            (VersionRange::Exact, r)
        } else {
            return Err(bad());
        };
        rest.parse::<Version>().map(ctor).map_err(|_| bad())
    }
}

impl Serialize for VersionRange {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for VersionRange {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A capability together with an acceptable version range.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Requirement {
    pub capability: String,
    pub range: VersionRange,
}

impl Requirement {
    pub fn new(capability: impl Into<String>, range: VersionRange) -> Self {
        Requirement { capability: capability.into(), range }
    }

    /// Parses the `capability@range` query form used in configurations.
    pub fn parse_query(s: &str) -> Result<Self, VersionError> {
        let (cap, range) = s.split_once('@').ok_or_else(|| VersionError::Query(s.to_string()))?;
        if !is_identifier(cap) {
            return Err(VersionError::Query(s.to_string()));
        }
        Ok(Requirement { capability: cap.to_string(), range: range.parse()? })
    }
}

impl fmt::Display for Requirement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.capability, self.range)
    }
}
