//! Closed vocabularies shared across modules.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Error for a keyword that is not part of its vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("`{value}` is not a valid {kind}; expected one of: {}", expected.join(", "))]
pub struct UnknownKeyword {
    pub kind: &'static str,
    pub value: String,
    pub expected: &'static [&'static str],
}

macro_rules! keyword_enum {
    (
        $(#[$meta:meta])*
        $name:ident, $kind:literal { $($variant:ident => $text:literal),+ $(,)? }
    ) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $text)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];
            pub const NAMES: &'static [&'static str] = &[$($text),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = UnknownKeyword;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(UnknownKeyword { kind: $kind, value: s.to_string(), expected: Self::NAMES }),
                }
            }
        }
    };
}

keyword_enum! {
    /// Risk category of an AI system. Ordering is by severity.
    RiskClass, "risk class" {
        Minimal => "minimal",
        Limited => "limited",
        High => "high",
        Prohibited => "prohibited",
    }
}

keyword_enum! {
    /// Assessment dimension.
    Dimension, "dimension" {
        DataModels => "data_models",
        Processes => "processes",
        FinalProduct => "final_product",
    }
}

keyword_enum! {
    Priority, "priority" {
        Low => "low",
        Medium => "medium",
        High => "high",
    }
}

keyword_enum! {
    /// Review status of a control. Legal moves are
    /// declared -> inspected -> accepted | rejected.
    ControlStatus, "control status" {
        Declared => "declared",
        Inspected => "inspected",
        Accepted => "accepted",
        Rejected => "rejected",
    }
}

impl ControlStatus {
    pub fn can_transition_to(self, next: ControlStatus) -> bool {
        matches!(
            (self, next),
            (ControlStatus::Declared, ControlStatus::Inspected)
                | (ControlStatus::Inspected, ControlStatus::Accepted)
                | (ControlStatus::Inspected, ControlStatus::Rejected)
        )
    }
}

keyword_enum! {
    Role, "role" {
        Provider => "provider",
        CompetentAuthority => "competent_authority",
        TechnicalExpert => "technical_expert",
        Auditor => "auditor",
    }
}

keyword_enum! {
    /// Data isolation class governing who may read an artefact.
    Zone, "zone" {
        Confidential => "confidential",
        Shared => "shared",
        Regulatory => "regulatory",
    }
}

keyword_enum! {
    ReportFormat, "report format" {
        Json => "json",
        Markdown => "markdown",
    }
}

keyword_enum! {
    /// Evaluation style of a test type.
    TestKind, "test kind" {
        Behavioral => "behavioral",
        Statistical => "statistical",
    }
}

keyword_enum! {
    LicenseClass, "license class" {
        Open => "open",
        Proprietary => "proprietary",
    }
}

keyword_enum! {
    /// Participation route recommended by triage.
    Route, "route" {
        Helpdesk => "helpdesk",
        CoreAirs => "core_airs",
        ExtendedAirs => "extended_airs",
        CeaseOrRedesign => "cease_or_redesign",
    }
}

keyword_enum! {
    AnswerKind, "answer kind" {
        Boolean => "boolean",
        SingleChoice => "single-choice",
    }
}

/// CPU and storage amounts, used for both estimates and budgets.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Resources {
    pub cpu_seconds: u64,
    pub storage_bytes: u64,
}

impl Resources {
    pub fn saturating_add(self, other: Resources) -> Resources {
        Resources {
            cpu_seconds: self.cpu_seconds.saturating_add(other.cpu_seconds),
            storage_bytes: self.storage_bytes.saturating_add(other.storage_bytes),
        }
    }

    pub fn fits_within(self, limit: Resources) -> bool {
        self.cpu_seconds <= limit.cpu_seconds && self.storage_bytes <= limit.storage_bytes
    }
}

/// Identifiers: `[A-Za-z_][A-Za-z0-9_.-]*`. Safe as path segments.
pub fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keyword_round_trip() {
        for r in RiskClass::ALL {
            assert_eq!(r.as_str().parse::<RiskClass>().unwrap(), *r);
        }
        let err = "forbidden".parse::<RiskClass>().unwrap_err();
        assert!(err.to_string().contains("minimal, limited, high, prohibited"));
    }

    #[test]
    fn risk_ordering_is_severity() {
        assert!(RiskClass::Prohibited > RiskClass::High);
        assert!(RiskClass::High > RiskClass::Limited);
        assert!(RiskClass::Limited > RiskClass::Minimal);
    }

    #[test]
    fn control_transitions() {
        use ControlStatus::*;
        let legal: Vec<_> = ControlStatus::ALL
            .iter()
            .flat_map(|a| ControlStatus::ALL.iter().map(move |b| (*a, *b)))
            .filter(|(a, b)| a.can_transition_to(*b))
            .collect();
        assert_eq!(
            legal,
            vec![(Declared, Inspected), (Inspected, Accepted), (Inspected, Rejected)]
        );
    }

    #[test]
    fn identifiers() {
        assert!(is_identifier("t-robust.1"));
        assert!(is_identifier("_x"));
        assert!(!is_identifier("1abc"));
        assert!(!is_identifier("a/b"));
        assert!(!is_identifier(""));
        assert!(!is_identifier("custom:x"));
    }
}
