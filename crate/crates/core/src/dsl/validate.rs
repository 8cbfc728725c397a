//! Schema and consistency checks over a parsed configuration.
//!
//! Diagnostics are data: every problem found is reported, each with a
//! stable code. A report is `ok` when it contains no error-severity entry.

use serde::{Deserialize, Serialize};

use super::model::{ConfigDocument, KNOWN_SCHEMA_VERSIONS};
use super::syntax::Pos;
use crate::catalogue::Requirement;
use crate::digest::is_sha256_hex;
use crate::vocab::Dimension;

/// Objective identifiers with built-in meaning.
pub const BUILTIN_OBJECTIVES: &[&str] =
    &["robustness", "fairness", "transparency", "performance", "accuracy", "cybersecurity"];

pub const CUSTOM_OBJECTIVE_PREFIX: &str = "custom:";

/// The routing rule quoted by the prohibited-system diagnostic.
pub const PROHIBITED_ROUTING_RULE: &str = "cease development or reduce the level of risk";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Warning,
    Error,
}

/// Stable diagnostic codes. Each has a fixed name and severity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Code {
    DanglingObjectiveRef,
    ProhibitedRiskClass,
    UnknownSchemaVersion,
    UnknownKey,
    TestDimensionUndeclared,
    InvalidMethodQuery,
    EmptyDimensions,
    EmptyExecutors,
    ZeroResourceLimit,
    InvalidObjectiveId,
    InvalidControlDimension,
    InvalidArtefactRef,
    EmptyName,
    EmptyReportFormats,
    TestBudgetExceedsLimit,
    UnknownExecutor,
    GapsWaived,
    RoleWithoutZones,
}

impl Code {
    pub const ALL: &'static [Code] = &[
        Code::DanglingObjectiveRef,
        Code::ProhibitedRiskClass,
        Code::UnknownSchemaVersion,
        Code::UnknownKey,
        Code::TestDimensionUndeclared,
        Code::InvalidMethodQuery,
        Code::EmptyDimensions,
        Code::EmptyExecutors,
        Code::ZeroResourceLimit,
        Code::InvalidObjectiveId,
        Code::InvalidControlDimension,
        Code::InvalidArtefactRef,
        Code::EmptyName,
        Code::EmptyReportFormats,
        Code::TestBudgetExceedsLimit,
        Code::UnknownExecutor,
        Code::GapsWaived,
        Code::RoleWithoutZones,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Code::DanglingObjectiveRef => "V001",
            Code::ProhibitedRiskClass => "V002",
            Code::UnknownSchemaVersion => "V003",
            Code::UnknownKey => "V004",
            Code::TestDimensionUndeclared => "V005",
            Code::InvalidMethodQuery => "V006",
            Code::EmptyDimensions => "V007",
            Code::EmptyExecutors => "V008",
            Code::ZeroResourceLimit => "V009",
            Code::InvalidObjectiveId => "V010",
            Code::InvalidControlDimension => "V011",
            Code::InvalidArtefactRef => "V012",
            Code::EmptyName => "V013",
            Code::EmptyReportFormats => "V014",
            Code::TestBudgetExceedsLimit => "V015",
            Code::UnknownExecutor => "V016",
            Code::GapsWaived => "W001",
            Code::RoleWithoutZones => "W002",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Code::DanglingObjectiveRef => "dangling-objective-ref",
            Code::ProhibitedRiskClass => "prohibited-risk-class",
            Code::UnknownSchemaVersion => "unknown-schema-version",
            Code::UnknownKey => "unknown-key",
            Code::TestDimensionUndeclared => "test-dimension-undeclared",
            Code::InvalidMethodQuery => "invalid-method-query",
            Code::EmptyDimensions => "empty-dimensions",
            Code::EmptyExecutors => "empty-executors",
            Code::ZeroResourceLimit => "zero-resource-limit",
            Code::InvalidObjectiveId => "invalid-objective-id",
            Code::InvalidControlDimension => "invalid-control-dimension",
            Code::InvalidArtefactRef => "invalid-artefact-ref",
            Code::EmptyName => "empty-name",
            Code::EmptyReportFormats => "empty-report-formats",
            Code::TestBudgetExceedsLimit => "test-budget-exceeds-limit",
            Code::UnknownExecutor => "unknown-executor",
            Code::GapsWaived => "gaps-waived",
            Code::RoleWithoutZones => "role-without-zones",
        }
    }

    pub fn severity(self) -> Severity {
        match self {
            Code::GapsWaived | Code::RoleWithoutZones => Severity::Warning,
            _ => Severity::Error,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub code: String,
    pub name: String,
    pub severity: Severity,
    pub message: String,
    pub path: String,
    pub line: u32,
    pub column: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub diagnostics: Vec<Diagnostic>,
}

impl ValidationReport {
    pub fn codes(&self) -> Vec<&str> {
        self.diagnostics.iter().map(|d| d.code.as_str()).collect()
    }

    pub fn errors(&self) -> impl Iterator<Item = &Diagnostic> {
        self.diagnostics.iter().filter(|d| d.severity == Severity::Error)
    }
}

struct Collector(Vec<Diagnostic>);

impl Collector {
    fn push(&mut self, code: Code, pos: Pos, path: impl Into<String>, message: impl Into<String>) {
        self.0.push(Diagnostic {
            code: code.id().to_string(),
            name: code.name().to_string(),
            severity: code.severity(),
            message: message.into(),
            path: path.into(),
            line: pos.line,
            column: pos.column,
        });
    }
}

pub fn is_valid_objective_id(id: &str) -> bool {
    if BUILTIN_OBJECTIVES.contains(&id) {
        return true;
    }
    match id.strip_prefix(CUSTOM_OBJECTIVE_PREFIX) {
        Some(rest) => {
            let mut chars = rest.chars();
            matches!(chars.next(), Some(c) if c.is_ascii_lowercase() || c.is_ascii_digit())
                && chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '-' || c == '_')
        }
        None => false,
    }
}

/// An artefact reference has the form `sha256:<64 lowercase hex>`.
pub fn parse_artefact_ref(s: &str) -> Option<&str> {
    s.strip_prefix("sha256:").filter(|d| is_sha256_hex(d))
}

pub fn validate(doc: &ConfigDocument) -> ValidationReport {
    let mut c = Collector(Vec::new());

    if doc.name.trim().is_empty() {
        c.push(Code::EmptyName, doc.pos, "", "sandbox name must not be empty");
    }
    if !KNOWN_SCHEMA_VERSIONS.contains(&doc.schema_version.as_str()) {
        c.push(
            Code::UnknownSchemaVersion,
            doc.pos,
            "schema_version",
            format!(
                "schema_version `{}` is not supported (known: {})",
                doc.schema_version,
                KNOWN_SCHEMA_VERSIONS.join(", ")
            ),
        );
    }
    for u in &doc.unknown {
        let path = if u.path.is_empty() { u.key.clone() } else { format!("{}/{}", u.path, u.key) };
        c.push(Code::UnknownKey, u.pos, path, format!("unknown key `{}`", u.key));
    }
    if doc.allow_gaps {
        c.push(Code::GapsWaived, doc.pos, "allow_gaps", "coverage gaps are waived; waivers are recorded in the plan");
    }

    let sys = &doc.system;
    if sys.system_name.trim().is_empty() {
        c.push(Code::EmptyName, sys.pos, "system/system_name", "system_name must not be empty");
    }
    if sys.risk_class == crate::vocab::RiskClass::Prohibited {
        c.push(
            Code::ProhibitedRiskClass,
            sys.pos,
            "system/risk_class",
            format!(
                "a sandbox cannot be configured for a prohibited system; route: {PROHIBITED_ROUTING_RULE}"
            ),
        );
    }
    if sys.dimensions.is_empty() {
        c.push(Code::EmptyDimensions, sys.pos, "system/dimensions", "at least one dimension is required");
    }

    for o in &doc.objectives {
        if !is_valid_objective_id(&o.objective_id) {
            c.push(
                Code::InvalidObjectiveId,
                o.pos,
                format!("objectives/{}", o.objective_id),
                format!(
                    "`{}` is not an objective id (expected one of {} or custom:<name>)",
                    o.objective_id,
                    BUILTIN_OBJECTIVES.join(", ")
                ),
            );
        }
    }

    for ctl in &doc.controls {
        let path = format!("controls/{}", ctl.control_id);
        if ctl.dimension == Dimension::FinalProduct || !sys.dimensions.contains(&ctl.dimension) {
            c.push(
                Code::InvalidControlDimension,
                ctl.pos,
                format!("{path}/dimension"),
                format!(
                    "control dimension `{}` must be processes or data_models and declared by the system",
                    ctl.dimension
                ),
            );
        }
    }

    let infra = &doc.infrastructure;
    for t in &doc.tests {
        let path = format!("tests/{}", t.test_id);
        if doc.objective(&t.objective).is_none() {
            c.push(
                Code::DanglingObjectiveRef,
                t.pos,
                format!("{path}/objective"),
                format!("test `{}` references undeclared objective `{}`", t.test_id, t.objective),
            );
        }
        if !sys.dimensions.contains(&t.dimension) {
            c.push(
                Code::TestDimensionUndeclared,
                t.pos,
                format!("{path}/dimension"),
                format!("dimension `{}` is not declared by the system profile", t.dimension),
            );
        }
        if let Err(e) = Requirement::parse_query(&t.method) {
            c.push(Code::InvalidMethodQuery, t.pos, format!("{path}/method"), e.to_string());
        }
        for (name, reference) in &t.inputs {
            if parse_artefact_ref(reference).is_none() {
                c.push(
                    Code::InvalidArtefactRef,
                    t.pos,
                    format!("{path}/inputs/{name}"),
                    format!("`{reference}` is not an artefact reference (sha256:<64 hex>)"),
                );
            }
        }
        if let Some(budget) = t.budget {
            if !budget.fits_within(infra.limits()) {
                c.push(
                    Code::TestBudgetExceedsLimit,
                    t.pos,
                    format!("{path}/budget"),
                    "test budget exceeds the infrastructure limits",
                );
            }
        }
        if let Some(exec) = &t.executor {
            if !infra.executors.contains(exec) {
                c.push(
                    Code::UnknownExecutor,
                    t.pos,
                    format!("{path}/executor"),
                    format!("executor `{exec}` is not listed in infrastructure"),
                );
            }
        }
    }

    if infra.executors.is_empty() {
        c.push(Code::EmptyExecutors, infra.pos, "infrastructure/executors", "at least one executor is required");
    }
    if infra.max_cpu_seconds == 0 || infra.max_storage_bytes == 0 {
        c.push(Code::ZeroResourceLimit, infra.pos, "infrastructure", "resource limits must be greater than zero");
    }

    for a in &doc.access {
        if a.zones.is_empty() {
            c.push(Code::RoleWithoutZones, a.pos, format!("access/{}", a.role), "role grants no zones");
        }
    }
    if doc.reporting.formats.is_empty() {
        c.push(Code::EmptyReportFormats, doc.reporting.pos, "reporting/formats", "at least one report format is required");
    }

    let mut diagnostics = c.0;
    diagnostics.sort_by(|a, b| (a.line, a.column, &a.code, &a.path).cmp(&(b.line, b.column, &b.code, &b.path)));
    let ok = diagnostics.iter().all(|d| d.severity != Severity::Error);
    ValidationReport { ok, diagnostics }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_are_unique() {
        let mut ids: Vec<_> = Code::ALL.iter().map(|c| c.id()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), Code::ALL.len());
    }

    #[test]
    fn objective_ids() {
        assert!(is_valid_objective_id("fairness"));
        assert!(is_valid_objective_id("custom:energy-use"));
        assert!(!is_valid_objective_id("custom:"));
        assert!(!is_valid_objective_id("custom:Energy"));
        assert!(!is_valid_objective_id("speed"));
    }

    #[test]
    fn artefact_refs() {
        let d = crate::digest::EMPTY_SHA256;
        assert_eq!(parse_artefact_ref(&format!("sha256:{d}")), Some(d));
        assert!(parse_artefact_ref(d).is_none());
        assert!(parse_artefact_ref("sha256:abc").is_none());
    }
}
