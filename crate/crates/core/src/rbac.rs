//! Role-based authorization and data-zone sets.
//!
//! The permission matrix is fixed at build time. Bearer tokens map to
//! principals through a `principals.sbx` table in the workspace.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dsl::reader::{identifier_label, no_label, Reader};
use crate::dsl::syntax::parse_single;
use crate::dsl::ParseError;
use crate::vocab::{Role, Zone};

pub const PRINCIPALS_FILE: &str = "principals.sbx";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    SubmitConfig,
    ValidateConfig,
    AssemblePlan,
    StartRun,
    ViewRun,
    ViewConfidentialArtefacts,
    ViewSharedArtefacts,
    InspectControls,
    UpdateControlStatus,
    GenerateReport,
    ViewReport,
    ExportAudit,
    RegisterModule,
    RegisterExpert,
}

impl Action {
    pub const ALL: [Action; 14] = [
        Action::SubmitConfig,
        Action::ValidateConfig,
        Action::AssemblePlan,
        Action::StartRun,
        Action::ViewRun,
        Action::ViewConfidentialArtefacts,
        Action::ViewSharedArtefacts,
        Action::InspectControls,
        Action::UpdateControlStatus,
        Action::GenerateReport,
        Action::ViewReport,
        Action::ExportAudit,
        Action::RegisterModule,
        Action::RegisterExpert,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Action::SubmitConfig => "submit_config",
            Action::ValidateConfig => "validate_config",
            Action::AssemblePlan => "assemble_plan",
            Action::StartRun => "start_run",
            Action::ViewRun => "view_run",
            Action::ViewConfidentialArtefacts => "view_confidential_artefacts",
            Action::ViewSharedArtefacts => "view_shared_artefacts",
            Action::InspectControls => "inspect_controls",
            Action::UpdateControlStatus => "update_control_status",
            Action::GenerateReport => "generate_report",
            Action::ViewReport => "view_report",
            Action::ExportAudit => "export_audit",
            Action::RegisterModule => "register_module",
            Action::RegisterExpert => "register_expert",
        }
    }
}

impl std::fmt::Display for Action {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

use Action::*;

const PROVIDER: &[Action] =
    &[SubmitConfig, ValidateConfig, StartRun, ViewRun, ViewConfidentialArtefacts, ViewSharedArtefacts, ViewReport];
const COMPETENT_AUTHORITY: &[Action] = &[
    ValidateConfig,
    AssemblePlan,
    ViewRun,
    InspectControls,
    UpdateControlStatus,
    GenerateReport,
    ViewReport,
    ExportAudit,
    ViewSharedArtefacts,
    RegisterExpert,
];
const TECHNICAL_EXPERT: &[Action] = &[
    ValidateConfig,
    AssemblePlan,
    StartRun,
    ViewRun,
    ViewConfidentialArtefacts,
    ViewSharedArtefacts,
    GenerateReport,
    ViewReport,
    RegisterModule,
];
const AUDITOR: &[Action] = &[ViewRun, ViewReport, ViewSharedArtefacts, ExportAudit];

/// Actions granted to a role. Anything not listed is denied.
pub fn granted(role: Role) -> &'static [Action] {
    match role {
        Role::Provider => PROVIDER,
        Role::CompetentAuthority => COMPETENT_AUTHORITY,
        Role::TechnicalExpert => TECHNICAL_EXPERT,
        Role::Auditor => AUDITOR,
    }
}

pub fn zone_set(role: Role) -> &'static [Zone] {
    match role {
        Role::Provider | Role::TechnicalExpert => &[Zone::Confidential, Zone::Shared],
        Role::CompetentAuthority | Role::Auditor => &[Zone::Shared, Zone::Regulatory],
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Principal {
    pub principal_id: String,
    pub role: Role,
}

impl Principal {
    pub fn new(principal_id: impl Into<String>, role: Role) -> Self {
        Principal { principal_id: principal_id.into(), role }
    }

    /// `role:principal`, as recorded in audit entries.
    pub fn actor(&self) -> String {
        format!("{}:{}", self.role, self.principal_id)
    }

    pub fn zones(&self) -> &'static [Zone] {
        zone_set(self.role)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenyReason {
    UnknownPrincipal,
    ActionNotPermitted,
    ZoneNotPermitted,
}

impl std::fmt::Display for DenyReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DenyReason::UnknownPrincipal => "unknown_principal",
            DenyReason::ActionNotPermitted => "action_not_permitted",
            DenyReason::ZoneNotPermitted => "zone_not_permitted",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", content = "reason", rename_all = "snake_case")]
pub enum Decision {
    Allow,
    Deny(DenyReason),
}

impl Decision {
    pub fn is_allow(self) -> bool {
        self == Decision::Allow
    }
}

pub fn authorize(principal: Option<&Principal>, action: Action, zone: Option<Zone>) -> Decision {
    let Some(p) = principal else { return Decision::Deny(DenyReason::UnknownPrincipal) };
    if !granted(p.role).contains(&action) {
        return Decision::Deny(DenyReason::ActionNotPermitted);
    }
    match zone {
        Some(z) if !p.zones().contains(&z) => Decision::Deny(DenyReason::ZoneNotPermitted),
        _ => Decision::Allow,
    }
}

/// The action needed to read an artefact in a zone.
pub fn artefact_action(zone: Zone) -> Action {
    match zone {
        Zone::Confidential => ViewConfidentialArtefacts,
        Zone::Shared | Zone::Regulatory => ViewSharedArtefacts,
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PrincipalsError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("duplicate principal `{0}`")]
    DuplicatePrincipal(String),
    #[error("token of principal `{0}` is already assigned")]
    DuplicateToken(String),
    #[error("principal `{0}` has an empty token")]
    EmptyToken(String),
}

/// Bearer token to principal table.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PrincipalTable {
    by_token: BTreeMap<String, Principal>,
}

impl PrincipalTable {
    /// Parses `principals { principal <id> { role: <role> token: "<token>" } ... }`.
    pub fn parse(source: &str) -> Result<Self, PrincipalsError> {
        let b = parse_single(source, "principals")?;
        no_label(&b)?;
        let mut r = Reader::new(&b, "principals")?;
        let mut table = PrincipalTable::default();
        for pb in r.blocks("principal") {
            let (_, id) = identifier_label(pb)?;
            let mut pr = Reader::new(pb, format!("principals/{id}"))?;
            let role: Role = pr.required_keyword("role")?;
            let token = pr.required_string("token")?;
            pr.finish_strict()?;
            table.insert(token, Principal::new(id, role))?;
        }
        r.finish_strict()?;
        Ok(table)
    }

    pub fn insert(&mut self, token: String, principal: Principal) -> Result<(), PrincipalsError> {
        if token.is_empty() {
            return Err(PrincipalsError::EmptyToken(principal.principal_id));
        }
        if self.by_token.values().any(|p| p.principal_id == principal.principal_id) {
            return Err(PrincipalsError::DuplicatePrincipal(principal.principal_id));
        }
        if self.by_token.contains_key(&token) {
            return Err(PrincipalsError::DuplicateToken(principal.principal_id));
        }
        self.by_token.insert(token, principal);
        Ok(())
    }

    pub fn resolve(&self, token: &str) -> Option<&Principal> {
        self.by_token.get(token)
    }

    pub fn principal(&self, id: &str) -> Option<&Principal> {
        self.by_token.values().find(|p| p.principal_id == id)
    }

    pub fn principals(&self) -> impl Iterator<Item = &Principal> {
        self.by_token.values()
    }

    /// Token and principal pairs, ordered by token.
    pub fn entries(&self) -> impl Iterator<Item = (&str, &Principal)> {
        self.by_token.iter().map(|(t, p)| (t.as_str(), p))
    }

    pub fn render(&self) -> String {
        let mut entries: Vec<(&String, &Principal)> = self.by_token.iter().collect();
        entries.sort_by(|a, b| a.1.principal_id.cmp(&b.1.principal_id));
        let mut out = String::from("principals {\n");
        for (token, p) in entries {
            out.push_str(&format!(
                " principal {} {{\n  role: {}\n  token: {}\n }}\n",
                p.principal_id,
                p.role,
                crate::dsl::syntax::quote(token)
            ));
        }
        out.push_str("}\n");
        out
    }
}
