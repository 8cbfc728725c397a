//! A sandbox workspace on disk.
//!
//! Layout under the root:
//!
//! ```text
//! principals.sbx        bearer tokens to principals
//! mapping.sbx           optional mapping table (embedded default otherwise)
//! audit.log             workspace chain
//! records.ndjson        typed records (configs, plans, runs, controls, ...)
//! artefacts/<zone>/..   content-addressed blobs
//! plans/<plan_id>/      plan.json, plan.sha256
//! runs/<run_id>/        plan, events.log, audit.log, steps/, report.*
//! ```
//!
//! Every operation that changes the workspace authorizes first and then
//! appends exactly one entry to the workspace chain, whether it succeeds or
//! is refused. Denials are recorded the same way and change nothing else.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::audit::{now_rfc3339, AuditError, AuditLog, Verdict};
use crate::catalogue::{Catalogue, CatalogueError, ExpertRecord, ModuleDescriptor};
use crate::digest::{canonical_json_pretty, sha256_hex, to_canonical_json};
use crate::dsl::{self, ConfigDocument, ParseError, ValidationReport};
use crate::engine::{
    self, Engine, EngineError, ExecutorDescriptor, FailurePolicy, RunMonitor, RunOutcome, RunPhase, RunRecord, RunSpec, RunState,
    StepResult, DEFAULT_TIMEOUT_MULTIPLIER,
};
use crate::mapping::{self, MappingError, MappingTable};
use crate::planner::{self, ExecutionPlan, PlanError, StepKind};
use crate::rbac::{self, Action, Decision, DenyReason, Principal, PrincipalTable, PrincipalsError, PRINCIPALS_FILE};
use crate::report::{self, Audience, ExitReport, ReportError, ReportNote};
use crate::store::{ArtefactRef, RecordClass, Store, StoreError};
use crate::vocab::{ControlStatus, Dimension, Role, Zone};

pub const AUDIT_FILE: &str = "audit.log";
pub const MAPPING_FILE: &str = "mapping.sbx";
pub const PLANS_DIR: &str = "plans";
pub const RUNS_DIR: &str = "runs";
/// Name the workspace chain goes by in verification summaries.
pub const WORKSPACE_CHAIN: &str = "workspace";

const ANONYMOUS: &str = "anonymous";

#[derive(Debug, thiserror::Error)]
pub enum WorkspaceError {
    #[error("no workspace given: pass --workspace or set {}", crate::store::WORKSPACE_ENV)]
    Unresolved,
    #[error("{0} is not a workspace (no {PRINCIPALS_FILE}); run `sbx init` first")]
    NotInitialized(PathBuf),
    #[error("{action} denied: {reason}")]
    Denied { action: Action, reason: DenyReason },
    #[error("unknown {what} `{id}`")]
    NotFound { what: &'static str, id: String },
    #[error("idempotency key `{0}` was already used for a different request")]
    IdempotencyConflict(String),
    #[error("illegal control transition {from} -> {to}")]
    IllegalTransition { from: ControlStatus, to: ControlStatus },
    #[error("configuration does not parse: {0}")]
    Parse(#[from] ParseError),
    #[error("configuration does not validate ({} error(s))", .0.errors().count())]
    Invalid(ValidationReport),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Catalogue(#[from] CatalogueError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("mapping table: {0}")]
    Mapping(#[from] MappingError),
    #[error("principals table: {0}")]
    Principals(#[from] PrincipalsError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error("workspace I/O: {0}")]
    Io(#[from] std::io::Error),
}

impl WorkspaceError {
    /// Stable machine code.
    pub fn code(&self) -> &'static str {
        match self {
            WorkspaceError::Unresolved => "no_workspace",
            WorkspaceError::NotInitialized(_) => "not_initialized",
            WorkspaceError::Denied { reason: DenyReason::UnknownPrincipal, .. } => "unauthenticated",
            WorkspaceError::Denied { .. } => "forbidden",
            WorkspaceError::NotFound { .. } => "not_found",
            WorkspaceError::IdempotencyConflict(_) => "idempotency_conflict",
            WorkspaceError::IllegalTransition { .. } => "illegal_transition",
            WorkspaceError::Parse(_) => "parse_error",
            WorkspaceError::Invalid(_) => "validation_failed",
            WorkspaceError::Plan(_) => "plan_rejected",
            WorkspaceError::Catalogue(_) => "catalogue_rejected",
            WorkspaceError::Engine(_) => "run_rejected",
            WorkspaceError::Report(ReportError::Unfinished(_)) => "run_unfinished",
            WorkspaceError::Report(_) => "report_rejected",
            WorkspaceError::Mapping(_) => "mapping_invalid",
            WorkspaceError::Principals(_) => "principals_invalid",
            WorkspaceError::Store(StoreError::AccessDenied { .. }) => "forbidden",
            WorkspaceError::Store(StoreError::NotFound { .. }) => "not_found",
            WorkspaceError::Store(_) => "store_error",
            WorkspaceError::Audit(_) => "audit_error",
            WorkspaceError::Io(_) => "io_error",
        }
    }
}

pub type Result<T, E = WorkspaceError> = std::result::Result<T, E>;

/// Stored form of an accepted configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigRecord {
    pub config_digest: String,
    pub name: String,
    pub canonical: String,
}

impl ConfigRecord {
    pub fn document(&self) -> Result<ConfigDocument> {
        Ok(dsl::parse(&self.canonical)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitOutcome {
    /// Present iff the configuration was stored.
    pub config_digest: Option<String>,
    pub parse_error: Option<String>,
    pub report: Option<ValidationReport>,
}

impl SubmitOutcome {
    pub fn accepted(&self) -> bool {
        self.config_digest.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlChange {
    pub from: ControlStatus,
    pub to: ControlStatus,
    pub note: String,
    pub actor: String,
    pub at: String,
}

/// Review track of one control within one configuration revision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ControlTrack {
    status: ControlStatus,
    history: Vec<ControlChange>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlView {
    pub control_id: String,
    pub config_digest: String,
    pub activity: String,
    pub control_type: Option<String>,
    pub guideline: Option<dsl::GuidelineRef>,
    pub dimension: Dimension,
    pub declared_status: ControlStatus,
    pub status: ControlStatus,
    pub history: Vec<ControlChange>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IdempotencyRecord {
    run_id: String,
    request_digest: String,
}

/// A run request after authorization and preflight.
#[derive(Debug)]
pub enum RunStart {
    New(RunSpec),
    /// Replay of an idempotent request; carries the original run id.
    Replayed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepView {
    pub result: StepResult,
    /// Artefacts the caller's zones admit.
    pub artefacts: Vec<ArtefactRef>,
    pub hidden_artefacts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub principal_id: String,
    pub role: Role,
    pub zones: Vec<Zone>,
    pub actions: Vec<Action>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub ok: bool,
    /// Chain name (`workspace` or `runs/<id>`) to verdict.
    pub chains: BTreeMap<String, Verdict>,
}

impl AuditSummary {
    /// First broken chain, if any.
    pub fn first_break(&self) -> Option<(&str, &Verdict)> {
        self.chains.iter().find(|(_, v)| !v.is_ok()).map(|(k, v)| (k.as_str(), v))
    }
}

pub struct Workspace {
    root: PathBuf,
    store: Store,
    audit: AuditLog,
    principals: PrincipalTable,
    mapping: MappingTable,
    timeout_multiplier: u32,
}

/// Workspace root from an explicit flag or the environment.
pub fn resolve_root(flag: Option<&Path>) -> Result<PathBuf> {
    if let Some(p) = flag {
        return Ok(p.to_path_buf());
    }
    match std::env::var_os(crate::store::WORKSPACE_ENV) {
        Some(v) if !v.is_empty() => Ok(PathBuf::from(v)),
        _ => Err(WorkspaceError::Unresolved),
    }
}

/// One principal per role with fresh random tokens.
pub fn default_principals() -> PrincipalTable {
    let mut t = PrincipalTable::default();
    for (id, role) in [
        ("provider", Role::Provider),
        ("authority", Role::CompetentAuthority),
        ("expert", Role::TechnicalExpert),
        ("auditor", Role::Auditor),
    ] {
        t.insert(uuid::Uuid::new_v4().simple().to_string(), Principal::new(id, role)).expect("distinct ids and tokens");
    }
    t
}

impl Workspace {
    /// Creates the workspace directory and its principals table. An existing
    /// table is kept.
    pub fn init(root: &Path, principals: Option<&PrincipalTable>) -> Result<Self> {
        std::fs::create_dir_all(root)?;
        let path = root.join(PRINCIPALS_FILE);
        if !path.exists() {
            let table = principals.cloned().unwrap_or_else(default_principals);
            std::fs::write(&path, table.render())?;
        }
        Self::open(root)
    }

    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(PRINCIPALS_FILE);
        let principals = match std::fs::read_to_string(&path) {
            Ok(text) => PrincipalTable::parse(&text)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(WorkspaceError::NotInitialized(root.to_path_buf())),
            Err(e) => return Err(e.into()),
        };
        let mapping = match std::fs::read_to_string(root.join(MAPPING_FILE)) {
            Ok(text) => MappingTable::parse(&text)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => MappingTable::default_table(),
            Err(e) => return Err(e.into()),
        };
        Ok(Workspace {
            root: root.to_path_buf(),
            store: Store::open(root)?,
            audit: AuditLog::open(root.join(AUDIT_FILE)),
            principals,
            mapping,
            timeout_multiplier: DEFAULT_TIMEOUT_MULTIPLIER,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn audit_log(&self) -> &AuditLog {
        &self.audit
    }

    pub fn principals(&self) -> &PrincipalTable {
        &self.principals
    }

    pub fn mapping(&self) -> &MappingTable {
        &self.mapping
    }

    pub fn set_mapping(&mut self, table: MappingTable) {
        self.mapping = table;
    }

    pub fn set_timeout_multiplier(&mut self, m: u32) {
        self.timeout_multiplier = m.max(1);
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join(RUNS_DIR).join(run_id)
    }

    pub fn run_chain(&self, run_id: &str) -> AuditLog {
        AuditLog::open(self.run_dir(run_id).join(engine::RUN_AUDIT_FILE))
    }

    fn actor(p: Option<&Principal>) -> String {
        p.map_or_else(|| ANONYMOUS.to_string(), Principal::actor)
    }

    fn append(&self, p: Option<&Principal>, action: &str, payload: Value) -> Result<()> {
        self.audit.append(&Self::actor(p), action, &payload)?;
        Ok(())
    }

    /// Checks the matrix; a denial is recorded before it is returned.
    pub fn authorize(&self, p: Option<&Principal>, action: Action, zone: Option<Zone>) -> Result<()> {
        match rbac::authorize(p, action, zone) {
            Decision::Allow => Ok(()),
            Decision::Deny(reason) => {
                self.append(p, "access.denied", json!({ "action": action, "zone": zone, "reason": reason }))?;
                Err(WorkspaceError::Denied { action, reason })
            }
        }
    }

    /// Records the outcome of a mutating call under `<verb>.<ok>` or
    /// `<verb>.refused`.
    fn conclude<T>(&self, p: Option<&Principal>, verb: &str, ok: &str, r: Result<(T, Value)>) -> Result<T> {
        match r {
            Ok((v, payload)) => {
                self.append(p, &format!("{verb}.{ok}"), payload)?;
                Ok(v)
            }
            Err(e) => {
                self.append(p, &format!("{verb}.refused"), json!({ "code": e.code(), "message": e.to_string() }))?;
                Err(e)
            }
        }
    }

    /// Records a request refused before reaching the workspace, such as a
    /// malformed body, so that it still leaves exactly one entry.
    pub fn refuse(&self, p: Option<&Principal>, verb: &str, code: &str, message: &str) -> Result<()> {
        self.append(p, &format!("{verb}.refused"), json!({ "code": code, "message": message }))
    }

    pub fn session(&self, p: Option<&Principal>) -> Result<Session> {
        let Some(p) = p else { return Err(WorkspaceError::Denied { action: Action::ViewRun, reason: DenyReason::UnknownPrincipal }) };
        Ok(Session { principal_id: p.principal_id.clone(), role: p.role, zones: p.zones().to_vec(), actions: rbac::granted(p.role).to_vec() })
    }

    // ---- configurations ----

    fn store_config(&self, doc: &ConfigDocument) -> Result<ConfigRecord> {
        let canonical = dsl::canonicalize(doc).map_err(|e| match e {
            dsl::canonical::CanonicalizeError::NotValid(r) => WorkspaceError::Invalid(r),
        })?;
        let rec = ConfigRecord { config_digest: sha256_hex(&canonical), name: doc.name.clone(), canonical };
        if self.store.load::<ConfigRecord>(RecordClass::Config, &rec.config_digest)?.is_none() {
            self.store.persist(RecordClass::Config, &rec.config_digest, &rec)?;
        }
        Ok(rec)
    }

    /// Stores the configuration iff it validates. A refusal is an outcome,
    /// not an error, so the caller gets the diagnostics.
    pub fn submit_config(&self, p: Option<&Principal>, source: &str) -> Result<SubmitOutcome> {
        self.authorize(p, Action::SubmitConfig, None)?;
        let doc = match dsl::parse(source) {
            Ok(d) => d,
            Err(e) => {
                self.append(p, "config.rejected", json!({ "parse_error": e.to_string() }))?;
                return Ok(SubmitOutcome { config_digest: None, parse_error: Some(e.to_string()), report: None });
            }
        };
        let report = dsl::validate(&doc);
        if !report.ok {
            let codes: Vec<&str> = report.errors().map(|d| d.code.as_str()).collect();
            self.append(p, "config.rejected", json!({ "name": doc.name, "codes": codes }))?;
            return Ok(SubmitOutcome { config_digest: None, parse_error: None, report: Some(report) });
        }
        let rec = self.store_config(&doc)?;
        self.append(p, "config.submitted", json!({ "name": rec.name, "config_digest": rec.config_digest }))?;
        Ok(SubmitOutcome { config_digest: Some(rec.config_digest), parse_error: None, report: Some(report) })
    }

    pub fn config(&self, digest: &str) -> Result<ConfigRecord> {
        let digest = digest.strip_prefix("sha256:").unwrap_or(digest);
        self.store
            .load(RecordClass::Config, digest)?
            .ok_or_else(|| WorkspaceError::NotFound { what: "configuration", id: digest.to_string() })
    }

    pub fn configs(&self) -> Result<Vec<ConfigRecord>> {
        Ok(self.store.list::<ConfigRecord>(RecordClass::Config)?.into_iter().map(|(_, c)| c).collect())
    }

    // ---- catalogue ----

    pub fn catalogue(&self) -> Result<Catalogue> {
        let mut cat = Catalogue::new();
        for (_, m) in self.store.list::<ModuleDescriptor>(RecordClass::Module)? {
            cat.register(m)?;
        }
        for (_, e) in self.store.list::<ExpertRecord>(RecordClass::Expert)? {
            cat.register_expert(e)?;
        }
        Ok(cat)
    }

    pub fn register_module(&self, p: Option<&Principal>, descriptor: ModuleDescriptor) -> Result<String> {
        self.authorize(p, Action::RegisterModule, None)?;
        let r = (|| {
            let mut cat = self.catalogue()?;
            descriptor.verify_entrypoint(&self.root)?;
            let id = cat.register(descriptor.clone())?;
            self.store.persist(RecordClass::Module, &id.0, &descriptor)?;
            let payload = json!({ "module": id.0, "checksum": descriptor.checksum });
            Ok((id.0, payload))
        })();
        self.conclude(p, "module", "registered", r)
    }

    pub fn register_expert(&self, p: Option<&Principal>, expert: ExpertRecord) -> Result<()> {
        self.authorize(p, Action::RegisterExpert, None)?;
        let r = (|| {
            let mut cat = self.catalogue()?;
            cat.register_expert(expert.clone())?;
            self.store.persist(RecordClass::Expert, &expert.expert_id, &expert)?;
            Ok(((), json!({ "expert": expert.expert_id })))
        })();
        self.conclude(p, "expert", "registered", r)
    }

    // ---- plans ----

    /// Maps, resolves and assembles a plan for the configuration, storing
    /// the configuration alongside. `allow_gaps` overrides the document's
    /// own setting when true.
    pub fn assemble_plan(&self, p: Option<&Principal>, doc: &ConfigDocument, allow_gaps: bool) -> Result<ExecutionPlan> {
        self.authorize(p, Action::AssemblePlan, None)?;
        let r = (|| {
            let mut doc = doc.clone();
            doc.allow_gaps |= allow_gaps;
            let report = dsl::validate(&doc);
            if !report.ok {
                return Err(WorkspaceError::Invalid(report));
            }
            let catalogue = self.catalogue()?;
            let coverage = mapping::coverage(&doc.objectives, &self.mapping, &catalogue);
            let controls = mapping::controls_to_control_types(&doc.controls, &self.mapping);
            let plan = planner::assemble(&doc, &coverage, &controls, &catalogue, &self.mapping.version)?;
            self.store_config(&doc)?;
            self.store.persist(RecordClass::Plan, &plan.plan_id, &plan)?;
            plan.write_to(&self.root.join(PLANS_DIR).join(&plan.plan_id))?;
            let payload = json!({
                "plan_id": plan.plan_id,
                "config_digest": plan.config_digest,
                "steps": plan.steps.len(),
                "waived_gaps": plan.waived_gaps.len(),
            });
            Ok((plan, payload))
        })();
        self.conclude(p, "plan", "assembled", r)
    }

    pub fn assemble_plan_for(&self, p: Option<&Principal>, config_digest: &str, allow_gaps: bool) -> Result<ExecutionPlan> {
        // Resolve before authorizing would leak existence; authorize first.
        self.authorize(p, Action::AssemblePlan, None)?;
        let doc = match self.config(config_digest).and_then(|c| c.document()) {
            Ok(d) => d,
            Err(e) => {
                self.append(p, "plan.refused", json!({ "code": e.code(), "message": e.to_string() }))?;
                return Err(e);
            }
        };
        self.assemble_plan(p, &doc, allow_gaps)
    }

    pub fn plan(&self, plan_id: &str) -> Result<ExecutionPlan> {
        self.store.load(RecordClass::Plan, plan_id)?.ok_or_else(|| WorkspaceError::NotFound { what: "plan", id: plan_id.to_string() })
    }

    /// Most recent plan assembled for a configuration.
    pub fn plan_for_config(&self, config_digest: &str) -> Result<ExecutionPlan> {
        let digest = config_digest.strip_prefix("sha256:").unwrap_or(config_digest);
        let mut latest = None;
        for r in self.store.records()? {
            if r.class == RecordClass::Plan && r.body.get("config_digest").and_then(Value::as_str) == Some(digest) {
                latest = Some(r.id);
            }
        }
        match latest {
            Some(id) => self.plan(&id),
            None => Err(WorkspaceError::NotFound { what: "plan for configuration", id: digest.to_string() }),
        }
    }

    // ---- controls ----

    fn control_key(config_digest: &str, control_id: &str) -> String {
        format!("{config_digest}/{control_id}")
    }

    fn control_view_in(&self, rec: &ConfigRecord, control_id: &str) -> Result<Option<ControlView>> {
        let doc = rec.document()?;
        let Some(c) = doc.controls.iter().find(|c| c.control_id == control_id) else { return Ok(None) };
        let track: Option<ControlTrack> = self.store.load(RecordClass::ControlStatus, &Self::control_key(&rec.config_digest, control_id))?;
        Ok(Some(ControlView {
            control_id: c.control_id.clone(),
            config_digest: rec.config_digest.clone(),
            activity: c.activity.clone(),
            control_type: c.control_type.clone(),
            guideline: c.guideline.clone(),
            dimension: c.dimension,
            declared_status: c.status,
            status: track.as_ref().map_or(c.status, |t| t.status),
            history: track.map(|t| t.history).unwrap_or_default(),
        }))
    }

    /// The control as declared by the most recently stored configuration
    /// that has it.
    fn find_control(&self, control_id: &str) -> Result<ControlView> {
        for rec in self.configs()?.iter().rev() {
            if let Some(v) = self.control_view_in(rec, control_id)? {
                return Ok(v);
            }
        }
        Err(WorkspaceError::NotFound { what: "control", id: control_id.to_string() })
    }

    pub fn control(&self, p: Option<&Principal>, control_id: &str) -> Result<ControlView> {
        self.authorize(p, Action::InspectControls, None)?;
        self.find_control(control_id)
    }

    pub fn controls(&self, p: Option<&Principal>, config_digest: &str) -> Result<Vec<ControlView>> {
        self.authorize(p, Action::InspectControls, None)?;
        let rec = self.config(config_digest)?;
        let doc = rec.document()?;
        let mut out = Vec::new();
        for c in &doc.controls {
            out.extend(self.control_view_in(&rec, &c.control_id)?);
        }
        Ok(out)
    }

    pub fn set_control_status(&self, p: Option<&Principal>, control_id: &str, to: ControlStatus, note: &str) -> Result<ControlView> {
        self.authorize(p, Action::UpdateControlStatus, None)?;
        let r = (|| {
            let mut view = self.find_control(control_id)?;
            let from = view.status;
            if !from.can_transition_to(to) {
                return Err(WorkspaceError::IllegalTransition { from, to });
            }
            let change = ControlChange { from, to, note: note.to_string(), actor: Self::actor(p), at: now_rfc3339() };
            view.history.push(change);
            view.status = to;
            let track = ControlTrack { status: to, history: view.history.clone() };
            self.store.persist(RecordClass::ControlStatus, &Self::control_key(&view.config_digest, control_id), &track)?;
            let payload = json!({
                "control_id": control_id,
                "config_digest": view.config_digest,
                "from": from,
                "to": to,
                "note": note,
            });
            Ok((view, payload))
        })();
        self.conclude(p, "control", "status_changed", r)
    }

    /// Status of every control step of the plan as of now.
    pub fn control_statuses(&self, plan: &ExecutionPlan) -> Result<BTreeMap<String, ControlStatus>> {
        let rec = self.config(&plan.config_digest)?;
        let doc = rec.document()?;
        let mut out = BTreeMap::new();
        for step in plan.steps.iter().filter(|s| s.kind == StepKind::ControlCheck) {
            if let planner::StepBinding::Control { control_id, .. } = &step.binding {
                if let Some(c) = doc.controls.iter().find(|c| &c.control_id == control_id) {
                    let track: Option<ControlTrack> = self.store.load(RecordClass::ControlStatus, &Self::control_key(&rec.config_digest, control_id))?;
                    out.insert(control_id.clone(), track.map_or(c.status, |t| t.status));
                }
            }
        }
        Ok(out)
    }

    fn control_notes(&self, config_digest: &str) -> Result<Vec<ReportNote>> {
        let prefix = format!("{config_digest}/");
        let mut notes = Vec::new();
        for (key, track) in self.store.list::<ControlTrack>(RecordClass::ControlStatus)? {
            let Some(control_id) = key.strip_prefix(&prefix) else { continue };
            for ch in track.history.iter().filter(|c| !c.note.is_empty()) {
                notes.push(ReportNote {
                    author: ch.actor.clone(),
                    subject: control_id.to_string(),
                    text: format!("{} -> {}: {}", ch.from, ch.to, ch.note),
                });
            }
        }
        Ok(notes)
    }

    // ---- runs ----

    /// Authorizes, preflights and registers a run; the caller executes it.
    /// With an idempotency key, a replay of the same request returns the
    /// original run id and a different request under the key is refused.
    pub fn start_run(
        &self,
        p: Option<&Principal>,
        plan_id: &str,
        executors: Vec<ExecutorDescriptor>,
        policy: FailurePolicy,
        idempotency_key: Option<&str>,
    ) -> Result<RunStart> {
        self.authorize(p, Action::StartRun, None)?;
        let request_digest = sha256_hex(
            to_canonical_json(&json!({ "plan_id": plan_id, "executors": executors, "policy": policy })).expect("request serializes"),
        );
        if let Some(key) = idempotency_key {
            if let Some(rec) = self.store.load::<IdempotencyRecord>(RecordClass::Idempotency, key)? {
                if rec.request_digest == request_digest {
                    self.append(p, "run.replayed", json!({ "run_id": rec.run_id, "idempotency_key": key }))?;
                    return Ok(RunStart::Replayed(rec.run_id));
                }
                let e = WorkspaceError::IdempotencyConflict(key.to_string());
                self.append(p, "run.refused", json!({ "code": e.code(), "message": e.to_string() }))?;
                return Err(e);
            }
        }
        let r = (|| {
            let plan = self.plan(plan_id)?;
            let run_id = uuid::Uuid::new_v4().to_string();
            let spec = RunSpec {
                run_id: run_id.clone(),
                control_statuses: self.control_statuses(&plan)?,
                plan,
                executors,
                policy,
                run_dir: self.run_dir(&run_id),
                actor: Self::actor(p),
            };
            let catalogue = self.catalogue()?;
            self.engine(&catalogue).preflight(&spec)?;
            std::fs::create_dir_all(&spec.run_dir)?;
            let pending = RunRecord::new(
                &spec,
                RunOutcome { state: RunState::new(&run_id, &spec.plan), results: BTreeMap::new() },
                now_rfc3339(),
            );
            self.store.persist(RecordClass::Run, &run_id, &pending)?;
            if let Some(key) = idempotency_key {
                self.store.persist(RecordClass::Idempotency, key, &IdempotencyRecord { run_id: run_id.clone(), request_digest })?;
            }
            let payload = json!({
                "run_id": run_id,
                "plan_id": spec.plan.plan_id,
                "executors": spec.executors.iter().map(|e| &e.executor_id).collect::<Vec<_>>(),
                "policy": policy,
            });
            Ok((RunStart::New(spec), payload))
        })();
        self.conclude(p, "run", "created", r)
    }

    fn engine<'a>(&'a self, catalogue: &'a Catalogue) -> Engine<'a> {
        Engine { store: &self.store, catalogue, plugin_base: &self.root, timeout_multiplier: self.timeout_multiplier }
    }

    /// Executes a started run to completion and persists its record. Engine
    /// events go to the run's own chain.
    pub fn execute(&self, spec: &RunSpec, monitor: &RunMonitor) -> Result<RunRecord> {
        let catalogue = self.catalogue()?;
        let outcome = self.engine(&catalogue).run(spec, monitor)?;
        let created = self.run_record(&spec.run_id).map(|r| r.created).unwrap_or_else(|_| now_rfc3339());
        let record = RunRecord::new(spec, outcome, created);
        self.store.persist(RecordClass::Run, &spec.run_id, &record)?;
        Ok(record)
    }

    fn run_record(&self, run_id: &str) -> Result<RunRecord> {
        self.store.load(RecordClass::Run, run_id)?.ok_or_else(|| WorkspaceError::NotFound { what: "run", id: run_id.to_string() })
    }

    pub fn run(&self, p: Option<&Principal>, run_id: &str) -> Result<RunRecord> {
        self.authorize(p, Action::ViewRun, None)?;
        self.run_record(run_id)
    }

    pub fn runs(&self, p: Option<&Principal>) -> Result<Vec<RunRecord>> {
        self.authorize(p, Action::ViewRun, None)?;
        Ok(self.store.list::<RunRecord>(RecordClass::Run)?.into_iter().map(|(_, r)| r).collect())
    }

    /// Run ids with a directory under `runs/`, sorted.
    pub fn run_ids(&self) -> Result<Vec<String>> {
        let dir = self.root.join(RUNS_DIR);
        let mut ids = Vec::new();
        match std::fs::read_dir(&dir) {
            Ok(rd) => {
                for e in rd {
                    let e = e?;
                    if e.file_type()?.is_dir() {
                        ids.push(e.file_name().to_string_lossy().into_owned());
                    }
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(e.into()),
        }
        ids.sort();
        Ok(ids)
    }

    pub fn events(&self, p: Option<&Principal>, run_id: &str, from: u64) -> Result<Vec<engine::EventRecord>> {
        self.authorize(p, Action::ViewRun, None)?;
        self.run_record(run_id)?;
        let path = self.run_dir(run_id).join(engine::EVENTS_FILE);
        let events = match engine::read_events(&path) {
            Ok(ev) => ev,
            Err(EngineError::Io(e)) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        Ok(events.into_iter().filter(|e| e.sequence_no >= from).collect())
    }

    /// Step result with artefact references filtered to the caller's zones.
    pub fn step(&self, p: Option<&Principal>, run_id: &str, step_id: &str) -> Result<StepView> {
        self.authorize(p, Action::ViewRun, None)?;
        let Some(p) = p else { unreachable!("authorized") };
        let run = self.run_record(run_id)?;
        let mut result = run
            .results
            .get(step_id)
            .cloned()
            .ok_or_else(|| WorkspaceError::NotFound { what: "step result", id: format!("{run_id}/{step_id}") })?;
        let zones = p.zones();
        let visible = |z: Zone| zones.contains(&z) && rbac::authorize(Some(p), rbac::artefact_action(z), Some(z)).is_allow();
        let before = result.artefacts.len();
        result.artefacts.retain(|a| visible(a.zone));
        let mut hidden = before - result.artefacts.len();
        if result.log_digest.is_some() && !visible(engine::OUTPUT_ZONE) {
            result.log_digest = None;
            hidden += 1;
        }
        let mut artefacts = Vec::new();
        for a in &result.artefacts {
            if let Some(r) = self.store.artefact_ref(a.zone, &a.digest)? {
                artefacts.push(r);
            }
        }
        Ok(StepView { result, artefacts, hidden_artefacts: hidden })
    }

    /// Artefact bytes, from the first copy in a zone the caller may read.
    pub fn artefact(&self, p: Option<&Principal>, digest: &str) -> Result<(ArtefactRef, Vec<u8>)> {
        let refs = self.store.locate(digest)?;
        let Some(first) = refs.first() else {
            // Unauthenticated callers learn nothing about existence.
            self.authorize(p, Action::ViewSharedArtefacts, None)?;
            return Err(WorkspaceError::NotFound { what: "artefact", id: digest.to_string() });
        };
        let readable = refs.iter().find(|r| rbac::authorize(p, rbac::artefact_action(r.zone), Some(r.zone)).is_allow());
        let r = match readable {
            Some(r) => r.clone(),
            None => {
                self.authorize(p, rbac::artefact_action(first.zone), Some(first.zone))?;
                unreachable!("authorize denied above")
            }
        };
        let held = p.map_or(&[][..], |p| p.zones());
        let bytes = self.store.get_artefact(&r, held)?;
        Ok((r, bytes))
    }

    pub fn put_artefact(&self, p: Option<&Principal>, bytes: &[u8], zone: Zone, hint: &str) -> Result<ArtefactRef> {
        self.authorize(p, Action::SubmitConfig, Some(zone))?;
        let r = self.store.put_artefact(bytes, zone, hint).map_err(WorkspaceError::from).map(|r| {
            let payload = json!({ "digest": r.digest, "zone": r.zone, "size_bytes": r.size_bytes });
            (r, payload)
        });
        self.conclude(p, "artefact", "stored", r)
    }

    // ---- reports ----

    /// Generates the report, writing `report.json` before the per-audience
    /// renderings. Review notes on the configuration's controls are added
    /// to the caller's notes.
    pub fn generate_report(&self, p: Option<&Principal>, run_id: &str, notes: &[ReportNote]) -> Result<ExitReport> {
        self.authorize(p, Action::GenerateReport, None)?;
        let r = (|| {
            let run = self.run_record(run_id)?;
            if run.state.phase != RunPhase::Finished {
                return Err(ReportError::Unfinished(run_id.to_string()).into());
            }
            let plan = self.plan(&run.plan_id)?;
            let config = self.config(&run.config_digest)?.document()?;
            let mut all_notes = self.control_notes(&run.config_digest)?;
            all_notes.extend(notes.iter().cloned());
            let chain = self.run_chain(run_id);
            let chain_name = format!("{RUNS_DIR}/{run_id}/{}", engine::RUN_AUDIT_FILE);
            let report = report::generate(&run, &plan, &config, &chain, &chain_name, &all_notes)?;
            let dir = self.run_dir(run_id);
            write_atomic(&dir.join(report::REPORT_FILE), canonical_json_pretty(&serde_json::to_value(&report).expect("report serializes")).as_bytes())?;
            for a in Audience::ALL {
                write_atomic(&dir.join(a.file_name()), report::render_human(&report, a).as_bytes())?;
            }
            self.store.persist(RecordClass::Report, run_id, &report)?;
            let payload = json!({
                "run_id": run_id,
                "report_id": report.report_id,
                "audit_head": report.sections.audit_digest.head.head_hash,
            });
            Ok((report, payload))
        })();
        self.conclude(p, "report", "generated", r)
    }

    pub fn report(&self, p: Option<&Principal>, run_id: &str) -> Result<ExitReport> {
        self.authorize(p, Action::ViewReport, None)?;
        self.store.load(RecordClass::Report, run_id)?.ok_or_else(|| WorkspaceError::NotFound { what: "report", id: run_id.to_string() })
    }

    // ---- audit ----

    /// Verifies the workspace chain and every run chain.
    pub fn verify_all(&self) -> Result<AuditSummary> {
        let mut chains = BTreeMap::new();
        chains.insert(WORKSPACE_CHAIN.to_string(), self.audit.verify()?);
        for id in self.run_ids()? {
            let chain = self.run_chain(&id);
            if chain.path().exists() {
                chains.insert(format!("{RUNS_DIR}/{id}"), chain.verify()?);
            }
        }
        let ok = chains.values().all(Verdict::is_ok);
        Ok(AuditSummary { ok, chains })
    }

    pub fn export_audit(&self, p: Option<&Principal>, range: Option<(u64, u64)>) -> Result<String> {
        self.authorize(p, Action::ExportAudit, None)?;
        Ok(self.audit.export(range)?)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(tmp, path)
}

#[cfg(test)]
mod tests;
