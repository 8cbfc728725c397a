//! Plan execution: dispatch to executors, plug-in invocation, live events.
//!
//! One scheduler loop owns all state transitions and is the only writer of
//! events, so the event sequence is a total order per run. Each running
//! step gets its own worker thread and plug-in process.

pub mod account;
pub mod plugin;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::mpsc;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::audit::{now_rfc3339, AuditError, AuditLog};
use crate::catalogue::Catalogue;
use crate::digest::{canonical_json_pretty, sha256_hex, to_canonical_json};
use crate::planner::{topological_order, ExecutionPlan, PlanError, PlanStep, StepBinding};
use crate::store::{normalize_digest, Store, StoreError};
use crate::vocab::{ControlStatus, Zone};

pub use account::{account, ExecutorUsage, ResourceReport, StepUsage};
pub use plugin::{FailureReason, JobDocument};

pub const DEFAULT_TIMEOUT_MULTIPLIER: u32 = 4;
pub const EVENTS_FILE: &str = "events.log";
pub const RUN_AUDIT_FILE: &str = "audit.log";
/// Zone for plug-in outputs and logs: they derive from provider data.
pub const OUTPUT_ZONE: Zone = Zone::Confidential;
/// Zone for control-check evidence, readable by the authority.
pub const CONTROL_EVIDENCE_ZONE: Zone = Zone::Regulatory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutorKind {
    Local,
    SimulatedRemote,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutorDescriptor {
    pub executor_id: String,
    pub kind: ExecutorKind,
    pub capacity: u32,
    #[serde(default)]
    pub latency_injection_ms: u64,
}

impl ExecutorDescriptor {
    pub fn local(id: impl Into<String>, capacity: u32) -> Self {
        ExecutorDescriptor { executor_id: id.into(), kind: ExecutorKind::Local, capacity, latency_injection_ms: 0 }
    }

    pub fn remote(id: impl Into<String>, capacity: u32, latency_ms: u64) -> Self {
        ExecutorDescriptor {
            executor_id: id.into(),
            kind: ExecutorKind::SimulatedRemote,
            capacity,
            latency_injection_ms: latency_ms,
        }
    }
}

/// Parses an executor list such as `local`, `local:2` or `3xremote:1:20`.
///
/// Each comma-separated item is `[<n>x]<kind>[:<capacity>[:<latency_ms>]]`
/// with kind `local` or `remote`. Ids are `<kind>-<k>`, numbered per kind.
pub fn parse_executors(spec: &str) -> Result<Vec<ExecutorDescriptor>, EngineError> {
    let bad = |msg: String| EngineError::Executors(msg);
    let mut out = Vec::new();
    let mut counters: BTreeMap<&str, u32> = BTreeMap::new();
    for item in spec.split(',').map(str::trim) {
        let (count, rest) = match item.split_once('x') {
            Some((n, rest)) if !n.is_empty() && n.chars().all(|c| c.is_ascii_digit()) => {
                (n.parse::<u32>().map_err(|e| bad(format!("`{item}`: {e}")))?, rest)
            }
            _ => (1, item),
        };
        let mut parts = rest.split(':');
        let kind = parts.next().unwrap_or_default();
        let num = |p: Option<&str>, default: u64| -> Result<u64, EngineError> {
            p.map(|s| s.parse::<u64>().map_err(|e| bad(format!("`{item}`: {e}")))).transpose().map(|v| v.unwrap_or(default))
        };
        let capacity = num(parts.next(), 1)?;
        let latency = num(parts.next(), if kind == "remote" { 5 } else { 0 })?;
        if parts.next().is_some() {
            return Err(bad(format!("`{item}` has too many fields")));
        }
        let (kind, label) = match kind {
            "local" => (ExecutorKind::Local, "local"),
            "remote" => (ExecutorKind::SimulatedRemote, "remote"),
            other => return Err(bad(format!("unknown executor kind `{other}`; expected local or remote"))),
        };
        if kind == ExecutorKind::Local && latency != 0 {
            return Err(bad(format!("`{item}`: latency injection applies to remote executors only")));
        }
        if count == 0 || capacity == 0 || capacity > u64::from(u32::MAX) {
            return Err(bad(format!("`{item}`: count and capacity must be at least 1")));
        }
        for _ in 0..count {
            let k = counters.entry(label).or_insert(0);
            *k += 1;
            out.push(ExecutorDescriptor {
                executor_id: format!("{label}-{k}"),
                kind,
                capacity: capacity as u32,
                latency_injection_ms: latency,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailurePolicy {
    FailFast,
    #[default]
    Continue,
}

impl FromStr for FailurePolicy {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fail_fast" | "fail-fast" => Ok(FailurePolicy::FailFast),
            "continue" => Ok(FailurePolicy::Continue),
            other => Err(EngineError::Executors(format!("unknown policy `{other}`; expected fail_fast or continue"))),
        }
    }
}

impl FailurePolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            FailurePolicy::FailFast => "fail_fast",
            FailurePolicy::Continue => "continue",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepStatus {
    Pending,
    Running,
    Done,
    Failed,
    Skipped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepVerdict {
    Pass,
    Fail,
    Error,
}

impl StepVerdict {
    pub fn as_str(self) -> &'static str {
        match self {
            StepVerdict::Pass => "pass",
            StepVerdict::Fail => "fail",
            StepVerdict::Error => "error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProducedArtefact {
    /// Path relative to the step's output directory.
    pub path: String,
    pub digest: String,
    pub size_bytes: u64,
    pub zone: Zone,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub step_id: String,
    pub executor_id: String,
    pub verdict: StepVerdict,
    pub reason: Option<FailureReason>,
    pub diagnostics: Option<String>,
    pub metrics: BTreeMap<String, f64>,
    pub artefacts: Vec<ProducedArtefact>,
    pub cpu_seconds_used: f64,
    pub storage_bytes_used: u64,
    pub log_digest: Option<String>,
    /// Control checks: the reviewed status.
    pub control_status: Option<ControlStatus>,
}

impl StepResult {
    pub fn artefact_digests(&self) -> BTreeSet<String> {
        self.artefacts.iter().map(|a| a.digest.clone()).collect()
    }

    fn error(step_id: &str, executor_id: &str, reason: FailureReason, diagnostics: String) -> Self {
        StepResult {
            step_id: step_id.to_string(),
            executor_id: executor_id.to_string(),
            verdict: StepVerdict::Error,
            reason: Some(reason),
            diagnostics: Some(diagnostics),
            metrics: BTreeMap::new(),
            artefacts: Vec::new(),
            cpu_seconds_used: 0.0,
            storage_bytes_used: 0,
            log_digest: None,
            control_status: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    RunStarted,
    StepStarted,
    StepProgress,
    StepFinished,
    RunFinished,
}

impl EventKind {
    /// Audit action recorded for the event.
    pub fn action(self) -> &'static str {
        match self {
            EventKind::RunStarted => "run.started",
            EventKind::StepStarted => "step.started",
            EventKind::StepProgress => "step.progress",
            EventKind::StepFinished => "step.finished",
            EventKind::RunFinished => "run.finished",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub sequence_no: u64,
    pub run_id: String,
    pub step_id: Option<String>,
    pub kind: EventKind,
    pub timestamp: String,
    pub payload: Value,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepState {
    pub status: StepStatus,
    pub executor_id: Option<String>,
    pub verdict: Option<StepVerdict>,
    pub started: Option<String>,
    pub finished: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunPhase {
    Pending,
    Running,
    Finished,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunState {
    pub run_id: String,
    pub plan_id: String,
    pub phase: RunPhase,
    pub steps: BTreeMap<String, StepState>,
    pub started: Option<String>,
    pub finished: Option<String>,
}

impl RunState {
    pub fn new(run_id: &str, plan: &ExecutionPlan) -> Self {
        let steps = plan
            .steps
            .iter()
            .map(|s| {
                let st = StepState { status: StepStatus::Pending, executor_id: None, verdict: None, started: None, finished: None };
                (s.step_id.clone(), st)
            })
            .collect();
        RunState { run_id: run_id.to_string(), plan_id: plan.plan_id.clone(), phase: RunPhase::Pending, steps, started: None, finished: None }
    }

    /// True when every step ended done.
    pub fn succeeded(&self) -> bool {
        self.phase == RunPhase::Finished && self.steps.values().all(|s| s.status == StepStatus::Done)
    }

    fn count(&self, status: StepStatus) -> usize {
        self.steps.values().filter(|s| s.status == status).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub state: RunState,
    pub results: BTreeMap<String, StepResult>,
}

/// Durable summary of a finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub plan_id: String,
    pub config_digest: String,
    pub policy: FailurePolicy,
    pub executors: Vec<ExecutorDescriptor>,
    pub state: RunState,
    pub results: BTreeMap<String, StepResult>,
    /// Step id to digest of its canonical result document.
    pub result_digests: BTreeMap<String, String>,
    pub resources: ResourceReport,
    pub created: String,
}

impl RunRecord {
    pub fn new(spec: &RunSpec, outcome: RunOutcome, created: String) -> Self {
        let resources = account(&spec.plan, &outcome.state, &outcome.results, &spec.executors);
        RunRecord {
            run_id: spec.run_id.clone(),
            plan_id: spec.plan.plan_id.clone(),
            config_digest: spec.plan.config_digest.clone(),
            policy: spec.policy,
            executors: spec.executors.clone(),
            result_digests: outcome.results.iter().map(|(k, r)| (k.clone(), result_digest(r))).collect(),
            state: outcome.state,
            results: outcome.results,
            resources,
            created,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("invalid executors: {0}")]
    Executors(String),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error("step `{step_id}` binds {module}, which is not in the catalogue")]
    UnknownModule { step_id: String, module: String },
    #[error("step `{step_id}`: {module} checksum mismatch (catalogue {expected}, found {actual})")]
    ChecksumMismatch { step_id: String, module: String, expected: String, actual: String },
    #[error("step `{step_id}`: entrypoint {path} is missing")]
    EntrypointMissing { step_id: String, path: String },
    #[error("step `{step_id}` is pinned to executor `{executor}`, which is not available")]
    UnknownExecutor { step_id: String, executor: String },
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("run storage: {0}")]
    Io(#[from] std::io::Error),
}

/// Shared, observable state of one run: the event list and the run state,
/// updated together under one lock.
#[derive(Debug)]
pub struct RunMonitor {
    inner: Mutex<MonitorInner>,
    changed: Condvar,
}

#[derive(Debug)]
struct MonitorInner {
    events: Vec<EventRecord>,
    state: RunState,
    closed: bool,
}

impl RunMonitor {
    pub fn new(state: RunState) -> Self {
        RunMonitor { inner: Mutex::new(MonitorInner { events: Vec::new(), state, closed: false }), changed: Condvar::new() }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, MonitorInner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn state(&self) -> RunState {
        self.lock().state.clone()
    }

    /// Events with `sequence_no >= from`, and whether the stream is closed.
    pub fn events_from(&self, from: u64) -> (Vec<EventRecord>, bool) {
        let g = self.lock();
        (g.events.iter().skip(from as usize).cloned().collect(), g.closed)
    }

    /// Like `events_from`, but waits up to `timeout` for something new.
    pub fn wait_events(&self, from: u64, timeout: Duration) -> (Vec<EventRecord>, bool) {
        let g = self.lock();
        let (g, _) = self
            .changed
            .wait_timeout_while(g, timeout, |g| g.events.len() as u64 <= from && !g.closed)
            .unwrap_or_else(|e| e.into_inner());
        (g.events.iter().skip(from as usize).cloned().collect(), g.closed)
    }

    /// Blocks until the run finishes or is abandoned.
    pub fn wait_closed(&self) -> RunState {
        let g = self.lock();
        let g = self.changed.wait_while(g, |g| !g.closed).unwrap_or_else(|e| e.into_inner());
        g.state.clone()
    }

    fn publish(&self, event: EventRecord, update: impl FnOnce(&mut RunState)) {
        let mut g = self.lock();
        update(&mut g.state);
        g.events.push(event);
        drop(g);
        self.changed.notify_all();
    }

    /// Marks the stream closed, e.g. after a failed preflight.
    pub fn close(&self) {
        self.lock().closed = true;
        self.changed.notify_all();
    }
}

/// Everything a run needs besides the engine's shared services.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub run_id: String,
    pub plan: ExecutionPlan,
    pub executors: Vec<ExecutorDescriptor>,
    pub policy: FailurePolicy,
    /// Review status per control id, as of run start.
    pub control_statuses: BTreeMap<String, ControlStatus>,
    pub run_dir: PathBuf,
    /// Audit actor the run acts for.
    pub actor: String,
}

pub struct Engine<'a> {
    pub store: &'a Store,
    pub catalogue: &'a Catalogue,
    /// Base for relative module entrypoints.
    pub plugin_base: &'a Path,
    pub timeout_multiplier: u32,
}

enum Msg {
    Progress(String, plugin::Progress),
    Done(StepResult),
}

struct Emitter<'m> {
    run_id: String,
    actor: String,
    next: u64,
    file: File,
    audit: AuditLog,
    monitor: &'m RunMonitor,
}

impl Emitter<'_> {
    fn emit(&mut self, kind: EventKind, step_id: Option<&str>, payload: Value, update: impl FnOnce(&mut RunState, &str)) -> Result<(), EngineError> {
        let timestamp = now_rfc3339();
        let event = EventRecord {
            sequence_no: self.next,
            run_id: self.run_id.clone(),
            step_id: step_id.map(str::to_string),
            kind,
            timestamp: timestamp.clone(),
            payload,
        };
        let value = serde_json::to_value(&event).expect("event serializes");
        self.audit.append_at(&self.actor, kind.action(), &value, &timestamp)?;
        let mut line = crate::digest::canonical_json(&value);
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.next += 1;
        self.monitor.publish(event, |s| update(s, &timestamp));
        Ok(())
    }
}

impl Engine<'_> {
    /// Checks a run request without side effects.
    pub fn preflight(&self, spec: &RunSpec) -> Result<(), EngineError> {
        spec.plan.verify_id()?;
        topological_order(&spec.plan)?;
        if spec.executors.is_empty() {
            return Err(EngineError::Executors("at least one executor is required".into()));
        }
        let mut ids = BTreeSet::new();
        for e in &spec.executors {
            if e.capacity == 0 {
                return Err(EngineError::Executors(format!("executor `{}` has capacity 0", e.executor_id)));
            }
            if !ids.insert(e.executor_id.as_str()) {
                return Err(EngineError::Executors(format!("duplicate executor id `{}`", e.executor_id)));
            }
        }
        for step in &spec.plan.steps {
            if let Some(x) = &step.executor_constraint {
                if !ids.contains(x.as_str()) {
                    return Err(EngineError::UnknownExecutor { step_id: step.step_id.clone(), executor: x.clone() });
                }
            }
            if let StepBinding::Module { name, version, checksum, .. } = &step.binding {
                self.entrypoint_for(&step.step_id, name, version, checksum)?;
            }
        }
        Ok(())
    }

    fn entrypoint_for(
        &self,
        step_id: &str,
        name: &str,
        version: &crate::catalogue::Version,
        checksum: &str,
    ) -> Result<PathBuf, EngineError> {
        let module = format!("{name}@{version}");
        let d = self
            .catalogue
            .get(name, version)
            .ok_or_else(|| EngineError::UnknownModule { step_id: step_id.to_string(), module: module.clone() })?;
        let mismatch = |actual: String| EngineError::ChecksumMismatch {
            step_id: step_id.to_string(),
            module: module.clone(),
            expected: d.checksum.clone(),
            actual,
        };
        if d.checksum != checksum {
            return Err(mismatch(checksum.to_string()));
        }
        let path = d.entrypoint_path(self.plugin_base);
        let bytes = std::fs::read(&path)
            .map_err(|_| EngineError::EntrypointMissing { step_id: step_id.to_string(), path: path.display().to_string() })?;
        let actual = sha256_hex(&bytes);
        if actual != d.checksum {
            return Err(mismatch(actual));
        }
        Ok(path)
    }

    /// Executes the plan to completion. Refuses before any step starts when
    /// preflight fails; afterwards every step ends in a terminal status.
    pub fn run(&self, spec: &RunSpec, monitor: &RunMonitor) -> Result<RunOutcome, EngineError> {
        let result = self.preflight(spec).and_then(|_| self.run_checked(spec, monitor));
        monitor.close();
        result
    }

    fn run_checked(&self, spec: &RunSpec, monitor: &RunMonitor) -> Result<RunOutcome, EngineError> {
        let plan = &spec.plan;
        std::fs::create_dir_all(&spec.run_dir)?;
        plan.write_to(&spec.run_dir)?;
        let order = topological_order(plan)?;
        let rank: BTreeMap<&str, usize> = order.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let preds = plan.predecessors();
        let mut emitter = Emitter {
            run_id: spec.run_id.clone(),
            actor: spec.actor.clone(),
            next: 0,
            file: File::create(spec.run_dir.join(EVENTS_FILE))?,
            audit: AuditLog::open(spec.run_dir.join(RUN_AUDIT_FILE)),
            monitor,
        };

        let mut status: BTreeMap<&str, StepStatus> = order.iter().map(|s| (s.as_str(), StepStatus::Pending)).collect();
        let mut free: Vec<u32> = spec.executors.iter().map(|e| e.capacity).collect();
        let mut assigned: BTreeMap<String, usize> = BTreeMap::new();
        let mut results: BTreeMap<String, StepResult> = BTreeMap::new();

        let executors_json: Vec<Value> = spec.executors.iter().map(|e| serde_json::to_value(e).expect("serializes")).collect();
        emitter.emit(
            EventKind::RunStarted,
            None,
            json!({ "plan_id": plan.plan_id, "policy": spec.policy.as_str(), "executors": executors_json, "steps": order }),
            |s, t| {
                s.phase = RunPhase::Running;
                s.started = Some(t.to_string());
            },
        )?;

        let (tx, rx) = mpsc::channel::<Msg>();
        std::thread::scope(|scope| -> Result<(), EngineError> {
            let mut running = 0usize;
            loop {
                // Dispatch every ready step that has a free executor, in plan order.
                let ready: Vec<&str> = order
                    .iter()
                    .map(String::as_str)
                    .filter(|id| status[id] == StepStatus::Pending)
                    .filter(|id| preds[id].iter().all(|p| status[p] == StepStatus::Done))
                    .collect();
                for id in ready {
                    let step = plan.step(id).expect("known step");
                    let Some(ex) = pick_executor(&spec.executors, &free, step.executor_constraint.as_deref()) else { continue };
                    free[ex] -= 1;
                    running += 1;
                    status.insert(id, StepStatus::Running);
                    assigned.insert(id.to_string(), ex);
                    let executor = &spec.executors[ex];
                    emitter.emit(
                        EventKind::StepStarted,
                        Some(id),
                        json!({ "executor_id": executor.executor_id, "kind": step.kind }),
                        |s, t| {
                            let st = s.steps.get_mut(id).expect("known");
                            st.status = StepStatus::Running;
                            st.executor_id = Some(executor.executor_id.clone());
                            st.started = Some(t.to_string());
                        },
                    )?;
                    let tx = tx.clone();
                    scope.spawn(move || {
                        let result = self.execute_step(spec, step, executor, &tx);
                        let _ = tx.send(Msg::Done(result));
                    });
                }
                if running == 0 {
                    break;
                }
                match rx.recv().expect("workers hold senders while running") {
                    Msg::Progress(id, p) => {
                        emitter.emit(
                            EventKind::StepProgress,
                            Some(&id),
                            json!({ "progress": p.progress, "message": p.message }),
                            |_, _| {},
                        )?;
                    }
                    Msg::Done(result) => {
                        running -= 1;
                        let id = plan.step(&result.step_id).expect("known").step_id.as_str();
                        free[assigned[id]] += 1;
                        let ok = result.verdict == StepVerdict::Pass;
                        let new_status = if ok { StepStatus::Done } else { StepStatus::Failed };
                        status.insert(id, new_status);
                        let verdict = result.verdict;
                        let payload = json!({
                            "status": new_status,
                            "verdict": verdict,
                            "reason": result.reason,
                            "metrics": result.metrics,
                            "artefacts": result.artefact_digests(),
                        });
                        persist_step_result(&spec.run_dir, &result)?;
                        results.insert(id.to_string(), result);
                        emitter.emit(EventKind::StepFinished, Some(id), payload, |s, t| {
                            let st = s.steps.get_mut(id).expect("known");
                            st.status = new_status;
                            st.verdict = Some(verdict);
                            st.finished = Some(t.to_string());
                        })?;
                        if !ok {
                            let mut doomed: Vec<&str> = match spec.policy {
                                FailurePolicy::Continue => plan
                                    .descendants(id)
                                    .iter()
                                    .filter_map(|d| status.get_key_value(d.as_str()).map(|(k, _)| *k))
                                    .collect(),
                                FailurePolicy::FailFast => status.keys().copied().collect(),
                            };
                            doomed.retain(|d| status[d] == StepStatus::Pending);
                            doomed.sort_by_key(|d| rank[d]);
                            for d in doomed {
                                status.insert(d, StepStatus::Skipped);
                                emitter.emit(
                                    EventKind::StepFinished,
                                    Some(d),
                                    json!({ "status": StepStatus::Skipped, "skipped_because": id }),
                                    |s, t| {
                                        let st = s.steps.get_mut(d).expect("known");
                                        st.status = StepStatus::Skipped;
                                        st.finished = Some(t.to_string());
                                    },
                                )?;
                            }
                        }
                    }
                }
            }
            Ok(())
        })?;

        // Nothing can still be pending: every step either ran or was skipped.
        debug_assert!(status.values().all(|s| matches!(s, StepStatus::Done | StepStatus::Failed | StepStatus::Skipped)));
        let counts = |want: StepStatus| status.values().filter(|s| **s == want).count();
        emitter.emit(
            EventKind::RunFinished,
            None,
            json!({
                "done": counts(StepStatus::Done),
                "failed": counts(StepStatus::Failed),
                "skipped": counts(StepStatus::Skipped),
            }),
            |s, t| {
                s.phase = RunPhase::Finished;
                s.finished = Some(t.to_string());
            },
        )?;
        emitter.file.sync_all()?;
        let state = monitor.state();
        debug_assert_eq!(state.count(StepStatus::Pending), 0);
        Ok(RunOutcome { state, results })
    }

    fn execute_step(&self, spec: &RunSpec, step: &PlanStep, executor: &ExecutorDescriptor, tx: &mpsc::Sender<Msg>) -> StepResult {
        if executor.latency_injection_ms > 0 {
            std::thread::sleep(Duration::from_millis(executor.latency_injection_ms));
        }
        let node_dir = spec.run_dir.join("nodes").join(&executor.executor_id).join(&step.step_id);
        let step_dir = spec.run_dir.join("steps").join(&step.step_id);
        let outcome = match &step.binding {
            StepBinding::Control { control_id, activity, control_type } => {
                self.control_check(spec, step, executor, control_id, activity, control_type.as_deref())
            }
            StepBinding::Module { name, version, checksum, .. } => {
                self.module_step(step, executor, &node_dir, &step_dir, name, version, checksum, tx)
            }
        };
        let result = outcome.unwrap_or_else(|(reason, msg)| StepResult::error(&step.step_id, &executor.executor_id, reason, msg));
        if executor.latency_injection_ms > 0 {
            std::thread::sleep(Duration::from_millis(executor.latency_injection_ms));
        }
        result
    }

    fn control_check(
        &self,
        spec: &RunSpec,
        step: &PlanStep,
        executor: &ExecutorDescriptor,
        control_id: &str,
        activity: &str,
        control_type: Option<&str>,
    ) -> Result<StepResult, (FailureReason, String)> {
        let status = spec.control_statuses.get(control_id).copied().unwrap_or(ControlStatus::Declared);
        let evidence = json!({
            "control_id": control_id,
            "activity": activity,
            "control_type": control_type,
            "dimension": step.dimension,
            "status": status,
            "guidelines": step.guidelines,
        });
        let bytes = canonical_json_pretty(&evidence).into_bytes();
        let r = self
            .store
            .put_artefact(&bytes, CONTROL_EVIDENCE_ZONE, "application/json")
            .map_err(|e| (FailureReason::LaunchFailed, e.to_string()))?;
        let dir = spec.run_dir.join("steps").join(&step.step_id).join("artefacts");
        std::fs::create_dir_all(&dir).and_then(|_| std::fs::write(dir.join("control-evidence.json"), &bytes))
            .map_err(|e| (FailureReason::LaunchFailed, e.to_string()))?;
        Ok(StepResult {
            step_id: step.step_id.clone(),
            executor_id: executor.executor_id.clone(),
            verdict: if status == ControlStatus::Rejected { StepVerdict::Fail } else { StepVerdict::Pass },
            reason: None,
            diagnostics: None,
            metrics: BTreeMap::new(),
            artefacts: vec![ProducedArtefact {
                path: "control-evidence.json".into(),
                digest: r.digest,
                size_bytes: r.size_bytes,
                zone: r.zone,
            }],
            cpu_seconds_used: 0.0,
            storage_bytes_used: r.size_bytes,
            log_digest: None,
            control_status: Some(status),
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn module_step(
        &self,
        step: &PlanStep,
        executor: &ExecutorDescriptor,
        node_dir: &Path,
        step_dir: &Path,
        name: &str,
        version: &crate::catalogue::Version,
        checksum: &str,
        tx: &mpsc::Sender<Msg>,
    ) -> Result<StepResult, (FailureReason, String)> {
        let io = |e: std::io::Error| (FailureReason::LaunchFailed, e.to_string());
        let entrypoint = self
            .entrypoint_for(&step.step_id, name, version, checksum)
            .map_err(|e| (FailureReason::LaunchFailed, e.to_string()))?;

        let inputs_dir = node_dir.join("inputs");
        let output_dir = node_dir.join("out");
        if node_dir.exists() {
            std::fs::remove_dir_all(node_dir).map_err(io)?;
        }
        std::fs::create_dir_all(&inputs_dir).map_err(io)?;
        let mut inputs = BTreeMap::new();
        for (input_name, reference) in &step.inputs {
            let digest = normalize_digest(reference)
                .map_err(|e| (FailureReason::InputUnavailable, format!("input `{input_name}`: {e}")))?;
            let located = self.store.locate(digest).map_err(|e| (FailureReason::InputUnavailable, e.to_string()))?;
            let r = located
                .first()
                .ok_or_else(|| (FailureReason::InputUnavailable, format!("input `{input_name}` ({digest}) is not in the store")))?;
            let bytes = self
                .store
                .get_artefact(r, Zone::ALL)
                .map_err(|e| (FailureReason::InputUnavailable, format!("input `{input_name}`: {e}")))?;
            let mounted = inputs_dir.join(digest);
            std::fs::write(&mounted, bytes).map_err(io)?;
            inputs.insert(digest.to_string(), mounted.display().to_string());
        }
        let job = JobDocument {
            step_id: step.step_id.clone(),
            seed: step.seed,
            inputs,
            output_dir: output_dir.display().to_string(),
            budget: step.resource_budget,
        };
        std::fs::create_dir_all(step_dir).map_err(io)?;
        std::fs::write(step_dir.join("job.json"), canonical_json_pretty(&serde_json::to_value(&job).expect("job serializes")))
            .map_err(io)?;

        let timeout = Duration::from_secs(step.resource_budget.cpu_seconds.max(1) * u64::from(self.timeout_multiplier));
        let id = step.step_id.clone();
        let tx = Mutex::new(tx.clone());
        let inv = plugin::invoke(&entrypoint, &job, timeout, &|p| {
            let _ = tx.lock().unwrap_or_else(|e| e.into_inner()).send(Msg::Progress(id.clone(), p));
        });

        let mut log = inv.stdout.clone();
        if !inv.stderr.is_empty() {
            log.extend_from_slice(b"--- stderr ---\n");
            log.extend_from_slice(&inv.stderr);
        }
        std::fs::write(step_dir.join("log.txt"), &log).map_err(io)?;
        let log_ref = self.store.put_artefact(&log, OUTPUT_ZONE, "text/plain").map_err(|e| (FailureReason::LaunchFailed, e.to_string()))?;

        let mut result = StepResult::error(&step.step_id, &executor.executor_id, FailureReason::LaunchFailed, String::new());
        result.cpu_seconds_used = inv.cpu_seconds;
        result.log_digest = Some(log_ref.digest);
        match inv.outcome {
            Err((reason, msg)) => {
                let tail = String::from_utf8_lossy(&inv.stderr);
                let tail: String = tail.chars().rev().take(2000).collect::<Vec<_>>().into_iter().rev().collect();
                result.reason = Some(reason);
                result.diagnostics = Some(if tail.trim().is_empty() { msg } else { format!("{msg}\n{}", tail.trim_end()) });
            }
            Ok(pr) => {
                let artefact_dir = step_dir.join("artefacts");
                let mut produced = Vec::new();
                for rel in &pr.artefacts {
                    let src = output_dir.join(rel);
                    let bytes = std::fs::read(&src).map_err(io)?;
                    let r = self
                        .store
                        .put_artefact(&bytes, OUTPUT_ZONE, media_hint(rel))
                        .map_err(|e| (FailureReason::LaunchFailed, e.to_string()))?;
                    let dst = artefact_dir.join(rel);
                    std::fs::create_dir_all(dst.parent().expect("has parent")).map_err(io)?;
                    std::fs::write(&dst, &bytes).map_err(io)?;
                    produced.push(ProducedArtefact { path: rel.clone(), digest: r.digest, size_bytes: r.size_bytes, zone: r.zone });
                }
                result.storage_bytes_used = produced.iter().map(|a| a.size_bytes).sum();
                result.verdict = if pr.passed { StepVerdict::Pass } else { StepVerdict::Fail };
                result.reason = None;
                result.diagnostics = None;
                result.metrics = pr.metrics;
                result.artefacts = produced;
            }
        }
        Ok(result)
    }
}

fn media_hint(path: &str) -> &'static str {
    match Path::new(path).extension().and_then(|e| e.to_str()) {
        Some("json") => "application/json",
        Some("csv") => "text/csv",
        Some("txt" | "log" | "md") => "text/plain",
        _ => "application/octet-stream",
    }
}

fn persist_step_result(run_dir: &Path, result: &StepResult) -> Result<(), EngineError> {
    let dir = run_dir.join("steps").join(&result.step_id);
    std::fs::create_dir_all(&dir)?;
    let text = canonical_json_pretty(&serde_json::to_value(result).expect("result serializes"));
    std::fs::write(dir.join("result.json"), text)?;
    Ok(())
}

/// Pinned steps wait for their executor; others take the executor with the
/// most free slots, earliest in the list on ties.
fn pick_executor(executors: &[ExecutorDescriptor], free: &[u32], constraint: Option<&str>) -> Option<usize> {
    match constraint {
        Some(id) => executors.iter().position(|e| e.executor_id == id).filter(|i| free[*i] > 0),
        None => (0..executors.len()).filter(|i| free[*i] > 0).max_by(|a, b| free[*a].cmp(&free[*b]).then(b.cmp(a))),
    }
}

/// Reads an `events.log` file.
pub fn read_events(path: &Path) -> Result<Vec<EventRecord>, EngineError> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .map(|l| serde_json::from_str(l).map_err(|e| EngineError::Io(std::io::Error::new(std::io::ErrorKind::InvalidData, e))))
        .collect()
}

/// Canonical digest of a step result document.
pub fn result_digest(result: &StepResult) -> String {
    sha256_hex(to_canonical_json(result).expect("result serializes"))
}
