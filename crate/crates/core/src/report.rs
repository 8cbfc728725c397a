//! Exit report: a machine form (canonical JSON) and Markdown renderings for
//! three audiences. Renderings differ only in section order and emphasis;
//! each one carries every fact of the machine form.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::audit::{AuditLog, ChainHead, Verdict};
use crate::dsl::{ConfigDocument, GuidelineRef};
use crate::engine::{FailureReason, ResourceReport, RunPhase, RunRecord, StepStatus, StepVerdict};
use crate::mapping::Gap;
use crate::planner::{ExecutionPlan, StepBinding, StepKind};
use crate::vocab::{ControlStatus, Dimension, Priority, RiskClass};

pub const EXIT_REPORT_SCHEMA: u32 = 1;
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Audience {
    Innovator,
    Expert,
    Regulator,
}

impl Audience {
    pub const ALL: [Audience; 3] = [Audience::Innovator, Audience::Expert, Audience::Regulator];

    pub fn as_str(self) -> &'static str {
        match self {
            Audience::Innovator => "innovator",
            Audience::Expert => "expert",
            Audience::Regulator => "regulator",
        }
    }

    pub fn file_name(self) -> String {
        format!("report.{}.md", self.as_str())
    }
}

impl std::str::FromStr for Audience {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Audience::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown audience `{s}`; expected innovator, expert or regulator"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSummary {
    pub objective_id: String,
    pub priority: Priority,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSummary {
    pub config_name: String,
    pub system_name: String,
    pub risk_class: RiskClass,
    pub domain_tag: String,
    pub dimensions: Vec<Dimension>,
    pub objectives: Vec<ObjectiveSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedStep {
    pub step_id: String,
    pub kind: StepKind,
    pub dimension: Dimension,
    /// `name@version` for tests, control id for control checks.
    pub binding: String,
    pub seed: u64,
    pub depends_on: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandboxPlan {
    pub plan_id: String,
    pub mapping_version: String,
    pub steps: Vec<PlannedStep>,
    pub waived_gaps: Vec<Gap>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlReview {
    pub step_id: String,
    pub control_id: String,
    pub activity: String,
    pub control_type: Option<String>,
    pub dimension: Dimension,
    pub status: Option<ControlStatus>,
    pub step_status: StepStatus,
    pub guidelines: Vec<GuidelineRef>,
    pub evidence: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestOutcome {
    pub step_id: String,
    pub test_type: Option<String>,
    pub module: String,
    pub status: StepStatus,
    pub verdict: Option<StepVerdict>,
    pub reason: Option<FailureReason>,
    pub metrics: BTreeMap<String, f64>,
    pub artefacts: Vec<String>,
    pub guidelines: Vec<GuidelineRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveResults {
    pub objective_id: String,
    /// Most severe verdict among executed steps (error > fail > pass).
    pub worst_verdict: Option<StepVerdict>,
    pub steps: Vec<TestOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub step_id: String,
    pub kind: StepKind,
    pub subject: String,
    pub artefacts: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChallengeSource {
    Step,
    Control,
    Gap,
    Note,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Challenge {
    pub source: ChallengeSource,
    pub subject: String,
    pub description: String,
    pub author: Option<String>,
}

/// Free-text addition to remaining challenges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportNote {
    pub author: String,
    pub subject: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditDigest {
    /// Chain file, relative to the run directory.
    pub chain: String,
    pub head: ChainHead,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sections {
    pub system_summary: SystemSummary,
    pub sandbox_plan: SandboxPlan,
    pub controls_review: Vec<ControlReview>,
    pub technical_results: Vec<ObjectiveResults>,
    pub risk_mitigation_evidence: Vec<Evidence>,
    pub remaining_challenges: Vec<Challenge>,
    pub resource_summary: ResourceReport,
    pub audit_digest: AuditDigest,
}

impl Sections {
    pub const NAMES: [&'static str; 8] = [
        "system_summary",
        "sandbox_plan",
        "controls_review",
        "technical_results",
        "risk_mitigation_evidence",
        "remaining_challenges",
        "resource_summary",
        "audit_digest",
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitReport {
    pub exit_report_schema: u32,
    pub report_id: String,
    pub run_id: String,
    pub config_digest: String,
    pub plan_id: String,
    pub generated: String,
    pub sections: Sections,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ReportError {
    #[error("run {0} has not finished")]
    Unfinished(String),
    #[error("audit chain is broken at entry {broken_at}: {reason}")]
    BrokenChain { broken_at: u64, reason: crate::audit::BreakReason },
    #[error("audit chain unreadable: {0}")]
    Chain(String),
    #[error("run {run_id} belongs to plan {run_plan}, not {plan}")]
    PlanMismatch { run_id: String, run_plan: String, plan: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveFeedback {
    pub objective_id: String,
    pub worst_verdict: Option<StepVerdict>,
    /// `step/metric` to value.
    pub headline_metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackSummary {
    pub objectives: Vec<ObjectiveFeedback>,
    pub gaps: Vec<Gap>,
}

/// Worst verdict under error > fail > pass.
pub fn worst_verdict(verdicts: impl IntoIterator<Item = StepVerdict>) -> Option<StepVerdict> {
    verdicts.into_iter().max()
}

fn binding_label(b: &StepBinding) -> String {
    match b {
        StepBinding::Module { name, version, .. } => format!("{name}@{version}"),
        StepBinding::Control { control_id, .. } => control_id.clone(),
    }
}

/// Builds the report. Refuses unfinished runs and broken chains.
pub fn generate(
    run: &RunRecord,
    plan: &ExecutionPlan,
    config: &ConfigDocument,
    run_chain: &AuditLog,
    chain_name: &str,
    notes: &[ReportNote],
) -> Result<ExitReport, ReportError> {
    if run.state.phase != RunPhase::Finished {
        return Err(ReportError::Unfinished(run.run_id.clone()));
    }
    if run.plan_id != plan.plan_id {
        return Err(ReportError::PlanMismatch { run_id: run.run_id.clone(), run_plan: run.plan_id.clone(), plan: plan.plan_id.clone() });
    }
    let head = match run_chain.verify().map_err(|e| ReportError::Chain(e.to_string()))? {
        Verdict::Ok { head, .. } => head,
        Verdict::Broken { broken_at, reason, .. } => return Err(ReportError::BrokenChain { broken_at, reason }),
    };

    let preds = plan.predecessors();
    let status_of = |id: &str| run.state.steps.get(id).map_or(StepStatus::Pending, |s| s.status);

    let system_summary = SystemSummary {
        config_name: config.name.clone(),
        system_name: config.system.system_name.clone(),
        risk_class: config.system.risk_class,
        domain_tag: config.system.domain_tag.clone(),
        dimensions: config.system.dimensions.iter().copied().collect(),
        objectives: {
            let mut v: Vec<ObjectiveSummary> = config
                .objectives
                .iter()
                .map(|o| ObjectiveSummary { objective_id: o.objective_id.clone(), priority: o.priority })
                .collect();
            v.sort_by(|a, b| a.objective_id.cmp(&b.objective_id));
            v
        },
    };
    let sandbox_plan = SandboxPlan {
        plan_id: plan.plan_id.clone(),
        mapping_version: plan.mapping_version.clone(),
        steps: plan
            .steps
            .iter()
            .map(|s| {
                let mut depends_on: Vec<String> = preds[s.step_id.as_str()].iter().map(|p| p.to_string()).collect();
                depends_on.sort();
                PlannedStep {
                    step_id: s.step_id.clone(),
                    kind: s.kind,
                    dimension: s.dimension,
                    binding: binding_label(&s.binding),
                    seed: s.seed,
                    depends_on,
                }
            })
            .collect(),
        waived_gaps: plan.waived_gaps.clone(),
    };

    let mut controls_review = Vec::new();
    let mut by_objective: BTreeMap<String, Vec<TestOutcome>> =
        config.objectives.iter().map(|o| (o.objective_id.clone(), Vec::new())).collect();
    let mut evidence = Vec::new();
    let mut challenges = Vec::new();
    for s in &plan.steps {
        let result = run.results.get(&s.step_id);
        let status = status_of(&s.step_id);
        let artefacts: Vec<String> = result.map(|r| r.artefacts.iter().map(|a| a.digest.clone()).collect()).unwrap_or_default();
        match &s.binding {
            StepBinding::Control { control_id, activity, control_type } => {
                let control_status = result.and_then(|r| r.control_status);
                if control_status == Some(ControlStatus::Accepted) {
                    evidence.push(Evidence {
                        step_id: s.step_id.clone(),
                        kind: s.kind,
                        subject: control_id.clone(),
                        artefacts: artefacts.clone(),
                    });
                } else {
                    let state = control_status.map_or_else(|| format!("not checked ({})", status_name(status)), |c| c.to_string());
                    challenges.push(Challenge {
                        source: ChallengeSource::Control,
                        subject: control_id.clone(),
                        description: format!("control `{activity}` is {state}, not accepted"),
                        author: None,
                    });
                }
                controls_review.push(ControlReview {
                    step_id: s.step_id.clone(),
                    control_id: control_id.clone(),
                    activity: activity.clone(),
                    control_type: control_type.clone(),
                    dimension: s.dimension,
                    status: control_status,
                    step_status: status,
                    guidelines: s.guidelines.clone(),
                    evidence: artefacts,
                });
            }
            StepBinding::Module { .. } => {
                let verdict = result.map(|r| r.verdict);
                let objective = s.objective.clone().unwrap_or_default();
                match verdict {
                    Some(StepVerdict::Pass) => evidence.push(Evidence {
                        step_id: s.step_id.clone(),
                        kind: s.kind,
                        subject: objective.clone(),
                        artefacts: artefacts.clone(),
                    }),
                    Some(v) => {
                        let why = result.and_then(|r| r.reason).map(|r| format!(" ({r})")).unwrap_or_default();
                        challenges.push(Challenge {
                            source: ChallengeSource::Step,
                            subject: s.step_id.clone(),
                            description: format!("test for `{objective}` ended with verdict {}{why}", v.as_str()),
                            author: None,
                        });
                    }
                    None => challenges.push(Challenge {
                        source: ChallengeSource::Step,
                        subject: s.step_id.clone(),
                        description: format!("test for `{objective}` did not run ({})", status_name(status)),
                        author: None,
                    }),
                }
                by_objective.entry(objective).or_default().push(TestOutcome {
                    step_id: s.step_id.clone(),
                    test_type: s.test_type.clone(),
                    module: binding_label(&s.binding),
                    status,
                    verdict,
                    reason: result.and_then(|r| r.reason),
                    metrics: result.map(|r| r.metrics.clone()).unwrap_or_default(),
                    artefacts,
                    guidelines: s.guidelines.clone(),
                });
            }
        }
    }
    for g in &plan.waived_gaps {
        challenges.push(Challenge {
            source: ChallengeSource::Gap,
            subject: match &g.test_type {
                Some(t) => format!("{}/{t}", g.objective_id),
                None => g.objective_id.clone(),
            },
            description: format!("coverage gap waived: {}", g.reason),
            author: None,
        });
    }
    for n in notes {
        challenges.push(Challenge {
            source: ChallengeSource::Note,
            subject: n.subject.clone(),
            description: n.text.clone(),
            author: Some(n.author.clone()),
        });
    }
    let technical_results = by_objective
        .into_iter()
        .map(|(objective_id, steps)| ObjectiveResults {
            worst_verdict: worst_verdict(steps.iter().filter_map(|s| s.verdict)),
            objective_id,
            steps,
        })
        .collect();

    Ok(ExitReport {
        exit_report_schema: EXIT_REPORT_SCHEMA,
        report_id: uuid::Uuid::new_v4().to_string(),
        run_id: run.run_id.clone(),
        config_digest: run.config_digest.clone(),
        plan_id: plan.plan_id.clone(),
        generated: crate::audit::now_rfc3339(),
        sections: Sections {
            system_summary,
            sandbox_plan,
            controls_review,
            technical_results,
            risk_mitigation_evidence: evidence,
            remaining_challenges: challenges,
            resource_summary: run.resources.clone(),
            audit_digest: AuditDigest { chain: chain_name.to_string(), head },
        },
    })
}

/// Checks the report's audit digest against the chain as it is now.
pub fn verify_audit_digest(report: &ExitReport, run_chain: &AuditLog) -> Result<(), ReportError> {
    let entries = match run_chain.verify().map_err(|e| ReportError::Chain(e.to_string()))? {
        Verdict::Ok { .. } => run_chain.entries().map_err(|e| ReportError::Chain(e.to_string()))?,
        Verdict::Broken { broken_at, reason, .. } => return Err(ReportError::BrokenChain { broken_at, reason }),
    };
    let head = &report.sections.audit_digest.head;
    let ok = match head.length {
        0 => true,
        n => entries.get(n as usize - 1).is_some_and(|e| e.entry_hash == head.head_hash),
    };
    if ok {
        Ok(())
    } else {
        Err(ReportError::BrokenChain { broken_at: head.length.saturating_sub(1), reason: crate::audit::BreakReason::HashMismatch })
    }
}

pub fn summarize_feedback(report: &ExitReport) -> FeedbackSummary {
    FeedbackSummary {
        objectives: report
            .sections
            .technical_results
            .iter()
            .map(|o| ObjectiveFeedback {
                objective_id: o.objective_id.clone(),
                worst_verdict: o.worst_verdict,
                headline_metrics: o
                    .steps
                    .iter()
                    .flat_map(|s| s.metrics.iter().map(move |(k, v)| (format!("{}/{k}", s.step_id), *v)))
                    .collect(),
            })
            .collect(),
        gaps: report.sections.sandbox_plan.waived_gaps.clone(),
    }
}

fn status_name(s: StepStatus) -> &'static str {
    match s {
        StepStatus::Pending => "pending",
        StepStatus::Running => "running",
        StepStatus::Done => "done",
        StepStatus::Failed => "failed",
        StepStatus::Skipped => "skipped",
    }
}

/// Decimal rendering shared by all audiences.
pub fn fmt_number(x: f64) -> String {
    format!("{x}")
}

/// Every `` `step/metric` = value `` occurrence in a rendering.
pub fn extract_metrics(markdown: &str) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for line in markdown.lines() {
        let mut rest = line;
        while let Some(start) = rest.find("`") {
            let after = &rest[start + 1..];
            let Some(end) = after.find("` = ") else { break };
            let name = &after[..end];
            let tail = &after[end + 4..];
            let value: String = tail.chars().take_while(|c| !c.is_whitespace() && *c != ',' && *c != ';').collect();
            if name.contains('/') && !value.is_empty() {
                out.push((name.to_string(), value));
            }
            rest = tail;
        }
    }
    out.sort();
    out
}

fn opt<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), |v| v.to_string())
}

fn verdict_name(v: Option<StepVerdict>) -> &'static str {
    v.map_or("not executed", StepVerdict::as_str)
}

fn guidelines(g: &[GuidelineRef]) -> String {
    if g.is_empty() {
        return "none".into();
    }
    g.iter().map(|g| format!("{} {}", g.source, g.clause)).collect::<Vec<_>>().join("; ")
}

type Section = fn(&ExitReport, Audience, &mut String);

fn system_summary(r: &ExitReport, _: Audience, out: &mut String) {
    let s = &r.sections.system_summary;
    let _ = writeln!(out, "## System summary\n");
    let _ = writeln!(out, "- System: {} (`{}`)", s.system_name, s.config_name);
    let _ = writeln!(out, "- Risk class: {}", s.risk_class);
    let _ = writeln!(out, "- Domain: {}", if s.domain_tag.is_empty() { "unspecified" } else { &s.domain_tag });
    let dims: Vec<&str> = s.dimensions.iter().map(|d| d.as_str()).collect();
    let _ = writeln!(out, "- Dimensions: {}", dims.join(", "));
    let objs: Vec<String> = s.objectives.iter().map(|o| format!("{} ({})", o.objective_id, o.priority)).collect();
    let _ = writeln!(out, "- Objectives: {}\n", if objs.is_empty() { "none".into() } else { objs.join(", ") });
}

fn sandbox_plan(r: &ExitReport, _: Audience, out: &mut String) {
    let p = &r.sections.sandbox_plan;
    let _ = writeln!(out, "## Sandbox plan\n");
    let _ = writeln!(out, "Plan `{}` (mapping {}), {} step(s).\n", p.plan_id, p.mapping_version, p.steps.len());
    if p.steps.is_empty() {
        let _ = writeln!(out, "_No steps planned._\n");
    } else {
        let _ = writeln!(out, "| Step | Kind | Dimension | Binding | Seed | After |\n|---|---|---|---|---|---|");
        for s in &p.steps {
            let kind = match s.kind {
                StepKind::Test => "test",
                StepKind::ControlCheck => "control check",
            };
            let after = if s.depends_on.is_empty() { "-".to_string() } else { s.depends_on.join(", ") };
            let _ = writeln!(out, "| {} | {kind} | {} | {} | {} | {after} |", s.step_id, s.dimension, s.binding, s.seed);
        }
        out.push('\n');
    }
    if p.waived_gaps.is_empty() {
        let _ = writeln!(out, "Waived gaps: none.\n");
    } else {
        let _ = writeln!(out, "Waived gaps:\n");
        for g in &p.waived_gaps {
            let _ = writeln!(out, "- {}{}: {}", g.objective_id, g.test_type.as_ref().map(|t| format!("/{t}")).unwrap_or_default(), g.reason);
        }
        out.push('\n');
    }
}

fn controls_review(r: &ExitReport, audience: Audience, out: &mut String) {
    let c = &r.sections.controls_review;
    let _ = writeln!(out, "## Controls review\n");
    if c.is_empty() {
        let _ = writeln!(out, "_No controls declared._\n");
        return;
    }
    for x in c {
        let status = opt(&x.status);
        let status = if audience == Audience::Regulator { format!("**{status}**") } else { status };
        let _ = writeln!(
            out,
            "- {} ({}, {}): status {status}; control type {}; guidelines: {}; evidence: {}",
            x.control_id,
            x.activity,
            x.dimension,
            opt(&x.control_type),
            guidelines(&x.guidelines),
            if x.evidence.is_empty() { "none".into() } else { x.evidence.join(", ") }
        );
    }
    out.push('\n');
}

fn technical_results(r: &ExitReport, audience: Audience, out: &mut String) {
    let t = &r.sections.technical_results;
    let _ = writeln!(out, "## Technical results\n");
    if t.iter().all(|o| o.steps.is_empty()) {
        let _ = writeln!(out, "_No tests executed._\n");
    }
    for o in t {
        let worst = verdict_name(o.worst_verdict);
        let worst = if audience == Audience::Innovator { format!("**{worst}**") } else { worst.to_string() };
        let _ = writeln!(out, "### {}: {worst}\n", o.objective_id);
        if o.steps.is_empty() {
            let _ = writeln!(out, "No test steps for this objective.\n");
            continue;
        }
        for s in &o.steps {
            let reason = s.reason.map(|r| format!(" ({r})")).unwrap_or_default();
            let _ = writeln!(
                out,
                "- {} [{}{}]: {}{reason}",
                s.step_id,
                s.module,
                s.test_type.as_ref().map(|t| format!(", {t}")).unwrap_or_default(),
                verdict_name(s.verdict)
            );
            let metrics: Vec<String> = s.metrics.iter().map(|(k, v)| format!("`{}/{k}` = {}", s.step_id, fmt_number(*v))).collect();
            if !metrics.is_empty() {
                if audience == Audience::Expert {
                    for m in metrics {
                        let _ = writeln!(out, "  - {m}");
                    }
                } else {
                    let _ = writeln!(out, "  - metrics: {}", metrics.join(", "));
                }
            }
            if audience == Audience::Expert || !s.artefacts.is_empty() {
                let _ = writeln!(out, "  - artefacts: {}", if s.artefacts.is_empty() { "none".into() } else { s.artefacts.join(", ") });
            }
            if !s.guidelines.is_empty() {
                let _ = writeln!(out, "  - guidelines: {}", guidelines(&s.guidelines));
            }
        }
        out.push('\n');
    }
}

fn risk_mitigation_evidence(r: &ExitReport, _: Audience, out: &mut String) {
    let e = &r.sections.risk_mitigation_evidence;
    let _ = writeln!(out, "## Risk mitigation evidence\n");
    if e.is_empty() {
        let _ = writeln!(out, "_No passing tests or accepted controls yet._\n");
        return;
    }
    for x in e {
        let kind = match x.kind {
            StepKind::Test => "test",
            StepKind::ControlCheck => "control",
        };
        let arts = if x.artefacts.is_empty() { "none".into() } else { x.artefacts.join(", ") };
        let _ = writeln!(out, "- {} ({kind} for {}): {arts}", x.step_id, x.subject);
    }
    out.push('\n');
}

fn remaining_challenges(r: &ExitReport, audience: Audience, out: &mut String) {
    let c = &r.sections.remaining_challenges;
    let _ = writeln!(out, "## Remaining challenges\n");
    if c.is_empty() {
        let _ = writeln!(out, "_None recorded._\n");
        return;
    }
    // The authority reads waivers first.
    let mut items: Vec<&Challenge> = c.iter().collect();
    if audience == Audience::Regulator {
        items.sort_by_key(|x| x.source != ChallengeSource::Gap);
    }
    for x in items {
        let source = match x.source {
            ChallengeSource::Step => "step",
            ChallengeSource::Control => "control",
            ChallengeSource::Gap => "waiver",
            ChallengeSource::Note => "note",
        };
        let by = x.author.as_ref().map(|a| format!(" (by {a})")).unwrap_or_default();
        let _ = writeln!(out, "- [{source}] {}: {}{by}", x.subject, x.description);
    }
    out.push('\n');
}

fn resource_summary(r: &ExitReport, _: Audience, out: &mut String) {
    let s = &r.sections.resource_summary;
    let _ = writeln!(out, "## Resource summary\n");
    let _ = writeln!(out, "- Total CPU seconds: {}", fmt_number(s.total_cpu_seconds));
    let _ = writeln!(out, "- Total storage bytes: {}", s.total_storage_bytes);
    for (id, u) in &s.per_executor {
        let _ = writeln!(out, "- Executor {id}: {} step(s), {} cpu s, {} bytes", u.steps, fmt_number(u.cpu_seconds_used), u.storage_bytes_used);
    }
    let _ = writeln!(out, "- Over budget: {}\n", if s.flagged.is_empty() { "none".into() } else { s.flagged.join(", ") });
}

fn audit_digest(r: &ExitReport, _: Audience, out: &mut String) {
    let a = &r.sections.audit_digest;
    let _ = writeln!(out, "## Audit digest\n");
    let _ = writeln!(out, "Chain `{}`: {} entries, head `{}`.", a.chain, a.head.length, a.head.head_hash);
}

/// Markdown for one audience. Deterministic in the report's content.
pub fn render_human(report: &ExitReport, audience: Audience) -> String {
    let order: [Section; 8] = match audience {
        Audience::Regulator => [
            controls_review,
            remaining_challenges,
            system_summary,
            sandbox_plan,
            technical_results,
            risk_mitigation_evidence,
            resource_summary,
            audit_digest,
        ],
        Audience::Expert => [
            technical_results,
            resource_summary,
            sandbox_plan,
            system_summary,
            controls_review,
            risk_mitigation_evidence,
            remaining_challenges,
            audit_digest,
        ],
        Audience::Innovator => [
            system_summary,
            technical_results,
            remaining_challenges,
            risk_mitigation_evidence,
            controls_review,
            sandbox_plan,
            resource_summary,
            audit_digest,
        ],
    };
    let mut out = String::new();
    let _ = writeln!(out, "# Exit report: {}\n", report.sections.system_summary.system_name);
    let _ = writeln!(
        out,
        "Report `{}` for run `{}` ({} view), generated {}. Config digest `{}`.\n",
        report.report_id,
        report.run_id,
        audience.as_str(),
        report.generated,
        report.config_digest
    );
    for section in order {
        section(report, audience, &mut out);
    }
    out
}
