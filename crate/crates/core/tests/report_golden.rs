mod support;

use std::collections::BTreeMap;

use sbx_core::audit::AuditLog;
use sbx_core::dsl;
use sbx_core::engine::{
    ExecutorDescriptor, FailurePolicy, FailureReason, ProducedArtefact, RunOutcome, RunPhase, RunRecord, RunSpec, RunState,
    StepResult, StepState, StepStatus, StepVerdict,
};
use sbx_core::planner::StepKind;
use sbx_core::report::{self, Audience, ExitReport, ReportNote, Sections};
use sbx_core::vocab::{ControlStatus, Zone};
use serde_json::json;

const T0: &str = "2026-03-02T09:00:00Z";
const T1: &str = "2026-03-02T09:05:00Z";

fn result(step_id: &str, verdict: StepVerdict, metrics: &[(&str, f64)]) -> StepResult {
    StepResult {
        step_id: step_id.into(),
        executor_id: "local".into(),
        verdict,
        reason: None,
        diagnostics: None,
        metrics: metrics.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        artefacts: vec![],
        cpu_seconds_used: 0.0,
        storage_bytes_used: 0,
        log_digest: None,
        control_status: None,
    }
}

/// A finished Safe Corp run with one result of each kind, fixed in time.
fn fixture(dir: &std::path::Path) -> (ExitReport, Vec<(Audience, String)>) {
    let plan = support::safe_corp_plan(1);
    let config = dsl::parse(&support::fixture_text("safe_corp/cycle1.sbx")).unwrap();
    let mut results = BTreeMap::new();
    for s in &plan.steps {
        let r = match (s.kind, s.step_id.as_str()) {
            (StepKind::ControlCheck, id) => {
                let mut r = result(id, StepVerdict::Pass, &[]);
                r.control_status = Some(if id == "ctl-oversight" { ControlStatus::Declared } else { ControlStatus::Inspected });
                r
            }
            (_, "t-robustness") => {
                let mut r = result("t-robustness", StepVerdict::Pass, &[("accuracy_drop", 0.031), ("noise_level", 0.1)]);
                r.cpu_seconds_used = 4.5;
                r.storage_bytes_used = 2048;
                r.log_digest = Some(format!("sha256:{}", "a".repeat(64)));
                r.artefacts.push(ProducedArtefact {
                    path: "curves.csv".into(),
                    digest: format!("sha256:{}", "b".repeat(64)),
                    size_bytes: 2048,
                    zone: Zone::Confidential,
                });
                r
            }
            (_, "t-fairness") => {
                let mut r = result("t-fairness", StepVerdict::Fail, &[("disparity", 0.18), ("threshold", 0.1)]);
                r.cpu_seconds_used = 2.25;
                r
            }
            (_, id) => {
                let mut r = result(id, StepVerdict::Error, &[]);
                r.reason = Some(FailureReason::NonzeroExit);
                r.diagnostics = Some("exit status 2".into());
                r
            }
        };
        results.insert(s.step_id.clone(), r);
    }
    let steps = plan
        .steps
        .iter()
        .map(|s| {
            let ok = results[&s.step_id].verdict != StepVerdict::Error;
            let st = StepState {
                status: if ok { StepStatus::Done } else { StepStatus::Failed },
                executor_id: Some("local".into()),
                verdict: Some(results[&s.step_id].verdict),
                started: Some(T0.into()),
                finished: Some(T1.into()),
            };
            (s.step_id.clone(), st)
        })
        .collect();
    let state = RunState {
        run_id: "run-golden".into(),
        plan_id: plan.plan_id.clone(),
        phase: RunPhase::Finished,
        steps,
        started: Some(T0.into()),
        finished: Some(T1.into()),
    };
    let spec = RunSpec {
        run_id: "run-golden".into(),
        plan: plan.clone(),
        executors: vec![ExecutorDescriptor::local("local", 2)],
        policy: FailurePolicy::Continue,
        control_statuses: BTreeMap::new(),
        run_dir: dir.to_path_buf(),
        actor: "technical_expert:expert".into(),
    };
    let run = RunRecord::new(&spec, RunOutcome { state, results }, T0.into());

    let chain = AuditLog::open(dir.join("audit.log"));
    chain.append_at("technical_expert:expert", "run.started", &json!({ "run_id": "run-golden" }), T0).unwrap();
    chain.append_at("technical_expert:expert", "run.finished", &json!({ "run_id": "run-golden" }), T1).unwrap();

    let notes = [ReportNote {
        author: "competent_authority:authority".into(),
        subject: "ctl-oversight".into(),
        text: "Oversight protocol still to be inspected on site.".into(),
    }];
    let mut rep = report::generate(&run, &plan, &config, &chain, "runs/run-golden/audit.log", &notes).unwrap();
    rep.report_id = "report-golden".into();
    rep.generated = T1.into();
    report::verify_audit_digest(&rep, &chain).unwrap();
    let rendered = Audience::ALL.iter().map(|a| (*a, report::render_human(&rep, *a))).collect();
    (rep, rendered)
}

fn golden(name: &str, actual: &str) {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    if std::env::var_os("SBX_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, actual).unwrap();
    }
    let expected = std::fs::read_to_string(&path).unwrap_or_else(|_| panic!("missing {}; run with SBX_BLESS=1", path.display()));
    assert_eq!(actual, expected, "{name} drifted; rerun with SBX_BLESS=1 if intended");
}

#[test]
fn renderings_match_golden_files() {
    let dir = tempfile::tempdir().unwrap();
    let (rep, rendered) = fixture(dir.path());
    golden("report.json", &serde_json::to_string_pretty(&rep).unwrap());
    for (a, md) in rendered {
        golden(&a.file_name(), &md);
    }
}

#[test]
fn report_has_every_section() {
    let dir = tempfile::tempdir().unwrap();
    let (rep, _) = fixture(dir.path());
    let v = serde_json::to_value(&rep.sections).unwrap();
    let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    let mut names = Sections::NAMES.to_vec();
    names.sort();
    assert_eq!(keys, names);
}

#[test]
fn every_audience_carries_the_same_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (rep, rendered) = fixture(dir.path());
    let mut want: Vec<(String, String)> = rep
        .sections
        .technical_results
        .iter()
        .flat_map(|o| o.steps.iter())
        .flat_map(|t| t.metrics.iter().map(move |(k, v)| (format!("{}/{k}", t.step_id), report::fmt_number(*v))))
        .collect();
    want.sort();
    assert!(!want.is_empty());
    for (a, md) in rendered {
        assert_eq!(report::extract_metrics(&md), want, "{}", a.as_str());
    }
}
