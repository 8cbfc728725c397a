use std::os::unix::fs::PermissionsExt;

use super::*;
use crate::catalogue::Version;
use crate::engine::StepStatus;
use crate::vocab::{LicenseClass, Resources};

const FIXTURES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/safe_corp");

const PLUGIN: &str = r#"cat > /dev/null
echo "ok" > out.txt
printf '{"verdict":"pass","metrics":{"score":0.9},"artefacts":["out.txt"]}' > result.json"#;

fn fixture(name: &str) -> String {
    std::fs::read_to_string(Path::new(FIXTURES).join(name)).unwrap()
}

struct Ws {
    _dir: tempfile::TempDir,
    ws: Workspace,
}

fn who(ws: &Workspace, id: &str) -> Principal {
    ws.principals().principal(id).unwrap().clone()
}

fn setup() -> Ws {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("ws");
    let mut ws = Workspace::init(&root, None).unwrap();
    ws.set_mapping(MappingTable::parse(&fixture("mapping.sbx")).unwrap());
    let expert = who(&ws, "expert");
    std::fs::create_dir_all(root.join("modules")).unwrap();
    let text = format!("#!/bin/sh\n{PLUGIN}\n");
    let path = root.join("modules/generic.sh");
    std::fs::write(&path, &text).unwrap();
    std::fs::set_permissions(&path, std::fs::Permissions::from_mode(0o755)).unwrap();
    for (cap, dim) in [
        ("noise-perturbation", Dimension::FinalProduct),
        ("bias-detection", Dimension::DataModels),
        ("output-explainability", Dimension::FinalProduct),
    ] {
        ws.register_module(
            Some(&expert),
            ModuleDescriptor {
                name: cap.into(),
                version: Version::new(1, 0, 0),
                provides: vec![cap.into()],
                test_types: vec![cap.into()],
                dimension: dim,
                requires: vec![],
                resource_estimate: Resources { cpu_seconds: 5, storage_bytes: 1 << 20 },
                entrypoint: "modules/generic.sh".into(),
                checksum: sha256_hex(text.as_bytes()),
                license_class: LicenseClass::Open,
            },
        )
        .unwrap();
    }
    let provider = who(&ws, "provider");
    let data = std::fs::read(Path::new(FIXTURES).join("dataset.csv")).unwrap();
    ws.put_artefact(Some(&provider), &data, Zone::Shared, "text/csv").unwrap();
    Ws { _dir: dir, ws }
}

fn entries(ws: &Workspace) -> Vec<crate::audit::AuditEntry> {
    ws.audit_log().entries().unwrap()
}

fn plan_cycle1(ws: &Workspace) -> ExecutionPlan {
    let provider = who(ws, "provider");
    let out = ws.submit_config(Some(&provider), &fixture("cycle1.sbx")).unwrap();
    assert!(out.accepted());
    ws.assemble_plan_for(Some(&who(ws, "expert")), out.config_digest.as_deref().unwrap(), false).unwrap()
}

fn run_plan(ws: &Workspace, plan: &ExecutionPlan) -> RunRecord {
    let expert = who(ws, "expert");
    let RunStart::New(spec) = ws.start_run(Some(&expert), &plan.plan_id, vec![ExecutorDescriptor::local("local-0", 2)], FailurePolicy::Continue, None).unwrap()
    else {
        panic!("new run expected")
    };
    let monitor = RunMonitor::new(RunState::new(&spec.run_id, &spec.plan));
    ws.execute(&spec, &monitor).unwrap()
}

#[test]
fn every_mutation_appends_one_entry() {
    let w = setup();
    let ws = &w.ws;
    // 3 modules + 1 artefact.
    assert_eq!(entries(&ws).len(), 4);
    let provider = who(&ws, "provider");
    ws.submit_config(Some(&provider), &fixture("cycle1.sbx")).unwrap();
    assert_eq!(entries(&ws).len(), 5);
    let bad = ws.submit_config(Some(&provider), "sandbox \"x\" {").unwrap();
    assert!(!bad.accepted() && bad.parse_error.is_some());
    let e = entries(&ws);
    assert_eq!(e.len(), 6);
    assert_eq!(e[5].action, "config.rejected");
}

#[test]
fn denial_is_recorded_and_changes_nothing_else() {
    let w = setup();
    let ws = &w.ws;
    let before = ws.store().records().unwrap();
    let auditor = who(&ws, "auditor");
    let err = ws.submit_config(Some(&auditor), &fixture("cycle1.sbx")).unwrap_err();
    assert_eq!(err.code(), "forbidden");
    assert_eq!(ws.store().records().unwrap(), before);
    let last = entries(&ws).pop().unwrap();
    assert_eq!(last.action, "access.denied");
    assert_eq!(last.actor, "auditor:auditor");
    let err = ws.submit_config(None, &fixture("cycle1.sbx")).unwrap_err();
    assert_eq!(err.code(), "unauthenticated");
    assert_eq!(entries(&ws).pop().unwrap().actor, "anonymous");
}

#[test]
fn pipeline_produces_verified_report() {
    let w = setup();
    let ws = &w.ws;
    let plan = plan_cycle1(&ws);
    assert_eq!(plan.steps.len(), 6);
    let run = run_plan(&ws, &plan);
    assert!(run.state.steps.values().all(|s| s.status == StepStatus::Done), "{:?}", run.state);
    let report = ws.generate_report(Some(&who(&ws, "expert")), &run.run_id, &[]).unwrap();
    assert_eq!(ws.report(Some(&who(&ws, "auditor")), &run.run_id).unwrap(), report);
    report::verify_audit_digest(&report, &ws.run_chain(&run.run_id)).unwrap();
    let dir = ws.run_dir(&run.run_id);
    for a in Audience::ALL {
        assert!(dir.join(a.file_name()).exists());
    }
    let summary = ws.verify_all().unwrap();
    assert!(summary.ok);
    assert_eq!(summary.chains.len(), 2);
    assert_eq!(entries(&ws).last().unwrap().action, "report.generated");
}

#[test]
fn controls_follow_the_transition_table() {
    let w = setup();
    let ws = &w.ws;
    plan_cycle1(&ws);
    let ca = who(&ws, "authority");
    let err = ws.set_control_status(Some(&ca), "ctl-oversight", ControlStatus::Accepted, "too early").unwrap_err();
    assert_eq!(err.code(), "illegal_transition");
    assert_eq!(entries(&ws).last().unwrap().action, "control.refused");
    let v = ws.set_control_status(Some(&ca), "ctl-oversight", ControlStatus::Inspected, "protocol reviewed").unwrap();
    assert_eq!(v.status, ControlStatus::Inspected);
    assert_eq!(v.declared_status, ControlStatus::Declared);
    let v = ws.set_control_status(Some(&ca), "ctl-oversight", ControlStatus::Accepted, "meets the bar").unwrap();
    assert_eq!(v.history.len(), 2);
    assert_eq!(ws.control(Some(&ca), "ctl-oversight").unwrap(), v);
    assert_eq!(ws.control(Some(&who(&ws, "expert")), "ctl-oversight").unwrap_err().code(), "forbidden");
    let err = ws.set_control_status(Some(&who(&ws, "provider")), "ctl-oversight", ControlStatus::Rejected, "").unwrap_err();
    assert_eq!(err.code(), "forbidden");
    assert_eq!(ws.control(Some(&ca), "ctl-nope").unwrap_err().code(), "not_found");
}

#[test]
fn review_notes_reach_the_report() {
    let w = setup();
    let ws = &w.ws;
    let plan = plan_cycle1(&ws);
    let ca = who(&ws, "authority");
    ws.set_control_status(Some(&ca), "ctl-oversight", ControlStatus::Inspected, "protocol reviewed").unwrap();
    let statuses = ws.control_statuses(&plan).unwrap();
    assert_eq!(statuses["ctl-oversight"], ControlStatus::Inspected);
    let run = run_plan(&ws, &plan);
    let report = ws.generate_report(Some(&ca), &run.run_id, &[]).unwrap();
    let md = report::render_human(&report, Audience::Regulator);
    assert!(md.contains("protocol reviewed"), "{md}");
}

#[test]
fn idempotent_run_creation() {
    let w = setup();
    let ws = &w.ws;
    let plan = plan_cycle1(&ws);
    let expert = who(&ws, "expert");
    let ex = vec![ExecutorDescriptor::local("local-0", 1)];
    let RunStart::New(spec) = ws.start_run(Some(&expert), &plan.plan_id, ex.clone(), FailurePolicy::Continue, Some("k1")).unwrap() else {
        panic!()
    };
    match ws.start_run(Some(&expert), &plan.plan_id, ex.clone(), FailurePolicy::Continue, Some("k1")).unwrap() {
        RunStart::Replayed(id) => assert_eq!(id, spec.run_id),
        other => panic!("{other:?}"),
    }
    let err = ws.start_run(Some(&expert), &plan.plan_id, ex, FailurePolicy::FailFast, Some("k1")).unwrap_err();
    assert_eq!(err.code(), "idempotency_conflict");
}

#[test]
fn step_view_is_zone_filtered() {
    let w = setup();
    let ws = &w.ws;
    let plan = plan_cycle1(&ws);
    let run = run_plan(&ws, &plan);
    let sid = "t-robustness";
    let expert = ws.step(Some(&who(&ws, "expert")), &run.run_id, sid).unwrap();
    assert_eq!(expert.hidden_artefacts, 0);
    assert!(!expert.artefacts.is_empty());
    let ca = ws.step(Some(&who(&ws, "authority")), &run.run_id, sid).unwrap();
    assert!(ca.artefacts.is_empty() && ca.result.artefacts.is_empty() && ca.result.log_digest.is_none());
    assert_eq!(ca.hidden_artefacts, expert.artefacts.len() + 1);

    let digest = expert.artefacts[0].digest.clone();
    assert!(ws.artefact(Some(&who(&ws, "provider")), &digest).is_ok());
    let err = ws.artefact(Some(&who(&ws, "authority")), &digest).unwrap_err();
    assert_eq!(err.code(), "forbidden");
    assert_eq!(entries(&ws).last().unwrap().action, "access.denied");
}

#[test]
fn tampering_is_detected() {
    let w = setup();
    let ws = &w.ws;
    let path = ws.root().join(AUDIT_FILE);
    let mut bytes = std::fs::read(&path).unwrap();
    let i = bytes.iter().position(|&b| b == b'r').unwrap();
    bytes[i] = b's';
    std::fs::write(&path, bytes).unwrap();
    let s = ws.verify_all().unwrap();
    assert!(!s.ok);
    assert_eq!(s.first_break().unwrap().0, WORKSPACE_CHAIN);
}

#[test]
fn open_requires_init() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(Workspace::open(dir.path()).err().unwrap().code(), "not_initialized");
}
