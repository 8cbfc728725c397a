use std::os::unix::fs::PermissionsExt;
use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use http_body_util::BodyExt;
use sbx_core::catalogue::{ModuleDescriptor, Version};
use sbx_core::digest::sha256_hex;
use sbx_core::mapping::MappingTable;
use sbx_core::rbac::{Principal, PrincipalTable};
use sbx_core::vocab::{Dimension, LicenseClass, Resources, Role, Zone};
use sbx_core::workspace::Workspace;
use sbx_service::{router, AppState};
use serde_json::{json, Value};
use tower::ServiceExt;

const FIXTURES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/fixtures/safe_corp");

/// Writes one confidential artefact per step and passes.
const PLUGIN: &str = r#"#!/bin/sh
cat > /dev/null
echo "ok" > out.txt
printf '{"verdict":"pass","metrics":{"score":0.9},"artefacts":["out.txt"]}' > result.json
"#;

fn fixture(name: &str) -> String {
    std::fs::read_to_string(Path::new(FIXTURES).join(name)).unwrap()
}

struct Api {
    _dir: tempfile::TempDir,
    st: Arc<AppState>,
}

fn setup() -> Api {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("ws");
    let mut table = PrincipalTable::default();
    for (tok, id, role) in [
        ("tok-provider", "provider", Role::Provider),
        ("tok-ca", "authority", Role::CompetentAuthority),
        ("tok-expert", "expert", Role::TechnicalExpert),
        ("tok-auditor", "auditor", Role::Auditor),
    ] {
        table.insert(tok.into(), Principal::new(id, role)).unwrap();
    }
    let mut ws = Workspace::init(&root, Some(&table)).unwrap();
    ws.set_mapping(MappingTable::parse(&fixture("mapping.sbx")).unwrap());
    std::fs::create_dir_all(root.join("modules")).unwrap();
    let path = root.join("modules/generic.sh");
    std::fs::write(&path, PLUGIN).unwrap();
    std::fs::set_permissions(&path, std::fs::Permissions::from_mode(0o755)).unwrap();
    let expert = table.resolve("tok-expert").cloned();
    for (cap, dim) in [
        ("noise-perturbation", Dimension::FinalProduct),
        ("bias-detection", Dimension::DataModels),
        ("output-explainability", Dimension::FinalProduct),
    ] {
        let d = ModuleDescriptor {
            name: cap.into(),
            version: Version::new(1, 0, 0),
            provides: vec![cap.into()],
            test_types: vec![cap.into()],
            dimension: dim,
            requires: vec![],
            resource_estimate: Resources { cpu_seconds: 5, storage_bytes: 1 << 20 },
            entrypoint: "modules/generic.sh".into(),
            checksum: sha256_hex(PLUGIN),
            license_class: LicenseClass::Open,
        };
        ws.register_module(expert.as_ref(), d).unwrap();
    }
    let provider = table.resolve("tok-provider").cloned();
    let data = std::fs::read(Path::new(FIXTURES).join("dataset.csv")).unwrap();
    ws.put_artefact(provider.as_ref(), &data, Zone::Shared, "text/csv").unwrap();
    Api { _dir: dir, st: AppState::new(ws) }
}

struct Reply {
    status: StatusCode,
    text: String,
}

impl Reply {
    fn json(&self) -> Value {
        serde_json::from_str(&self.text).unwrap_or_else(|e| panic!("{e}: {}", self.text))
    }
}

impl Api {
    fn audit_len(&self) -> usize {
        self.st.ws.audit_log().entries().unwrap().len()
    }

    async fn call(&self, method: Method, uri: &str, token: Option<&str>, body: impl Into<Body>, headers: &[(&str, &str)]) -> Reply {
        let mut req = Request::builder().method(method).uri(uri);
        if let Some(t) = token {
            req = req.header("authorization", format!("Bearer {t}"));
        }
        for (k, v) in headers {
            req = req.header(*k, *v);
        }
        let res = router(self.st.clone()).oneshot(req.body(body.into()).unwrap()).await.unwrap();
        let status = res.status();
        let bytes = res.into_body().collect().await.unwrap().to_bytes();
        Reply { status, text: String::from_utf8_lossy(&bytes).into_owned() }
    }

    async fn get(&self, uri: &str, token: &str) -> Reply {
        self.call(Method::GET, uri, Some(token), Body::empty(), &[]).await
    }

    /// A mutating call, checked to append exactly one audit entry.
    async fn mutate(&self, method: Method, uri: &str, token: Option<&str>, body: impl Into<Body>, headers: &[(&str, &str)]) -> Reply {
        let before = self.audit_len();
        let r = self.call(method, uri, token, body, headers).await;
        assert_eq!(self.audit_len(), before + 1, "{uri} -> {} {}", r.status, r.text);
        r
    }

    async fn submit_and_plan(&self, cycle: &str) -> String {
        let r = self.mutate(Method::POST, "/api/v1/configs", Some("tok-provider"), fixture(cycle), &[]).await;
        assert_eq!(r.status, StatusCode::CREATED, "{}", r.text);
        let digest = r.json()["config_digest"].as_str().unwrap().to_string();
        let body = json!({ "config_digest": digest }).to_string();
        let r = self.mutate(Method::POST, "/api/v1/plans", Some("tok-expert"), body, &[]).await;
        assert_eq!(r.status, StatusCode::CREATED, "{}", r.text);
        digest
    }

    async fn run_to_end(&self, digest: &str) -> String {
        let body = json!({ "config_digest": digest, "executors": "local:2", "policy": "continue" }).to_string();
        let r = self.mutate(Method::POST, "/api/v1/runs", Some("tok-expert"), body, &[]).await;
        assert_eq!(r.status, StatusCode::CREATED, "{}", r.text);
        let run_id = r.json()["run_id"].as_str().unwrap().to_string();
        // The stream closes once the run is stored.
        let ev = self.get(&format!("/api/v1/runs/{run_id}/events"), "tok-expert").await;
        assert_eq!(ev.status, StatusCode::OK);
        run_id
    }
}

fn events(text: &str) -> Vec<Value> {
    text.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[tokio::test(flavor = "multi_thread")]
async fn session_reports_role_and_zones() {
    let api = setup();
    let r = api.get("/api/v1/session", "tok-ca").await;
    assert_eq!(r.status, StatusCode::OK);
    let v = r.json();
    assert_eq!(v["role"], "competent_authority");
    assert_eq!(v["zones"], json!(["shared", "regulatory"]));
    assert_eq!(api.get("/api/v1/session", "nope").await.status, StatusCode::UNAUTHORIZED);
}

#[tokio::test(flavor = "multi_thread")]
async fn config_submission_statuses() {
    let api = setup();
    let ok = api.mutate(Method::POST, "/api/v1/configs", Some("tok-provider"), fixture("cycle1.sbx"), &[]).await;
    assert_eq!(ok.status, StatusCode::CREATED);
    assert_eq!(ok.json()["config_digest"].as_str().unwrap().len(), 64);

    let invalid = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/invalid");
    let v001 = std::fs::read_dir(invalid).unwrap().map(|e| e.unwrap().path()).find(|p| p.to_string_lossy().contains("V001_")).unwrap();
    let bad = std::fs::read_to_string(v001).unwrap();
    let r = api.mutate(Method::POST, "/api/v1/configs", Some("tok-provider"), bad, &[]).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(r.json()["code"], "validation_failed");
    assert!(r.text.contains("V001"));

    let r = api.mutate(Method::POST, "/api/v1/configs", Some("tok-auditor"), fixture("cycle1.sbx"), &[]).await;
    assert_eq!(r.status, StatusCode::FORBIDDEN);
    let r = api.mutate(Method::POST, "/api/v1/configs", None, fixture("cycle1.sbx"), &[]).await;
    assert_eq!(r.status, StatusCode::UNAUTHORIZED);
    let r = api.mutate(Method::POST, "/api/v1/configs", Some("tok-provider"), "sandbox {", &[]).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(r.json()["code"], "parse_error");
}

#[tokio::test(flavor = "multi_thread")]
async fn runs_need_a_plan_and_replay_by_key() {
    let api = setup();
    let r = api.mutate(Method::POST, "/api/v1/configs", Some("tok-provider"), fixture("cycle1.sbx"), &[]).await;
    let digest = r.json()["config_digest"].as_str().unwrap().to_string();
    let body = json!({ "config_digest": digest }).to_string();
    let r = api.mutate(Method::POST, "/api/v1/runs", Some("tok-expert"), body.clone(), &[]).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND, "{}", r.text);

    api.mutate(Method::POST, "/api/v1/plans", Some("tok-expert"), body.clone(), &[]).await;
    let key = [("idempotency-key", "k-1")];
    let first = api.mutate(Method::POST, "/api/v1/runs", Some("tok-expert"), body.clone(), &key).await;
    assert_eq!(first.status, StatusCode::CREATED);
    let again = api.mutate(Method::POST, "/api/v1/runs", Some("tok-expert"), body.clone(), &key).await;
    assert_eq!(again.status, StatusCode::OK);
    assert_eq!(again.json()["run_id"], first.json()["run_id"]);
    let other = json!({ "config_digest": digest, "policy": "fail_fast" }).to_string();
    let clash = api.mutate(Method::POST, "/api/v1/runs", Some("tok-expert"), other, &key).await;
    assert_eq!(clash.status, StatusCode::CONFLICT);
    assert_eq!(clash.json()["code"], "idempotency_conflict");

    let bad = api.mutate(Method::POST, "/api/v1/runs", Some("tok-expert"), "{", &[]).await;
    assert_eq!(bad.status, StatusCode::BAD_REQUEST);
    let denied = api.mutate(Method::POST, "/api/v1/runs", Some("tok-ca"), body, &[]).await;
    assert_eq!(denied.status, StatusCode::FORBIDDEN);

    assert_eq!(api.get("/api/v1/runs/nope", "tok-expert").await.status, StatusCode::NOT_FOUND);
    let run_id = first.json()["run_id"].as_str().unwrap().to_string();
    api.get(&format!("/api/v1/runs/{run_id}/events"), "tok-expert").await;
}

#[tokio::test(flavor = "multi_thread")]
async fn event_stream_is_gapless_and_resumable() {
    let api = setup();
    let digest = api.submit_and_plan("cycle1.sbx").await;
    let run_id = api.run_to_end(&digest).await;
    let all = events(&api.get(&format!("/api/v1/runs/{run_id}/events"), "tok-expert").await.text);
    let seq: Vec<u64> = all.iter().map(|e| e["sequence_no"].as_u64().unwrap()).collect();
    assert_eq!(seq, (0..seq.len() as u64).collect::<Vec<_>>());
    assert_eq!(all.first().unwrap()["kind"], "run_started");
    assert_eq!(all.last().unwrap()["kind"], "run_finished");

    let tail = events(&api.get(&format!("/api/v1/runs/{run_id}/events?from=2"), "tok-expert").await.text);
    assert_eq!(tail, all[2..]);

    // Same records as the engine's own log.
    let file = std::fs::read_to_string(api.st.ws.run_dir(&run_id).join("events.log")).unwrap();
    assert_eq!(events(&file), all);

    let state = api.get(&format!("/api/v1/runs/{run_id}"), "tok-auditor").await.json();
    assert_eq!(state["phase"], "finished");
}

#[tokio::test(flavor = "multi_thread")]
async fn step_view_hides_confidential_refs_from_the_authority() {
    let api = setup();
    let digest = api.submit_and_plan("cycle1.sbx").await;
    let run_id = api.run_to_end(&digest).await;
    let uri = format!("/api/v1/runs/{run_id}/steps/t-robustness");
    let expert = api.get(&uri, "tok-expert").await.json();
    let ca = api.get(&uri, "tok-ca").await.json();
    assert_eq!(expert["hidden_artefacts"], 0);
    assert!(!expert["result"]["artefacts"].as_array().unwrap().is_empty());
    assert!(ca["result"]["artefacts"].as_array().unwrap().is_empty());
    assert!(ca["result"]["log_digest"].is_null());
    assert!(ca["hidden_artefacts"].as_u64().unwrap() >= 1);

    let digest = expert["result"]["artefacts"][0]["digest"].as_str().unwrap();
    assert_eq!(api.get(&format!("/api/v1/artefacts/{digest}"), "tok-expert").await.status, StatusCode::OK);
    assert_eq!(api.get(&format!("/api/v1/artefacts/{digest}"), "tok-ca").await.status, StatusCode::FORBIDDEN);
}

#[tokio::test(flavor = "multi_thread")]
async fn control_transitions() {
    let api = setup();
    api.submit_and_plan("cycle1.sbx").await;
    let patch = |status: &str| json!({ "status": status, "note": "site visit" }).to_string();
    let uri = "/api/v1/controls/ctl-oversight";
    let r = api.mutate(Method::PATCH, uri, Some("tok-provider"), patch("inspected"), &[]).await;
    assert_eq!(r.status, StatusCode::FORBIDDEN);
    let r = api.mutate(Method::PATCH, uri, Some("tok-ca"), patch("accepted"), &[]).await;
    assert_eq!(r.status, StatusCode::CONFLICT);
    assert_eq!(r.json()["code"], "illegal_transition");
    let r = api.mutate(Method::PATCH, uri, Some("tok-ca"), patch("inspected"), &[]).await;
    assert_eq!(r.status, StatusCode::OK, "{}", r.text);
    let r = api.mutate(Method::PATCH, uri, Some("tok-ca"), patch("accepted"), &[]).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.json()["status"], "accepted");
    let r = api.mutate(Method::PATCH, uri, Some("tok-ca"), "not json", &[]).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);

    let view = api.get(uri, "tok-ca").await.json();
    assert_eq!(view["history"].as_array().unwrap().len(), 2);
    let entries = api.st.ws.audit_log().entries().unwrap();
    assert!(entries.iter().any(|e| e.action == "control.status_changed" && e.actor == "competent_authority:authority"));
    assert_eq!(api.get("/api/v1/controls/nope", "tok-ca").await.status, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread")]
async fn reports_round_trip_and_audit_verifies() {
    let api = setup();
    let digest = api.submit_and_plan("cycle1.sbx").await;
    let run_id = api.run_to_end(&digest).await;
    let uri = format!("/api/v1/reports/{run_id}");
    assert_eq!(api.get(&uri, "tok-auditor").await.status, StatusCode::NOT_FOUND);
    let notes = json!({ "notes": [{ "subject": "scope", "text": "night-time footage missing" }] }).to_string();
    let gen = api.mutate(Method::POST, &uri, Some("tok-ca"), notes, &[]).await;
    assert_eq!(gen.status, StatusCode::CREATED, "{}", gen.text);
    let fetched = api.get(&uri, "tok-auditor").await;
    assert_eq!(fetched.json(), gen.json());
    assert_eq!(gen.json()["sections"].as_object().unwrap().len(), 8);
    let md = api.get(&format!("{uri}?audience=regulator"), "tok-auditor").await;
    assert!(md.text.contains("night-time footage missing"));
    assert_eq!(api.get(&format!("{uri}?audience=nobody"), "tok-auditor").await.status, StatusCode::BAD_REQUEST);

    let v = api.get("/api/v1/audit/verify", "tok-auditor").await.json();
    assert_eq!(v["ok"], true, "{v}");
    assert!(v["chains"].as_object().unwrap().contains_key(&format!("runs/{run_id}")));

    // Tamper with one byte of the workspace chain.
    let path = api.st.ws.audit_log().path().to_path_buf();
    let mut bytes = std::fs::read(&path).unwrap();
    let i = bytes.iter().position(|b| *b == b'"').unwrap() + 1;
    bytes[i] ^= 0x01;
    std::fs::write(&path, bytes).unwrap();
    let v = api.get("/api/v1/audit/verify", "tok-auditor").await.json();
    assert_eq!(v["ok"], false);
    assert_eq!(v["chain"], "workspace");
    assert_eq!(v["broken_at"], 0);
}

#[tokio::test(flavor = "multi_thread")]
async fn denial_changes_nothing_but_the_chain() {
    let api = setup();
    let records = std::fs::read(api.st.ws.root().join("records.ndjson")).unwrap();
    let r = api.mutate(Method::POST, "/api/v1/plans", Some("tok-provider"), json!({ "config_digest": "x" }).to_string(), &[]).await;
    assert_eq!(r.status, StatusCode::FORBIDDEN);
    let r = api.mutate(Method::POST, "/api/v1/artefacts?zone=regulatory", Some("tok-provider"), "secret", &[]).await;
    assert_eq!(r.status, StatusCode::FORBIDDEN);
    assert_eq!(std::fs::read(api.st.ws.root().join("records.ndjson")).unwrap(), records);
    let last = api.st.ws.audit_log().entries().unwrap().pop().unwrap();
    assert_eq!(last.action, "access.denied");
}

#[tokio::test(flavor = "multi_thread")]
async fn openapi_document_lists_every_route() {
    let api = setup();
    let doc = api.get("/api/v1/openapi.json", "tok-ca").await.json();
    let paths = doc["paths"].as_object().unwrap();
    for p in [
        "/session", "/configs", "/plans", "/runs", "/runs/{run_id}", "/runs/{run_id}/events", "/runs/{run_id}/steps/{step_id}",
        "/controls/{control_id}", "/reports/{run_id}", "/audit/verify",
    ] {
        assert!(paths.contains_key(p), "{p}");
    }
    assert_eq!(api.get("/api/v1/nothing", "tok-ca").await.status, StatusCode::NOT_FOUND);
}
