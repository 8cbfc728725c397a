//! Independent oracles shared by the integration suites and the acceptance
//! runner. Nothing here calls into the code under test except to build
//! inputs.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use serde_json::json;

use sbx_core::audit::AuditLog;
use sbx_core::catalogue::{Catalogue, ModuleDescriptor, Requirement, Version, VersionRange};
use sbx_core::dsl::ConfigDocument;
use sbx_core::mapping;
use sbx_core::planner::{self, ExecutionPlan, StepKind};
use sbx_core::rbac::Action;
use sbx_core::triage::{Answer, AnswerSet, TriageModel};
use sbx_core::vocab::{Dimension, LicenseClass, Resources, RiskClass, Role, Route, Zone};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures")
}

pub fn fixture_text(rel: &str) -> String {
    std::fs::read_to_string(fixtures().join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

// ---------------------------------------------------------------- resolver

/// Does `v` fall in `r`? Written against the range grammar, not the
/// library's matcher.
pub fn range_admits(r: &VersionRange, v: &Version) -> bool {
    let t = |x: &Version| (x.major, x.minor, x.patch);
    match r {
        VersionRange::Exact(b) => t(v) == t(b),
        VersionRange::AtLeast(b) => t(v) >= t(b),
        VersionRange::Tilde(b) => t(v) >= t(b) && (v.major, v.minor) == (b.major, b.minor),
        VersionRange::Caret(b) => {
            let upper = if b.major > 0 {
                (b.major + 1, 0, 0)
            } else if b.minor > 0 {
                (0, b.minor + 1, 0)
            } else {
                (0, 0, b.patch + 1)
            };
            t(v) >= t(b) && t(v) < upper
        }
    }
}

pub type Assignment = BTreeMap<String, (String, Version)>;

/// Exhaustive search over every capability-to-module assignment. Returns
/// the lexicographic maximum among feasible ones: capabilities in name
/// order, bound beats unbound, higher version beats lower, then the smaller
/// module name.
pub fn brute_force_resolve(modules: &[ModuleDescriptor], roots: &[Requirement]) -> Option<Assignment> {
    let mut caps: BTreeSet<String> = roots.iter().map(|r| r.capability.clone()).collect();
    for m in modules {
        caps.extend(m.provides.iter().cloned());
        caps.extend(m.requires.iter().map(|r| r.capability.clone()));
    }
    let caps: Vec<String> = caps.into_iter().collect();
    let options: Vec<Vec<Option<&ModuleDescriptor>>> = caps
        .iter()
        .map(|c| std::iter::once(None).chain(modules.iter().filter(|m| m.provides.contains(c)).map(Some)).collect())
        .collect();

    let mut best: Option<(Vec<Option<(Version, std::cmp::Reverse<String>)>>, Assignment)> = None;
    let mut idx = vec![0usize; caps.len()];
    loop {
        let pick: Vec<Option<&ModuleDescriptor>> = idx.iter().zip(&options).map(|(i, o)| o[*i]).collect();
        if feasible(&caps, &pick, roots) {
            let score: Vec<_> = pick.iter().map(|m| m.map(|m| (m.version, std::cmp::Reverse(m.name.clone())))).collect();
            if best.as_ref().is_none_or(|(s, _)| score > *s) {
                let a = caps
                    .iter()
                    .zip(&pick)
                    .filter_map(|(c, m)| m.map(|m| (c.clone(), (m.name.clone(), m.version))))
                    .collect();
                best = Some((score, a));
            }
        }
        // Odometer increment.
        let mut k = 0;
        loop {
            if k == idx.len() {
                return best.map(|(_, a)| a);
            }
            idx[k] += 1;
            if idx[k] < options[k].len() {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

fn feasible(caps: &[String], pick: &[Option<&ModuleDescriptor>], roots: &[Requirement]) -> bool {
    let at = |c: &str| caps.iter().position(|x| x == c);
    let mut needed = BTreeSet::new();
    let mut stack: Vec<&str> = roots.iter().map(|r| r.capability.as_str()).collect();
    while let Some(c) = stack.pop() {
        if !needed.insert(c.to_string()) {
            continue;
        }
        let Some(m) = pick[at(c).unwrap()] else { return false };
        stack.extend(m.requires.iter().map(|r| r.capability.as_str()));
    }
    for (c, m) in caps.iter().zip(pick) {
        if m.is_some() != needed.contains(c) {
            return false;
        }
    }
    let version_of = |c: &str| pick[at(c).unwrap()].map(|m| m.version);
    for r in roots {
        if !version_of(&r.capability).is_some_and(|v| range_admits(&r.range, &v)) {
            return false;
        }
    }
    for m in pick.iter().flatten() {
        for r in &m.requires {
            if !version_of(&r.capability).is_some_and(|v| range_admits(&r.range, &v)) {
                return false;
            }
        }
    }
    let mut by_name: BTreeMap<&str, Version> = BTreeMap::new();
    for m in pick.iter().flatten() {
        if let Some(v) = by_name.insert(&m.name, m.version) {
            if v != m.version {
                return false;
            }
        }
    }
    true
}

pub fn descriptor(name: &str, version: Version, provides: &str, requires: Vec<Requirement>) -> ModuleDescriptor {
    ModuleDescriptor {
        name: name.into(),
        version,
        provides: vec![provides.into()],
        test_types: vec![],
        dimension: Dimension::FinalProduct,
        requires,
        resource_estimate: Resources { cpu_seconds: 1, storage_bytes: 1 },
        entrypoint: format!("{name}.sh"),
        checksum: format!("{:064x}", (version.major << 16) | (version.minor << 8) | version.patch),
        license_class: LicenseClass::Open,
    }
}

pub struct ResolverCase {
    pub modules: Vec<ModuleDescriptor>,
    pub roots: Vec<Requirement>,
}

const POOL: [Version; 4] = [Version::new(1, 0, 0), Version::new(1, 2, 0), Version::new(2, 0, 0), Version::new(3, 0, 0)];

fn edge_range(choice: usize) -> Option<VersionRange> {
    match choice % 3 {
        0 => None,
        1 => Some(VersionRange::Caret(Version::new(1, 0, 0))),
        _ => Some(VersionRange::Caret(Version::new(2, 0, 0))),
    }
}

/// Every catalogue of the family below, in a fixed order.
///
/// Up to four modules `m0..m3`, module `i` providing capability `ci` with
/// the first 1 to 4 versions of [`POOL`]. Module `i` requires `c(i+1)`:
/// its 1.x versions with one range and its later versions with the next
/// range in the cycle none, ^1.0.0, ^2.0.0, so versions of one module
/// disagree. From three modules up, `m0` may also require the last
/// capability. With fewer than four modules a twin module `t` may provide
/// the last capability at 1.2.0, which exercises the name tie-break. Roots
/// ask for `c0` under one of three ranges, optionally with a second root
/// on the last capability.
pub fn enumerate_resolver_cases(mut f: impl FnMut(&ResolverCase)) -> usize {
    let root_ranges = [
        VersionRange::AtLeast(Version::new(1, 0, 0)),
        VersionRange::Caret(Version::new(1, 0, 0)),
        VersionRange::Caret(Version::new(2, 0, 0)),
    ];
    let mut count = 0;
    for n in 1..=4usize {
        let version_combos = 4usize.pow(n as u32);
        let edge_combos = 3usize.pow(n as u32 - 1);
        for vc in 0..version_combos {
            let counts: Vec<usize> = (0..n).map(|i| (vc / 4usize.pow(i as u32)) % 4 + 1).collect();
            for ec in 0..edge_combos {
                let edges: Vec<usize> = (0..n - 1).map(|i| (ec / 3usize.pow(i as u32)) % 3).collect();
                for extra in 0..if n >= 3 { 2 } else { 1 } {
                    for twin in 0..if n < 4 { 2 } else { 1 } {
                        for root in &root_ranges {
                            for second_root in 0..if n >= 2 { 2 } else { 1 } {
                                let last = format!("c{}", n - 1);
                                let mut modules = Vec::new();
                                for (i, &k) in counts.iter().enumerate() {
                                    for v in &POOL[..k] {
                                        let mut requires = Vec::new();
                                        if i + 1 < n {
                                            let choice = if v.major == 1 { edges[i] } else { edges[i] + 1 };
                                            if let Some(r) = edge_range(choice) {
                                                requires.push(Requirement::new(format!("c{}", i + 1), r));
                                            }
                                        }
                                        if i == 0 && extra == 1 {
                                            requires.push(Requirement::new(&last, VersionRange::Caret(Version::new(1, 0, 0))));
                                        }
                                        modules.push(descriptor(&format!("m{i}"), *v, &format!("c{i}"), requires));
                                    }
                                }
                                if twin == 1 {
                                    modules.push(descriptor("t", Version::new(1, 2, 0), &last, vec![]));
                                }
                                let mut roots = vec![Requirement::new("c0", *root)];
                                if second_root == 1 {
                                    roots.push(Requirement::new(&last, VersionRange::AtLeast(Version::new(1, 0, 0))));
                                }
                                count += 1;
                                f(&ResolverCase { modules, roots });
                            }
                        }
                    }
                }
            }
        }
    }
    count
}

// ---------------------------------------------------------------- triage

/// Severity rank, transcribed from the class ordering in the risk pyramid.
pub fn severity(c: RiskClass) -> u8 {
    match c {
        RiskClass::Minimal => 0,
        RiskClass::Limited => 1,
        RiskClass::High => 2,
        RiskClass::Prohibited => 3,
    }
}

/// Routing expected for each class.
pub fn expected_routes(c: RiskClass) -> Vec<Route> {
    match c {
        RiskClass::Minimal => vec![Route::Helpdesk],
        RiskClass::Limited => vec![Route::Helpdesk, Route::CoreAirs],
        RiskClass::High => vec![Route::ExtendedAirs],
        RiskClass::Prohibited => vec![Route::CeaseOrRedesign],
    }
}

/// Every complete answer set of the model's questionnaire.
pub fn all_answer_sets(model: &TriageModel) -> Vec<AnswerSet> {
    let qs = &model.questionnaire.questions;
    let options: Vec<Vec<Answer>> = qs
        .iter()
        .map(|q| {
            if q.choices.is_empty() {
                vec![Answer::Bool(false), Answer::Bool(true)]
            } else {
                q.choices.iter().map(|c| Answer::Choice(c.clone())).collect()
            }
        })
        .collect();
    let mut out = Vec::new();
    let mut idx = vec![0usize; qs.len()];
    loop {
        out.push(AnswerSet {
            questionnaire_version: model.questionnaire.version.clone(),
            answers: qs.iter().zip(&idx).zip(&options).map(|((q, i), o)| (q.question_id.clone(), o[*i].clone())).collect(),
        });
        let mut k = 0;
        loop {
            if k == idx.len() {
                return out;
            }
            idx[k] += 1;
            if idx[k] < options[k].len() {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

/// Most severe class over the rules an answer set fires.
pub fn brute_force_class(model: &TriageModel, answers: &AnswerSet) -> RiskClass {
    let mut best = RiskClass::Minimal;
    for rule in &model.rules {
        if answers.answers.get(&rule.question) == Some(&rule.equals) && severity(rule.class) > severity(best) {
            best = rule.class;
        }
    }
    best
}

// ---------------------------------------------------------------- rbac

/// The shipped permission matrix, transcribed row by row.
pub fn expected_grants(role: Role) -> BTreeSet<&'static str> {
    let row: &[&str] = match role {
        Role::Provider => &[
            "submit_config",
            "validate_config",
            "start_run",
            "view_run",
            "view_confidential_artefacts",
            "view_shared_artefacts",
            "view_report",
        ],
        Role::CompetentAuthority => &[
            "validate_config",
            "assemble_plan",
            "view_run",
            "inspect_controls",
            "update_control_status",
            "generate_report",
            "view_report",
            "export_audit",
            "view_shared_artefacts",
            "register_expert",
        ],
        Role::TechnicalExpert => &[
            "validate_config",
            "assemble_plan",
            "start_run",
            "view_run",
            "view_confidential_artefacts",
            "view_shared_artefacts",
            "generate_report",
            "view_report",
            "register_module",
        ],
        Role::Auditor => &["view_run", "view_report", "view_shared_artefacts", "export_audit"],
    };
    row.iter().copied().collect()
}

pub fn expected_zones(role: Role) -> BTreeSet<Zone> {
    match role {
        Role::Provider | Role::TechnicalExpert => [Zone::Confidential, Zone::Shared].into(),
        Role::CompetentAuthority | Role::Auditor => [Zone::Shared, Zone::Regulatory].into(),
    }
}

pub fn action_name(a: Action) -> &'static str {
    a.as_str()
}

/// All subsets of the three zones.
pub fn zone_lattice() -> Vec<Vec<Zone>> {
    let all = [Zone::Confidential, Zone::Shared, Zone::Regulatory];
    (0..8u8).map(|mask| all.iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, z)| *z).collect()).collect()
}

// ---------------------------------------------------------------- planner

fn reach(plan: &ExecutionPlan, from: &str) -> BTreeSet<String> {
    let mut seen = BTreeSet::new();
    let mut stack = vec![from.to_string()];
    while let Some(n) = stack.pop() {
        for e in &plan.edges {
            if e.from == n && seen.insert(e.to.clone()) {
                stack.push(e.to.clone());
            }
        }
    }
    seen
}

/// Control steps precede every test step of their dimension. Returns the
/// first violating (control, test) pair.
pub fn precedence_violation(plan: &ExecutionPlan) -> Option<(String, String)> {
    for c in plan.steps.iter().filter(|s| s.kind == StepKind::ControlCheck) {
        let below = reach(plan, &c.step_id);
        for t in plan.steps.iter().filter(|s| s.kind == StepKind::Test && s.dimension == c.dimension) {
            if !below.contains(&t.step_id) {
                return Some((c.step_id.clone(), t.step_id.clone()));
            }
        }
    }
    None
}

/// Lexicographically least linear extension, by trying every permutation.
pub fn brute_force_topo(ids: &[String], edges: &[(String, String)]) -> Option<Vec<String>> {
    let mut sorted = ids.to_vec();
    sorted.sort();
    let mut best: Option<Vec<String>> = None;
    permute(&mut sorted, 0, &mut |p| {
        let pos = |x: &str| p.iter().position(|y| y == x).unwrap();
        if edges.iter().all(|(a, b)| pos(a) < pos(b)) && best.as_ref().is_none_or(|b| p < b.as_slice()) {
            best = Some(p.to_vec());
        }
    });
    best
}

fn permute(v: &mut [String], k: usize, f: &mut dyn FnMut(&[String])) {
    if k == v.len() {
        f(v);
        return;
    }
    for i in k..v.len() {
        v.swap(k, i);
        permute(v, k + 1, f);
        v.swap(k, i);
    }
}

// ---------------------------------------------------------------- safe corp

/// The three reference modules at 1.0.0 with fixed checksums, so plan ids
/// do not depend on any binary on disk.
pub fn safe_corp_catalogue() -> sbx_core::catalogue::Catalogue {
    let mut cat = sbx_core::catalogue::Catalogue::new();
    for (cap, dim) in [
        ("noise-perturbation", Dimension::FinalProduct),
        ("bias-detection", Dimension::DataModels),
        ("output-explainability", Dimension::FinalProduct),
    ] {
        cat.register(ModuleDescriptor {
            name: cap.into(),
            version: Version::new(1, 0, 0),
            provides: vec![cap.into()],
            test_types: vec![cap.into()],
            dimension: dim,
            requires: vec![],
            resource_estimate: Resources { cpu_seconds: 30, storage_bytes: 1 << 20 },
            entrypoint: format!("modules/{cap}.sh"),
            checksum: sbx_core::digest::sha256_hex(format!("{cap}@1.0.0")),
            license_class: LicenseClass::Open,
        })
        .unwrap();
    }
    cat
}

pub fn safe_corp_mapping() -> sbx_core::mapping::MappingTable {
    sbx_core::mapping::MappingTable::parse(&fixture_text("safe_corp/mapping.sbx")).unwrap()
}

/// Assembles a Safe Corp cycle (1 to 3) against [`safe_corp_catalogue`].
pub fn safe_corp_plan(cycle: u8) -> ExecutionPlan {
    let doc = sbx_core::dsl::parse(&fixture_text(&format!("safe_corp/cycle{cycle}.sbx"))).unwrap();
    let table = safe_corp_mapping();
    let cat = safe_corp_catalogue();
    let cov = sbx_core::mapping::coverage(&doc.objectives, &table, &cat);
    let controls = sbx_core::mapping::controls_to_control_types(&doc.controls, &table);
    sbx_core::planner::assemble(&doc, &cov, &controls, &cat, &table.version).unwrap()
}

// ---- planner ----

/// Frozen after the first assembly; any change to plan hashing, step
/// derivation or the fixtures shows up here.
pub const SAFE_CORP_CYCLE1_PLAN_ID: &str = "b75993e5607702836cd4a1185bfe17c3272a7a24f2ef666c177991a15b992cd2";

/// sha256 of the compact sorted-key JSON with `plan_id` removed, via the
/// system tool.
pub fn external_plan_hash(plan: &ExecutionPlan) -> Option<String> {
    let mut v = serde_json::to_value(plan).unwrap();
    v.as_object_mut().unwrap().remove("plan_id");
    sha256sum(&serde_json::to_string(&v).unwrap())
}

/// Makes a generated document plannable: every dimension declared, ids
/// prefixed by kind, one open range per capability, no budgets.
pub fn plannable(mut doc: ConfigDocument) -> ConfigDocument {
    doc.allow_gaps = true;
    doc.system.dimensions = Dimension::ALL.iter().copied().collect();
    doc.infrastructure.max_cpu_seconds = u64::MAX / 4;
    doc.infrastructure.max_storage_bytes = u64::MAX / 4;
    for t in &mut doc.tests {
        t.test_id = format!("t-{}", t.test_id);
        let cap = t.method.split('@').next().unwrap().to_string();
        t.method = format!("{cap}@>=0.0.0");
        t.budget = None;
    }
    for c in &mut doc.controls {
        c.control_id = format!("c-{}", c.control_id);
    }
    doc
}

/// One module per capability. Module `i` may require later capabilities,
/// chosen by `mask`, which keeps the catalogue acyclic.
pub fn catalogue_for(doc: &ConfigDocument, table: &mapping::MappingTable, mask: u64) -> Catalogue {
    let mut caps: BTreeSet<String> = doc.tests.iter().map(|t| t.method.split('@').next().unwrap().to_string()).collect();
    caps.extend(table.test_type_rows.values().map(|r| r.method.capability.clone()));
    let caps: Vec<String> = caps.into_iter().collect();
    let mut cat = Catalogue::new();
    let mut bit = 0;
    for (i, cap) in caps.iter().enumerate() {
        let mut requires = Vec::new();
        for later in &caps[i + 1..] {
            if mask >> (bit % 64) & 1 == 1 {
                requires.push(Requirement::new(later, VersionRange::AtLeast(Version::new(0, 0, 0))));
            }
            bit += 1;
        }
        cat.register(ModuleDescriptor {
            name: cap.clone(),
            version: Version::new(1, 0, 0),
            provides: vec![cap.clone()],
            test_types: vec![],
            dimension: Dimension::FinalProduct,
            requires,
            resource_estimate: Resources { cpu_seconds: 1, storage_bytes: 1 },
            entrypoint: format!("{cap}.sh"),
            checksum: sbx_core::digest::sha256_hex(cap),
            license_class: LicenseClass::Open,
        })
        .unwrap();
    }
    cat
}

pub fn assemble(doc: &ConfigDocument, table: &mapping::MappingTable, cat: &Catalogue) -> ExecutionPlan {
    let cov = mapping::coverage(&doc.objectives, table, cat);
    let controls = mapping::controls_to_control_types(&doc.controls, table);
    planner::assemble(doc, &cov, &controls, cat, &table.version).unwrap()
}

// ---- audit ----

/// Five entries with fixed timestamps.
pub fn five_entry_chain(dir: &std::path::Path) -> AuditLog {
    let log = AuditLog::open(dir.join("audit.log"));
    let actions = ["config.submitted", "plan.assembled", "run.created", "run.finished", "report.generated"];
    for (i, a) in actions.iter().enumerate() {
        let ts = format!("2026-01-0{}T10:00:00Z", i + 1);
        log.append_at("provider:p1", a, &json!({ "step": i, "note": "x" }), &ts).unwrap();
    }
    log
}

/// sha256 via the system tool, independent of the crate's own hashing.
pub fn sha256sum(text: &str) -> Option<String> {
    let mut child = Command::new("sha256sum").stdin(Stdio::piped()).stdout(Stdio::piped()).spawn().ok()?;
    child.stdin.take()?.write_all(text.as_bytes()).ok()?;
    let out = child.wait_with_output().ok()?;
    Some(String::from_utf8(out.stdout).ok()?.split_whitespace().next()?.to_string())
}
