use super::*;

const MINIMAL: &str = include_str!("../../fixtures/valid/minimal.sbx");
const SAFE_CORP: &str = include_str!("../../fixtures/safe_corp/cycle1.sbx");

fn with_tests(tests: &str) -> String {
    MINIMAL.replace("tests {}", tests)
}

#[test]
fn minimal_document() {
    let doc = parse(MINIMAL).unwrap();
    assert_eq!(doc.name, "m");
    assert_eq!(doc.objectives.len(), 1);
    assert_eq!(doc.tests.len(), 0);
    assert_eq!(doc.schema_version, CURRENT_SCHEMA_VERSION);
    let report = validate(&doc);
    assert!(report.ok);
    assert!(report.diagnostics.is_empty(), "{:?}", report.diagnostics);
}

#[test]
fn safe_corp_objectives() {
    let doc = parse(SAFE_CORP).unwrap();
    let ids: Vec<&str> = doc.objectives.iter().map(|o| o.objective_id.as_str()).collect();
    assert_eq!(ids, ["robustness", "fairness", "transparency"]);
    assert!(validate(&doc).ok);
}

#[test]
fn invalid_enum_lists_valid_values() {
    let err = parse(&MINIMAL.replace("risk_class: limited", "risk_class: forbidden")).unwrap_err();
    let ParseError::InvalidEnum { value, expected, pos, .. } = &err else { panic!("{err:?}") };
    assert_eq!(value, "forbidden");
    assert_eq!(expected, &["minimal", "limited", "high", "prohibited"]);
    assert_eq!((pos.line, pos.column), (1, 53));
    assert!(err.to_string().contains("minimal, limited, high, prohibited"));
}

#[test]
fn syntax_error_carries_position_and_expected_set() {
    let err = parse("sandbox \"m\" {\n  system {\n    risk_class: \n  }\n}\n").unwrap_err();
    let ParseError::Syntax { pos, expected, .. } = &err else { panic!("{err:?}") };
    assert_eq!(pos.line, 4);
    assert!(expected.iter().any(|e| e == "string"), "{expected:?}");
}

#[test]
fn duplicate_identifier_names_both_positions() {
    let src = with_tests(
        "tests {\n test t1 { objective: transparency method: \"x@^1.0.0\" dimension: processes }\n test t1 { objective: transparency method: \"x@^1.0.0\" dimension: processes }\n}",
    );
    let err = parse(&src).unwrap_err();
    let ParseError::Duplicate { id, first, second, .. } = &err else { panic!("{err:?}") };
    assert_eq!(id, "t1");
    assert_eq!((first.line, second.line), (2, 3));
}

#[test]
fn tests_and_controls_share_namespace() {
    let src = with_tests("tests { test c1 { objective: transparency method: \"x@^1.0.0\" dimension: processes } }")
        .replace("controls {}", "controls { control c1 { activity: \"traceability\" } }");
    assert!(matches!(parse(&src), Err(ParseError::Duplicate { .. })));
}

#[test]
fn dangling_objective_is_v001() {
    let src = with_tests("tests { test t1 { objective: fairness method: \"bias-detection@^1.0.0\" dimension: processes } }");
    let report = validate(&parse(&src).unwrap());
    assert!(!report.ok);
    assert_eq!(report.codes(), ["V001"]);
}

#[test]
fn prohibited_is_v002_with_routing_rule() {
    let doc = parse(&MINIMAL.replace("risk_class: limited", "risk_class: prohibited")).unwrap();
    let report = validate(&doc);
    assert_eq!(report.codes(), ["V002"]);
    assert!(report.diagnostics[0].message.contains("cease development or reduce the level of risk"));
}

#[test]
fn unknown_keys_are_errors() {
    let doc = parse(&MINIMAL.replace("system_name: \"x\"", "system_name: \"x\" colour: \"red\"")).unwrap();
    let report = validate(&doc);
    assert!(!report.ok);
    assert_eq!(report.codes(), ["V004"]);
    assert_eq!(report.diagnostics[0].path, "system/colour");
}

#[test]
fn key_order_does_not_change_canonical_text() {
    let reordered = "sandbox \"m\" { reporting { formats: [json] } access { role provider { zones: [shared] } } \
        infrastructure { max_storage_bytes: 1000000 max_cpu_seconds: 60 executors: [\"local\"] } controls {} tests {} \
        objectives { transparency {} } system { dimensions: [processes] risk_class: limited system_name: \"x\" } }";
    let a = canonicalize(&parse(MINIMAL).unwrap()).unwrap();
    let b = canonicalize(&parse(reordered).unwrap()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn canonical_layout() {
    let text = canonicalize(&parse(MINIMAL).unwrap()).unwrap();
    assert_eq!(
        text,
        "sandbox \"m\" {\n schema_version: \"1.0.0\"\n allow_gaps: false\n system {\n  dimensions: [processes]\n  domain_tag: \"\"\n  risk_class: limited\n  system_name: \"x\"\n }\n objectives {\n  transparency {\n   priority: medium\n  }\n }\n controls {}\n tests {}\n infrastructure {\n  executors: [\"local\"]\n  max_cpu_seconds: 60\n  max_storage_bytes: 1000000\n }\n access {\n  role provider {\n   zones: [shared]\n  }\n }\n reporting {\n  formats: [json]\n }\n}\n"
    );
}

#[test]
fn canonicalize_is_idempotent_and_round_trips() {
    for src in [MINIMAL, SAFE_CORP, include_str!("../../fixtures/valid/custom_objective.sbx")] {
        let doc = parse(src).unwrap();
        let once = canonicalize(&doc).unwrap();
        let reparsed = parse(&once).unwrap();
        assert_eq!(reparsed, doc);
        assert_eq!(canonicalize(&reparsed).unwrap(), once);
        assert!(once.ends_with("}\n") && !once.ends_with("\n\n") && !once.contains('\r'));
    }
}

#[test]
fn canonicalize_rejects_invalid() {
    let doc = parse(&MINIMAL.replace("risk_class: limited", "risk_class: prohibited")).unwrap();
    assert!(matches!(canonicalize(&doc), Err(CanonicalizeError::NotValid(_))));
}

#[test]
fn diff_identity_is_empty() {
    let d = parse(SAFE_CORP).unwrap();
    assert!(diff(&d, &d).is_empty());
}

#[test]
fn adding_a_test_is_one_added_entry() {
    let old = parse(MINIMAL).unwrap();
    let new = parse(&with_tests("tests { test t9 { objective: transparency method: \"x@^1.0.0\" dimension: processes } }")).unwrap();
    let cs = diff(&old, &new);
    assert_eq!(cs.len(), 1);
    assert_eq!(cs.changes[0].path, "tests/t9");
    assert_eq!(cs.changes[0].kind, ChangeKind::Added);
    assert_eq!(apply(&old, &cs).unwrap(), new);
}

#[test]
fn seed_change_is_one_modified_entry() {
    let t = |seed: u64| {
        with_tests(&format!(
            "tests {{ test t1 {{ objective: transparency method: \"x@^1.0.0\" dimension: processes seed: {seed} }} }}"
        ))
    };
    let (old, new) = (parse(&t(1)).unwrap(), parse(&t(2)).unwrap());
    let cs = diff(&old, &new);
    assert_eq!(cs.paths(), ["tests/t1/seed"]);
    let c = &cs.changes[0];
    assert_eq!(c.kind, ChangeKind::Modified);
    assert_eq!(c.before, Some(canonical::TreeValue::Leaf(Literal::Int(1))));
    assert_eq!(c.after, Some(canonical::TreeValue::Leaf(Literal::Int(2))));
    let json = serde_json::to_value(&cs).unwrap();
    assert_eq!(json["changes"][0]["before"], "1");
    assert_eq!(serde_json::from_value::<ChangeSet>(json).unwrap(), cs);
}

#[test]
fn safe_corp_cycles_diff_and_replay() {
    let c1 = parse(SAFE_CORP).unwrap();
    let c2 = parse(include_str!("../../fixtures/safe_corp/cycle2.sbx")).unwrap();
    let c3 = parse(include_str!("../../fixtures/safe_corp/cycle3.sbx")).unwrap();
    for (a, b) in [(&c1, &c2), (&c2, &c3), (&c1, &c3)] {
        let cs = diff(a, b);
        assert!(!cs.is_empty());
        let replayed = apply(a, &cs).unwrap();
        assert_eq!(canonicalize(&replayed).unwrap(), canonicalize(b).unwrap());
    }
    assert!(diff(&c1, &c2).paths().contains(&"tests/t-robustness/seed"));
}

#[test]
fn diff_empty_iff_canonical_equal() {
    let a = parse(MINIMAL).unwrap();
    let b = parse(&MINIMAL.replace("tests {} controls {}", "controls {} tests {}")).unwrap();
    assert_eq!(canonicalize(&a).unwrap(), canonicalize(&b).unwrap());
    assert!(diff(&a, &b).is_empty());
}
