mod support;

use sbx_core::triage::{classify, route, TriageModel};
use sbx_core::vocab::RiskClass;

#[test]
fn routing_table_matches_the_four_classes() {
    for c in RiskClass::ALL {
        assert_eq!(route(*c), support::expected_routes(*c), "{c}");
    }
}

#[test]
fn class_is_the_most_severe_fired_rule_for_every_answer_set() {
    let model = TriageModel::default_model();
    let sets = support::all_answer_sets(&model);
    let mut seen = std::collections::BTreeSet::new();
    for a in &sets {
        let out = classify(a, &model).unwrap();
        let want = support::brute_force_class(&model, a);
        assert_eq!(out.risk_class, want, "{:?}", a.answers);
        assert_eq!(out.routes, support::expected_routes(want));
        seen.insert(support::severity(want));
    }
    assert_eq!(seen.len(), 4, "every class is reachable");
}
