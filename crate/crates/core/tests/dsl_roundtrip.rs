use proptest::prelude::*;
use sbx_core::dsl::{self, arbitrary};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn canonical_text_reparses_to_the_same_document(doc in arbitrary::valid_document()) {
        let report = dsl::validate(&doc);
        prop_assert!(report.ok, "{:?}", report.diagnostics);
        let text = dsl::canonicalize(&doc).unwrap();
        let back = dsl::parse(&text).map_err(|e| TestCaseError::fail(format!("{e}\n{text}")))?;
        prop_assert_eq!(&back, &doc);
        prop_assert_eq!(dsl::canonicalize(&back).unwrap(), text);
    }

    #[test]
    fn digest_ignores_declaration_order(doc in arbitrary::valid_document()) {
        let mut shuffled = doc.clone();
        shuffled.objectives.reverse();
        shuffled.controls.reverse();
        shuffled.tests.reverse();
        shuffled.access.reverse();
        prop_assert_eq!(dsl::config_digest(&doc).unwrap(), dsl::config_digest(&shuffled).unwrap());
    }

    #[test]
    fn diff_apply_reaches_the_new_revision(old in arbitrary::valid_document(), new in arbitrary::valid_document()) {
        let changes = dsl::diff(&old, &new);
        let patched = dsl::apply(&old, &changes).unwrap();
        prop_assert_eq!(dsl::canonicalize(&patched).unwrap(), dsl::canonicalize(&new).unwrap());
        prop_assert!(dsl::diff(&new, &new).is_empty());
    }
}
