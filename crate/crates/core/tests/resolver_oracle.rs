mod support;

use sbx_core::catalogue::Catalogue;

#[test]
fn resolve_matches_exhaustive_search_on_every_small_catalogue() {
    let mut mismatches = Vec::new();
    let mut feasible = 0usize;
    let total = support::enumerate_resolver_cases(|case| {
        let mut cat = Catalogue::new();
        for m in &case.modules {
            cat.register(m.clone()).unwrap();
        }
        let got = cat.resolve(&case.roots).ok().map(|r| {
            r.bindings.into_iter().map(|(c, b)| (c, (b.name, b.version))).collect::<support::Assignment>()
        });
        let want = support::brute_force_resolve(&case.modules, &case.roots);
        feasible += usize::from(want.is_some());
        if got != want && mismatches.len() < 5 {
            mismatches.push(format!("roots {:?}\nmodules {:?}\ngot {got:?}\nwant {want:?}", case.roots, case.modules));
        }
    });
    assert!(mismatches.is_empty(), "{}", mismatches.join("\n\n"));
    // The family must exercise both outcomes.
    assert!(feasible > 0 && feasible < total, "{feasible} of {total} feasible");
}
