//! Acceptance gate: runs every criterion of the invariant suite at its
//! stated tolerance and prints one pass/fail line per criterion.
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

use unitr::harness::checks::run_all_checks;
use unitr::harness::config::Config;

#[test]
fn acceptance_criteria() {
    let cfg = Config::default();
    let outcomes = run_all_checks(&cfg, 0).expect("check suite must run to completion");

    for o in &outcomes {
        println!("{}", o.line());
    }

    let names = |crit: u8| {
        outcomes
            .iter()
            .filter(|o| o.criterion == crit && !o.passed)
            .map(|o| o.name.clone())
            .collect::<Vec<_>>()
    };
    let mut all_pass = true;
    for crit in 1..=8u8 {
        let subs: Vec<_> = outcomes.iter().filter(|o| o.criterion == crit).collect();
        assert!(!subs.is_empty(), "criterion {crit} has no checks");
        let pass = subs.iter().all(|o| o.passed);
        all_pass &= pass;
        println!("criterion {crit}: {}", if pass { "PASS" } else { "FAIL" });
    }
    for crit in 1..=8u8 {
        assert!(names(crit).is_empty(), "criterion {crit} failed: {:?}", names(crit));
    }
    let invariant_failures: Vec<_> =
        outcomes.iter().filter(|o| o.criterion == 0 && !o.passed).map(|o| &o.name).collect();
    assert!(invariant_failures.is_empty(), "module invariants failed: {invariant_failures:?}");
    assert!(all_pass);

    let total: u128 = outcomes.iter().map(|o| o.millis).sum();
    println!("total check runtime: {:.1}s (target < 300s)", total as f64 / 1e3);
    assert!(total < 300_000, "check suite exceeded the five-minute target: {total} ms");
}
