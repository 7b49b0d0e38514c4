//! Runs the full finite-difference suite and checks every tolerance.

use std::time::Instant;

use dualprompt_core::gradcheck;

#[test]
fn standard_suite_passes_at_stated_tolerances() {
    let start = Instant::now();
    let mut failures = Vec::new();
    for check in gradcheck::standard_suite() {
        let result = check.execute().expect("check runs");
        println!(
            "{:<24} max_rel_err {:>12.3e}  tolerance {:>8.0e}  {}",
            result.name,
            result.max_rel_err,
            result.tolerance,
            if result.passed() { "PASS" } else { "FAIL" }
        );
        if !result.passed() {
            failures.push(format!("{}: {:.3e} > {:.0e}", result.name, result.max_rel_err, result.tolerance));
        }
    }
    println!("gradient suite finished in {:.2?}", start.elapsed());
    assert!(failures.is_empty(), "{failures:?}");
}
