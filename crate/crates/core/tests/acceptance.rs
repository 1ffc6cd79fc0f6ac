//! The twelve acceptance criteria, one line each.

use std::io::Write;

use qgcyl::verification::run_all;

#[test]
fn acceptance_criteria() {
    // written to the handle directly so the lines survive output capture
    let results = run_all(|c| {
        let _ = writeln!(std::io::stderr().lock(), "{c}");
    });
    assert_eq!(results.len(), 12);
    let failed: Vec<usize> = results.iter().filter(|c| !c.passed).map(|c| c.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
