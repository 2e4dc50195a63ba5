//! Acceptance suite: runs the full paper benchmark matrix and asserts each
//! criterion at its stated tolerance, printing one pass/fail line per
//! criterion.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the table.

use mpcc::bench::run_paper_suite;

#[test]
fn paper_suite_criteria() {
    let report = run_paper_suite(None);
    assert_eq!(report.criteria.len(), 10, "all ten criteria evaluated");
    print!("{}", report.table());
    for note in &report.notes {
        println!("note: {note}");
    }
    let failed: Vec<String> = report
        .criteria
        .iter()
        .filter(|c| !c.passed)
        .map(|c| format!("criterion {} ({}): {}", c.id, c.name, c.details))
        .collect();
    assert!(failed.is_empty(), "failed criteria:\n{}", failed.join("\n"));
}
