//! Full acceptance suite at the default configuration.

use std::io::Write;
use std::path::Path;

use smp_lab::accept::run_accept;
use smp_lab::config::ExperimentConfig;

#[test]
fn acceptance_suite() {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = std::fs::remove_dir_all(&dir);
    let outcome = run_accept(&ExperimentConfig::default(), &dir).expect("suite runs to completion");
    // Written past the test harness capture so the lines always show.
    let mut err = std::io::stderr();
    for c in &outcome.criteria {
        writeln!(err, "{}", c.line()).unwrap();
    }
    assert_eq!(outcome.criteria.len(), 13);
    let failed: Vec<u32> = outcome.criteria.iter().filter(|c| !c.passed).map(|c| c.id).collect();
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
