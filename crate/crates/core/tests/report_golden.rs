mod common;

use std::path::Path;

use cycle_reward::eval::render_report;

const GOLDEN: &str = "tests/golden/report.md";

/// Set `UPDATE_GOLDEN=1` to rewrite the expected file after an intended
/// format change.
#[test]
fn report_matches_golden_file() {
    let (rows, meta) = common::report_fixture();
    let rendered = render_report(&rows, &meta);
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join(GOLDEN);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, &rendered).unwrap();
    }
    let expected = std::fs::read_to_string(&path).unwrap();
    assert_eq!(rendered, expected);
}

#[test]
fn report_is_stable_under_row_order() {
    let (mut rows, meta) = common::report_fixture();
    let a = render_report(&rows, &meta);
    rows.reverse();
    assert_eq!(a, render_report(&rows, &meta));
}
