//! Seeded experiment reports compared byte-for-byte against checked-in
//! copies. Set `PSLAB_UPDATE_GOLDEN=1` to rewrite them.

mod common;

use std::path::PathBuf;

use pslab_core::zoo::{run_with_fixtures, ExperimentSpec, EXPERIMENTS};

/// The echoed fixture directory is machine-specific, so goldens store a
/// stable placeholder in its place.
const FIXTURE_LABEL: &str = "<fixtures>";

fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(format!("{name}.json"))
}

#[test]
fn reports_match_goldens() {
    let fx = common::fixtures();
    let update = std::env::var("PSLAB_UPDATE_GOLDEN").is_ok_and(|v| v == "1");
    let mut mismatched = Vec::new();
    for name in EXPERIMENTS {
        let spec = ExperimentSpec::new(name, FIXTURE_LABEL);
        let text = run_with_fixtures(&spec, fx).unwrap().to_json().unwrap();
        let path = golden_path(name);
        if update {
            std::fs::write(&path, &text).unwrap();
            continue;
        }
        let want = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        if want != text {
            mismatched.push(name);
        }
    }
    assert!(mismatched.is_empty(), "reports differ from goldens: {mismatched:?}");
}
