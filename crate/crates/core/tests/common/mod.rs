#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use pslab_core::fixtures::Fixtures;
use pslab_core::patchscope::ModelRegistry;

pub const COPY_CHECKSUM: u32 = 0xba9d_24cc;
pub const FACT_CHECKSUM: u32 = 0x14c1_745c;
pub const FACT_SMALL_CHECKSUM: u32 = 0xa558_8368;

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("fixtures")
}

/// Trained fixtures, built on first use and cached under the target dir.
pub fn fixtures() -> &'static Fixtures {
    static FIXTURES: OnceLock<Fixtures> = OnceLock::new();
    FIXTURES.get_or_init(|| Fixtures::ensure(&fixture_dir()).expect("fixtures build"))
}

pub fn registry() -> ModelRegistry {
    let fx = fixtures();
    let mut reg = ModelRegistry::new();
    for m in fx.models() {
        reg.insert(Arc::clone(m)).unwrap();
    }
    reg
}
