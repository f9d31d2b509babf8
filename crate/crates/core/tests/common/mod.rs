#![allow(dead_code)]

use std::path::{Path, PathBuf};

use recgen::pipeline::RunConfig;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn fixture(name: &str) -> PathBuf {
    fixtures().join(name)
}

/// The fixture config with its output redirected to `out_dir`.
pub fn fixture_config(out_dir: &Path) -> RunConfig {
    let text = std::fs::read_to_string(fixture("config.toml")).unwrap();
    let mut config = RunConfig::from_toml(&text, &fixtures()).unwrap();
    config.out_dir = out_dir.to_path_buf();
    config
}

pub fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Compares `actual` with the golden file, or rewrites it when
/// `UPDATE_GOLDEN` is set.
pub fn check_golden(name: &str, actual: &[u8]) {
    let path = fixture(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e} (run with UPDATE_GOLDEN=1)", path.display()));
    assert!(
        expected == actual,
        "{name} differs from the golden copy; rerun with UPDATE_GOLDEN=1 if the change is intended"
    );
}
