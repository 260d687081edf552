//! Plain-text sidecar manifests written next to every output file.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::Result;

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// `<output>.manifest.txt`
pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.txt");
    output.with_file_name(name)
}

/// Records the artifact name, tool version, command, seed and resolved
/// configuration. Contains nothing time- or host-dependent, so identical
/// runs produce identical manifests.
pub fn write_manifest(output: &Path, command: &str, seed: u64, config: &str) -> Result<PathBuf> {
    let path = manifest_path(output);
    let artifact = output.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let mut text = format!(
        "artifact: {artifact}\nversion: {ARTIFACT_VERSION}\ncommand: {command}\nseed: {seed}\nconfig:\n"
    );
    for line in config.lines() {
        text.push_str("  ");
        text.push_str(line);
        text.push('\n');
    }
    fs::write(&path, text)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sidecar_name_and_content() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("s.pmpm");
        let p = write_manifest(&out, "sample", 7, "samples = 3\n").unwrap();
        assert_eq!(p, dir.path().join("s.pmpm.manifest.txt"));
        let text = fs::read_to_string(p).unwrap();
        assert!(text.contains("seed: 7"));
        assert!(text.contains("  samples = 3"));
        assert!(text.contains(ARTIFACT_VERSION));
    }
}
