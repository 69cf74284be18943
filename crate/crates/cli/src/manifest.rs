//! Run manifests: what a command read, what it wrote, and the SHA-256 of
//! every artifact.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    /// Input path to content digest.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub wall_clock_secs: f64,
    /// Artifact path to content digest.
    pub artifacts: BTreeMap<String, String>,
}

pub fn file_sha256(path: &Path) -> io::Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Per-file digests of every regular file under `dir`, keyed by relative
/// path with `/` separators, skipping run manifests.
pub fn dir_digests(dir: &Path) -> io::Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(io::Error::other)?;
        if !entry.file_type().is_file() {
            continue;
        }
        let name = entry.file_name().to_string_lossy();
        if name == RUN_MANIFEST_FILE || name.ends_with(".manifest.json") {
            continue;
        }
        let rel = entry.path().strip_prefix(dir).map_err(io::Error::other)?;
        let rel = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
        out.insert(rel, file_sha256(entry.path())?);
    }
    Ok(out)
}

/// One digest for a whole directory: SHA-256 over `path\tdigest\n` lines in
/// path order.
pub fn dir_sha256(dir: &Path) -> io::Result<String> {
    let mut h = Sha256::new();
    for (path, digest) in dir_digests(dir)? {
        h.update(format!("{path}\t{digest}\n"));
    }
    Ok(hex::encode(h.finalize()))
}

/// Digest of a file or directory.
pub fn path_sha256(path: &Path) -> io::Result<String> {
    if path.is_dir() {
        dir_sha256(path)
    } else {
        file_sha256(path)
    }
}

/// Writes through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> io::Result<()> {
        let mut text = serde_json::to_string_pretty(self).map_err(io::Error::other)?;
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }

    pub fn read(path: &Path) -> io::Result<Self> {
        serde_json::from_str(&fs::read_to_string(path)?).map_err(io::Error::other)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digests_ignore_manifests_and_follow_content() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("sub")).unwrap();
        fs::write(dir.path().join("a.txt"), "alpha").unwrap();
        fs::write(dir.path().join("sub/b.txt"), "beta").unwrap();
        let d0 = dir_sha256(dir.path()).unwrap();
        fs::write(dir.path().join(RUN_MANIFEST_FILE), "{}").unwrap();
        assert_eq!(dir_sha256(dir.path()).unwrap(), d0);
        let per = dir_digests(dir.path()).unwrap();
        assert_eq!(per.keys().collect::<Vec<_>>(), ["a.txt", "sub/b.txt"]);
        // sha256("alpha")
        assert_eq!(per["a.txt"], "8ed3f6ad685b959ead7022518e1af76cd816f8e8ec7ccdda1ed4018e8f2223f8");
        fs::write(dir.path().join("sub/b.txt"), "beta!").unwrap();
        assert_ne!(dir_sha256(dir.path()).unwrap(), d0);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = RunManifest {
            command: "gen-corpus".into(),
            config: serde_json::json!({"n": 3}),
            seed: Some(7),
            inputs: BTreeMap::new(),
            outputs: vec!["out".into()],
            wall_clock_secs: 0.5,
            artifacts: [("x".to_string(), "y".to_string())].into(),
        };
        let p = dir.path().join(RUN_MANIFEST_FILE);
        m.write(&p).unwrap();
        assert_eq!(RunManifest::read(&p).unwrap(), m);
    }
}
