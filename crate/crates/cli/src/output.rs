//! Staged output directories and checksum manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.json";

/// A directory built in a sibling temp location and moved into place on `commit`.
/// Dropping it without committing leaves any previous output untouched.
pub struct StagedDir {
    tmp: tempfile::TempDir,
    target: PathBuf,
}

impl StagedDir {
    pub fn new(target: &Path) -> anyhow::Result<Self> {
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent)
            .with_context(|| format!("cannot create {}", parent.display()))?;
        let name = target
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("output");
        let tmp = tempfile::Builder::new()
            .prefix(&format!(".{name}.partial-"))
            .tempdir_in(&parent)
            .with_context(|| format!("cannot stage output next to {}", target.display()))?;
        Ok(Self {
            tmp,
            target: target.to_path_buf(),
        })
    }

    pub fn path(&self) -> &Path {
        self.tmp.path()
    }

    pub fn commit(self) -> anyhow::Result<PathBuf> {
        let staged = self.tmp.keep();
        if self.target.exists() {
            let parent = staged.parent().expect("staged dir has a parent");
            let old = tempfile::Builder::new()
                .prefix(".replaced-")
                .tempdir_in(parent)?
                .keep();
            let old = old.join("previous");
            fs::rename(&self.target, &old)
                .with_context(|| format!("cannot move aside {}", self.target.display()))?;
            fs::rename(&staged, &self.target)?;
            fs::remove_dir_all(old.parent().expect("has parent"))?;
        } else {
            fs::rename(&staged, &self.target)
                .with_context(|| format!("cannot move output into {}", self.target.display()))?;
        }
        Ok(self.target)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Relative path to checksum for every file under `dir` except the manifest.
pub fn checksums(dir: &Path) -> anyhow::Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let rel = path
                .strip_prefix(dir)
                .expect("walk stays under dir")
                .components()
                .map(|c| c.as_os_str().to_string_lossy().into_owned())
                .collect::<Vec<_>>()
                .join("/");
            if rel != MANIFEST {
                out.insert(rel, sha256_hex(&fs::read(&path)?));
            }
        }
    }
    Ok(out)
}

/// Manifest of a command's output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputManifest {
    pub command: String,
    pub files: BTreeMap<String, String>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

pub fn finish(stage: StagedDir, command: &str) -> anyhow::Result<PathBuf> {
    let files = checksums(stage.path())?;
    write_json(
        &stage.path().join(MANIFEST),
        &OutputManifest {
            command: command.into(),
            files,
        },
    )?;
    stage.commit()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_of_abc() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn commit_replaces_and_drop_preserves() {
        let root = tempfile::tempdir().unwrap();
        let target = root.path().join("out");
        fs::create_dir(&target).unwrap();
        fs::write(target.join("old.txt"), "old").unwrap();

        let s = StagedDir::new(&target).unwrap();
        fs::write(s.path().join("partial.txt"), "x").unwrap();
        drop(s);
        assert!(target.join("old.txt").exists());
        assert!(!target.join("partial.txt").exists());

        let s = StagedDir::new(&target).unwrap();
        fs::create_dir(s.path().join("sub")).unwrap();
        fs::write(s.path().join("sub/new.txt"), "new").unwrap();
        finish(s, "test").unwrap();
        assert!(!target.join("old.txt").exists());
        let m: OutputManifest =
            serde_json::from_slice(&fs::read(target.join(MANIFEST)).unwrap()).unwrap();
        assert_eq!(m.files.keys().collect::<Vec<_>>(), ["sub/new.txt"]);
        // only the committed directory remains next to the target
        assert_eq!(fs::read_dir(root.path()).unwrap().count(), 1);
    }
}
