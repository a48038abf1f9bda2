use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Artifact, MediaKind};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileStamp {
    pub size: u64,
    pub sha256: String,
}

/// Regular files under a directory keyed by `/`-separated relative path.
pub type Snapshot = BTreeMap<String, FileStamp>;

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn snapshot_dir(dir: &Path) -> io::Result<Snapshot> {
    let mut snap = Snapshot::new();
    if dir.exists() {
        walk(dir, dir, &mut snap)?;
    }
    Ok(snap)
}

fn walk(base: &Path, dir: &Path, snap: &mut Snapshot) -> io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let ty = entry.file_type()?;
        let path = entry.path();
        if ty.is_dir() {
            walk(base, &path, snap)?;
        } else if ty.is_file() {
            let bytes = fs::read(&path)?;
            let rel = path
                .strip_prefix(base)
                .expect("walk stays under base")
                .components()
                .map(|c| c.as_os_str().to_string_lossy().into_owned())
                .collect::<Vec<_>>()
                .join("/");
            snap.insert(
                rel,
                FileStamp {
                    size: bytes.len() as u64,
                    sha256: sha256_hex(&bytes),
                },
            );
        }
    }
    Ok(())
}

/// Files present in `after` that are absent from `before` or whose content
/// changed, in path order. Paths are relative to the snapshotted directory.
pub fn collect_artifacts(before: &Snapshot, after: &Snapshot) -> Vec<Artifact> {
    after
        .iter()
        .filter(|(path, stamp)| before.get(*path) != Some(stamp))
        .map(|(path, stamp)| Artifact {
            path: path.clone(),
            name: path.clone(),
            media_kind: MediaKind::from_path(path),
            bytes_size: stamp.size,
            sha256: stamp.sha256.clone(),
        })
        .collect()
}
