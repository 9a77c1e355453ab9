//! On-disk snapshot of named KV files.
//!
//! Layout: `manifest.json` maps each name to `{id, length, perms}`, and each
//! file's entries live in `<id>.kvf` next to it: magic `KVF1`, a
//! little-endian u32 entry count, then per entry u32 token, u32 position,
//! u64 fingerprint (all little-endian).
//!
//! Only logical content persists. Page sharing, residency tiers, and locks
//! are runtime artifacts and are not written; loading lays every file out
//! densely on the device tier. Anonymous files (forks) have no name and are
//! skipped.

use super::{FileId, KvError, KvEntry, KvStore, Perms};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

pub const KVF_MAGIC: &[u8; 4] = b"KVF1";

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("snapshot io: {0}")]
    Io(#[from] std::io::Error),
    #[error("snapshot manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("corrupt snapshot: {0}")]
    Corrupt(String),
    #[error("kvfs refused snapshot content: {0}")]
    Kv(#[from] KvError),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub id: u64,
    pub length: u64,
    pub perms: Perms,
}

/// name -> entry, serialized in name order.
pub type SnapshotManifest = BTreeMap<String, ManifestEntry>;

/// Write every named file to `dir` (created if missing). Returns the number
/// of files written.
pub fn save_snapshot(store: &KvStore, dir: &Path) -> Result<usize, SnapshotError> {
    fs::create_dir_all(dir)?;
    let (manifest, blobs) = store.with_inner_snapshot(|names, metas| {
        let mut manifest = SnapshotManifest::new();
        let mut blobs: Vec<(FileId, Vec<KvEntry>)> = Vec::new();
        for (name, id) in names {
            let meta = &metas[id];
            manifest.insert(
                name.clone(),
                ManifestEntry {
                    id: id.0,
                    length: meta.len,
                    perms: meta.perms,
                },
            );
            blobs.push((*id, meta.entries.clone()));
        }
        (manifest, blobs)
    });
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(dir.join("manifest.json"), json)?;
    for (id, entries) in &blobs {
        let mut f = fs::File::create(dir.join(format!("{}.kvf", id.0)))?;
        f.write_all(KVF_MAGIC)?;
        f.write_all(&(entries.len() as u32).to_le_bytes())?;
        for e in entries {
            f.write_all(&e.token.to_le_bytes())?;
            f.write_all(&e.position.to_le_bytes())?;
            f.write_all(&e.fingerprint.to_le_bytes())?;
        }
    }
    Ok(blobs.len())
}

/// Load a snapshot into `store`, which must not already contain any of the
/// snapshot's names or file ids. File content is audited after install (the
/// fingerprint chain must re-fold), so a corrupted blob cannot enter the
/// store silently.
pub fn load_snapshot(store: &KvStore, dir: &Path) -> Result<usize, SnapshotError> {
    let manifest: SnapshotManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    for (name, ent) in &manifest {
        let entries = read_kvf(&dir.join(format!("{}.kvf", ent.id)))?;
        if entries.len() as u64 != ent.length {
            return Err(SnapshotError::Corrupt(format!(
                "{name}: manifest length {} but blob holds {}",
                ent.length,
                entries.len()
            )));
        }
        store.install_file(FileId(ent.id), name, ent.perms, &entries)?;
    }
    store
        .audit()
        .map_err(|e| SnapshotError::Corrupt(format!("post-load audit: {e}")))?;
    Ok(manifest.len())
}

fn read_kvf(path: &Path) -> Result<Vec<KvEntry>, SnapshotError> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() < 8 || &buf[..4] != KVF_MAGIC {
        return Err(SnapshotError::Corrupt(format!(
            "{}: bad magic or truncated header",
            path.display()
        )));
    }
    let count = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
    if buf.len() != 8 + count * 16 {
        return Err(SnapshotError::Corrupt(format!(
            "{}: expected {} entries ({} bytes), file is {} bytes",
            path.display(),
            count,
            8 + count * 16,
            buf.len()
        )));
    }
    let mut entries = Vec::with_capacity(count);
    for chunk in buf[8..].chunks_exact(16) {
        entries.push(KvEntry {
            token: u32::from_le_bytes(chunk[0..4].try_into().unwrap()),
            position: u32::from_le_bytes(chunk[4..8].try_into().unwrap()),
            fingerprint: u64::from_le_bytes(chunk[8..16].try_into().unwrap()),
        });
    }
    Ok(entries)
}
