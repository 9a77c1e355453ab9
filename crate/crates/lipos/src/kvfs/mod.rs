//! KVFS: KV-cache state virtualized as a small file system.
//!
//! A file is a growing sequence of [`KvEntry`] values (token, position,
//! fingerprint), stored in fixed-size pages. Pages are refcounted and shared
//! between files:
//!
//! * [`KvStore::fork`] shares every full page with the source (refcount
//!   increment) and deep-copies only a non-full tail page. A 3000-entry
//!   prefix forked 32 ways costs 32 tail pages, not 32 x 188.
//! * [`KvStore::append`] performs copy-on-write: writing into a shared,
//!   non-full tail page copies that one page first. Full pages are never
//!   copied.
//! * [`KvStore::extract`] and [`KvStore::merge`] build new files with fresh
//!   pages (no sharing) and *recompute* fingerprints over the retained
//!   entries: pruning or merging context changes what the model would have
//!   computed, and the fingerprints must say so. Positions are preserved
//!   verbatim; entries are never renumbered.
//!
//! Two residency tiers exist, device and host. [`KvStore::offload`] moves a
//! file's exclusively owned (refcount 1) device pages to host memory,
//! [`KvStore::restore`] moves them back; shared pages never migrate.
//! Residency affects pool accounting and transfer costs only, never content.
//!
//! Failure is atomic: every operation validates permissions, locks,
//! positions, and pool capacity before its first mutation, so a file is
//! never left half-updated. Eviction is never automatic; exhaustion
//! surfaces as [`KvError::PoolExhausted`] for the caller to handle.
//!
//! Permissions: the owner may do anything; `readable_by_all` grants open /
//! read / fork / extract / merge-source to others, `writable_by_all` grants
//! append / remove / lock / offload / restore. Locks are advisory write
//! locks held by a thread: they block other threads' `append` and `remove`
//! but never block reads, never queue (fail fast with [`KvError::Locked`]),
//! and do not reenter.
//!
//! The store is internally synchronized (one pool-wide mutex, which is
//! trivially linearizable); handles are plain ids and may be passed freely
//! between threads.

pub mod shadow;
mod snapshot;

pub use snapshot::{load_snapshot, save_snapshot, ManifestEntry, SnapshotManifest};

use crate::model::{build_entries, chain_fingerprint};
use crate::types::{Position, Principal, Tid, TokenId};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::sync::Mutex;
use thiserror::Error;

/// One cached token: the token id, its position in the context, and the
/// fingerprint of the chain up to and including this token. The fingerprint
/// stands in for the token's K/V tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvEntry {
    pub token: TokenId,
    pub position: Position,
    pub fingerprint: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FileId(pub u64);

impl fmt::Display for FileId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "kv{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PageId(pub u64);

/// Where a page's bytes live. Content is identical on both tiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Device,
    Host,
}

/// Identity making a kvfs call: the owning principal for permission checks
/// and the calling thread for lock semantics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Caller {
    pub principal: Principal,
    pub thread: Tid,
}

impl Caller {
    /// Host-side identity used for pre-seeding and inspection outside any
    /// LIP thread. Thread id 0 is never assigned to a real thread.
    pub fn host() -> Caller {
        Caller {
            principal: Principal::SYSTEM,
            thread: Tid(0),
        }
    }
}

/// Share bits applied at file creation; the owner is always the creator.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sharing {
    pub readable_by_all: bool,
    pub writable_by_all: bool,
}

impl Sharing {
    pub const PRIVATE: Sharing = Sharing {
        readable_by_all: false,
        writable_by_all: false,
    };
    pub const READ_SHARED: Sharing = Sharing {
        readable_by_all: true,
        writable_by_all: false,
    };
    pub const PUBLIC: Sharing = Sharing {
        readable_by_all: true,
        writable_by_all: true,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Perms {
    pub owner: Principal,
    pub readable_by_all: bool,
    pub writable_by_all: bool,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum KvError {
    #[error("kv file name already exists: {0}")]
    NameExists(String),
    #[error("kv file not found")]
    NotFound,
    #[error("permission denied")]
    PermissionDenied,
    #[error("file is locked")]
    Locked,
    #[error("caller does not hold the lock")]
    NotLockHolder,
    #[error("{tier:?} page pool exhausted: need {needed} pages, {available} available")]
    PoolExhausted {
        tier: Tier,
        needed: u64,
        available: u64,
    },
    #[error("position conflict at {0}")]
    PositionConflict(Position),
    #[error("entry index out of range or not strictly ascending: {0}")]
    IndexOutOfRange(u64),
}

pub type KvResult<T> = Result<T, KvError>;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct KvfsConfig {
    /// Entries per page.
    pub page_size: u32,
    /// Device-tier pool size, in pages.
    pub device_capacity_pages: u64,
    /// Host-tier pool size, in pages.
    pub host_capacity_pages: u64,
}

impl Default for KvfsConfig {
    fn default() -> Self {
        KvfsConfig {
            page_size: 16,
            device_capacity_pages: 65_536,
            host_capacity_pages: 131_072,
        }
    }
}

/// Point-in-time pool usage, in pages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolStats {
    pub device_used: u64,
    pub device_capacity: u64,
    pub host_used: u64,
    pub host_capacity: u64,
    pub files: u64,
}

impl PoolStats {
    pub fn device_headroom(&self) -> u64 {
        self.device_capacity - self.device_used
    }
}

/// Per-page view for tests and auditing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PageInfo {
    pub id: PageId,
    pub refcount: u32,
    pub tier: Tier,
    pub fill: u32,
}

#[derive(Debug, Clone)]
struct PageSlot {
    entries: Vec<KvEntry>,
    refcount: u32,
    tier: Tier,
}

#[derive(Debug, Clone)]
struct FileMeta {
    name: Option<String>,
    perms: Perms,
    pages: Vec<PageId>,
    len: u64,
    lock: Option<Tid>,
}

#[derive(Debug)]
struct Inner {
    cfg: KvfsConfig,
    model_seed: u64,
    files: BTreeMap<FileId, FileMeta>,
    names: BTreeMap<String, FileId>,
    pages: BTreeMap<PageId, PageSlot>,
    next_file: u64,
    next_page: u64,
    device_used: u64,
    host_used: u64,
    auto_audit: bool,
}

/// The store. All operations are `&self`; a single internal mutex makes
/// every operation atomic and linearizable.
#[derive(Debug)]
pub struct KvStore {
    inner: Mutex<Inner>,
}

impl KvStore {
    /// `model_seed` must match the model configuration this store serves:
    /// extract and merge re-fold fingerprint chains from it.
    pub fn new(cfg: KvfsConfig, model_seed: u64) -> KvStore {
        assert!(cfg.page_size > 0, "page_size must be positive");
        KvStore {
            inner: Mutex::new(Inner {
                cfg,
                model_seed,
                files: BTreeMap::new(),
                names: BTreeMap::new(),
                pages: BTreeMap::new(),
                next_file: 1,
                next_page: 1,
                device_used: 0,
                host_used: 0,
                auto_audit: false,
            }),
        }
    }

    /// Run [`KvStore::audit`] after every mutating operation (panicking on
    /// breach). Off by default — the audit walks every page, which is far
    /// too slow for workload runs; tests and fuzzers turn it on or call
    /// [`KvStore::audit`] at checkpoints.
    pub fn set_auto_audit(&self, on: bool) {
        self.inner.lock().unwrap().auto_audit = on;
    }

    pub fn config(&self) -> KvfsConfig {
        self.inner.lock().unwrap().cfg.clone()
    }

    pub fn model_seed(&self) -> u64 {
        self.inner.lock().unwrap().model_seed
    }

    pub fn stats(&self) -> PoolStats {
        let g = self.inner.lock().unwrap();
        PoolStats {
            device_used: g.device_used,
            device_capacity: g.cfg.device_capacity_pages,
            host_used: g.host_used,
            host_capacity: g.cfg.host_capacity_pages,
            files: g.files.len() as u64,
        }
    }

    pub fn create(&self, caller: Caller, name: &str, sharing: Sharing) -> KvResult<FileId> {
        let mut g = self.inner.lock().unwrap();
        if g.names.contains_key(name) {
            return Err(KvError::NameExists(name.to_string()));
        }
        let id = g.fresh_file_id();
        g.files.insert(
            id,
            FileMeta {
                name: Some(name.to_string()),
                perms: Perms {
                    owner: caller.principal,
                    readable_by_all: sharing.readable_by_all,
                    writable_by_all: sharing.writable_by_all,
                },
                pages: Vec::new(),
                len: 0,
                lock: None,
            },
        );
        g.names.insert(name.to_string(), id);
        g.maybe_audit();
        Ok(id)
    }

    /// Resolve a name to a file id. Requires read permission.
    pub fn open(&self, caller: Caller, name: &str) -> KvResult<FileId> {
        let g = self.inner.lock().unwrap();
        let id = *g.names.get(name).ok_or(KvError::NotFound)?;
        g.check_read(caller, id)?;
        Ok(id)
    }

    /// Unlink the name, drop the file's page references, and free pages
    /// whose refcount reaches zero. Other files sharing pages are
    /// unaffected; handles to this file dangle (subsequent ops NotFound).
    pub fn remove(&self, caller: Caller, file: FileId) -> KvResult<()> {
        let mut g = self.inner.lock().unwrap();
        g.check_write(caller, file)?;
        g.check_lock(caller, file)?;
        let meta = g.files.remove(&file).expect("checked above");
        if let Some(name) = &meta.name {
            g.names.remove(name);
        }
        for pid in meta.pages {
            g.unref_page(pid);
        }
        g.maybe_audit();
        Ok(())
    }

    pub fn length(&self, caller: Caller, file: FileId) -> KvResult<u64> {
        let g = self.inner.lock().unwrap();
        g.check_read(caller, file)?;
        Ok(g.files[&file].len)
    }

    pub fn name_of(&self, caller: Caller, file: FileId) -> KvResult<Option<String>> {
        let g = self.inner.lock().unwrap();
        g.check_read(caller, file)?;
        Ok(g.files[&file].name.clone())
    }

    pub fn perms_of(&self, caller: Caller, file: FileId) -> KvResult<Perms> {
        let g = self.inner.lock().unwrap();
        g.check_read(caller, file)?;
        Ok(g.files[&file].perms)
    }

    /// The fingerprint chain state a `pred` against this file continues
    /// from: the last entry's fingerprint, or the model seed when empty.
    pub fn chain_state(&self, caller: Caller, file: FileId) -> KvResult<u64> {
        let g = self.inner.lock().unwrap();
        g.check_read(caller, file)?;
        let meta = &g.files[&file];
        Ok(match meta.pages.last() {
            None => g.model_seed,
            Some(pid) => g.pages[pid].entries.last().expect("pages never empty").fingerprint,
        })
    }

    /// All entries, in order. Copies; intended for assertions, sampling
    /// setups, and persistence, not hot paths.
    pub fn read_back(&self, caller: Caller, file: FileId) -> KvResult<Vec<KvEntry>> {
        let g = self.inner.lock().unwrap();
        g.check_read(caller, file)?;
        Ok(g.collect_entries(file))
    }

    /// Page-level view of a file (refcounts, tiers, fills), for tests.
    pub fn page_info(&self, caller: Caller, file: FileId) -> KvResult<Vec<PageInfo>> {
        let g = self.inner.lock().unwrap();
        g.check_read(caller, file)?;
        Ok(g.files[&file]
            .pages
            .iter()
            .map(|pid| {
                let slot = &g.pages[pid];
                PageInfo {
                    id: *pid,
                    refcount: slot.refcount,
                    tier: slot.tier,
                    fill: slot.entries.len() as u32,
                }
            })
            .collect())
    }

    /// Append pre-chained entries. Positions must be strictly increasing
    /// within `entries` and all greater than the file's current maximum;
    /// fingerprints must continue the file's chain (checked when debug
    /// assertions are on). Copy-on-write: a shared non-full tail page is
    /// copied before writing; full pages are never copied.
    pub fn append(&self, caller: Caller, file: FileId, entries: &[KvEntry]) -> KvResult<()> {
        let mut g = self.inner.lock().unwrap();
        g.check_write(caller, file)?;
        g.check_lock(caller, file)?;
        if entries.is_empty() {
            return Ok(());
        }
        g.check_positions(file, entries)?;
        #[cfg(debug_assertions)]
        g.check_chain_continuity(file, entries);

        let p = g.cfg.page_size as u64;
        let meta = &g.files[&file];
        let fill = meta.len % p;
        let tail_space = if meta.len == 0 || fill == 0 { 0 } else { p - fill };
        let tail_shared = tail_space > 0 && g.pages[meta.pages.last().unwrap()].refcount > 1;
        let k = entries.len() as u64;
        let into_tail = k.min(tail_space);
        let fresh = (k - into_tail).div_ceil(p);
        let need = fresh + u64::from(tail_shared);
        g.check_device_capacity(need)?;

        // Mutation begins; cannot fail past this point.
        if tail_shared {
            let old_pid = *g.files[&file].pages.last().unwrap();
            let copy = PageSlot {
                entries: g.pages[&old_pid].entries.clone(),
                refcount: 1,
                tier: Tier::Device,
            };
            let new_pid = g.alloc_page(copy);
            g.pages.get_mut(&old_pid).unwrap().refcount -= 1;
            *g.files.get_mut(&file).unwrap().pages.last_mut().unwrap() = new_pid;
        }
        let (head, rest) = entries.split_at(into_tail as usize);
        if !head.is_empty() {
            let tail_pid = *g.files[&file].pages.last().unwrap();
            g.pages.get_mut(&tail_pid).unwrap().entries.extend_from_slice(head);
        }
        for chunk in rest.chunks(p as usize) {
            let slot = PageSlot {
                entries: chunk.to_vec(),
                refcount: 1,
                tier: Tier::Device,
            };
            let pid = g.alloc_page(slot);
            g.files.get_mut(&file).unwrap().pages.push(pid);
        }
        g.files.get_mut(&file).unwrap().len += k;
        g.maybe_audit();
        Ok(())
    }

    /// New file with identical content. Full pages are shared (refcount
    /// increment); a non-full tail page is deep-copied so later appends to
    /// either file stay isolated. The fork is owned by the caller and
    /// private; it has no name.
    pub fn fork(&self, caller: Caller, src: FileId) -> KvResult<FileId> {
        let mut g = self.inner.lock().unwrap();
        g.check_read(caller, src)?;
        let p = g.cfg.page_size as u64;
        let meta = &g.files[&src];
        let tail_partial = meta.len % p != 0;
        g.check_device_capacity(u64::from(tail_partial))?;

        let src_pages = g.files[&src].pages.clone();
        let mut pages = Vec::with_capacity(src_pages.len());
        let shared = if tail_partial { src_pages.len() - 1 } else { src_pages.len() };
        for pid in &src_pages[..shared] {
            g.pages.get_mut(pid).unwrap().refcount += 1;
            pages.push(*pid);
        }
        if tail_partial {
            let tail = src_pages[shared];
            let copy = PageSlot {
                entries: g.pages[&tail].entries.clone(),
                refcount: 1,
                tier: Tier::Device,
            };
            pages.push(g.alloc_page(copy));
        }
        let len = g.files[&src].len;
        let id = g.fresh_file_id();
        g.files.insert(
            id,
            FileMeta {
                name: None,
                perms: Perms {
                    owner: caller.principal,
                    readable_by_all: false,
                    writable_by_all: false,
                },
                pages,
                len,
                lock: None,
            },
        );
        g.maybe_audit();
        Ok(id)
    }

    /// New named file containing the entries of `src` selected by strictly
    /// ascending `indices`. Positions are preserved; fingerprints are
    /// recomputed over the retained subsequence (pruning context changes
    /// the chain). Pages are fresh, never shared with `src`.
    pub fn extract(
        &self,
        caller: Caller,
        src: FileId,
        indices: &[u64],
        name: &str,
    ) -> KvResult<FileId> {
        let mut g = self.inner.lock().unwrap();
        g.check_read(caller, src)?;
        if g.names.contains_key(name) {
            return Err(KvError::NameExists(name.to_string()));
        }
        let len = g.files[&src].len;
        let mut prev: Option<u64> = None;
        for &ix in indices {
            if ix >= len || prev.is_some_and(|p| ix <= p) {
                return Err(KvError::IndexOutOfRange(ix));
            }
            prev = Some(ix);
        }
        let entries = g.collect_entries(src);
        let picked: Vec<(TokenId, Position)> = indices
            .iter()
            .map(|&ix| {
                let e = entries[ix as usize];
                (e.token, e.position)
            })
            .collect();
        let rebuilt = build_entries(g.model_seed, &picked);
        let id = g.build_fresh_file(caller, Some(name), &rebuilt)?;
        g.maybe_audit();
        Ok(id)
    }

    /// New named file whose entries are the union of `parts`, sorted by
    /// position. Position sets must be pairwise disjoint
    /// ([`KvError::PositionConflict`] otherwise). Fingerprints are
    /// recomputed over the merged order; pages are fresh.
    pub fn merge(&self, caller: Caller, parts: &[FileId], name: &str) -> KvResult<FileId> {
        let mut g = self.inner.lock().unwrap();
        for &f in parts {
            g.check_read(caller, f)?;
        }
        if g.names.contains_key(name) {
            return Err(KvError::NameExists(name.to_string()));
        }
        let mut union: Vec<(TokenId, Position)> = Vec::new();
        for &f in parts {
            union.extend(g.collect_entries(f).iter().map(|e| (e.token, e.position)));
        }
        union.sort_by_key(|&(_, pos)| pos);
        for w in union.windows(2) {
            if w[0].1 == w[1].1 {
                return Err(KvError::PositionConflict(w[0].1));
            }
        }
        let rebuilt = build_entries(g.model_seed, &union);
        let id = g.build_fresh_file(caller, Some(name), &rebuilt)?;
        g.maybe_audit();
        Ok(id)
    }

    /// Validate that `caller` could write `file` right now (existence,
    /// permission, lock) without changing anything. The kernel fails a
    /// `pred` synchronously on this before queueing it.
    pub fn ensure_writable(&self, caller: Caller, file: FileId) -> KvResult<()> {
        let g = self.inner.lock().unwrap();
        g.check_write(caller, file)?;
        g.check_lock(caller, file)
    }

    /// Take the advisory write lock. Fails fast: [`KvError::Locked`] if any
    /// thread (including the caller; no reentry) already holds it.
    pub fn lock(&self, caller: Caller, file: FileId) -> KvResult<()> {
        let mut g = self.inner.lock().unwrap();
        g.check_write(caller, file)?;
        let meta = g.files.get_mut(&file).unwrap();
        if meta.lock.is_some() {
            return Err(KvError::Locked);
        }
        meta.lock = Some(caller.thread);
        Ok(())
    }

    pub fn unlock(&self, caller: Caller, file: FileId) -> KvResult<()> {
        let mut g = self.inner.lock().unwrap();
        if !g.files.contains_key(&file) {
            return Err(KvError::NotFound);
        }
        let meta = g.files.get_mut(&file).unwrap();
        if meta.lock != Some(caller.thread) {
            return Err(KvError::NotLockHolder);
        }
        meta.lock = None;
        Ok(())
    }

    /// Release every lock held by `thread`. The kernel calls this when a
    /// thread finishes so files never stay locked by dead threads.
    pub fn release_locks_of(&self, thread: Tid) -> usize {
        let mut g = self.inner.lock().unwrap();
        let mut released = 0;
        for meta in g.files.values_mut() {
            if meta.lock == Some(thread) {
                meta.lock = None;
                released += 1;
            }
        }
        released
    }

    /// Move the file's exclusively owned (refcount 1) device pages to host
    /// memory. Shared pages stay put. Returns the number of pages moved.
    /// Atomic: if host capacity cannot take all movable pages, nothing
    /// moves.
    pub fn offload(&self, caller: Caller, file: FileId) -> KvResult<u64> {
        self.migrate(caller, file, Tier::Device, Tier::Host)
    }

    /// Inverse of [`KvStore::offload`]: move exclusively owned host pages
    /// back to the device. [`KvError::PoolExhausted`] (device) if the pool
    /// cannot take them; nothing moves on failure.
    pub fn restore(&self, caller: Caller, file: FileId) -> KvResult<u64> {
        self.migrate(caller, file, Tier::Host, Tier::Device)
    }

    /// Count of the file's exclusively owned pages currently on `tier`,
    /// i.e. what `offload`/`restore` would move.
    pub fn movable_pages(&self, caller: Caller, file: FileId, tier: Tier) -> KvResult<u64> {
        let g = self.inner.lock().unwrap();
        g.check_read(caller, file)?;
        Ok(g.files[&file]
            .pages
            .iter()
            .filter(|pid| {
                let s = &g.pages[pid];
                s.refcount == 1 && s.tier == tier
            })
            .count() as u64)
    }

    fn migrate(&self, caller: Caller, file: FileId, from: Tier, to: Tier) -> KvResult<u64> {
        let mut g = self.inner.lock().unwrap();
        g.check_write(caller, file)?;
        let movable: Vec<PageId> = g.files[&file]
            .pages
            .iter()
            .copied()
            .filter(|pid| {
                let s = &g.pages[pid];
                s.refcount == 1 && s.tier == from
            })
            .collect();
        let n = movable.len() as u64;
        let (used, cap) = match to {
            Tier::Device => (g.device_used, g.cfg.device_capacity_pages),
            Tier::Host => (g.host_used, g.cfg.host_capacity_pages),
        };
        if used + n > cap {
            return Err(KvError::PoolExhausted {
                tier: to,
                needed: n,
                available: cap - used,
            });
        }
        for pid in movable {
            g.pages.get_mut(&pid).unwrap().tier = to;
        }
        match to {
            Tier::Device => {
                g.device_used += n;
                g.host_used -= n;
            }
            Tier::Host => {
                g.host_used += n;
                g.device_used -= n;
            }
        }
        g.maybe_audit();
        Ok(n)
    }

    /// Verify every structural invariant; returns a description of the
    /// first breach. Checked: stored refcounts equal the number of files
    /// referencing each page; no orphan pages; pool counters match page
    /// tiers and capacities; per file, all pages full except possibly the
    /// last, length equals the sum of fills, positions strictly increase,
    /// and fingerprints re-fold from the model seed; the name table is
    /// consistent both ways.
    pub fn audit(&self) -> Result<(), String> {
        let g = self.inner.lock().unwrap();
        g.audit_inner()
    }

    /// Names currently linked, in lexicographic order.
    pub fn names(&self) -> Vec<String> {
        self.inner.lock().unwrap().names.keys().cloned().collect()
    }

    pub(crate) fn with_inner_snapshot<R>(
        &self,
        f: impl FnOnce(&BTreeMap<String, FileId>, &BTreeMap<FileId, FileMetaView>) -> R,
    ) -> R {
        let g = self.inner.lock().unwrap();
        let metas: BTreeMap<FileId, FileMetaView> = g
            .files
            .iter()
            .map(|(id, m)| {
                (
                    *id,
                    FileMetaView {
                        perms: m.perms,
                        len: m.len,
                        entries: g.collect_entries(*id),
                    },
                )
            })
            .collect();
        f(&g.names, &metas)
    }

    /// Recreate a file with explicit id, perms, and content; used by
    /// snapshot loading. Fails if the id or name is taken or the device
    /// pool cannot hold the dense page layout.
    pub(crate) fn install_file(
        &self,
        id: FileId,
        name: &str,
        perms: Perms,
        entries: &[KvEntry],
    ) -> KvResult<()> {
        let mut g = self.inner.lock().unwrap();
        if g.names.contains_key(name) {
            return Err(KvError::NameExists(name.to_string()));
        }
        assert!(
            !g.files.contains_key(&id),
            "snapshot install over live file id {id}"
        );
        let need = (entries.len() as u64).div_ceil(g.cfg.page_size as u64);
        g.check_device_capacity(need)?;
        let p = g.cfg.page_size as usize;
        let mut pages = Vec::new();
        for chunk in entries.chunks(p) {
            let pid = g.alloc_page(PageSlot {
                entries: chunk.to_vec(),
                refcount: 1,
                tier: Tier::Device,
            });
            pages.push(pid);
        }
        g.files.insert(
            id,
            FileMeta {
                name: Some(name.to_string()),
                perms,
                pages,
                len: entries.len() as u64,
                lock: None,
            },
        );
        g.names.insert(name.to_string(), id);
        g.next_file = g.next_file.max(id.0 + 1);
        g.maybe_audit();
        Ok(())
    }
}

/// Read-only file view exposed to the snapshot writer.
#[derive(Debug, Clone)]
pub(crate) struct FileMetaView {
    pub perms: Perms,
    pub len: u64,
    pub entries: Vec<KvEntry>,
}

impl Inner {
    fn fresh_file_id(&mut self) -> FileId {
        let id = FileId(self.next_file);
        self.next_file += 1;
        id
    }

    fn alloc_page(&mut self, slot: PageSlot) -> PageId {
        match slot.tier {
            Tier::Device => self.device_used += 1,
            Tier::Host => self.host_used += 1,
        }
        let id = PageId(self.next_page);
        self.next_page += 1;
        self.pages.insert(id, slot);
        id
    }

    fn unref_page(&mut self, pid: PageId) {
        let slot = self.pages.get_mut(&pid).expect("dangling page id");
        slot.refcount -= 1;
        if slot.refcount == 0 {
            let tier = slot.tier;
            self.pages.remove(&pid);
            match tier {
                Tier::Device => self.device_used -= 1,
                Tier::Host => self.host_used -= 1,
            }
        }
    }

    fn check_device_capacity(&self, need: u64) -> KvResult<()> {
        if self.device_used + need > self.cfg.device_capacity_pages {
            return Err(KvError::PoolExhausted {
                tier: Tier::Device,
                needed: need,
                available: self.cfg.device_capacity_pages - self.device_used,
            });
        }
        Ok(())
    }

    fn check_read(&self, caller: Caller, file: FileId) -> KvResult<()> {
        let meta = self.files.get(&file).ok_or(KvError::NotFound)?;
        if meta.perms.owner == caller.principal
            || caller.principal == Principal::SYSTEM
            || meta.perms.readable_by_all
        {
            Ok(())
        } else {
            Err(KvError::PermissionDenied)
        }
    }

    fn check_write(&self, caller: Caller, file: FileId) -> KvResult<()> {
        let meta = self.files.get(&file).ok_or(KvError::NotFound)?;
        if meta.perms.owner == caller.principal
            || caller.principal == Principal::SYSTEM
            || meta.perms.writable_by_all
        {
            Ok(())
        } else {
            Err(KvError::PermissionDenied)
        }
    }

    fn check_lock(&self, caller: Caller, file: FileId) -> KvResult<()> {
        match self.files[&file].lock {
            Some(holder) if holder != caller.thread => Err(KvError::Locked),
            _ => Ok(()),
        }
    }

    fn check_positions(&self, file: FileId, entries: &[KvEntry]) -> KvResult<()> {
        let meta = &self.files[&file];
        let mut prev: Option<Position> = if meta.len == 0 {
            None
        } else {
            let last = self.pages[meta.pages.last().unwrap()]
                .entries
                .last()
                .expect("pages never empty");
            Some(last.position)
        };
        for e in entries {
            if prev.is_some_and(|p| e.position <= p) {
                return Err(KvError::PositionConflict(e.position));
            }
            prev = Some(e.position);
        }
        Ok(())
    }

    #[cfg(debug_assertions)]
    fn check_chain_continuity(&self, file: FileId, entries: &[KvEntry]) {
        let meta = &self.files[&file];
        let mut d = match meta.pages.last() {
            None => self.model_seed,
            Some(pid) => self.pages[pid].entries.last().unwrap().fingerprint,
        };
        for e in entries {
            d = chain_fingerprint(d, e.token, e.position);
            debug_assert_eq!(
                d, e.fingerprint,
                "appended entry at position {} does not continue the file's chain",
                e.position
            );
        }
    }

    fn collect_entries(&self, file: FileId) -> Vec<KvEntry> {
        let meta = &self.files[&file];
        let mut out = Vec::with_capacity(meta.len as usize);
        for pid in &meta.pages {
            out.extend_from_slice(&self.pages[pid].entries);
        }
        out
    }

    fn build_fresh_file(
        &mut self,
        caller: Caller,
        name: Option<&str>,
        entries: &[KvEntry],
    ) -> KvResult<FileId> {
        let p = self.cfg.page_size as u64;
        let need = (entries.len() as u64).div_ceil(p);
        self.check_device_capacity(need)?;
        let mut pages = Vec::with_capacity(need as usize);
        for chunk in entries.chunks(p as usize) {
            let pid = self.alloc_page(PageSlot {
                entries: chunk.to_vec(),
                refcount: 1,
                tier: Tier::Device,
            });
            pages.push(pid);
        }
        let id = self.fresh_file_id();
        self.files.insert(
            id,
            FileMeta {
                name: name.map(str::to_string),
                perms: Perms {
                    owner: caller.principal,
                    readable_by_all: false,
                    writable_by_all: false,
                },
                pages,
                len: entries.len() as u64,
                lock: None,
            },
        );
        if let Some(n) = name {
            self.names.insert(n.to_string(), id);
        }
        Ok(id)
    }

    fn maybe_audit(&self) {
        if self.auto_audit {
            if let Err(e) = self.audit_inner() {
                panic!("kvfs invariant breach: {e}");
            }
        }
    }

    fn audit_inner(&self) -> Result<(), String> {
        let p = self.cfg.page_size as u64;
        // Refcounts from scratch.
        let mut counts: BTreeMap<PageId, u32> = BTreeMap::new();
        for (fid, meta) in &self.files {
            for pid in &meta.pages {
                if !self.pages.contains_key(pid) {
                    return Err(format!("{fid} references missing page {pid:?}"));
                }
                *counts.entry(*pid).or_insert(0) += 1;
            }
        }
        for (pid, slot) in &self.pages {
            let expect = counts.get(pid).copied().unwrap_or(0);
            if expect == 0 {
                return Err(format!("orphan page {pid:?} (refcount {})", slot.refcount));
            }
            if slot.refcount != expect {
                return Err(format!(
                    "page {pid:?} refcount {} but {} references",
                    slot.refcount, expect
                ));
            }
            if slot.entries.is_empty() || slot.entries.len() as u64 > p {
                return Err(format!("page {pid:?} fill {} invalid", slot.entries.len()));
            }
        }
        // Pool counters.
        let dev = self.pages.values().filter(|s| s.tier == Tier::Device).count() as u64;
        let host = self.pages.values().filter(|s| s.tier == Tier::Host).count() as u64;
        if dev != self.device_used || host != self.host_used {
            return Err(format!(
                "pool counters drifted: device {} vs {}, host {} vs {}",
                self.device_used, dev, self.host_used, host
            ));
        }
        if dev > self.cfg.device_capacity_pages || host > self.cfg.host_capacity_pages {
            return Err("pool over capacity".to_string());
        }
        // Per-file shape, positions, chain.
        for (fid, meta) in &self.files {
            let mut total = 0u64;
            for (i, pid) in meta.pages.iter().enumerate() {
                let fill = self.pages[pid].entries.len() as u64;
                if i + 1 < meta.pages.len() && fill != p {
                    return Err(format!("{fid} interior page {pid:?} not full"));
                }
                total += fill;
            }
            if total != meta.len {
                return Err(format!("{fid} length {} but pages hold {}", meta.len, total));
            }
            let mut digest = self.model_seed;
            let mut prev: Option<Position> = None;
            for pid in &meta.pages {
                for e in &self.pages[pid].entries {
                    if prev.is_some_and(|q| e.position <= q) {
                        return Err(format!("{fid} positions not increasing at {}", e.position));
                    }
                    prev = Some(e.position);
                    digest = chain_fingerprint(digest, e.token, e.position);
                    if digest != e.fingerprint {
                        return Err(format!(
                            "{fid} fingerprint mismatch at position {}",
                            e.position
                        ));
                    }
                }
            }
            match &meta.name {
                Some(n) if self.names.get(n) != Some(fid) => {
                    return Err(format!("{fid} name {n:?} not linked back"));
                }
                _ => {}
            }
        }
        for (n, fid) in &self.names {
            match self.files.get(fid) {
                Some(meta) if meta.name.as_deref() == Some(n) => {}
                _ => return Err(format!("name {n:?} links to stale {fid}")),
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_entries, oracle_from_scratch, ModelConfig};

    const SEED: u64 = 0x6c69_706f_735f_7631;

    fn store() -> KvStore {
        let s = KvStore::new(KvfsConfig::default(), SEED);
        s.set_auto_audit(true);
        s
    }

    fn small_store(device_pages: u64) -> KvStore {
        let s = KvStore::new(
            KvfsConfig {
                page_size: 16,
                device_capacity_pages: device_pages,
                host_capacity_pages: device_pages * 2,
            },
            SEED,
        );
        s.set_auto_audit(true);
        s
    }

    fn caller(principal: u64, thread: u64) -> Caller {
        Caller {
            principal: Principal(principal),
            thread: Tid(thread),
        }
    }

    /// Append `n` tokens (token = position % 17, positions from `start`).
    fn grow(s: &KvStore, c: Caller, f: FileId, start: u32, n: u32) {
        let state = s.chain_state(c, f).unwrap();
        let toks: Vec<(TokenId, Position)> =
            (start..start + n).map(|p| (p % 17, p)).collect();
        s.append(c, f, &build_entries(state, &toks)).unwrap();
    }

    #[test]
    fn create_append_page_math() {
        let s = store();
        let c = caller(1, 1);
        let f = s.create(c, "prefix.kv", Sharing::PRIVATE).unwrap();
        grow(&s, c, f, 0, 3000);
        assert_eq!(s.length(c, f).unwrap(), 3000);
        let pages = s.page_info(c, f).unwrap();
        assert_eq!(pages.len(), 188); // ceil(3000 / 16)
        assert!(pages[..187].iter().all(|pg| pg.fill == 16));
        assert_eq!(pages[187].fill, 8); // 3000 - 187 * 16
        assert!(pages.iter().all(|pg| pg.refcount == 1));
        assert_eq!(s.stats().device_used, 188);
    }

    #[test]
    fn fork_shares_full_pages_copies_tail() {
        let s = store();
        let c = caller(1, 1);
        let f = s.create(c, "p.kv", Sharing::PRIVATE).unwrap();
        grow(&s, c, f, 0, 3000);
        let before = s.stats().device_used;
        let g = s.fork(c, f).unwrap();
        assert_eq!(s.stats().device_used, before + 1); // tail copy only
        let fp = s.page_info(c, f).unwrap();
        let gp = s.page_info(c, g).unwrap();
        assert_eq!(&fp[..187].iter().map(|p| p.id).collect::<Vec<_>>(),
                   &gp[..187].iter().map(|p| p.id).collect::<Vec<_>>());
        assert!(fp[..187].iter().all(|p| p.refcount == 2));
        assert_ne!(fp[187].id, gp[187].id);
        assert_eq!(fp[187].refcount, 1);
        assert_eq!(gp[187].refcount, 1);
        assert_eq!(s.read_back(c, f).unwrap(), s.read_back(c, g).unwrap());
    }

    #[test]
    fn fork_of_page_aligned_file_shares_everything() {
        let s = store();
        let c = caller(1, 1);
        let f = s.create(c, "aligned.kv", Sharing::PRIVATE).unwrap();
        grow(&s, c, f, 0, 32);
        let before = s.stats().device_used;
        let g = s.fork(c, f).unwrap();
        assert_eq!(s.stats().device_used, before); // no copies at all
        assert!(s.page_info(c, g).unwrap().iter().all(|p| p.refcount == 2));
    }

    #[test]
    fn append_to_fork_is_isolated() {
        let s = store();
        let c = caller(1, 1);
        let f = s.create(c, "base.kv", Sharing::PRIVATE).unwrap();
        grow(&s, c, f, 0, 100);
        let snapshot = s.read_back(c, f).unwrap();
        let g = s.fork(c, f).unwrap();
        grow(&s, c, g, 100, 64);
        assert_eq!(s.read_back(c, f).unwrap(), snapshot);
        assert_eq!(s.length(c, g).unwrap(), 164);
        // And the other way: appending to the original leaves the fork alone.
        let gsnap = s.read_back(c, g).unwrap();
        grow(&s, c, f, 100, 10);
        assert_eq!(s.read_back(c, g).unwrap(), gsnap);
    }

    #[test]
    fn cow_never_copies_full_pages() {
        let s = store();
        let c = caller(1, 1);
        let f = s.create(c, "full.kv", Sharing::PRIVATE).unwrap();
        grow(&s, c, f, 0, 16); // exactly one full page
        let g = s.fork(c, f).unwrap();
        let before = s.stats().device_used;
        grow(&s, c, g, 16, 1); // lands in a fresh page, no copy of the shared one
        assert_eq!(s.stats().device_used, before + 1);
        assert_eq!(s.page_info(c, f).unwrap()[0].refcount, 2);
    }

    #[test]
    fn append_into_shared_tail_copies_once() {
        let s = store();
        let c = caller(1, 1);
        let f = s.create(c, "t.kv", Sharing::PRIVATE).unwrap();
        grow(&s, c, f, 0, 8); // half a page
        let g = s.fork(c, f).unwrap(); // deep-copies the tail already
        // Appending to the original: its tail page is refcount 1 (the fork
        // copied), so no further copy.
        let before = s.stats().device_used;
        grow(&s, c, f, 8, 4);
        assert_eq!(s.stats().device_used, before);
        assert_eq!(s.length(c, g).unwrap(), 8);
    }

    #[test]
    fn positions_preserved_never_renumbered() {
        let s = store();
        let c = caller(1, 1);
        let f = s.create(c, "sparse.kv", Sharing::PRIVATE).unwrap();
        let toks: Vec<(TokenId, Position)> = vec![(3, 5), (4, 9), (5, 100)];
        s.append(c, f, &build_entries(SEED, &toks)).unwrap();
        let got: Vec<Position> = s.read_back(c, f).unwrap().iter().map(|e| e.position).collect();
        assert_eq!(got, vec![5, 9, 100]);
    }

    #[test]
    fn append_rejects_stale_positions() {
        let s = store();
        let c = caller(1, 1);
        let f = s.create(c, "mono.kv", Sharing::PRIVATE).unwrap();
        grow(&s, c, f, 0, 10);
        let state = s.chain_state(c, f).unwrap();
        let bad = build_entries(state, &[(1, 9)]); // 9 <= max position 9
        assert_eq!(
            s.append(c, f, &bad).unwrap_err(),
            KvError::PositionConflict(9)
        );
        // Non-increasing inside the batch.
        let bad2 = build_entries(state, &[(1, 10), (2, 10)]);
        assert_eq!(
            s.append(c, f, &bad2).unwrap_err(),
            KvError::PositionConflict(10)
        );
        assert_eq!(s.length(c, f).unwrap(), 10); // untouched
    }

    #[test]
    fn extract_even_indices() {
        let s = store();
        let c = caller(1, 1);
        let f = s.create(c, "ten.kv", Sharing::PRIVATE).unwrap();
        grow(&s, c, f, 0, 10);
        let src = s.read_back(c, f).unwrap();
        let g = s.extract(c, f, &[0, 2, 4, 6, 8], "evens.kv").unwrap();
        let got = s.read_back(c, g).unwrap();
        assert_eq!(got.len(), 5);
        for (i, e) in got.iter().enumerate() {
            assert_eq!(e.position, src[2 * i].position);
            assert_eq!(e.token, src[2 * i].token);
        }
        // Fingerprints re-folded over the retained subsequence.
        let expect = build_entries(
            SEED,
            &got.iter().map(|e| (e.token, e.position)).collect::<Vec<_>>(),
        );
        assert_eq!(got, expect);
        // Source untouched, no page sharing.
        assert_eq!(s.read_back(c, f).unwrap(), src);
        let src_pages: Vec<PageId> = s.page_info(c, f).unwrap().iter().map(|p| p.id).collect();
        assert!(s.page_info(c, g).unwrap().iter().all(|p| !src_pages.contains(&p.id)));
    }

    #[test]
    fn extract_prefix_keeps_original_fingerprints() {
        // Chain property: re-folding a strict prefix reproduces the stored
        // fingerprints, which is what makes extract-based rollback exact.
        let s = store();
        let c = caller(1, 1);
        let f = s.create(c, "roll.kv", Sharing::PRIVATE).unwrap();
        grow(&s, c, f, 0, 40);
        let src = s.read_back(c, f).unwrap();
        let g = s
            .extract(c, f, &(0..25u64).collect::<Vec<_>>(), "roll25.kv")
            .unwrap();
        assert_eq!(s.read_back(c, g).unwrap(), src[..25]);
    }

    #[test]
    fn extract_pruned_continuation_matches_oracle() {
        let cfg = ModelConfig {
            vocab_size: 32,
            model_seed: SEED,
            ..ModelConfig::default()
        };
        let s = store();
        let c = caller(1, 1);
        let f = s.create(c, "prune.kv", Sharing::PRIVATE).unwrap();
        grow(&s, c, f, 0, 12);
        let g = s.extract(c, f, &[0, 3, 5, 7, 11], "pruned.kv").unwrap();
        let kept = s.read_back(c, g).unwrap();
        // Continue on the pruned file via compute_pred.
        let next: Vec<(TokenId, Position)> = vec![(9, 50), (2, 51)];
        let dists = crate::model::compute_pred(&s, c, g, &next, &cfg).unwrap();
        // Oracle over the pruned entries plus the continuation.
        let mut seq: Vec<(TokenId, Position)> =
            kept.iter().map(|e| (e.token, e.position)).collect();
        seq.extend(&next);
        let oracle = oracle_from_scratch(&seq, &cfg);
        for (a, b) in dists.iter().zip(&oracle[5..]) {
            assert_eq!(a.probs(), b.probs());
        }
    }

    #[test]
    fn extract_validates_indices() {
        let s = store();
        let c = caller(1, 1);
        let f = s.create(c, "ix.kv", Sharing::PRIVATE).unwrap();
        grow(&s, c, f, 0, 5);
        assert_eq!(
            s.extract(c, f, &[0, 5], "bad.kv").unwrap_err(),
            KvError::IndexOutOfRange(5)
        );
        assert_eq!(
            s.extract(c, f, &[2, 2], "dup.kv").unwrap_err(),
            KvError::IndexOutOfRange(2)
        );
        assert_eq!(
            s.extract(c, f, &[3, 1], "desc.kv").unwrap_err(),
            KvError::IndexOutOfRange(1)
        );
        assert!(s.open(c, "bad.kv").is_err()); // nothing created
    }

    #[test]
    fn merge_disjoint_sorts_by_position() {
        let s = store();
        let c = caller(1, 1);
        let a = s.create(c, "a.kv", Sharing::PRIVATE).unwrap();
        s.append(c, a, &build_entries(SEED, &[(1, 0), (2, 4)])).unwrap();
        let b = s.create(c, "b.kv", Sharing::PRIVATE).unwrap();
        s.append(c, b, &build_entries(SEED, &[(3, 1), (4, 2)])).unwrap();
        let m = s.merge(c, &[a, b], "m.kv").unwrap();
        let got = s.read_back(c, m).unwrap();
        let positions: Vec<Position> = got.iter().map(|e| e.position).collect();
        assert_eq!(positions, vec![0, 1, 2, 4]);
        let tokens: Vec<TokenId> = got.iter().map(|e| e.token).collect();
        assert_eq!(tokens, vec![1, 3, 4, 2]);
        // Chain recomputed over the merged order.
        let expect = build_entries(SEED, &[(1, 0), (3, 1), (4, 2), (2, 4)]);
        assert_eq!(got, expect);
    }

    #[test]
    fn merge_overlap_is_position_conflict() {
        let s = store();
        let c = caller(1, 1);
        let a = s.create(c, "a2.kv", Sharing::PRIVATE).unwrap();
        s.append(c, a, &build_entries(SEED, &[(1, 0), (2, 3)])).unwrap();
        let b = s.create(c, "b2.kv", Sharing::PRIVATE).unwrap();
        s.append(c, b, &build_entries(SEED, &[(9, 3)])).unwrap();
        assert_eq!(
            s.merge(c, &[a, b], "m2.kv").unwrap_err(),
            KvError::PositionConflict(3)
        );
        assert!(s.open(c, "m2.kv").is_err());
    }

    #[test]
    fn remove_frees_only_unreferenced_pages() {
        let s = store();
        let c = caller(1, 1);
        let f = s.create(c, "rm.kv", Sharing::PRIVATE).unwrap();
        grow(&s, c, f, 0, 48); // 3 full pages
        let g = s.fork(c, f).unwrap(); // shares all 3
        assert_eq!(s.stats().device_used, 3);
        s.remove(c, f).unwrap();
        assert_eq!(s.stats().device_used, 3); // still referenced by the fork
        assert_eq!(s.length(c, g).unwrap(), 48);
        assert_eq!(s.read_back(c, f).unwrap_err(), KvError::NotFound);
        s.remove(c, g).unwrap();
        assert_eq!(s.stats().device_used, 0);
        // Name free for reuse after unlink.
        s.create(c, "rm.kv", Sharing::PRIVATE).unwrap();
    }

    #[test]
    fn name_collision_and_open_permissions() {
        let s = store();
        let owner = caller(1, 1);
        let other = caller(2, 2);
        s.create(owner, "secret.kv", Sharing::PRIVATE).unwrap();
        assert_eq!(
            s.create(other, "secret.kv", Sharing::PRIVATE).unwrap_err(),
            KvError::NameExists("secret.kv".into())
        );
        assert_eq!(s.open(other, "secret.kv").unwrap_err(), KvError::PermissionDenied);
        assert_eq!(s.open(other, "nope.kv").unwrap_err(), KvError::NotFound);

        let shared = s.create(owner, "shared.kv", Sharing::READ_SHARED).unwrap();
        assert_eq!(s.open(other, "shared.kv").unwrap(), shared);
        // Read-shared grants fork but not append.
        grow(&s, owner, shared, 0, 4);
        assert!(s.fork(other, shared).is_ok());
        let state = s.chain_state(other, shared).unwrap();
        assert_eq!(
            s.append(other, shared, &build_entries(state, &[(1, 99)]))
                .unwrap_err(),
            KvError::PermissionDenied
        );
    }

    #[test]
    fn write_shared_allows_other_principals() {
        let s = store();
        let owner = caller(1, 1);
        let other = caller(2, 2);
        let f = s.create(owner, "pub.kv", Sharing::PUBLIC).unwrap();
        let state = s.chain_state(other, f).unwrap();
        s.append(other, f, &build_entries(state, &[(5, 0)])).unwrap();
        s.remove(other, f).unwrap();
    }

    #[test]
    fn lock_blocks_other_writers_not_readers() {
        let s = store();
        let t1 = caller(1, 1);
        let t2 = caller(1, 2); // same principal, different thread
        let f = s.create(t1, "locked.kv", Sharing::PRIVATE).unwrap();
        grow(&s, t1, f, 0, 4);
        s.lock(t1, f).unwrap();
        assert_eq!(s.lock(t1, f).unwrap_err(), KvError::Locked); // no reentry
        assert_eq!(s.lock(t2, f).unwrap_err(), KvError::Locked);
        let state = s.chain_state(t2, f).unwrap();
        assert_eq!(
            s.append(t2, f, &build_entries(state, &[(1, 10)])).unwrap_err(),
            KvError::Locked
        );
        assert_eq!(s.remove(t2, f).unwrap_err(), KvError::Locked);
        // Reads and forks unaffected.
        assert_eq!(s.read_back(t2, f).unwrap().len(), 4);
        assert!(s.fork(t2, f).is_ok());
        // Holder writes fine.
        grow(&s, t1, f, 10, 2);
        assert_eq!(s.unlock(t2, f).unwrap_err(), KvError::NotLockHolder);
        s.unlock(t1, f).unwrap();
        assert_eq!(s.unlock(t1, f).unwrap_err(), KvError::NotLockHolder);
        grow(&s, t2, f, 20, 1);
    }

    #[test]
    fn release_locks_of_thread() {
        let s = store();
        let t1 = caller(1, 7);
        let f = s.create(t1, "l1.kv", Sharing::PRIVATE).unwrap();
        let g = s.create(t1, "l2.kv", Sharing::PRIVATE).unwrap();
        s.lock(t1, f).unwrap();
        s.lock(t1, g).unwrap();
        assert_eq!(s.release_locks_of(Tid(7)), 2);
        s.lock(caller(1, 8), f).unwrap();
    }

    #[test]
    fn pool_exhaustion_is_atomic() {
        let s = small_store(4);
        let c = caller(1, 1);
        let f = s.create(c, "big.kv", Sharing::PRIVATE).unwrap();
        grow(&s, c, f, 0, 60); // 4 pages, 60 entries (tail fill 12)
        let snapshot = s.read_back(c, f).unwrap();
        let stats = s.stats();
        let state = s.chain_state(c, f).unwrap();
        let toks: Vec<(TokenId, Position)> = (60..90).map(|p| (1, p)).collect();
        let err = s.append(c, f, &build_entries(state, &toks)).unwrap_err();
        assert!(matches!(err, KvError::PoolExhausted { tier: Tier::Device, .. }));
        // Nothing changed: length, content, pool counters.
        assert_eq!(s.read_back(c, f).unwrap(), snapshot);
        assert_eq!(s.stats(), stats);
        // Fork needs a tail copy; also refused atomically.
        assert!(matches!(
            s.fork(c, f).unwrap_err(),
            KvError::PoolExhausted { .. }
        ));
        // Freeing makes the same append succeed: eviction is the caller's
        // decision, never automatic.
        s.remove(c, f).unwrap();
        let f2 = s.create(c, "big2.kv", Sharing::PRIVATE).unwrap();
        grow(&s, c, f2, 0, 30);
    }

    #[test]
    fn offload_restore_roundtrip() {
        let s = store();
        let c = caller(1, 1);
        let f = s.create(c, "off.kv", Sharing::PRIVATE).unwrap();
        grow(&s, c, f, 0, 40); // 3 pages
        let g = s.fork(c, f).unwrap(); // shares 2 full pages, copies tail
        let content = s.read_back(c, f).unwrap();
        let before = s.stats();

        let moved = s.offload(c, f).unwrap();
        assert_eq!(moved, 1); // only the exclusively owned tail
        let during = s.stats();
        assert_eq!(during.device_used, before.device_used - 1);
        assert_eq!(during.host_used, before.host_used + 1);
        assert_eq!(s.movable_pages(c, f, Tier::Host).unwrap(), 1);
        // Content identical while offloaded, and shared pages untouched.
        assert_eq!(s.read_back(c, f).unwrap(), content);
        assert!(s.page_info(c, g).unwrap().iter().all(|pg| pg.tier == Tier::Device));

        let back = s.restore(c, f).unwrap();
        assert_eq!(back, 1);
        assert_eq!(s.stats(), before);
        assert_eq!(s.read_back(c, f).unwrap(), content);
        assert!(s.page_info(c, f).unwrap().iter().all(|pg| pg.tier == Tier::Device));
    }

    #[test]
    fn restore_into_full_pool_fails_atomically() {
        let s = small_store(4);
        let c = caller(1, 1);
        let f = s.create(c, "a.kv", Sharing::PRIVATE).unwrap();
        grow(&s, c, f, 0, 32); // 2 pages
        assert_eq!(s.offload(c, f).unwrap(), 2);
        // Fill the freed device space.
        let g = s.create(c, "b.kv", Sharing::PRIVATE).unwrap();
        grow(&s, c, g, 0, 50); // 4 pages: pool now full
        let err = s.restore(c, f).unwrap_err();
        assert!(matches!(err, KvError::PoolExhausted { tier: Tier::Device, needed: 2, .. }));
        // Still fully host-resident, content intact.
        assert_eq!(s.movable_pages(c, f, Tier::Host).unwrap(), 2);
        assert_eq!(s.length(c, f).unwrap(), 32);
    }

    #[test]
    fn append_while_offloaded_lands_on_existing_tail_tier() {
        // Residency never affects content; appends work wherever the tail
        // lives and fresh pages allocate on device.
        let s = store();
        let c = caller(1, 1);
        let f = s.create(c, "mix.kv", Sharing::PRIVATE).unwrap();
        grow(&s, c, f, 0, 20); // 2 pages, tail fill 4
        s.offload(c, f).unwrap();
        grow(&s, c, f, 20, 30); // fills host tail, allocates device pages
        assert_eq!(s.length(c, f).unwrap(), 50);
        let tiers: Vec<Tier> = s.page_info(c, f).unwrap().iter().map(|pg| pg.tier).collect();
        assert_eq!(tiers[0], Tier::Host);
        assert_eq!(tiers[1], Tier::Host);
        assert!(tiers[2..].iter().all(|t| *t == Tier::Device));
        s.audit().unwrap();
    }

    #[test]
    fn chain_state_of_empty_file_is_model_seed() {
        let s = store();
        let c = caller(1, 1);
        let f = s.create(c, "empty.kv", Sharing::PRIVATE).unwrap();
        assert_eq!(s.chain_state(c, f).unwrap(), SEED);
        assert_eq!(s.read_back(c, f).unwrap(), vec![]);
        assert_eq!(s.page_info(c, f).unwrap(), vec![]);
    }

    #[test]
    fn audit_accepts_long_random_history() {
        let s = store();
        let c = caller(1, 1);
        let f = s.create(c, "h.kv", Sharing::PRIVATE).unwrap();
        grow(&s, c, f, 0, 100);
        let g = s.fork(c, f).unwrap();
        grow(&s, c, g, 100, 50);
        let e = s.extract(c, g, &(0..120u64).step_by(3).collect::<Vec<_>>(), "e.kv").unwrap();
        let m = s.merge(c, &[e], "m.kv").unwrap();
        s.offload(c, f).unwrap();
        s.remove(c, g).unwrap();
        s.restore(c, f).unwrap();
        let _ = m;
        s.audit().unwrap();
    }
}
