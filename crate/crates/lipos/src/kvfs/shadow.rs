//! A deliberately naive reference implementation of the store's file
//! semantics: every file owns a plain deep-copied entry vector, no pages,
//! no sharing, no pools. Property tests drive the real store and this
//! shadow with the same operation sequence and require identical results —
//! any divergence pins the copy-on-write machinery, not the test.
//!
//! Capacity is the one semantic the shadow does not model; drive it with
//! workloads that fit the real store's pools (or treat `PoolExhausted`
//! separately).

use super::{Caller, FileId, KvEntry, KvError, KvResult, Perms, Sharing};
use crate::model::build_entries;
use crate::types::{Position, Principal, Tid, TokenId};
use std::collections::BTreeMap;

struct ShadowFile {
    name: Option<String>,
    perms: Perms,
    entries: Vec<KvEntry>,
    lock: Option<Tid>,
}

pub struct ShadowStore {
    model_seed: u64,
    files: BTreeMap<FileId, ShadowFile>,
    names: BTreeMap<String, FileId>,
    next_file: u64,
}

impl ShadowStore {
    pub fn new(model_seed: u64) -> ShadowStore {
        ShadowStore {
            model_seed,
            files: BTreeMap::new(),
            names: BTreeMap::new(),
            next_file: 1,
        }
    }

    pub fn model_seed(&self) -> u64 {
        self.model_seed
    }

    fn fresh_file_id(&mut self) -> FileId {
        let id = FileId(self.next_file);
        self.next_file += 1;
        id
    }

    fn check_read(&self, caller: Caller, file: FileId) -> KvResult<&ShadowFile> {
        let f = self.files.get(&file).ok_or(KvError::NotFound)?;
        if f.perms.owner == caller.principal
            || caller.principal == Principal::SYSTEM
            || f.perms.readable_by_all
        {
            Ok(f)
        } else {
            Err(KvError::PermissionDenied)
        }
    }

    fn check_write(&self, caller: Caller, file: FileId) -> KvResult<()> {
        let f = self.files.get(&file).ok_or(KvError::NotFound)?;
        if f.perms.owner == caller.principal
            || caller.principal == Principal::SYSTEM
            || f.perms.writable_by_all
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

    pub fn create(&mut self, caller: Caller, name: &str, sharing: Sharing) -> KvResult<FileId> {
        if self.names.contains_key(name) {
            return Err(KvError::NameExists(name.to_string()));
        }
        let id = self.fresh_file_id();
        self.files.insert(
            id,
            ShadowFile {
                name: Some(name.to_string()),
                perms: Perms {
                    owner: caller.principal,
                    readable_by_all: sharing.readable_by_all,
                    writable_by_all: sharing.writable_by_all,
                },
                entries: Vec::new(),
                lock: None,
            },
        );
        self.names.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn open(&self, caller: Caller, name: &str) -> KvResult<FileId> {
        let id = *self.names.get(name).ok_or(KvError::NotFound)?;
        self.check_read(caller, id)?;
        Ok(id)
    }

    pub fn remove(&mut self, caller: Caller, file: FileId) -> KvResult<()> {
        self.check_write(caller, file)?;
        self.check_lock(caller, file)?;
        let f = self.files.remove(&file).expect("checked above");
        if let Some(name) = &f.name {
            self.names.remove(name);
        }
        Ok(())
    }

    pub fn length(&self, caller: Caller, file: FileId) -> KvResult<u64> {
        Ok(self.check_read(caller, file)?.entries.len() as u64)
    }

    pub fn read_back(&self, caller: Caller, file: FileId) -> KvResult<Vec<KvEntry>> {
        Ok(self.check_read(caller, file)?.entries.clone())
    }

    pub fn append(&mut self, caller: Caller, file: FileId, entries: &[KvEntry]) -> KvResult<()> {
        self.check_write(caller, file)?;
        self.check_lock(caller, file)?;
        if entries.is_empty() {
            return Ok(());
        }
        let mut prev = self.files[&file].entries.last().map(|e| e.position);
        for e in entries {
            if prev.is_some_and(|p| e.position <= p) {
                return Err(KvError::PositionConflict(e.position));
            }
            prev = Some(e.position);
        }
        self.files
            .get_mut(&file)
            .unwrap()
            .entries
            .extend_from_slice(entries);
        Ok(())
    }

    pub fn fork(&mut self, caller: Caller, src: FileId) -> KvResult<FileId> {
        let entries = self.check_read(caller, src)?.entries.clone();
        let id = self.fresh_file_id();
        self.files.insert(
            id,
            ShadowFile {
                name: None,
                perms: Perms {
                    owner: caller.principal,
                    readable_by_all: false,
                    writable_by_all: false,
                },
                entries,
                lock: None,
            },
        );
        Ok(id)
    }

    pub fn extract(
        &mut self,
        caller: Caller,
        src: FileId,
        indices: &[u64],
        name: &str,
    ) -> KvResult<FileId> {
        let len = self.check_read(caller, src)?.entries.len() as u64;
        if self.names.contains_key(name) {
            return Err(KvError::NameExists(name.to_string()));
        }
        let mut prev: Option<u64> = None;
        for &ix in indices {
            if ix >= len || prev.is_some_and(|p| ix <= p) {
                return Err(KvError::IndexOutOfRange(ix));
            }
            prev = Some(ix);
        }
        let picked: Vec<(TokenId, Position)> = {
            let entries = &self.files[&src].entries;
            indices
                .iter()
                .map(|&ix| {
                    let e = entries[ix as usize];
                    (e.token, e.position)
                })
                .collect()
        };
        let rebuilt = build_entries(self.model_seed, &picked);
        self.install_named(caller, name, rebuilt)
    }

    pub fn merge(&mut self, caller: Caller, parts: &[FileId], name: &str) -> KvResult<FileId> {
        for &f in parts {
            self.check_read(caller, f)?;
        }
        if self.names.contains_key(name) {
            return Err(KvError::NameExists(name.to_string()));
        }
        let mut union: Vec<(TokenId, Position)> = Vec::new();
        for &f in parts {
            union.extend(self.files[&f].entries.iter().map(|e| (e.token, e.position)));
        }
        union.sort_by_key(|&(_, pos)| pos);
        for w in union.windows(2) {
            if w[0].1 == w[1].1 {
                return Err(KvError::PositionConflict(w[0].1));
            }
        }
        let rebuilt = build_entries(self.model_seed, &union);
        self.install_named(caller, name, rebuilt)
    }

    fn install_named(
        &mut self,
        caller: Caller,
        name: &str,
        entries: Vec<KvEntry>,
    ) -> KvResult<FileId> {
        let id = self.fresh_file_id();
        self.files.insert(
            id,
            ShadowFile {
                name: Some(name.to_string()),
                perms: Perms {
                    owner: caller.principal,
                    readable_by_all: false,
                    writable_by_all: false,
                },
                entries,
                lock: None,
            },
        );
        self.names.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn lock(&mut self, caller: Caller, file: FileId) -> KvResult<()> {
        self.check_write(caller, file)?;
        let f = self.files.get_mut(&file).unwrap();
        if f.lock.is_some() {
            return Err(KvError::Locked);
        }
        f.lock = Some(caller.thread);
        Ok(())
    }

    pub fn unlock(&mut self, caller: Caller, file: FileId) -> KvResult<()> {
        if !self.files.contains_key(&file) {
            return Err(KvError::NotFound);
        }
        let f = self.files.get_mut(&file).unwrap();
        if f.lock != Some(caller.thread) {
            return Err(KvError::NotLockHolder);
        }
        f.lock = None;
        Ok(())
    }

    pub fn release_locks_of(&mut self, thread: Tid) -> usize {
        let mut released = 0;
        for f in self.files.values_mut() {
            if f.lock == Some(thread) {
                f.lock = None;
                released += 1;
            }
        }
        released
    }

    /// Names currently bound, ascending.
    pub fn names(&self) -> Vec<String> {
        self.names.keys().cloned().collect()
    }
}
