use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DepGraph, IacError};
use crate::canonical::{to_canonical_json, write_atomic};
use crate::dsl::{Scope, Value};
use crate::providers::Attrs;

pub const STATE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceState {
    pub address: String,
    pub provider: String,
    pub id: String,
    pub attrs: Attrs,
    pub depends_on: Vec<String>,
}

impl ResourceState {
    pub fn rtype(&self) -> &str {
        self.address.split('.').next().unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateFile {
    pub version: u32,
    pub serial: u64,
    /// Empty until the first successful write.
    pub lineage: String,
    pub resources: Vec<ResourceState>,
    pub outputs: BTreeMap<String, Value>,
}

impl Default for StateFile {
    fn default() -> Self {
        StateFile { version: STATE_VERSION, serial: 0, lineage: String::new(), resources: vec![], outputs: BTreeMap::new() }
    }
}

impl StateFile {
    pub fn resource(&self, address: &str) -> Option<&ResourceState> {
        self.resources.iter().find(|r| r.address == address)
    }

    pub(crate) fn upsert(&mut self, rs: ResourceState) {
        self.resources.retain(|r| r.address != rs.address);
        self.resources.push(rs);
        self.resources.sort_by(|a, b| a.address.cmp(&b.address));
    }

    pub(crate) fn remove(&mut self, address: &str) {
        self.resources.retain(|r| r.address != address);
    }

    /// Graph of recorded `depends_on` edges (only between recorded resources).
    pub fn graph(&self) -> DepGraph {
        let nodes: Vec<String> = self.resources.iter().map(|r| r.address.clone()).collect();
        let edges = self.resources.iter().flat_map(|r| {
            r.depends_on
                .iter()
                .filter(|d| self.resource(d).is_some())
                .map(|d| (r.address.clone(), d.clone()))
                .collect::<Vec<_>>()
        });
        DepGraph::from_parts(nodes, edges)
    }

    /// `type.name` → id and `type.name.attr` → value for every resource.
    pub fn scope(&self) -> Scope {
        let mut scope = Scope::new();
        for r in &self.resources {
            scope.insert(r.address.clone(), Value::from(r.id.as_str()));
            for (k, v) in &r.attrs {
                scope.insert(format!("{}.{k}", r.address), v.clone());
            }
        }
        scope
    }

    /// Bumps the serial and fixes the lineage on first write.
    pub(crate) fn advance(&mut self) {
        self.serial += 1;
        if self.lineage.is_empty() {
            self.lineage = uuid::Uuid::new_v4().to_string();
        }
    }

    pub fn to_json(&self) -> String {
        to_canonical_json(self).expect("state serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, IacError> {
        let state: StateFile = serde_json::from_str(text).map_err(|e| IacError::State(e.to_string()))?;
        if state.version != STATE_VERSION {
            return Err(IacError::State(format!("unsupported state version {}", state.version)));
        }
        Ok(state)
    }
}

/// A state file on disk with its single-writer lock.
#[derive(Debug, Clone)]
pub struct StateStore {
    path: PathBuf,
}

/// Held while a writer owns the state; removes the lock file on drop.
#[derive(Debug)]
pub struct LockGuard {
    path: PathBuf,
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

impl StateStore {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        StateStore { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn lock_path(&self) -> PathBuf {
        let mut p = self.path.clone().into_os_string();
        p.push(".lock");
        PathBuf::from(p)
    }

    /// Missing file reads as the empty state.
    pub fn load(&self) -> Result<StateFile, IacError> {
        match fs::read_to_string(&self.path) {
            Ok(text) => StateFile::from_json(&text),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(StateFile::default()),
            Err(e) => Err(e.into()),
        }
    }

    pub fn save(&self, state: &StateFile) -> Result<(), IacError> {
        write_atomic(&self.path, state.to_json().as_bytes())?;
        Ok(())
    }

    /// Fails fast with `LockHeld` if another writer holds the lock.
    pub fn lock(&self) -> Result<LockGuard, IacError> {
        let lock = self.lock_path();
        if let Some(dir) = lock.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        match fs::OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(_) => Ok(LockGuard { path: lock }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(IacError::LockHeld(lock)),
            Err(e) => Err(e.into()),
        }
    }
}
