//! Source revisions, checkout into workspaces, and the polling trigger.
//!
//! Two backends: `git` (through the installed `git` executable) and `dir`,
//! where a revision is the SHA-256 of a canonical listing of the tree. The
//! listing holds one line per regular file, in lexicographic order of the
//! `/`-separated relative path: `<relpath>\0<sha256-hex-of-bytes>\n`.
//! Symlinks and empty directories do not contribute.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RepoKind {
    Git,
    Dir,
}

impl RepoKind {
    pub fn id_len(self) -> usize {
        match self {
            RepoKind::Git => 40,
            RepoKind::Dir => 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepoRef {
    pub kind: RepoKind,
    pub location: String,
    pub branch: String,
}

impl RepoRef {
    pub fn dir(location: impl Into<String>) -> Self {
        RepoRef { kind: RepoKind::Dir, location: location.into(), branch: "main".into() }
    }

    pub fn git(location: impl Into<String>, branch: impl Into<String>) -> Self {
        RepoRef { kind: RepoKind::Git, location: location.into(), branch: branch.into() }
    }

    pub fn validate(&self) -> Result<(), ScmError> {
        if self.location.is_empty() {
            return Err(ScmError::RepoUnreachable("empty repository location".into()));
        }
        if self.kind == RepoKind::Dir && !Path::new(&self.location).is_dir() {
            return Err(ScmError::RepoUnreachable(format!("{} is not a directory", self.location)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Revision {
    pub id: String,
    pub message: Option<String>,
    pub observed_at: DateTime<Utc>,
}

impl Revision {
    pub fn new(id: impl Into<String>) -> Self {
        Revision { id: id.into(), message: None, observed_at: Utc::now() }
    }

    pub fn is_valid_for(&self, kind: RepoKind) -> bool {
        self.id.len() == kind.id_len() && self.id.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PollerConfig {
    pub repo: RepoRef,
    pub interval_s: f64,
    pub pipeline: String,
}

#[derive(Debug, Error)]
pub enum ScmError {
    #[error("repository unreachable: {0}")]
    RepoUnreachable(String),
    #[error("branch `{0}` not found")]
    BranchNotFound(String),
    #[error("revision {expected} is no longer the head (now {found})")]
    RevisionVanished { expected: String, found: String },
    #[error("checkout destination {} is not empty", .0.display())]
    DestinationNotEmpty(PathBuf),
    #[error("invalid revision id `{0}`")]
    InvalidRevision(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Canonical content hash of a directory tree.
pub fn dir_hash(root: &Path) -> std::io::Result<String> {
    let mut files = Vec::new();
    for entry in walkdir::WalkDir::new(root).follow_links(false) {
        let entry = entry.map_err(std::io::Error::other)?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(root).expect("walk stays under root");
        let rel: Vec<String> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
        files.push((rel.join("/"), entry.into_path()));
    }
    files.sort_by(|a, b| a.0.cmp(&b.0));

    let mut listing = Sha256::new();
    for (rel, path) in files {
        let digest = Sha256::digest(fs::read(&path)?);
        listing.update(rel.as_bytes());
        listing.update(b"\0");
        listing.update(hex::encode(digest).as_bytes());
        listing.update(b"\n");
    }
    Ok(hex::encode(listing.finalize()))
}

fn git(args: &[&str], cwd: Option<&Path>) -> Result<String, ScmError> {
    let mut cmd = Command::new("git");
    cmd.args(args).env("GIT_TERMINAL_PROMPT", "0");
    if let Some(dir) = cwd {
        cmd.current_dir(dir);
    }
    let out = cmd.output().map_err(|e| ScmError::RepoUnreachable(format!("cannot run git: {e}")))?;
    if !out.status.success() {
        return Err(ScmError::RepoUnreachable(String::from_utf8_lossy(&out.stderr).trim().to_string()));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

/// Current head of `repo`.
pub fn head(repo: &RepoRef) -> Result<Revision, ScmError> {
    repo.validate()?;
    match repo.kind {
        RepoKind::Dir => {
            let id = dir_hash(Path::new(&repo.location)).map_err(|e| ScmError::RepoUnreachable(e.to_string()))?;
            Ok(Revision::new(id))
        }
        RepoKind::Git => {
            let refname = format!("refs/heads/{}", repo.branch);
            let out = git(&["ls-remote", &repo.location, &refname], None)?;
            let id = out
                .lines()
                .find_map(|l| l.split_once('\t').filter(|(_, r)| *r == refname).map(|(id, _)| id.to_string()))
                .ok_or_else(|| ScmError::BranchNotFound(repo.branch.clone()))?;
            let mut rev = Revision::new(id);
            if Path::new(&repo.location).is_dir() {
                rev.message = git(&["log", "-1", "--format=%s", &rev.id], Some(Path::new(&repo.location)))
                    .ok()
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty());
            }
            Ok(rev)
        }
    }
}

pub(crate) fn copy_tree(src: &Path, dest: &Path) -> std::io::Result<()> {
    for entry in walkdir::WalkDir::new(src).follow_links(false) {
        let entry = entry.map_err(std::io::Error::other)?;
        let rel = entry.path().strip_prefix(src).expect("walk stays under src");
        let target = dest.join(rel);
        if entry.file_type().is_dir() {
            fs::create_dir_all(&target)?;
        } else if entry.file_type().is_file() {
            fs::copy(entry.path(), &target)?;
        }
    }
    Ok(())
}

/// Materializes `rev` into `dest`, which must be absent or empty.
pub fn checkout(repo: &RepoRef, rev: &Revision, dest: &Path) -> Result<(), ScmError> {
    if !rev.is_valid_for(repo.kind) {
        return Err(ScmError::InvalidRevision(rev.id.clone()));
    }
    if dest.exists() && fs::read_dir(dest)?.next().is_some() {
        return Err(ScmError::DestinationNotEmpty(dest.to_path_buf()));
    }
    repo.validate()?;
    match repo.kind {
        RepoKind::Dir => {
            let src = Path::new(&repo.location);
            let current = head(repo)?;
            if current.id != rev.id {
                return Err(ScmError::RevisionVanished { expected: rev.id.clone(), found: current.id });
            }
            fs::create_dir_all(dest)?;
            copy_tree(src, dest)?;
            let copied = dir_hash(dest)?;
            if copied != rev.id {
                clear_dir(dest)?;
                return Err(ScmError::RevisionVanished { expected: rev.id.clone(), found: copied });
            }
            Ok(())
        }
        RepoKind::Git => {
            let dest_str = dest.to_string_lossy();
            git(&["clone", "--quiet", "--no-checkout", &repo.location, &dest_str], None)?;
            if let Err(e) = git(&["checkout", "--quiet", "--detach", &rev.id], Some(dest)) {
                clear_dir(dest)?;
                return Err(match e {
                    ScmError::RepoUnreachable(msg) => ScmError::RevisionVanished { expected: rev.id.clone(), found: msg },
                    other => other,
                });
            }
            Ok(())
        }
    }
}

fn clear_dir(dir: &Path) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() && !p.is_symlink() {
            fs::remove_dir_all(p)?;
        } else {
            fs::remove_file(p)?;
        }
    }
    Ok(())
}

/// The new head if it differs from `last_seen`. An unreachable repository
/// is logged and reported as no change.
pub fn poll_once(cfg: &PollerConfig, last_seen: Option<&Revision>) -> Option<Revision> {
    match head(&cfg.repo) {
        Ok(rev) if last_seen.is_some_and(|l| l.id == rev.id) => None,
        Ok(rev) => Some(rev),
        Err(e) => {
            tracing::warn!(pipeline = %cfg.pipeline, error = %e, "poll failed; will retry next tick");
            None
        }
    }
}

/// A background polling loop. Stops when dropped.
pub struct Poller {
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl Poller {
    /// Polls every `interval_s`, calling `on_change` with each new head.
    /// `last_seen` is the baseline; with none, the head at start becomes the
    /// baseline so startup alone does not trigger.
    pub fn spawn(
        cfg: PollerConfig,
        last_seen: Option<Revision>,
        on_change: impl Fn(Revision) + Send + 'static,
    ) -> Poller {
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let thread = thread::Builder::new()
            .name(format!("poll-{}", cfg.pipeline))
            .spawn(move || {
                let interval = Duration::from_secs_f64(cfg.interval_s.max(1.0));
                let mut last = last_seen.or_else(|| head(&cfg.repo).ok());
                loop {
                    if sleep_unless_stopped(&flag, interval) {
                        return;
                    }
                    if let Some(rev) = poll_once(&cfg, last.as_ref()) {
                        last = Some(rev.clone());
                        on_change(rev);
                    }
                }
            })
            .expect("spawn poller thread");
        Poller { stop, thread: Some(thread) }
    }
}

/// Returns true if stopped during the sleep.
fn sleep_unless_stopped(flag: &AtomicBool, total: Duration) -> bool {
    let step = Duration::from_millis(50);
    let mut slept = Duration::ZERO;
    while slept < total {
        if flag.load(Ordering::SeqCst) {
            return true;
        }
        let d = step.min(total - slept);
        thread::sleep(d);
        slept += d;
    }
    flag.load(Ordering::SeqCst)
}

impl Drop for Poller {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
