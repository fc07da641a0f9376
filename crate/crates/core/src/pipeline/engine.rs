//! Run scheduling and execution.
//!
//! Each pipeline has one worker thread consuming a FIFO of queued runs, so
//! runs of one pipeline are serial while different pipelines proceed in
//! parallel. A run's record and its log live behind one mutex; readers take
//! consistent snapshots and approval decisions are a compare-and-set on it.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use chrono::Utc;
use parking_lot::{Condvar, Mutex, RwLock};
use thiserror::Error;

use super::env::provision_test_env;
use super::run::*;
use super::spec::{Job, PipelineSpec, Stage, StageBody};
use crate::canonical::{to_canonical_json, write_atomic};
use crate::dsl::{eval_expr, Expr, Value};
use crate::iac::StateStore;
use crate::process::{run_shell, Stream};
use crate::scm::{self, Poller, PollerConfig, Revision, ScmError};

pub const DEFAULT_STEP_TIMEOUT: Duration = Duration::from_secs(300);
pub const DEFAULT_RETAIN_WORKSPACES: usize = 5;
pub const DEFAULT_LOG_PAGE: usize = 1000;

/// Parallel job slots: the logical CPU count, but never fewer than two.
pub fn default_pool_size() -> usize {
    thread::available_parallelism().map(|n| n.get()).unwrap_or(1).max(2)
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub data_dir: PathBuf,
    /// Infrastructure state consulted when resolving deploy targets.
    pub infra_state: PathBuf,
    pub pool_size: usize,
    pub retain_workspaces: usize,
    pub step_timeout: Duration,
}

impl EngineConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        let data_dir = data_dir.into();
        EngineConfig {
            infra_state: data_dir.join("infra.state.json"),
            data_dir,
            pool_size: default_pool_size(),
            retain_workspaces: DEFAULT_RETAIN_WORKSPACES,
            step_timeout: DEFAULT_STEP_TIMEOUT,
        }
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("unknown pipeline `{0}`")]
    UnknownPipeline(String),
    #[error("unknown run `{0}`")]
    UnknownRun(String),
    #[error("run {run} is not waiting for approval (state {state:?})")]
    NotWaiting { run: String, state: RunState },
    #[error("invalid revision `{0}`")]
    InvalidRevision(String),
    #[error(transparent)]
    Scm(#[from] ScmError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunMetricsEntry {
    pub run_id: String,
    pub pipeline: String,
    pub metrics: RunMetrics,
}

struct RunRecord {
    run: Run,
    log: Vec<String>,
    log_file: Option<File>,
    dir: PathBuf,
}

impl RunRecord {
    fn emit(&mut self, scope: &str, stream: LogStream, text: &str) {
        for line in text.split('\n') {
            let ev = LogEvent {
                seq: self.log.len() as u64,
                ts: Utc::now(),
                scope: scope.to_string(),
                stream,
                text: line.trim_end_matches('\r').to_string(),
            };
            let rendered = ev.render();
            if let Some(f) = self.log_file.as_mut() {
                if let Err(e) = writeln!(f, "{rendered}") {
                    tracing::error!(run = %self.run.id, error = %e, "cannot append to run log");
                }
            }
            self.log.push(rendered);
        }
    }

    fn persist(&self) {
        let json = to_canonical_json(&self.run).expect("run serializes");
        if let Err(e) = write_atomic(&self.dir.join("run.json"), json.as_bytes()) {
            tracing::error!(run = %self.run.id, error = %e, "cannot persist run");
        }
    }

    /// Moves the run to a terminal state, settling every unfinished stage.
    fn finish(&mut self, state: RunState, reason: Option<String>) {
        let now = Utc::now();
        for s in &mut self.run.stage_results {
            match s.status {
                StageStatus::Pending => s.status = StageStatus::Skipped,
                StageStatus::Running | StageStatus::WaitingApproval => {
                    s.status = StageStatus::Aborted;
                    s.finished_at.get_or_insert(now);
                }
                _ => {}
            }
        }
        if self.run.reason.is_none() {
            self.run.reason = reason;
        }
        self.run.transition(state);
        self.run.finished_at = Some(now);
        self.run.metrics = compute_metrics(&self.run).ok();
        if let Some(reason) = self.run.reason.clone() {
            if state != RunState::Succeeded {
                self.emit("run", LogStream::Sys, &reason);
            }
        }
        self.emit("run", LogStream::Sys, &format!("Finished: {}", state.outcome_word()));
        self.persist();
    }
}

struct RunSlot {
    rec: Mutex<RunRecord>,
    gate: Condvar,
}

struct Queue {
    next: u64,
    tx: mpsc::Sender<Arc<RunSlot>>,
}

/// Counting semaphore bounding concurrently running parallel jobs.
struct Pool {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Pool {
    fn acquire(&self) -> PoolPermit<'_> {
        let mut free = self.free.lock();
        while *free == 0 {
            self.cv.wait(&mut free);
        }
        *free -= 1;
        PoolPermit(self)
    }
}

struct PoolPermit<'a>(&'a Pool);

impl Drop for PoolPermit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock() += 1;
        self.0.cv.notify_one();
    }
}

struct Shared {
    cfg: EngineConfig,
    pipelines: BTreeMap<String, PipelineSpec>,
    runs: RwLock<BTreeMap<String, Arc<RunSlot>>>,
    queues: Mutex<BTreeMap<String, Queue>>,
    pool: Pool,
    shutdown: AtomicBool,
    workers: Mutex<Vec<JoinHandle<()>>>,
    pollers: Mutex<Vec<Poller>>,
}

/// Handle to the pipeline engine; clones share one engine.
#[derive(Clone)]
pub struct Engine {
    shared: Arc<Shared>,
}

impl Engine {
    /// Loads persisted runs from `data_dir` and starts one worker per
    /// pipeline. Runs left queued are queued again; runs interrupted while
    /// executing are aborted.
    pub fn start(cfg: EngineConfig, pipelines: Vec<PipelineSpec>) -> Result<Engine, EngineError> {
        fs::create_dir_all(cfg.data_dir.join("runs"))?;
        fs::create_dir_all(cfg.data_dir.join("workspaces"))?;
        let pool = Pool { free: Mutex::new(cfg.pool_size.max(1)), cv: Condvar::new() };
        let shared = Arc::new(Shared {
            pipelines: pipelines.into_iter().map(|p| (p.name.clone(), p)).collect(),
            cfg,
            runs: RwLock::new(BTreeMap::new()),
            queues: Mutex::new(BTreeMap::new()),
            pool,
            shutdown: AtomicBool::new(false),
            workers: Mutex::new(Vec::new()),
            pollers: Mutex::new(Vec::new()),
        });

        let mut requeue: BTreeMap<String, Vec<Arc<RunSlot>>> = BTreeMap::new();
        let mut next: BTreeMap<String, u64> = BTreeMap::new();
        for slot in load_runs(&shared.cfg.data_dir)? {
            let (id, pipeline, number, state) = {
                let r = slot.rec.lock();
                (r.run.id.clone(), r.run.pipeline.clone(), r.run.number(), r.run.state)
            };
            let n = next.entry(pipeline.clone()).or_insert(0);
            *n = (*n).max(number);
            match state {
                RunState::Queued if shared.pipelines.contains_key(&pipeline) => {
                    requeue.entry(pipeline).or_default().push(slot.clone());
                }
                RunState::Running | RunState::WaitingApproval => {
                    slot.rec.lock().finish(RunState::Aborted, Some("interrupted by server restart".into()));
                }
                _ => {}
            }
            shared.runs.write().insert(id, slot);
        }

        let engine = Engine { shared };
        for name in engine.shared.pipelines.keys() {
            let (tx, rx) = mpsc::channel::<Arc<RunSlot>>();
            let mut pending = requeue.remove(name).unwrap_or_default();
            pending.sort_by_key(|s| s.rec.lock().run.number());
            for slot in pending {
                tx.send(slot).expect("receiver alive");
            }
            engine
                .shared
                .queues
                .lock()
                .insert(name.clone(), Queue { next: next.get(name).copied().unwrap_or(0) + 1, tx });
            let shared = engine.shared.clone();
            let worker = thread::Builder::new()
                .name(format!("pipeline-{name}"))
                .spawn(move || {
                    while let Ok(slot) = rx.recv() {
                        if shared.shutdown.load(Ordering::SeqCst) {
                            break;
                        }
                        execute(&shared, &slot);
                    }
                })?;
            engine.shared.workers.lock().push(worker);
        }
        Ok(engine)
    }

    pub fn config(&self) -> &EngineConfig {
        &self.shared.cfg
    }

    pub fn pipelines(&self) -> impl Iterator<Item = &PipelineSpec> {
        self.shared.pipelines.values()
    }

    pub fn pipeline(&self, name: &str) -> Option<&PipelineSpec> {
        self.shared.pipelines.get(name)
    }

    /// Starts a poller for every pipeline with a poll interval. The newest
    /// recorded run's revision is the baseline; without one, the head at
    /// startup is, so starting the server never triggers a run by itself.
    pub fn start_pollers(&self) {
        for spec in self.shared.pipelines.values() {
            let Some(interval_s) = spec.trigger.poll_interval_s else { continue };
            let cfg = PollerConfig { repo: spec.trigger.repo.clone(), interval_s, pipeline: spec.name.clone() };
            let baseline = self
                .runs(&spec.name, 1)
                .ok()
                .and_then(|r| r.into_iter().next())
                .map(|r| r.revision)
                .or_else(|| scm::head(&cfg.repo).ok());
            let engine = self.clone();
            let name = spec.name.clone();
            let poller = Poller::spawn(cfg, baseline, move |rev| {
                tracing::info!(pipeline = %name, revision = %rev.id, "new revision");
                if let Err(e) = engine.enqueue_revision(&name, rev, Cause::Poll) {
                    tracing::warn!(pipeline = %name, error = %e, "cannot enqueue polled revision");
                }
            });
            self.shared.pollers.lock().push(poller);
        }
    }

    /// Enqueues `revision` (or the current head when `None`).
    pub fn enqueue(&self, pipeline: &str, revision: Option<&str>, cause: Cause) -> Result<Run, EngineError> {
        let spec = self.pipeline(pipeline).ok_or_else(|| EngineError::UnknownPipeline(pipeline.to_string()))?;
        let rev = match revision {
            Some(id) => {
                let rev = Revision::new(id);
                if !rev.is_valid_for(spec.trigger.repo.kind) {
                    return Err(EngineError::InvalidRevision(id.to_string()));
                }
                rev
            }
            None => scm::head(&spec.trigger.repo)?,
        };
        self.enqueue_revision(pipeline, rev, cause)
    }

    /// Creates a queued run, unless a run of the same pipeline is still
    /// queued with the same revision; that run is returned instead.
    pub fn enqueue_revision(&self, pipeline: &str, revision: Revision, cause: Cause) -> Result<Run, EngineError> {
        let spec = self.pipeline(pipeline).ok_or_else(|| EngineError::UnknownPipeline(pipeline.to_string()))?;
        let mut queues = self.shared.queues.lock();
        let queue = queues.get_mut(pipeline).ok_or_else(|| EngineError::UnknownPipeline(pipeline.to_string()))?;

        for slot in self.shared.runs.read().values() {
            let r = slot.rec.lock();
            if r.run.pipeline == pipeline && r.run.state == RunState::Queued && r.run.revision.id == revision.id {
                return Ok(r.run.clone());
            }
        }

        let id = format!("{pipeline}-{}", queue.next);
        let dir = self.shared.cfg.data_dir.join("runs").join(pipeline).join(&id);
        fs::create_dir_all(&dir)?;
        let log_file = OpenOptions::new().create(true).append(true).open(dir.join("log"))?;
        let run = Run {
            id: id.clone(),
            pipeline: pipeline.to_string(),
            revision,
            cause,
            state: RunState::Queued,
            created_at: Utc::now(),
            started_at: None,
            finished_at: None,
            stage_results: spec.stages.iter().map(|s| StageResult::pending(&s.name)).collect(),
            metrics: None,
            reason: None,
        };
        let mut rec = RunRecord { run, log: Vec::new(), log_file: Some(log_file), dir };
        let cause_word = match cause {
            Cause::Poll => "SCM change",
            Cause::Webhook => "webhook",
            Cause::Manual => "manual trigger",
        };
        rec.emit("run", LogStream::Sys, &format!("Queued by {cause_word} at revision {}", rec.run.revision.id));
        rec.persist();
        let snapshot = rec.run.clone();
        let slot = Arc::new(RunSlot { rec: Mutex::new(rec), gate: Condvar::new() });
        self.shared.runs.write().insert(id, slot.clone());
        queue.next += 1;
        let _ = queue.tx.send(slot);
        Ok(snapshot)
    }

    fn slot(&self, id: &str) -> Result<Arc<RunSlot>, EngineError> {
        self.shared.runs.read().get(id).cloned().ok_or_else(|| EngineError::UnknownRun(id.to_string()))
    }

    pub fn run(&self, id: &str) -> Result<Run, EngineError> {
        Ok(self.slot(id)?.rec.lock().run.clone())
    }

    /// Newest first.
    pub fn runs(&self, pipeline: &str, limit: usize) -> Result<Vec<Run>, EngineError> {
        if !self.shared.pipelines.contains_key(pipeline) {
            return Err(EngineError::UnknownPipeline(pipeline.to_string()));
        }
        let mut runs: Vec<Run> = self
            .shared
            .runs
            .read()
            .values()
            .map(|s| s.rec.lock().run.clone())
            .filter(|r| r.pipeline == pipeline)
            .collect();
        runs.sort_by_key(|r| std::cmp::Reverse(r.number()));
        runs.truncate(limit);
        Ok(runs)
    }

    pub fn log(&self, id: &str, offset: usize, limit: usize) -> Result<LogPage, EngineError> {
        let slot = self.slot(id)?;
        let r = slot.rec.lock();
        let start = offset.min(r.log.len());
        let end = start.saturating_add(limit).min(r.log.len());
        let events = r.log[start..end].to_vec();
        Ok(LogPage { events, next_offset: end, complete: r.run.state.is_terminal() && end >= r.log.len() })
    }

    /// Records the first decision on a waiting run; later callers get
    /// `NotWaiting`. Approval resumes the run, rejection aborts it.
    pub fn resolve_approval(&self, id: &str, decision: Decision, by: &str) -> Result<Run, EngineError> {
        let slot = self.slot(id)?;
        let mut r = slot.rec.lock();
        let Some(idx) = r.run.stage_results.iter().position(|s| s.status == StageStatus::WaitingApproval) else {
            return Err(EngineError::NotWaiting { run: id.to_string(), state: r.run.state });
        };
        if r.run.state != RunState::WaitingApproval {
            return Err(EngineError::NotWaiting { run: id.to_string(), state: r.run.state });
        }
        let by = if by.trim().is_empty() { "anonymous" } else { by.trim() };
        let stage = r.run.stage_results[idx].stage.clone();
        {
            let gate = r.run.stage_results[idx].approval.as_mut().expect("waiting stage has a gate");
            gate.decision = Some(decision);
            gate.decided_by = Some(by.to_string());
            gate.decided_at = Some(Utc::now());
        }
        match decision {
            Decision::Approve => {
                r.emit(&stage, LogStream::Sys, &format!("Approved by {by}"));
                r.run.stage_results[idx].status = StageStatus::Running;
                r.run.transition(RunState::Running);
                r.persist();
            }
            Decision::Reject => {
                r.emit(&stage, LogStream::Sys, &format!("Rejected by {by}"));
                r.finish(RunState::Aborted, Some(format!("ApprovalRejected: rejected by {by}")));
            }
        }
        slot.gate.notify_all();
        Ok(r.run.clone())
    }

    /// Metrics of terminal runs, oldest first.
    pub fn metrics(&self, pipeline: Option<&str>) -> Vec<RunMetricsEntry> {
        let mut out: Vec<(u64, RunMetricsEntry)> = self
            .shared
            .runs
            .read()
            .values()
            .filter_map(|s| {
                let r = s.rec.lock();
                let m = r.run.metrics.clone()?;
                if pipeline.is_some_and(|p| p != r.run.pipeline) {
                    return None;
                }
                Some((r.run.number(), RunMetricsEntry { run_id: r.run.id.clone(), pipeline: r.run.pipeline.clone(), metrics: m }))
            })
            .collect();
        out.sort_by(|a, b| (a.1.pipeline.as_str(), a.0).cmp(&(b.1.pipeline.as_str(), b.0)));
        out.into_iter().map(|(_, e)| e).collect()
    }

    /// Polls until `pred` holds for the run or `timeout` passes.
    pub fn wait_for(&self, id: &str, timeout: Duration, pred: impl Fn(&Run) -> bool) -> Result<Run, EngineError> {
        let deadline = Instant::now() + timeout;
        loop {
            let run = self.run(id)?;
            if pred(&run) || Instant::now() >= deadline {
                return Ok(run);
            }
            thread::sleep(Duration::from_millis(10));
        }
    }

    pub fn wait_terminal(&self, id: &str, timeout: Duration) -> Result<Run, EngineError> {
        self.wait_for(id, timeout, |r| r.state.is_terminal())
    }

    /// Stops pollers and workers. Runs still executing are aborted at their
    /// next stage boundary or gate; queued runs stay queued on disk.
    pub fn shutdown(&self, grace: Duration) {
        self.shared.shutdown.store(true, Ordering::SeqCst);
        self.shared.pollers.lock().clear();
        self.shared.queues.lock().clear();
        for slot in self.shared.runs.read().values() {
            let _guard = slot.rec.lock();
            slot.gate.notify_all();
        }
        let deadline = Instant::now() + grace;
        let workers: Vec<_> = self.shared.workers.lock().drain(..).collect();
        for w in workers {
            while !w.is_finished() && Instant::now() < deadline {
                thread::sleep(Duration::from_millis(20));
            }
            if w.is_finished() {
                let _ = w.join();
            }
        }
    }
}

fn load_runs(data_dir: &Path) -> Result<Vec<Arc<RunSlot>>, EngineError> {
    let mut out = Vec::new();
    let root = data_dir.join("runs");
    for pdir in fs::read_dir(&root)? {
        let pdir = pdir?.path();
        if !pdir.is_dir() {
            continue;
        }
        for rdir in fs::read_dir(&pdir)? {
            let dir = rdir?.path();
            let meta = dir.join("run.json");
            let Ok(text) = fs::read_to_string(&meta) else { continue };
            let run: Run = match serde_json::from_str(&text) {
                Ok(r) => r,
                Err(e) => {
                    tracing::warn!(path = %meta.display(), error = %e, "skipping unreadable run");
                    continue;
                }
            };
            let log = match File::open(dir.join("log")) {
                Ok(f) => BufReader::new(f).lines().collect::<Result<Vec<_>, _>>()?,
                Err(_) => Vec::new(),
            };
            let log_file = OpenOptions::new().create(true).append(true).open(dir.join("log"))?;
            out.push(Arc::new(RunSlot {
                rec: Mutex::new(RunRecord { run, log, log_file: Some(log_file), dir }),
                gate: Condvar::new(),
            }));
        }
    }
    Ok(out)
}

enum GateOutcome {
    Proceed,
    Stopped,
}

struct Exec<'a> {
    shared: &'a Shared,
    slot: &'a RunSlot,
    workspace: PathBuf,
    base_env: Vec<(String, String)>,
}

impl Exec<'_> {
    fn emit(&self, scope: &str, stream: LogStream, text: &str) {
        self.slot.rec.lock().emit(scope, stream, text);
    }

    fn with_stage<T>(&self, idx: usize, f: impl FnOnce(&mut StageResult) -> T) -> T {
        let mut r = self.slot.rec.lock();
        let out = f(&mut r.run.stage_results[idx]);
        r.persist();
        out
    }

    fn wait_gate(&self, idx: usize, stage: &Stage) -> GateOutcome {
        let cfg = stage.approval.as_ref().expect("gated stage");
        let deadline = Instant::now() + Duration::from_secs_f64(cfg.timeout_s);
        let mut r = self.slot.rec.lock();
        r.run.stage_results[idx].status = StageStatus::WaitingApproval;
        r.run.stage_results[idx].approval = Some(ApprovalGate {
            prompt: cfg.prompt.clone(),
            timeout_s: cfg.timeout_s,
            decision: None,
            decided_by: None,
            decided_at: None,
            timed_out: false,
        });
        r.run.transition(RunState::WaitingApproval);
        r.emit(&stage.name, LogStream::Sys, &format!("Waiting for approval: {}", cfg.prompt));
        r.persist();
        loop {
            match r.run.state {
                RunState::Running => return GateOutcome::Proceed,
                RunState::WaitingApproval => {}
                _ => return GateOutcome::Stopped,
            }
            if self.shared.shutdown.load(Ordering::SeqCst) {
                r.finish(RunState::Aborted, Some("aborted: server shutting down".into()));
                return GateOutcome::Stopped;
            }
            if self.slot.gate.wait_until(&mut r, deadline).timed_out() && r.run.state == RunState::WaitingApproval {
                if let Some(g) = r.run.stage_results[idx].approval.as_mut() {
                    g.timed_out = true;
                }
                r.finish(RunState::Aborted, Some(format!("ApprovalTimeout: no decision within {}s", cfg.timeout_s)));
                return GateOutcome::Stopped;
            }
        }
    }

    fn run_commands(&self, scope: &str, commands: &[String], env: &[(String, String)]) -> Result<(), String> {
        for cmd in commands {
            self.emit(scope, LogStream::Sys, &format!("+ {cmd}"));
            let exit = run_shell(cmd, &self.workspace, env, self.shared.cfg.step_timeout, |stream, line| {
                let s = match stream {
                    Stream::Out => LogStream::Out,
                    Stream::Err => LogStream::Err,
                };
                self.emit(scope, s, line);
            });
            let msg = match exit {
                Ok(x) if x.success() => continue,
                Ok(x) if x.timed_out => {
                    format!("`{cmd}` timed out after {}s", self.shared.cfg.step_timeout.as_secs())
                }
                Ok(x) => match x.code {
                    Some(c) => format!("`{cmd}` exited with code {c}"),
                    None => format!("`{cmd}` was killed by a signal"),
                },
                Err(e) => format!("cannot start `{cmd}`: {e}"),
            };
            self.emit(scope, LogStream::Sys, &format!("step failed: {msg}"));
            return Err(format!("StepFailed: {msg}"));
        }
        Ok(())
    }

    fn run_jobs(&self, idx: usize, stage: &str, jobs: &[Job], env: &[(String, String)]) -> Result<(), String> {
        self.with_stage(idx, |s| {
            s.job_results = jobs
                .iter()
                .map(|j| JobResult {
                    job: j.name.clone(),
                    status: StageStatus::Pending,
                    exit_code: None,
                    timed_out: false,
                    started_at: None,
                    finished_at: None,
                })
                .collect();
        });
        let results: Vec<Result<(), String>> = thread::scope(|sc| {
            let handles: Vec<_> = jobs
                .iter()
                .enumerate()
                .map(|(j, job)| {
                    sc.spawn(move || {
                        let _permit = self.shared.pool.acquire();
                        let scope = format!("{stage}/{}", job.name);
                        self.with_stage(idx, |s| {
                            s.job_results[j].status = StageStatus::Running;
                            s.job_results[j].started_at = Some(Utc::now());
                        });
                        let mut job_env = env.to_vec();
                        job_env.push(("JOB_NAME".into(), job.name.clone()));
                        let res = self.run_commands(&scope, &job.steps, &job_env);
                        self.with_stage(idx, |s| {
                            let jr = &mut s.job_results[j];
                            jr.finished_at = Some(Utc::now());
                            jr.status = if res.is_ok() { StageStatus::Succeeded } else { StageStatus::Failed };
                            jr.exit_code = Some(if res.is_ok() { 0 } else { 1 });
                        });
                        res
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap_or_else(|_| Err("job panicked".into()))).collect()
        });
        let failed: Vec<&str> =
            jobs.iter().zip(&results).filter(|(_, r)| r.is_err()).map(|(j, _)| j.name.as_str()).collect();
        if failed.is_empty() {
            Ok(())
        } else {
            Err(format!("StepFailed: job(s) {} failed", failed.join(", ")))
        }
    }

    fn deploy(&self, stage: &str, target: &Expr, files: &[String]) -> Result<(), String> {
        let target_dir = resolve_target(target, &self.shared.cfg.infra_state)?;
        if !target_dir.is_dir() {
            return Err(format!("DeployTargetMissing: {} is not a directory", target_dir.display()));
        }
        if let Some(missing) = files.iter().find(|f| !self.workspace.join(f).exists()) {
            return Err(format!("DeployFailed: `{missing}` is not in the workspace"));
        }
        self.emit(stage, LogStream::Sys, &format!("+ cp -v -r -f {} {}", files.join(" "), target_dir.display()));
        for f in files {
            let src = self.workspace.join(f);
            let dest = target_dir.join(f);
            let res = (|| {
                if let Some(parent) = dest.parent() {
                    fs::create_dir_all(parent)?;
                }
                if src.is_dir() {
                    scm::copy_tree(&src, &dest)
                } else {
                    fs::copy(&src, &dest).map(|_| ())
                }
            })();
            if let Err(e) = res {
                return Err(format!("DeployFailed: copying `{f}`: {e}"));
            }
            self.emit(stage, LogStream::Out, &format!("'{f}' -> '{}'", dest.display()));
        }
        Ok(())
    }

    fn run_stage(&self, idx: usize, stage: &Stage, spec: &PipelineSpec, revision: &Revision) -> Result<(), String> {
        let env_guard = if stage.ephemeral_env {
            let env = provision_test_env(&self.workspace).map_err(|e| format!("TestEnvFailed: {e}"))?;
            self.emit(&stage.name, LogStream::Sys, &format!("Test environment at {}", env.url()));
            Some(env)
        } else {
            None
        };
        let mut env = self.base_env.clone();
        if let Some(e) = &env_guard {
            env.push(("TEST_ENV_URL".into(), e.url()));
        }
        let result = match &stage.body {
            StageBody::Checkout => {
                self.emit(&stage.name, LogStream::Sys, &format!("Checking out revision {}", revision.id));
                scm::checkout(&spec.trigger.repo, revision, &self.workspace).map_err(|e| format!("CheckoutFailed: {e}"))
            }
            StageBody::Steps { commands } => self.run_commands(&stage.name, commands, &env),
            StageBody::Parallel { jobs } => self.run_jobs(idx, &stage.name, jobs, &env),
            StageBody::Deploy { target, files } => self.deploy(&stage.name, target, files),
        };
        if let Some(e) = env_guard {
            e.teardown();
            self.emit(&stage.name, LogStream::Sys, "Test environment torn down");
        }
        result
    }
}

/// Evaluates a deploy target against the infrastructure state: resource
/// attributes by `type.name.attr` and outputs by `output.<name>`.
pub fn resolve_target(target: &Expr, infra_state: &Path) -> Result<PathBuf, String> {
    let mut scope = crate::dsl::Scope::new();
    if !target.refs().is_empty() {
        let state = StateStore::new(infra_state)
            .load()
            .map_err(|e| format!("DeployTargetMissing: cannot read infrastructure state: {e}"))?;
        scope = state.scope();
        for (k, v) in &state.outputs {
            scope.insert(format!("output.{k}"), v.clone());
        }
    }
    match eval_expr(target, &scope) {
        Ok(Value::Text(t)) if Path::new(&t).is_absolute() => Ok(PathBuf::from(t)),
        Ok(Value::Text(t)) => Err(format!("DeployTargetMissing: target `{t}` is not an absolute path")),
        Ok(other) => Err(format!("DeployTargetMissing: target is a {}, not a path", other.kind())),
        Err(e) => Err(format!("DeployTargetMissing: {e}")),
    }
}

fn execute(shared: &Shared, slot: &RunSlot) {
    let (run_id, pipeline, revision) = {
        let mut r = slot.rec.lock();
        if r.run.state != RunState::Queued {
            return;
        }
        r.run.transition(RunState::Running);
        r.run.started_at = Some(Utc::now());
        let msg = format!("Started run {} of pipeline {}", r.run.id, r.run.pipeline);
        r.emit("run", LogStream::Sys, &msg);
        r.persist();
        (r.run.id.clone(), r.run.pipeline.clone(), r.run.revision.clone())
    };
    let spec = &shared.pipelines[&pipeline];
    let workspace = shared.cfg.data_dir.join("workspaces").join(&pipeline).join(&run_id);
    let prepared = (|| {
        if workspace.exists() {
            fs::remove_dir_all(&workspace)?;
        }
        fs::create_dir_all(&workspace)
    })();
    let exec = Exec {
        shared,
        slot,
        base_env: vec![
            ("RUN_ID".into(), run_id.clone()),
            ("REVISION".into(), revision.id.clone()),
            ("PIPELINE".into(), pipeline.clone()),
            ("WORKSPACE".into(), workspace.to_string_lossy().into_owned()),
        ],
        workspace,
    };
    if let Err(e) = prepared {
        slot.rec.lock().finish(RunState::Failed, Some(format!("WorkspaceFailed: {e}")));
        return;
    }

    let mut failure = None;
    for (idx, stage) in spec.stages.iter().enumerate() {
        if shared.shutdown.load(Ordering::SeqCst) {
            slot.rec.lock().finish(RunState::Aborted, Some("aborted: server shutting down".into()));
            return;
        }
        if stage.approval.is_some() {
            if let GateOutcome::Stopped = exec.wait_gate(idx, stage) {
                retain_workspaces(shared, &pipeline);
                return;
            }
        }
        exec.with_stage(idx, |s| {
            s.status = StageStatus::Running;
            s.started_at = Some(Utc::now());
        });
        exec.emit(&stage.name, LogStream::Sys, &format!("Stage {} started", stage.name));
        let result = exec.run_stage(idx, stage, spec, &revision);
        let ok = result.is_ok();
        exec.with_stage(idx, |s| {
            s.finished_at = Some(Utc::now());
            s.status = if ok { StageStatus::Succeeded } else { StageStatus::Failed };
        });
        if let Err(reason) = result {
            exec.emit(&stage.name, LogStream::Sys, &format!("Stage {} failed", stage.name));
            failure = Some(reason);
            break;
        }
    }
    let mut r = slot.rec.lock();
    match failure {
        Some(reason) => r.finish(RunState::Failed, Some(reason)),
        None => r.finish(RunState::Succeeded, None),
    }
    drop(r);
    retain_workspaces(shared, &pipeline);
}

/// Deletes all but the newest `retain_workspaces` workspaces of a pipeline.
fn retain_workspaces(shared: &Shared, pipeline: &str) {
    let dir = shared.cfg.data_dir.join("workspaces").join(pipeline);
    let Ok(entries) = fs::read_dir(&dir) else { return };
    let mut numbered: Vec<(u64, PathBuf)> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            let n = name.strip_prefix(pipeline)?.strip_prefix('-')?.parse().ok()?;
            Some((n, e.path()))
        })
        .collect();
    numbered.sort();
    let excess = numbered.len().saturating_sub(shared.cfg.retain_workspaces);
    for (_, path) in numbered.into_iter().take(excess) {
        if let Err(e) = fs::remove_dir_all(&path) {
            tracing::warn!(path = %path.display(), error = %e, "cannot remove old workspace");
        }
    }
}
