use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::scm::Revision;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cause {
    Poll,
    Webhook,
    Manual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunState {
    Queued,
    Running,
    WaitingApproval,
    Succeeded,
    Failed,
    Aborted,
}

impl RunState {
    pub fn is_terminal(self) -> bool {
        matches!(self, RunState::Succeeded | RunState::Failed | RunState::Aborted)
    }

    pub fn can_become(self, next: RunState) -> bool {
        use RunState::*;
        matches!(
            (self, next),
            (Queued, Running)
                | (Running, WaitingApproval)
                | (WaitingApproval, Running)
                | (WaitingApproval, Aborted)
                | (Running, Succeeded)
                | (Running, Failed)
                | (Running, Aborted)
        )
    }

    /// Word used on the final log line.
    pub fn outcome_word(self) -> &'static str {
        match self {
            RunState::Succeeded => "SUCCESS",
            RunState::Failed => "FAILURE",
            RunState::Aborted => "ABORTED",
            _ => "UNKNOWN",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Pending,
    Running,
    WaitingApproval,
    Succeeded,
    Failed,
    Skipped,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobResult {
    pub job: String,
    pub status: StageStatus,
    pub exit_code: Option<i32>,
    pub timed_out: bool,
    pub started_at: Option<DateTime<Utc>>,
    pub finished_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Approve,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApprovalGate {
    pub prompt: String,
    pub timeout_s: f64,
    pub decision: Option<Decision>,
    pub decided_by: Option<String>,
    pub decided_at: Option<DateTime<Utc>>,
    pub timed_out: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageResult {
    pub stage: String,
    pub status: StageStatus,
    pub started_at: Option<DateTime<Utc>>,
    pub finished_at: Option<DateTime<Utc>>,
    #[serde(default)]
    pub job_results: Vec<JobResult>,
    pub approval: Option<ApprovalGate>,
}

impl StageResult {
    pub fn pending(stage: &str) -> Self {
        StageResult {
            stage: stage.to_string(),
            status: StageStatus::Pending,
            started_at: None,
            finished_at: None,
            job_results: vec![],
            approval: None,
        }
    }

    pub fn duration_s(&self) -> Option<f64> {
        Some(secs_between(self.started_at?, self.finished_at?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageDuration {
    pub stage: String,
    pub duration_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub queue_latency_s: f64,
    pub stage_durations: Vec<StageDuration>,
    pub total_duration_s: f64,
    /// 1-based index of the first failed stage.
    pub first_failure_stage_ordinal: Option<usize>,
    /// From run start to the end of the first failed stage.
    pub time_to_failure_s: Option<f64>,
    pub outcome: RunState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Run {
    pub id: String,
    pub pipeline: String,
    pub revision: Revision,
    pub cause: Cause,
    pub state: RunState,
    pub created_at: DateTime<Utc>,
    pub started_at: Option<DateTime<Utc>>,
    pub finished_at: Option<DateTime<Utc>>,
    pub stage_results: Vec<StageResult>,
    pub metrics: Option<RunMetrics>,
    /// Why the run did not succeed.
    pub reason: Option<String>,
}

impl Run {
    pub fn number(&self) -> u64 {
        run_number(&self.id).unwrap_or(0)
    }

    pub(crate) fn transition(&mut self, next: RunState) {
        debug_assert!(self.state.can_become(next), "{:?} -> {next:?}", self.state);
        self.state = next;
    }

    pub fn waiting_gate(&self) -> Option<(&str, &ApprovalGate)> {
        if self.state != RunState::WaitingApproval {
            return None;
        }
        self.stage_results
            .iter()
            .find(|s| s.status == StageStatus::WaitingApproval)
            .and_then(|s| s.approval.as_ref().map(|g| (s.stage.as_str(), g)))
    }
}

/// `site-12` → 12.
pub fn run_number(id: &str) -> Option<u64> {
    id.rsplit_once('-')?.1.parse().ok()
}

fn secs_between(a: DateTime<Utc>, b: DateTime<Utc>) -> f64 {
    (b - a).num_microseconds().map(|us| us as f64 / 1e6).unwrap_or(0.0).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("run {0} is not terminal")]
pub struct RunNotTerminal(pub String);

pub fn compute_metrics(run: &Run) -> Result<RunMetrics, RunNotTerminal> {
    if !run.state.is_terminal() {
        return Err(RunNotTerminal(run.id.clone()));
    }
    let finished = run.finished_at.unwrap_or(run.created_at);
    let started = run.started_at.unwrap_or(finished);
    let first_failed = run.stage_results.iter().position(|s| s.status == StageStatus::Failed);
    Ok(RunMetrics {
        queue_latency_s: secs_between(run.created_at, started),
        stage_durations: run
            .stage_results
            .iter()
            .filter_map(|s| s.duration_s().map(|d| StageDuration { stage: s.stage.clone(), duration_s: d }))
            .collect(),
        total_duration_s: secs_between(started, finished),
        first_failure_stage_ordinal: first_failed.map(|i| i + 1),
        time_to_failure_s: first_failed
            .and_then(|i| run.stage_results[i].finished_at)
            .map(|f| secs_between(started, f)),
        outcome: run.state,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogStream {
    Out,
    Err,
    Sys,
}

impl LogStream {
    pub fn as_str(self) -> &'static str {
        match self {
            LogStream::Out => "out",
            LogStream::Err => "err",
            LogStream::Sys => "sys",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEvent {
    pub seq: u64,
    pub ts: DateTime<Utc>,
    pub scope: String,
    pub stream: LogStream,
    pub text: String,
}

impl LogEvent {
    /// `[<ts>] [<scope>] <stream>: <text>`
    pub fn render(&self) -> String {
        format!(
            "[{}] [{}] {}: {}",
            self.ts.to_rfc3339_opts(SecondsFormat::Millis, true),
            self.scope,
            self.stream.as_str(),
            self.text
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogPage {
    pub events: Vec<String>,
    pub next_offset: usize,
    pub complete: bool,
}
