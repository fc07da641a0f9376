//! Pipeline definitions, runs, and the engine that schedules and executes
//! them: checkout, build steps, parallel test jobs against an ephemeral
//! environment, an approval gate, and deployment by file copy.

mod engine;
mod env;
mod run;
mod spec;

pub use engine::{
    default_pool_size, resolve_target, Engine, EngineConfig, EngineError, RunMetricsEntry, DEFAULT_LOG_PAGE,
    DEFAULT_RETAIN_WORKSPACES, DEFAULT_STEP_TIMEOUT,
};
pub use env::{provision_test_env, EphemeralEnv};
pub use run::{
    compute_metrics, run_number, ApprovalGate, Cause, Decision, JobResult, LogEvent, LogPage, LogStream, Run,
    RunMetrics, RunNotTerminal, RunState, StageDuration, StageResult, StageStatus,
};
pub use spec::{
    validate, validate_all, ApprovalConfig, Job, PipelineSpec, Stage, StageBody, Trigger, ValidationError,
    DEFAULT_APPROVAL_TIMEOUT_S, DEFAULT_POLL_INTERVAL_S,
};
