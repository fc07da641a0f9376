//! Infrastructure engine: dependency graph, plan against recorded state,
//! apply/destroy through providers, and outputs.

mod apply;
mod config;
mod graph;
mod plan;
mod state;

use std::path::PathBuf;

use thiserror::Error;

use crate::dsl::{DslError, Pos};
use crate::providers::ProviderError;

pub use apply::{apply, destroy, ApplyFailure, Applied, Providers};
pub use config::{InfraConfig, OutputSpec, ProviderBlock, ResourceSpec};
pub use graph::{build_graph, topo_order, DepGraph};
pub use plan::{plan, Action, AttrDiff, Plan, PlanEntry, PlanSummary, PlanValue, KNOWN_AFTER_APPLY};
pub use state::{LockGuard, ResourceState, StateFile, StateStore, STATE_VERSION};

#[derive(Debug, Error)]
pub enum IacError {
    #[error("{pos}: {message}")]
    Config { pos: Pos, message: String },
    #[error("duplicate resource address `{0}`")]
    DuplicateAddress(String),
    #[error("`{address}` references unknown `{path}`")]
    UnknownReference { address: String, path: String },
    #[error("dependency cycle: {}", .0.join(" -> "))]
    Cycle(Vec<String>),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("provider error on {address}: {source}")]
    Provider {
        address: String,
        #[source]
        source: ProviderError,
    },
    #[error("no provider registered for resource type `{0}`")]
    MissingProvider(String),
    #[error("plan is stale: computed against serial {plan_serial}, state is at {state_serial}")]
    StalePlan { plan_serial: u64, state_serial: u64 },
    #[error("state is locked by another writer ({})", .0.display())]
    LockHeld(PathBuf),
    #[error(transparent)]
    Eval(#[from] DslError),
    #[error("state file: {0}")]
    State(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl IacError {
    pub fn config(pos: Pos, message: impl Into<String>) -> Self {
        IacError::Config { pos, message: message.into() }
    }
}

/// Resource type → provider name: the prefix before the first `_`.
pub fn provider_for_type(rtype: &str) -> &str {
    rtype.split('_').next().unwrap_or(rtype)
}
