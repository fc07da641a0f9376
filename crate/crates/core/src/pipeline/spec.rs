use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::Serialize;

use crate::dsl::{Attribute, Block, Document, Expr, Item, Pos};
use crate::scm::{RepoKind, RepoRef};

pub const DEFAULT_APPROVAL_TIMEOUT_S: f64 = 3600.0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationError {
    pub line: usize,
    pub col: usize,
    pub message: String,
}

impl ValidationError {
    fn at(pos: Pos, message: impl Into<String>) -> Self {
        ValidationError { line: pos.line, col: pos.col, message: message.into() }
    }
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}: {}", self.line, self.col, self.message)
    }
}

impl std::error::Error for ValidationError {}

pub const DEFAULT_POLL_INTERVAL_S: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trigger {
    pub repo: RepoRef,
    /// Seconds between polls; `None` (written `poll_interval = 0`) disables
    /// polling.
    pub poll_interval_s: Option<f64>,
    pub webhook: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Job {
    pub name: String,
    pub steps: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StageBody {
    Checkout,
    Steps { commands: Vec<String> },
    Parallel { jobs: Vec<Job> },
    Deploy {
        /// Evaluated at deploy time against the infrastructure state.
        #[serde(serialize_with = "expr_source")]
        target: Expr,
        files: Vec<String>,
    },
}

fn expr_source<S: serde::Serializer>(e: &Expr, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&crate::dsl::format_expr(e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApprovalConfig {
    pub prompt: String,
    pub timeout_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Stage {
    pub name: String,
    pub body: StageBody,
    pub approval: Option<ApprovalConfig>,
    pub ephemeral_env: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineSpec {
    pub name: String,
    pub trigger: Trigger,
    pub stages: Vec<Stage>,
}

impl PipelineSpec {
    pub fn stage_names(&self) -> Vec<&str> {
        self.stages.iter().map(|s| s.name.as_str()).collect()
    }

    /// Makes a relative repository location relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let loc = &self.trigger.repo.location;
        let is_url = loc.contains("://") || loc.contains('@');
        if !is_url && Path::new(loc).is_relative() {
            self.trigger.repo.location = base.join(loc).to_string_lossy().into_owned();
        }
    }
}

fn attrs_only<'a>(block: &'a Block, allowed: &[&str]) -> Result<BTreeMap<&'a str, &'a Attribute>, ValidationError> {
    let mut out = BTreeMap::new();
    for item in &block.body {
        match item {
            Item::Attribute(a) if allowed.contains(&a.name.as_str()) => {
                out.insert(a.name.as_str(), a);
            }
            Item::Attribute(a) => {
                return Err(ValidationError::at(a.pos, format!("unknown attribute `{}` in {}", a.name, block.keyword)))
            }
            Item::Block(b) => {
                return Err(ValidationError::at(b.pos, format!("unexpected block `{}` in {}", b.keyword, block.keyword)))
            }
        }
    }
    Ok(out)
}

fn text(a: &Attribute) -> Result<String, ValidationError> {
    a.value.as_plain_str().ok_or_else(|| ValidationError::at(a.pos, format!("`{}` must be a plain string", a.name)))
}

fn number(a: &Attribute) -> Result<f64, ValidationError> {
    match a.value {
        Expr::Num(n) if n > 0.0 => Ok(n),
        _ => Err(ValidationError::at(a.pos, format!("`{}` must be a positive number", a.name))),
    }
}

fn boolean(a: &Attribute) -> Result<bool, ValidationError> {
    match a.value {
        Expr::Bool(b) => Ok(b),
        _ => Err(ValidationError::at(a.pos, format!("`{}` must be true or false", a.name))),
    }
}

fn text_list(a: &Attribute) -> Result<Vec<String>, ValidationError> {
    let bad = || ValidationError::at(a.pos, format!("`{}` must be a list of plain strings", a.name));
    match &a.value {
        Expr::List(items) => items.iter().map(|e| e.as_plain_str().ok_or_else(bad)).collect(),
        _ => Err(bad()),
    }
}

fn one_label(b: &Block) -> Result<String, ValidationError> {
    match b.labels.as_slice() {
        [l] if !l.is_empty() => Ok(l.clone()),
        _ => Err(ValidationError::at(b.pos, format!("`{}` needs exactly one name label", b.keyword))),
    }
}

fn trigger(b: &Block) -> Result<Trigger, ValidationError> {
    let attrs = attrs_only(b, &["scm", "repo", "branch", "poll_interval", "webhook"])?;
    let kind = match attrs.get("scm") {
        None => RepoKind::Git,
        Some(a) => match text(a)?.as_str() {
            "git" => RepoKind::Git,
            "dir" => RepoKind::Dir,
            other => return Err(ValidationError::at(a.pos, format!("unknown scm `{other}`, expected git or dir"))),
        },
    };
    let location = match attrs.get("repo") {
        Some(a) => text(a)?,
        None => return Err(ValidationError::at(b.pos, "trigger needs a `repo`")),
    };
    if location.is_empty() {
        return Err(ValidationError::at(attrs["repo"].pos, "`repo` must not be empty"));
    }
    let branch = attrs.get("branch").map(|a| text(a)).transpose()?.unwrap_or_else(|| "main".into());
    let poll_interval_s = match attrs.get("poll_interval") {
        None => Some(DEFAULT_POLL_INTERVAL_S),
        Some(a) if matches!(a.value, Expr::Num(n) if n == 0.0) => None,
        Some(a) => Some(number(a)?),
    };
    Ok(Trigger {
        repo: RepoRef { kind, location, branch },
        poll_interval_s,
        webhook: attrs.get("webhook").map(|a| boolean(a)).transpose()?.unwrap_or(false),
    })
}

fn stage(b: &Block) -> Result<Stage, ValidationError> {
    let name = one_label(b)?;
    let mut checkout = None;
    let mut steps = None;
    let mut ephemeral_env = false;
    let mut jobs: Vec<(Job, Pos)> = Vec::new();
    let mut approval = None;
    let mut deploy = None;

    for item in &b.body {
        match item {
            Item::Attribute(a) => match a.name.as_str() {
                "checkout" => {
                    if !boolean(a)? {
                        return Err(ValidationError::at(a.pos, "`checkout = false` is meaningless; remove it"));
                    }
                    checkout = Some(a.pos);
                }
                "steps" => steps = Some((text_list(a)?, a.pos)),
                "ephemeral_env" => ephemeral_env = boolean(a)?,
                other => return Err(ValidationError::at(a.pos, format!("unknown attribute `{other}` in stage"))),
            },
            Item::Block(inner) => match inner.keyword.as_str() {
                "job" => {
                    let jname = one_label(inner)?;
                    if let Some((_, first)) = jobs.iter().find(|(j, _)| j.name == jname) {
                        return Err(ValidationError::at(
                            inner.pos,
                            format!("duplicate job `{jname}` (first defined at {first})"),
                        ));
                    }
                    let attrs = attrs_only(inner, &["steps"])?;
                    let steps = match attrs.get("steps") {
                        Some(a) => text_list(a)?,
                        None => return Err(ValidationError::at(inner.pos, "job needs `steps`")),
                    };
                    jobs.push((Job { name: jname, steps }, inner.pos));
                }
                "approval" => {
                    if approval.is_some() {
                        return Err(ValidationError::at(inner.pos, "stage has more than one approval block"));
                    }
                    let attrs = attrs_only(inner, &["prompt", "timeout"])?;
                    approval = Some(ApprovalConfig {
                        prompt: attrs.get("prompt").map(|a| text(a)).transpose()?.unwrap_or_else(|| "Proceed?".into()),
                        timeout_s: attrs.get("timeout").map(|a| number(a)).transpose()?.unwrap_or(DEFAULT_APPROVAL_TIMEOUT_S),
                    });
                }
                "deploy" => {
                    if deploy.is_some() {
                        return Err(ValidationError::at(inner.pos, "stage has more than one deploy block"));
                    }
                    let attrs = attrs_only(inner, &["target", "files"])?;
                    let target = match attrs.get("target") {
                        Some(a) if matches!(a.value, Expr::Str(_) | Expr::Ref(_)) => a.value.clone(),
                        Some(a) => return Err(ValidationError::at(a.pos, "`target` must be a string or a reference")),
                        None => return Err(ValidationError::at(inner.pos, "deploy needs a `target`")),
                    };
                    let files = attrs.get("files").map(|a| text_list(a)).transpose()?.unwrap_or_default();
                    if files.is_empty() {
                        return Err(ValidationError::at(inner.pos, "deploy without files"));
                    }
                    let f_pos = attrs["files"].pos;
                    for f in &files {
                        let p = Path::new(f);
                        if f.is_empty() || p.is_absolute() || p.components().any(|c| c.as_os_str() == "..") {
                            return Err(ValidationError::at(f_pos, format!("deploy file `{f}` must be a relative path inside the workspace")));
                        }
                    }
                    deploy = Some((target, files, inner.pos));
                }
                other => return Err(ValidationError::at(inner.pos, format!("unknown block `{other}` in stage"))),
            },
        }
    }

    let bodies = checkout.is_some() as usize + steps.is_some() as usize + !jobs.is_empty() as usize + deploy.is_some() as usize;
    if bodies != 1 {
        return Err(ValidationError::at(
            b.pos,
            format!("stage `{name}` must have exactly one of checkout, steps, job blocks, or deploy"),
        ));
    }
    let body = if checkout.is_some() {
        StageBody::Checkout
    } else if let Some((commands, pos)) = steps {
        if commands.is_empty() {
            return Err(ValidationError::at(pos, "`steps` must not be empty"));
        }
        StageBody::Steps { commands }
    } else if let Some((target, files, _)) = deploy {
        StageBody::Deploy { target, files }
    } else {
        if jobs.len() < 2 {
            return Err(ValidationError::at(jobs[0].1, "parallel stage needs at least 2 jobs"));
        }
        StageBody::Parallel { jobs: jobs.into_iter().map(|(j, _)| j).collect() }
    };
    if ephemeral_env && !matches!(body, StageBody::Steps { .. } | StageBody::Parallel { .. }) {
        return Err(ValidationError::at(b.pos, "`ephemeral_env` only applies to steps or job stages"));
    }
    Ok(Stage { name, body, approval, ephemeral_env })
}

fn pipeline_block(b: &Block) -> Result<PipelineSpec, ValidationError> {
    let name = one_label(b)?;
    let mut trig = None;
    let mut stages: Vec<(Stage, Pos)> = Vec::new();
    for item in &b.body {
        match item {
            Item::Attribute(a) => {
                return Err(ValidationError::at(a.pos, format!("unknown attribute `{}` in pipeline", a.name)))
            }
            Item::Block(inner) => match inner.keyword.as_str() {
                "trigger" if trig.is_some() => {
                    return Err(ValidationError::at(inner.pos, "pipeline has more than one trigger"))
                }
                "trigger" => trig = Some(trigger(inner)?),
                "stage" => {
                    let s = stage(inner)?;
                    if let Some((_, first)) = stages.iter().find(|(x, _)| x.name == s.name) {
                        return Err(ValidationError::at(
                            inner.pos,
                            format!("duplicate stage `{}` at {} (first defined at {first})", s.name, inner.pos),
                        ));
                    }
                    stages.push((s, inner.pos));
                }
                other => return Err(ValidationError::at(inner.pos, format!("unknown block `{other}` in pipeline"))),
            },
        }
    }
    if stages.is_empty() {
        return Err(ValidationError::at(b.pos, format!("pipeline `{name}` has no stages")));
    }
    for (i, (s, pos)) in stages.iter().enumerate() {
        if matches!(s.body, StageBody::Checkout) && i != 0 {
            return Err(ValidationError::at(*pos, "the checkout stage must be the first stage"));
        }
    }
    let trigger = trig.ok_or_else(|| ValidationError::at(b.pos, format!("pipeline `{name}` needs a trigger block")))?;
    Ok(PipelineSpec { name, trigger, stages: stages.into_iter().map(|(s, _)| s).collect() })
}

/// Validates every top-level `pipeline` block of `doc`.
pub fn validate_all(doc: &Document) -> Result<Vec<PipelineSpec>, ValidationError> {
    let mut out: Vec<PipelineSpec> = Vec::new();
    let mut seen = BTreeSet::new();
    for b in doc.blocks().filter(|b| b.keyword == "pipeline") {
        let spec = pipeline_block(b)?;
        if !seen.insert(spec.name.clone()) {
            return Err(ValidationError::at(b.pos, format!("duplicate pipeline `{}`", spec.name)));
        }
        out.push(spec);
    }
    if let Some(other) = doc.blocks().find(|b| b.keyword != "pipeline") {
        return Err(ValidationError::at(other.pos, format!("unexpected top-level block `{}` in a pipeline document", other.keyword)));
    }
    if let Some(Item::Attribute(a)) = doc.items.iter().find(|i| matches!(i, Item::Attribute(_))) {
        return Err(ValidationError::at(a.pos, "top-level attributes are not allowed in a pipeline document"));
    }
    if out.is_empty() {
        return Err(ValidationError { line: 1, col: 1, message: "no pipeline block found".into() });
    }
    Ok(out)
}

/// Validates a document holding exactly one pipeline.
pub fn validate(doc: &Document) -> Result<PipelineSpec, ValidationError> {
    let mut all = validate_all(doc)?;
    if all.len() > 1 {
        return Err(ValidationError { line: 1, col: 1, message: "expected exactly one pipeline block".into() });
    }
    Ok(all.remove(0))
}
