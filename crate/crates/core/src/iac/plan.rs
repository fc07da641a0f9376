use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write};

use serde::{Serialize, Serializer};

use super::{build_graph, provider_for_type, topo_order, IacError, ResourceSpec, StateFile};
use crate::canonical::to_canonical_json;
use crate::dsl::{eval_expr, Expr, Scope, Value};
use crate::providers::{ProviderSchema, ResourceSchema};

pub const KNOWN_AFTER_APPLY: &str = "(known after apply)";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Create,
    Update,
    Replace,
    Delete,
    Noop,
}

impl Action {
    pub fn symbol(self) -> &'static str {
        match self {
            Action::Create => "+",
            Action::Update => "~",
            Action::Replace => "-/+",
            Action::Delete => "-",
            Action::Noop => " ",
        }
    }
}

/// A value as seen at plan time: either resolved, or only known once the
/// resources it depends on have been (re)created.
#[derive(Debug, Clone, PartialEq)]
pub enum PlanValue {
    Known(Value),
    Unknown,
}

impl Serialize for PlanValue {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            PlanValue::Known(v) => v.serialize(s),
            PlanValue::Unknown => s.serialize_str(KNOWN_AFTER_APPLY),
        }
    }
}

impl fmt::Display for PlanValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlanValue::Known(Value::Text(s)) => write!(f, "{s:?}"),
            PlanValue::Known(v) => write!(f, "{v}"),
            PlanValue::Unknown => f.write_str(KNOWN_AFTER_APPLY),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttrDiff {
    pub name: String,
    pub old: Option<PlanValue>,
    pub new: Option<PlanValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanEntry {
    pub address: String,
    pub action: Action,
    pub attr_diffs: Vec<AttrDiff>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct PlanSummary {
    pub add: usize,
    pub change: usize,
    pub destroy: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Plan {
    /// Serial and lineage of the state this plan was computed against.
    pub state_serial: u64,
    pub state_lineage: String,
    /// Pure deletes first (dependents before dependencies), then every
    /// configured resource in dependency order.
    pub entries: Vec<PlanEntry>,
    pub summary: PlanSummary,
}

impl Plan {
    pub fn has_changes(&self) -> bool {
        self.entries.iter().any(|e| e.action != Action::Noop)
    }

    pub fn entry(&self, address: &str) -> Option<&PlanEntry> {
        self.entries.iter().find(|e| e.address == address)
    }

    /// Human rendering: one line per change, then the summary line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for e in self.entries.iter().filter(|e| e.action != Action::Noop) {
            let _ = write!(out, "{} {}", e.action.symbol(), e.address);
            if matches!(e.action, Action::Update | Action::Replace) {
                let changes: Vec<String> = e
                    .attr_diffs
                    .iter()
                    .map(|d| {
                        let show = |v: &Option<PlanValue>| v.as_ref().map_or("null".to_string(), |v| v.to_string());
                        format!("{}: {} -> {}", d.name, show(&d.old), show(&d.new))
                    })
                    .collect();
                let _ = write!(out, " ({})", changes.join(", "));
            }
            out.push('\n');
        }
        let s = self.summary;
        let _ = writeln!(out, "Plan: {} to add, {} to change, {} to destroy.", s.add, s.change, s.destroy);
        out
    }

    pub fn to_json(&self) -> String {
        to_canonical_json(self).expect("plan serializes")
    }
}

pub(crate) type PlanScope = BTreeMap<String, PlanValue>;

/// Evaluates `expr`, yielding `Unknown` if any reference is not yet known.
pub(crate) fn eval_plan(expr: &Expr, scope: &PlanScope) -> Result<PlanValue, IacError> {
    let mut known = Scope::new();
    for r in expr.refs() {
        let path = r.to_string();
        match scope.get(&path) {
            Some(PlanValue::Known(v)) => {
                known.insert(path, v.clone());
            }
            Some(PlanValue::Unknown) => return Ok(PlanValue::Unknown),
            None => return Err(crate::dsl::DslError::UnknownRef(path).into()),
        }
    }
    Ok(PlanValue::Known(eval_expr(expr, &known)?))
}

pub(crate) fn resource_schema<'a>(
    rtype: &str,
    schemas: &'a BTreeMap<String, ProviderSchema>,
) -> Result<&'a ResourceSchema, IacError> {
    let provider = provider_for_type(rtype);
    schemas
        .get(provider)
        .ok_or_else(|| IacError::Schema(format!("no provider `{provider}` for resource type `{rtype}`")))?
        .resource(rtype)
        .ok_or_else(|| IacError::Schema(format!("unknown resource type `{rtype}`")))
}

/// Schema checks that need no evaluation: known types and attributes, no
/// assignments to computed attributes, required inputs present, references
/// naming real attributes.
pub(crate) fn validate_specs(
    specs: &[ResourceSpec],
    schemas: &BTreeMap<String, ProviderSchema>,
) -> Result<(), IacError> {
    let by_addr: BTreeMap<String, &ResourceSpec> = specs.iter().map(|s| (s.address(), s)).collect();
    for spec in specs {
        let schema = resource_schema(&spec.rtype, schemas)?;
        for name in spec.attrs.keys() {
            match schema.attr(name) {
                None => return Err(IacError::Schema(format!("{}: unknown attribute `{name}`", spec.address()))),
                Some(a) if a.computed => {
                    return Err(IacError::Schema(format!("{}: `{name}` is computed and cannot be set", spec.address())))
                }
                Some(_) => {}
            }
        }
        for a in schema.inputs().filter(|a| a.required) {
            if !spec.attrs.contains_key(&a.name) {
                return Err(IacError::Validation(format!("{}: missing required attribute `{}`", spec.address(), a.name)));
            }
        }
        for r in spec.refs() {
            let Some(target) = by_addr.get(&r.address()) else { continue };
            let segs = r.segments();
            if segs.len() > 3 {
                return Err(IacError::Schema(format!("{}: reference `{r}` is too deep", spec.address())));
            }
            if let Some(attr) = segs.get(2) {
                if resource_schema(&target.rtype, schemas)?.attr(attr).is_none() {
                    return Err(IacError::Schema(format!(
                        "{}: `{}` has no attribute `{attr}`",
                        spec.address(),
                        target.address()
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Resolved inputs of `spec`, with schema defaults for omitted optionals.
pub(crate) fn resolve_inputs(
    spec: &ResourceSpec,
    schema: &ResourceSchema,
    scope: &PlanScope,
) -> Result<BTreeMap<String, PlanValue>, IacError> {
    let mut out = BTreeMap::new();
    for a in schema.inputs() {
        let v = match spec.attrs.get(&a.name) {
            Some(expr) => eval_plan(expr, scope)?,
            None => match &a.default {
                Some(d) => PlanValue::Known(d.clone()),
                None => continue,
            },
        };
        if let PlanValue::Known(val) = &v {
            if !a.kind.matches(val) {
                return Err(IacError::Validation(format!(
                    "{}: `{}` must be {:?}, got {}",
                    spec.address(),
                    a.name,
                    a.kind,
                    val.kind()
                )));
            }
        }
        out.insert(a.name.clone(), v);
    }
    Ok(out)
}

/// Adds what dependents can see of `address` after this plan step.
fn publish(
    scope: &mut PlanScope,
    address: &str,
    schema: &ResourceSchema,
    inputs: &BTreeMap<String, PlanValue>,
    recorded: Option<&crate::iac::ResourceState>,
    action: Action,
) {
    let keeps_identity = matches!(action, Action::Noop | Action::Update);
    let id = match (keeps_identity, recorded) {
        (true, Some(r)) => PlanValue::Known(Value::from(r.id.as_str())),
        _ => PlanValue::Unknown,
    };
    scope.insert(address.to_string(), id.clone());
    for (k, v) in inputs {
        scope.insert(format!("{address}.{k}"), v.clone());
    }
    for a in schema.computed() {
        let v = match (action, recorded) {
            (Action::Noop, Some(r)) => r.attrs.get(&a.name).cloned().map_or(PlanValue::Unknown, PlanValue::Known),
            (Action::Update, _) if a.name == "id" => id.clone(),
            _ => PlanValue::Unknown,
        };
        scope.insert(format!("{address}.{}", a.name), v);
    }
}

/// Diffs the configured resources against `state`.
pub fn plan(
    specs: &[ResourceSpec],
    state: &StateFile,
    schemas: &BTreeMap<String, ProviderSchema>,
) -> Result<Plan, IacError> {
    let graph = build_graph(specs)?;
    validate_specs(specs, schemas)?;
    let order = topo_order(&graph)?;
    let by_addr: BTreeMap<String, &ResourceSpec> = specs.iter().map(|s| (s.address(), s)).collect();

    let mut scope = PlanScope::new();
    let mut entries = Vec::new();
    let mut summary = PlanSummary::default();

    let configured: BTreeSet<&str> = by_addr.keys().map(String::as_str).collect();
    let state_order = topo_order(&state.graph())?;
    for address in state_order.iter().rev().filter(|a| !configured.contains(a.as_str())) {
        let recorded = state.resource(address).expect("state graph nodes are recorded resources");
        let schema = resource_schema(recorded.rtype(), schemas)?;
        let attr_diffs = schema
            .inputs()
            .filter_map(|a| {
                recorded.attrs.get(&a.name).map(|v| AttrDiff {
                    name: a.name.clone(),
                    old: Some(PlanValue::Known(v.clone())),
                    new: None,
                })
            })
            .collect();
        entries.push(PlanEntry { address: address.clone(), action: Action::Delete, attr_diffs });
        summary.destroy += 1;
    }

    for address in &order {
        let spec = by_addr[address];
        let schema = resource_schema(&spec.rtype, schemas)?;
        let inputs = resolve_inputs(spec, schema, &scope)?;
        let recorded = state.resource(address);

        let (action, attr_diffs) = match recorded {
            None => {
                let diffs = inputs
                    .iter()
                    .map(|(k, v)| AttrDiff { name: k.clone(), old: None, new: Some(v.clone()) })
                    .collect();
                (Action::Create, diffs)
            }
            Some(rec) => {
                let mut diffs = Vec::new();
                let mut force_new = false;
                for a in schema.inputs() {
                    let old = rec.attrs.get(&a.name).cloned().map(PlanValue::Known);
                    let new = inputs.get(&a.name).cloned();
                    // an unknown new value cannot be shown equal, so it counts as a change
                    let same = matches!((&old, &new), (Some(PlanValue::Known(o)), Some(PlanValue::Known(n))) if o == n)
                        || (old.is_none() && new.is_none());
                    if !same {
                        force_new |= a.force_new;
                        diffs.push(AttrDiff { name: a.name.clone(), old, new });
                    }
                }
                let action = match (diffs.is_empty(), force_new) {
                    (true, _) => Action::Noop,
                    (false, true) => Action::Replace,
                    (false, false) => Action::Update,
                };
                (action, diffs)
            }
        };
        match action {
            Action::Create => summary.add += 1,
            Action::Update => summary.change += 1,
            Action::Replace => {
                summary.add += 1;
                summary.destroy += 1;
            }
            Action::Delete | Action::Noop => {}
        }
        publish(&mut scope, address, schema, &inputs, recorded, action);
        entries.push(PlanEntry { address: address.clone(), action, attr_diffs });
    }

    Ok(Plan { state_serial: state.serial, state_lineage: state.lineage.clone(), entries, summary })
}
