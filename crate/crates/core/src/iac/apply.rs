use std::collections::{BTreeMap, BTreeSet};

use super::plan::{resolve_inputs, resource_schema, PlanScope, PlanValue};
use super::{
    provider_for_type, topo_order, Action, IacError, InfraConfig, Plan, ResourceSpec, ResourceState,
    StateFile,
};
use crate::dsl::{eval_expr, Value};
use crate::providers::{Attrs, Provider, ProviderSchema};

/// Providers by name; a resource type is served by the provider named by its
/// prefix (`local_file` → `local`).
#[derive(Default)]
pub struct Providers {
    map: BTreeMap<String, Box<dyn Provider>>,
}

impl Providers {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, provider: impl Provider + 'static) -> Self {
        self.insert(provider);
        self
    }

    pub fn insert(&mut self, provider: impl Provider + 'static) {
        self.map.insert(provider.name().to_string(), Box::new(provider));
    }

    pub fn schemas(&self) -> BTreeMap<String, ProviderSchema> {
        self.map.iter().map(|(k, p)| (k.clone(), p.schema().clone())).collect()
    }

    fn for_type(&mut self, rtype: &str) -> Result<&mut Box<dyn Provider>, IacError> {
        self.map.get_mut(provider_for_type(rtype)).ok_or_else(|| IacError::MissingProvider(rtype.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Applied {
    pub state: StateFile,
    pub outputs: BTreeMap<String, Value>,
    /// Provider calls made; zero for an all-noop plan.
    pub provider_calls: usize,
}

/// A failed apply/destroy. `state` records every change that did complete
/// and must be persisted.
#[derive(Debug)]
pub struct ApplyFailure {
    pub state: StateFile,
    pub error: IacError,
}

impl From<ApplyFailure> for IacError {
    fn from(f: ApplyFailure) -> Self {
        f.error
    }
}

fn provider_err(address: &str, source: crate::providers::ProviderError) -> IacError {
    IacError::Provider { address: address.to_string(), source }
}

fn known_inputs(address: &str, inputs: BTreeMap<String, PlanValue>) -> Result<Attrs, IacError> {
    inputs
        .into_iter()
        .map(|(k, v)| match v {
            PlanValue::Known(v) => Ok((k, v)),
            PlanValue::Unknown => Err(IacError::Validation(format!("{address}.{k} still unknown at apply time"))),
        })
        .collect()
}

fn live_scope(state: &StateFile) -> PlanScope {
    state.scope().into_iter().map(|(k, v)| (k, PlanValue::Known(v))).collect()
}

fn eval_outputs(cfg: &InfraConfig, state: &StateFile) -> Result<BTreeMap<String, Value>, IacError> {
    let scope = state.scope();
    cfg.outputs.iter().map(|o| Ok((o.name.clone(), eval_expr(&o.value, &scope)?))).collect()
}

/// Executes `plan`. Deletes (including the delete half of replacements) run
/// first, dependents before dependencies; then creates and updates run in
/// dependency order. The serial advances once if anything changed.
pub fn apply(
    plan: &Plan,
    cfg: &InfraConfig,
    state: &StateFile,
    providers: &mut Providers,
) -> Result<Applied, ApplyFailure> {
    let fail = |state: StateFile, error| Err(ApplyFailure { state, error });
    if plan.state_serial != state.serial || plan.state_lineage != state.lineage {
        return fail(
            state.clone(),
            IacError::StalePlan { plan_serial: plan.state_serial, state_serial: state.serial },
        );
    }

    let mut work = state.clone();
    let mut calls = 0;
    match run_entries(plan, cfg, &mut work, providers, &mut calls) {
        Ok(()) => {}
        Err(error) => {
            if calls > 0 {
                work.advance();
            }
            return fail(work, error);
        }
    }

    let outputs = match eval_outputs(cfg, &work) {
        Ok(o) => o,
        Err(error) => {
            if calls > 0 {
                work.advance();
            }
            return fail(work, error);
        }
    };
    if calls > 0 || outputs != work.outputs {
        work.outputs = outputs.clone();
        work.advance();
    }
    Ok(Applied { state: work, outputs, provider_calls: calls })
}

fn run_entries(
    plan: &Plan,
    cfg: &InfraConfig,
    work: &mut StateFile,
    providers: &mut Providers,
    calls: &mut usize,
) -> Result<(), IacError> {
    let by_addr: BTreeMap<String, &ResourceSpec> = cfg.resources.iter().map(|s| (s.address(), s)).collect();

    let removing: BTreeSet<&str> = plan
        .entries
        .iter()
        .filter(|e| matches!(e.action, Action::Delete | Action::Replace))
        .map(|e| e.address.as_str())
        .collect();
    let delete_order = topo_order(&work.graph())?;
    for address in delete_order.iter().rev().filter(|a| removing.contains(a.as_str())) {
        let rec = work.resource(address).cloned().expect("state graph nodes are recorded");
        providers
            .for_type(rec.rtype())?
            .delete(rec.rtype(), &rec.id, &rec.attrs)
            .map_err(|e| provider_err(address, e))?;
        *calls += 1;
        work.remove(address);
    }

    for entry in plan.entries.iter().filter(|e| e.action != Action::Delete) {
        let spec = by_addr
            .get(&entry.address)
            .ok_or_else(|| IacError::Validation(format!("plan entry {} not in configuration", entry.address)))?;
        let depends_on: Vec<String> =
            spec.refs().iter().map(|r| r.address()).collect::<BTreeSet<_>>().into_iter().collect();
        match entry.action {
            Action::Noop => {
                if let Some(mut rec) = work.resource(&entry.address).cloned() {
                    rec.depends_on = depends_on;
                    work.upsert(rec);
                }
            }
            Action::Create | Action::Replace => {
                let schema = resource_schema(&spec.rtype, &providers.schemas())?.clone();
                let inputs = known_inputs(&entry.address, resolve_inputs(spec, &schema, &live_scope(work))?)?;
                let provider = providers.for_type(&spec.rtype)?;
                let provider_name = provider.name().to_string();
                let created = provider.create(&spec.rtype, &inputs).map_err(|e| provider_err(&entry.address, e))?;
                *calls += 1;
                let mut attrs = inputs;
                attrs.extend(created.computed);
                work.upsert(ResourceState {
                    address: entry.address.clone(),
                    provider: provider_name,
                    id: created.id,
                    attrs,
                    depends_on,
                });
            }
            Action::Update => {
                let schema = resource_schema(&spec.rtype, &providers.schemas())?.clone();
                let inputs = known_inputs(&entry.address, resolve_inputs(spec, &schema, &live_scope(work))?)?;
                let mut rec = work
                    .resource(&entry.address)
                    .cloned()
                    .ok_or_else(|| IacError::Validation(format!("{} missing from state", entry.address)))?;
                let old_inputs: Attrs =
                    rec.attrs.iter().filter(|(k, _)| inputs.contains_key(*k)).map(|(k, v)| (k.clone(), v.clone())).collect();
                let computed = providers
                    .for_type(&spec.rtype)?
                    .update(&spec.rtype, &rec.id, &old_inputs, &inputs)
                    .map_err(|e| provider_err(&entry.address, e))?;
                *calls += 1;
                rec.attrs = inputs;
                rec.attrs.extend(computed);
                rec.depends_on = depends_on;
                work.upsert(rec);
            }
            Action::Delete => unreachable!("filtered above"),
        }
    }
    Ok(())
}

/// Deletes every recorded resource, dependents first, and clears outputs.
pub fn destroy(state: &StateFile, providers: &mut Providers) -> Result<StateFile, ApplyFailure> {
    let mut work = state.clone();
    let order = match topo_order(&state.graph()) {
        Ok(o) => o,
        Err(error) => return Err(ApplyFailure { state: work, error }),
    };
    for address in order.iter().rev() {
        let rec = work.resource(address).cloned().expect("graph nodes are recorded");
        let result = providers
            .for_type(rec.rtype())
            .and_then(|p| p.delete(rec.rtype(), &rec.id, &rec.attrs).map_err(|e| provider_err(address, e)));
        if let Err(error) = result {
            work.advance();
            return Err(ApplyFailure { state: work, error });
        }
        work.remove(address);
    }
    work.outputs.clear();
    work.advance();
    Ok(work)
}
