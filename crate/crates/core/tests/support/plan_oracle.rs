//! Generated infra configurations and a brute-force per-resource diff
//! oracle that predicts plan actions without using the engine's planner.

use std::collections::BTreeMap;

use proptest::prelude::*;
use stagehand_core::dsl::{parse_str, Value};
use stagehand_core::iac::{apply, plan, Action, InfraConfig, Providers, StateFile};
use stagehand_core::providers::MockProvider;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Instance,
    Site,
    File,
}

impl Kind {
    fn rtype(self) -> &'static str {
        match self {
            Kind::Instance => "local_instance",
            Kind::Site => "local_site",
            Kind::File => "local_file",
        }
    }

    /// Attributes other resources may reference.
    fn visible(self) -> &'static [&'static str] {
        match self {
            Kind::Instance => &["id", "name", "url", "admin_password", "port"],
            Kind::Site => &["id", "path", "doc_root"],
            Kind::File => &["id", "sha256", "content", "path"],
        }
    }

    fn replaces_on(self, attr: &str) -> bool {
        match self {
            Kind::Instance => matches!(attr, "name" | "port" | "provision"),
            Kind::Site => matches!(attr, "instance" | "doc_root"),
            Kind::File => attr == "path",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Variant {
    a: u8,
    b: u8,
    link: Option<(usize, usize)>,
    bare: bool,
}

#[derive(Debug, Clone)]
pub struct Slot {
    kind: Kind,
    old: Option<Variant>,
    new: Option<Variant>,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub slots: Vec<Slot>,
}

fn variant() -> impl Strategy<Value = Variant> {
    (0u8..4, 0u8..6, proptest::option::weighted(0.7, (0usize..6, 0usize..5)), any::<bool>())
        .prop_map(|(a, b, link, bare)| Variant { a, b, link, bare })
}

fn slot() -> impl Strategy<Value = Slot> {
    let kind = prop_oneof![Just(Kind::Instance), Just(Kind::Site), Just(Kind::File)];
    // the new variant is often identical to the old one so noops are common
    (kind, proptest::option::weighted(0.8, variant()), proptest::option::weighted(0.8, variant()), 0u8..3).prop_map(
        |(kind, old, new, same)| {
            let new = if same > 0 && old.is_some() { old.clone() } else { new };
            Slot { kind, old, new }
        },
    )
}

pub fn scenario() -> impl Strategy<Value = Scenario> {
    proptest::collection::vec(slot(), 1..=6).prop_map(|slots| Scenario { slots })
}

#[derive(Debug, Clone, PartialEq)]
enum Input {
    Lit(Value),
    /// Whole-value reference.
    Ref(String, String),
    /// `"<prefix>${addr.attr}"`.
    Interp(String, String, String),
}

#[derive(Debug, Clone)]
struct Resource {
    kind: Kind,
    addr: String,
    inputs: Vec<(String, Input)>,
}

impl Resource {
    fn deps(&self) -> Vec<&str> {
        self.inputs
            .iter()
            .filter_map(|(_, i)| match i {
                Input::Ref(a, _) | Input::Interp(_, a, _) => Some(a.as_str()),
                Input::Lit(_) => None,
            })
            .collect()
    }
}

fn model(sc: &Scenario, new: bool) -> Vec<Resource> {
    let mut out: Vec<Resource> = Vec::new();
    for (i, slot) in sc.slots.iter().enumerate() {
        let Some(v) = (if new { &slot.new } else { &slot.old }) else { continue };
        let addr = format!("{}.r{i}", slot.kind.rtype());
        let text = |s: String| Input::Lit(Value::Text(s));
        let inputs = match slot.kind {
            Kind::Instance => {
                let mut inputs = vec![("name".to_string(), text(format!("n{}", v.a % 2)))];
                if !v.bare {
                    inputs.push(("port".into(), Input::Lit(Value::Number(f64::from(v.b % 2) * 7.0))));
                }
                match v.b % 3 {
                    1 => inputs.push(("provision".into(), Input::Lit(Value::List(vec![])))),
                    2 => inputs.push(("provision".into(), Input::Lit(Value::List(vec![Value::Text("echo x".into())])))),
                    _ => {}
                }
                inputs
            }
            Kind::Site => {
                let instances: Vec<&Resource> = out.iter().filter(|r| r.kind == Kind::Instance).collect();
                // a site cannot exist without an instance to host it
                let Some(&(pick, _)) = v.link.as_ref().filter(|_| !instances.is_empty()) else { continue };
                let target = &instances[pick % instances.len()].addr;
                let instance = if v.bare {
                    Input::Ref(target.clone(), "id".into())
                } else {
                    Input::Interp(String::new(), target.clone(), "id".into())
                };
                vec![("instance".into(), instance), ("doc_root".into(), text(format!("d{}", v.b % 2)))]
            }
            Kind::File => {
                let content = match v.link.filter(|_| !out.is_empty()) {
                    Some((pick, attr)) => {
                        let target = &out[pick % out.len()];
                        let attrs = target.kind.visible();
                        Input::Interp(format!("c{}-", v.b % 2), target.addr.clone(), attrs[attr % attrs.len()].into())
                    }
                    None => text(format!("c{}", v.b % 3)),
                };
                vec![("path".into(), text(format!("f{}", v.a % 2))), ("content".into(), content)]
            }
        };
        out.push(Resource { kind: slot.kind, addr, inputs });
    }
    out
}

fn quote(s: &str) -> String {
    format!("{s:?}")
}

fn render_value(v: &Value) -> String {
    match v {
        Value::Text(s) => quote(s),
        Value::Number(n) => format!("{}", *n as i64),
        Value::Bool(b) => b.to_string(),
        Value::List(items) => format!("[{}]", items.iter().map(render_value).collect::<Vec<_>>().join(", ")),
    }
}

fn render(resources: &[Resource]) -> String {
    let mut src = String::from("provider \"local\" {}\n");
    for r in resources {
        let (rtype, name) = r.addr.split_once('.').unwrap();
        src.push_str(&format!("resource \"{rtype}\" \"{name}\" {{\n"));
        for (k, input) in &r.inputs {
            let rhs = match input {
                Input::Lit(v) => render_value(v),
                Input::Ref(a, attr) => format!("{a}.{attr}"),
                Input::Interp(prefix, a, attr) => format!("\"{prefix}${{{a}.{attr}}}\""),
            };
            src.push_str(&format!("  {k} = {rhs}\n"));
        }
        src.push_str("}\n");
    }
    src
}

fn as_text(v: &Value) -> String {
    match v {
        Value::Text(s) => s.clone(),
        Value::Number(n) if n.fract() == 0.0 => format!("{}", *n as i64),
        Value::Number(n) => n.to_string(),
        Value::Bool(b) => b.to_string(),
        Value::List(_) => unreachable!("lists are never interpolated"),
    }
}

fn defaults(kind: Kind) -> Vec<(&'static str, Value)> {
    match kind {
        Kind::Instance => vec![("port", Value::Number(0.0)), ("provision", Value::List(vec![]))],
        _ => vec![],
    }
}

/// Expected action per address, by repeatedly settling any resource whose
/// dependencies are settled.
fn oracle(config: &[Resource], state: &StateFile) -> BTreeMap<String, Action> {
    let mut actions: BTreeMap<String, Action> = BTreeMap::new();
    // (addr, attr) -> value, None when only known after apply
    let mut visible: BTreeMap<(String, String), Option<Value>> = BTreeMap::new();
    let mut pending: Vec<&Resource> = config.iter().collect();
    while !pending.is_empty() {
        let idx = pending
            .iter()
            .position(|r| r.deps().iter().all(|d| actions.contains_key(*d)))
            .expect("generated configs are acyclic");
        let r = pending.remove(idx);
        let lookup = |a: &str, attr: &str| visible.get(&(a.to_string(), attr.to_string())).cloned().flatten();
        let mut resolved: BTreeMap<String, Option<Value>> = BTreeMap::new();
        for (name, default) in defaults(r.kind) {
            resolved.insert(name.into(), Some(default));
        }
        for (name, input) in &r.inputs {
            let v = match input {
                Input::Lit(v) => Some(v.clone()),
                Input::Ref(a, attr) => lookup(a, attr),
                Input::Interp(prefix, a, attr) => lookup(a, attr).map(|v| Value::Text(format!("{prefix}{}", as_text(&v)))),
            };
            resolved.insert(name.clone(), v);
        }
        let recorded = state.resources.iter().find(|s| s.address == r.addr);
        let action = match recorded {
            None => Action::Create,
            Some(rec) => {
                let changed: Vec<&String> = resolved
                    .iter()
                    .filter(|(k, v)| match v {
                        None => true,
                        Some(v) => rec.attrs.get(*k) != Some(v),
                    })
                    .map(|(k, _)| k)
                    .collect();
                if changed.is_empty() {
                    Action::Noop
                } else if changed.iter().any(|k| r.kind.replaces_on(k)) {
                    Action::Replace
                } else {
                    Action::Update
                }
            }
        };
        for attr in r.kind.visible() {
            let v = if let Some(v) = resolved.get(*attr) {
                v.clone()
            } else {
                match (action, recorded) {
                    (Action::Noop, Some(rec)) => rec.attrs.get(*attr).cloned(),
                    (Action::Update, Some(rec)) if *attr == "id" => Some(Value::Text(rec.id.clone())),
                    _ => None,
                }
            };
            visible.insert((r.addr.clone(), attr.to_string()), v);
        }
        actions.insert(r.addr.clone(), action);
    }
    for rec in &state.resources {
        actions.entry(rec.address.clone()).or_insert(Action::Delete);
    }
    actions
}

fn plan_and_apply(src: &str, state: &StateFile, providers: &mut Providers) -> Result<(stagehand_core::iac::Plan, StateFile), String> {
    let doc = parse_str(src, "gen.fl").map_err(|e| format!("parse: {e}\n{src}"))?;
    let cfg = InfraConfig::from_document(&doc).map_err(|e| format!("config: {e}\n{src}"))?;
    let p = plan(&cfg.resources, state, &providers.schemas()).map_err(|e| format!("plan: {e}\n{src}"))?;
    let applied = apply(&p, &cfg, state, providers).map_err(|e| format!("apply: {}\n{src}", e.error))?;
    Ok((p, applied.state))
}

fn compare(plan: &stagehand_core::iac::Plan, expected: &BTreeMap<String, Action>, src: &str) -> Result<(), String> {
    let got: BTreeMap<String, Action> = plan.entries.iter().map(|e| (e.address.clone(), e.action)).collect();
    if got.len() != plan.entries.len() {
        return Err(format!("duplicate plan entries\n{src}"));
    }
    if &got != expected {
        return Err(format!("plan {got:?}\noracle {expected:?}\n{src}"));
    }
    Ok(())
}

/// Applies the old configuration, then checks the plan for the new one
/// against the oracle, applies it, and checks the follow-up plan is empty.
pub fn check(sc: &Scenario) -> Result<(), String> {
    let mut providers = Providers::new().with(MockProvider::new("local"));
    let old = model(sc, false);
    let old_src = render(&old);
    let (p0, state1) = plan_and_apply(&old_src, &StateFile::default(), &mut providers)?;
    compare(&p0, &oracle(&old, &StateFile::default()), &old_src)?;

    let new = model(sc, true);
    let new_src = render(&new);
    let expected = oracle(&new, &state1);
    let (p1, state2) = plan_and_apply(&new_src, &state1, &mut providers)?;
    compare(&p1, &expected, &new_src)?;

    let summary = p1.summary;
    let count = |f: fn(Action) -> bool| expected.values().filter(|a| f(**a)).count();
    let want = (
        count(|a| matches!(a, Action::Create | Action::Replace)),
        count(|a| a == Action::Update),
        count(|a| matches!(a, Action::Delete | Action::Replace)),
    );
    if (summary.add, summary.change, summary.destroy) != want {
        return Err(format!("summary {summary:?} != {want:?}\n{new_src}"));
    }

    let doc = parse_str(&new_src, "gen.fl").unwrap();
    let cfg = InfraConfig::from_document(&doc).unwrap();
    let again = plan(&cfg.resources, &state2, &providers.schemas()).map_err(|e| e.to_string())?;
    if again.has_changes() {
        return Err(format!("not converged after apply:\n{}\n{new_src}", again.render()));
    }
    Ok(())
}

