use std::collections::BTreeMap;

use serde::Serialize;

use crate::dsl::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AttrKind {
    Text,
    Number,
    Bool,
    List,
}

impl AttrKind {
    pub fn matches(self, v: &Value) -> bool {
        matches!(
            (self, v),
            (AttrKind::Text, Value::Text(_))
                | (AttrKind::Number, Value::Number(_))
                | (AttrKind::Bool, Value::Bool(_))
                | (AttrKind::List, Value::List(_))
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttrSpec {
    pub name: String,
    pub kind: AttrKind,
    pub required: bool,
    pub computed: bool,
    pub force_new: bool,
    pub default: Option<Value>,
}

impl AttrSpec {
    fn input(name: &str, kind: AttrKind) -> Self {
        AttrSpec { name: name.into(), kind, required: false, computed: false, force_new: false, default: None }
    }

    fn computed(name: &str, kind: AttrKind) -> Self {
        AttrSpec { computed: true, ..AttrSpec::input(name, kind) }
    }

    fn required(mut self) -> Self {
        self.required = true;
        self
    }

    fn force_new(mut self) -> Self {
        self.force_new = true;
        self
    }

    fn default(mut self, v: Value) -> Self {
        self.default = Some(v);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResourceSchema {
    pub type_name: String,
    pub attrs: Vec<AttrSpec>,
}

impl ResourceSchema {
    pub fn attr(&self, name: &str) -> Option<&AttrSpec> {
        self.attrs.iter().find(|a| a.name == name)
    }

    pub fn inputs(&self) -> impl Iterator<Item = &AttrSpec> {
        self.attrs.iter().filter(|a| !a.computed)
    }

    pub fn computed(&self) -> impl Iterator<Item = &AttrSpec> {
        self.attrs.iter().filter(|a| a.computed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProviderSchema {
    pub provider: String,
    pub resources: BTreeMap<String, ResourceSchema>,
}

impl ProviderSchema {
    pub fn resource(&self, rtype: &str) -> Option<&ResourceSchema> {
        self.resources.get(rtype)
    }

    /// Checks that computed attributes are never required and never force-new.
    pub fn is_consistent(&self) -> bool {
        self.resources
            .values()
            .flat_map(|r| &r.attrs)
            .all(|a| !(a.computed && (a.required || a.force_new)))
    }
}

/// Schema shared by the `local` and `mock` providers.
pub fn local_schema(provider: &str) -> ProviderSchema {
    use AttrKind::*;
    let instance = ResourceSchema {
        type_name: "local_instance".into(),
        attrs: vec![
            AttrSpec::input("name", Text).required().force_new(),
            AttrSpec::input("port", Number).force_new().default(Value::Number(0.0)),
            AttrSpec::input("provision", List).force_new().default(Value::List(vec![])),
            AttrSpec::computed("id", Text),
            AttrSpec::computed("addr", Text),
            AttrSpec::computed("url", Text),
            AttrSpec::computed("admin_password", Text),
            AttrSpec::computed("root_dir", Text),
        ],
    };
    let site = ResourceSchema {
        type_name: "local_site".into(),
        attrs: vec![
            AttrSpec::input("instance", Text).required().force_new(),
            AttrSpec::input("doc_root", Text).required().force_new(),
            AttrSpec::computed("id", Text),
            AttrSpec::computed("path", Text),
        ],
    };
    let file = ResourceSchema {
        type_name: "local_file".into(),
        attrs: vec![
            AttrSpec::input("path", Text).required().force_new(),
            AttrSpec::input("content", Text).required(),
            AttrSpec::computed("id", Text),
            AttrSpec::computed("sha256", Text),
        ],
    };
    ProviderSchema {
        provider: provider.into(),
        resources: [instance, site, file].into_iter().map(|r| (r.type_name.clone(), r)).collect(),
    }
}
