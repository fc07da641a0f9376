use std::collections::{BTreeMap, HashMap};

use super::IacError;
use crate::dsl::{Block, Document, Expr, Item, Pos, Ref};

#[derive(Debug, Clone, PartialEq)]
pub struct ResourceSpec {
    pub rtype: String,
    pub name: String,
    pub attrs: BTreeMap<String, Expr>,
    pub pos: Pos,
}

impl ResourceSpec {
    pub fn address(&self) -> String {
        format!("{}.{}", self.rtype, self.name)
    }

    pub fn refs(&self) -> Vec<&Ref> {
        self.attrs.values().flat_map(Expr::refs).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputSpec {
    pub name: String,
    pub value: Expr,
    pub pos: Pos,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProviderBlock {
    pub name: String,
    pub attrs: BTreeMap<String, Expr>,
    pub pos: Pos,
}

/// The infrastructure half of a document.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InfraConfig {
    pub providers: Vec<ProviderBlock>,
    pub resources: Vec<ResourceSpec>,
    pub outputs: Vec<OutputSpec>,
}

fn flat_attrs(block: &Block, what: &str) -> Result<BTreeMap<String, Expr>, IacError> {
    let mut attrs = BTreeMap::new();
    for item in &block.body {
        match item {
            Item::Attribute(a) => {
                attrs.insert(a.name.clone(), a.value.clone());
            }
            Item::Block(b) => {
                return Err(IacError::config(b.pos, format!("unexpected block `{}` inside {what}", b.keyword)));
            }
        }
    }
    Ok(attrs)
}

fn labels<'a>(block: &'a Block, n: usize, shape: &str) -> Result<&'a [String], IacError> {
    if block.labels.len() != n {
        return Err(IacError::config(block.pos, format!("expected `{shape}`")));
    }
    Ok(&block.labels)
}

impl InfraConfig {
    pub fn from_document(doc: &Document) -> Result<Self, IacError> {
        let mut cfg = InfraConfig::default();
        let mut seen_outputs: HashMap<String, Pos> = HashMap::new();
        let mut seen_addrs: HashMap<String, Pos> = HashMap::new();
        for item in &doc.items {
            let block = match item {
                Item::Block(b) => b,
                Item::Attribute(a) => {
                    return Err(IacError::config(a.pos, format!("unexpected top-level attribute `{}`", a.name)));
                }
            };
            match block.keyword.as_str() {
                "provider" => {
                    let l = labels(block, 1, "provider \"<name>\" { ... }")?;
                    cfg.providers.push(ProviderBlock {
                        name: l[0].clone(),
                        attrs: flat_attrs(block, "provider")?,
                        pos: block.pos,
                    });
                }
                "resource" => {
                    let l = labels(block, 2, "resource \"<type>\" \"<name>\" { ... }")?;
                    let spec = ResourceSpec {
                        rtype: l[0].clone(),
                        name: l[1].clone(),
                        attrs: flat_attrs(block, "resource")?,
                        pos: block.pos,
                    };
                    if let Some(first) = seen_addrs.insert(spec.address(), block.pos) {
                        return Err(IacError::config(
                            block.pos,
                            format!("duplicate resource address `{}` (first declared at {first})", spec.address()),
                        ));
                    }
                    cfg.resources.push(spec);
                }
                "output" => {
                    let l = labels(block, 1, "output \"<name>\" { value = ... }")?;
                    let attrs = flat_attrs(block, "output")?;
                    if let Some(extra) = attrs.keys().find(|k| *k != "value") {
                        return Err(IacError::config(block.pos, format!("unknown output attribute `{extra}`")));
                    }
                    let value = attrs
                        .get("value")
                        .cloned()
                        .ok_or_else(|| IacError::config(block.pos, "output needs a `value`"))?;
                    if let Some(first) = seen_outputs.insert(l[0].clone(), block.pos) {
                        return Err(IacError::config(
                            block.pos,
                            format!("duplicate output `{}` (first declared at {first})", l[0]),
                        ));
                    }
                    cfg.outputs.push(OutputSpec { name: l[0].clone(), value, pos: block.pos });
                }
                other => {
                    return Err(IacError::config(block.pos, format!("unknown block `{other}` in infrastructure document")));
                }
            }
        }
        Ok(cfg)
    }

    pub fn provider_block(&self, name: &str) -> Option<&ProviderBlock> {
        self.providers.iter().find(|p| p.name == name)
    }
}
