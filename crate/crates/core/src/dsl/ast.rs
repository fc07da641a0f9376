use std::fmt;

use super::lexer::{is_ident_char, is_ident_start};

/// Source position (1-based). Positions never take part in AST equality, so
/// two documents that differ only in layout compare equal.
#[derive(Debug, Clone, Copy, Default, Eq)]
pub struct Pos {
    pub line: usize,
    pub col: usize,
}

impl PartialEq for Pos {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.col)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Document {
    pub source_name: String,
    pub items: Vec<Item>,
}

impl Document {
    pub fn blocks(&self) -> impl Iterator<Item = &Block> {
        blocks_of(&self.items)
    }
}

pub(crate) fn blocks_of(items: &[Item]) -> impl Iterator<Item = &Block> {
    items.iter().filter_map(|i| match i {
        Item::Block(b) => Some(b),
        Item::Attribute(_) => None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Item {
    Block(Block),
    Attribute(Attribute),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub keyword: String,
    pub labels: Vec<String>,
    pub body: Vec<Item>,
    pub pos: Pos,
}

impl Block {
    pub fn attributes(&self) -> impl Iterator<Item = &Attribute> {
        self.body.iter().filter_map(|i| match i {
            Item::Attribute(a) => Some(a),
            Item::Block(_) => None,
        })
    }

    pub fn blocks(&self) -> impl Iterator<Item = &Block> {
        blocks_of(&self.body)
    }

    pub fn attr(&self, name: &str) -> Option<&Attribute> {
        self.attributes().find(|a| a.name == name)
    }

    pub fn label(&self, i: usize) -> Option<&str> {
        self.labels.get(i).map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attribute {
    pub name: String,
    pub value: Expr,
    pub pos: Pos,
}

/// A dotted reference such as `local_instance.ci.addr`. Always at least two
/// segments.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Ref {
    path: Vec<String>,
}

impl Ref {
    pub fn new(path: Vec<String>) -> Option<Self> {
        let valid = path.len() >= 2
            && path.iter().all(|seg| {
                let mut chars = seg.chars();
                chars.next().is_some_and(is_ident_start) && chars.all(is_ident_char)
            });
        valid.then_some(Ref { path })
    }

    pub fn parse(dotted: &str) -> Option<Self> {
        Ref::new(dotted.split('.').map(str::to_string).collect())
    }

    pub fn segments(&self) -> &[String] {
        &self.path
    }

    /// `type.name` of the resource a reference points into.
    pub fn address(&self) -> String {
        format!("{}.{}", self.path[0], self.path[1])
    }
}

impl fmt::Display for Ref {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.path.join("."))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StrPart {
    Lit(String),
    Interp(Ref),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Str(Vec<StrPart>),
    Num(f64),
    Bool(bool),
    List(Vec<Expr>),
    Ref(Ref),
}

impl Expr {
    /// Builds a string expression, merging adjacent literals and dropping
    /// empty ones so that equal strings have one representation.
    pub fn string(parts: impl IntoIterator<Item = StrPart>) -> Expr {
        let mut out: Vec<StrPart> = Vec::new();
        for p in parts {
            match (out.last_mut(), p) {
                (_, StrPart::Lit(s)) if s.is_empty() => {}
                (Some(StrPart::Lit(prev)), StrPart::Lit(s)) => prev.push_str(&s),
                (_, p) => out.push(p),
            }
        }
        Expr::Str(out)
    }

    pub fn text(s: impl Into<String>) -> Expr {
        Expr::string([StrPart::Lit(s.into())])
    }

    /// Every reference reachable from this expression, in source order.
    pub fn refs(&self) -> Vec<&Ref> {
        let mut out = Vec::new();
        self.collect_refs(&mut out);
        out
    }

    fn collect_refs<'a>(&'a self, out: &mut Vec<&'a Ref>) {
        match self {
            Expr::Ref(r) => out.push(r),
            Expr::Str(parts) => out.extend(parts.iter().filter_map(|p| match p {
                StrPart::Interp(r) => Some(r),
                StrPart::Lit(_) => None,
            })),
            Expr::List(items) => items.iter().for_each(|e| e.collect_refs(out)),
            Expr::Num(_) | Expr::Bool(_) => {}
        }
    }

    /// The literal text of a string without interpolations.
    pub fn as_plain_str(&self) -> Option<String> {
        match self {
            Expr::Str(parts) => parts
                .iter()
                .map(|p| match p {
                    StrPart::Lit(s) => Some(s.as_str()),
                    StrPart::Interp(_) => None,
                })
                .collect(),
            _ => None,
        }
    }
}
