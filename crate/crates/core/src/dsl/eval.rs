use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::ast::{Expr, StrPart};
use super::DslError;

/// A fully resolved runtime value.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Text(String),
    Number(f64),
    Bool(bool),
    List(Vec<Value>),
}

pub type Scope = BTreeMap<String, Value>;

impl Value {
    pub fn kind(&self) -> &'static str {
        match self {
            Value::Text(_) => "text",
            Value::Number(_) => "number",
            Value::Bool(_) => "bool",
            Value::List(_) => "list",
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Text(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Number(n) => Some(*n),
            _ => None,
        }
    }

    pub fn as_list(&self) -> Option<&[Value]> {
        match self {
            Value::List(v) => Some(v),
            _ => None,
        }
    }

    /// Text rendering used for `${...}` substitution. Lists have none.
    pub fn render(&self) -> Option<String> {
        match self {
            Value::Text(s) => Some(s.clone()),
            Value::Number(n) => Some(n.to_string()),
            Value::Bool(b) => Some(b.to_string()),
            Value::List(_) => None,
        }
    }

    /// Converts a literal expression (no references) into a value.
    pub fn from_literal(expr: &Expr) -> Option<Value> {
        eval_expr(expr, &Scope::new()).ok()
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::Text(s.to_string())
    }
}

impl From<String> for Value {
    fn from(s: String) -> Self {
        Value::Text(s)
    }
}

impl From<f64> for Value {
    fn from(n: f64) -> Self {
        Value::Number(n)
    }
}

impl From<bool> for Value {
    fn from(b: bool) -> Self {
        Value::Bool(b)
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::List(items) => {
                f.write_str("[")?;
                for (i, v) in items.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    match v {
                        Value::Text(s) => write!(f, "{s:?}")?,
                        other => write!(f, "{other}")?,
                    }
                }
                f.write_str("]")
            }
            other => f.write_str(&other.render().unwrap_or_default()),
        }
    }
}

impl Serialize for Value {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Value::Text(t) => s.serialize_str(t),
            Value::Number(n) if n.fract() == 0.0 && n.abs() < 9.0e15 => s.serialize_i64(*n as i64),
            Value::Number(n) => s.serialize_f64(*n),
            Value::Bool(b) => s.serialize_bool(*b),
            Value::List(items) => items.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for Value {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let raw = serde_json::Value::deserialize(d)?;
        Value::try_from(raw).map_err(D::Error::custom)
    }
}

impl TryFrom<serde_json::Value> for Value {
    type Error = String;

    fn try_from(v: serde_json::Value) -> Result<Self, Self::Error> {
        Ok(match v {
            serde_json::Value::String(s) => Value::Text(s),
            serde_json::Value::Number(n) => {
                Value::Number(n.as_f64().ok_or_else(|| format!("number out of range: {n}"))?)
            }
            serde_json::Value::Bool(b) => Value::Bool(b),
            serde_json::Value::Array(items) => {
                Value::List(items.into_iter().map(Value::try_from).collect::<Result<_, _>>()?)
            }
            other => return Err(format!("unsupported value {other}")),
        })
    }
}

/// Evaluates `expr` against `scope`, keyed by dotted reference path.
pub fn eval_expr(expr: &Expr, scope: &Scope) -> Result<Value, DslError> {
    match expr {
        Expr::Num(n) => Ok(Value::Number(*n)),
        Expr::Bool(b) => Ok(Value::Bool(*b)),
        Expr::List(items) => {
            items.iter().map(|e| eval_expr(e, scope)).collect::<Result<_, _>>().map(Value::List)
        }
        Expr::Ref(r) => {
            let path = r.to_string();
            scope.get(&path).cloned().ok_or(DslError::UnknownRef(path))
        }
        Expr::Str(parts) => {
            let mut out = String::new();
            for part in parts {
                match part {
                    StrPart::Lit(s) => out.push_str(s),
                    StrPart::Interp(r) => {
                        let path = r.to_string();
                        let v = scope.get(&path).ok_or_else(|| DslError::UnknownRef(path.clone()))?;
                        let text = v.render().ok_or_else(|| DslError::TypeMismatch {
                            path,
                            message: format!("cannot interpolate a {} into a string", v.kind()),
                        })?;
                        out.push_str(&text);
                    }
                }
            }
            Ok(Value::Text(out))
        }
    }
}
