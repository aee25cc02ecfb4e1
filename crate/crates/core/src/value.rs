//! Typed values shared by property elements, skill variables and process variables.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Datatype of a property element, skill variable or form field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Datatype {
    Integer,
    Real,
    Boolean,
    String,
}

impl Datatype {
    pub fn as_str(self) -> &'static str {
        match self {
            Datatype::Integer => "integer",
            Datatype::Real => "real",
            Datatype::Boolean => "boolean",
            Datatype::String => "string",
        }
    }

    pub fn parse(s: &str) -> Option<Datatype> {
        match s {
            "integer" => Some(Datatype::Integer),
            "real" => Some(Datatype::Real),
            "boolean" => Some(Datatype::Boolean),
            "string" => Some(Datatype::String),
            _ => None,
        }
    }

    /// Whether a value of type `other` may be stored where `self` is declared.
    /// Integers widen to reals; nothing else converts.
    pub fn accepts(self, other: Datatype) -> bool {
        self == other || (self == Datatype::Real && other == Datatype::Integer)
    }
}

impl fmt::Display for Datatype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A typed scalar. On the wire this is a plain JSON scalar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Boolean(bool),
    Integer(i64),
    Real(f64),
    String(String),
}

impl Value {
    pub fn datatype(&self) -> Datatype {
        match self {
            Value::Integer(_) => Datatype::Integer,
            Value::Real(_) => Datatype::Real,
            Value::Boolean(_) => Datatype::Boolean,
            Value::String(_) => Datatype::String,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Integer(i) => Some(*i as f64),
            Value::Real(r) => Some(*r),
            _ => None,
        }
    }

    /// Converts the value to `target`, widening integers to reals.
    pub fn coerce(self, target: Datatype) -> Option<Value> {
        match (self, target) {
            (Value::Integer(i), Datatype::Real) => Some(Value::Real(i as f64)),
            (v, t) if v.datatype() == t => Some(v),
            _ => None,
        }
    }

    /// Renders the value the way a constant is written in a process definition:
    /// reals always carry a decimal point so they re-read as reals.
    pub fn to_literal(&self) -> String {
        match self {
            Value::Integer(i) => i.to_string(),
            Value::Real(r) => format!("{r:?}"),
            Value::Boolean(b) => b.to_string(),
            Value::String(s) => s.clone(),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Integer(i) => write!(f, "{i}"),
            Value::Real(r) => write!(f, "{r}"),
            Value::Boolean(b) => write!(f, "{b}"),
            Value::String(s) => f.write_str(s),
        }
    }
}

impl From<i64> for Value {
    fn from(v: i64) -> Self {
        Value::Integer(v)
    }
}

impl From<f64> for Value {
    fn from(v: f64) -> Self {
        Value::Real(v)
    }
}

impl From<bool> for Value {
    fn from(v: bool) -> Self {
        Value::Boolean(v)
    }
}

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::String(v.to_owned())
    }
}

impl From<String> for Value {
    fn from(v: String) -> Self {
        Value::String(v)
    }
}

/// Name → value map used for process variables and skill parameters/outputs.
pub type Variables = BTreeMap<String, Value>;
