use std::fmt;

use serde::{Deserialize, Serialize};

/// Milliseconds of simulated or wall-clock time.
pub type Millis = u64;

/// Dense node identifier, `0..n`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u64);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// An opaque client value.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Value(#[serde(with = "hex::serde")] pub Vec<u8>);

impl Value {
    pub fn new(bytes: impl Into<Vec<u8>>) -> Self {
        Value(bytes.into())
    }
}

impl fmt::Debug for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Value({})", hex::encode(&self.0))
    }
}

/// Outcome of one broadcast iteration: a client value or NULL.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Decision {
    Null,
    Value(Value),
}

impl Decision {
    pub fn value(&self) -> Option<&Value> {
        match self {
            Decision::Null => None,
            Decision::Value(v) => Some(v),
        }
    }
}
