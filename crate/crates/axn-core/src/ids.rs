//! Dense integer identifiers for items and queries.
//!
//! Ids index directly into a registered corpus or query set: they are dense
//! `0..n-1` within one set, and an id never refers to two entities. Mapping
//! external names to ids is the caller's concern (a sidecar manifest), not
//! the numerical core's.

use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemId(pub usize);

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QueryId(pub usize);

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for QueryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<usize> for ItemId {
    fn from(v: usize) -> Self {
        ItemId(v)
    }
}

impl From<usize> for QueryId {
    fn from(v: usize) -> Self {
        QueryId(v)
    }
}
