//! Ranked top-k lists with a fixed global tie-break.
//!
//! Ordering everywhere in this crate is (score descending, item id
//! ascending). Fixing the tie-break once makes otherwise-equivalent search
//! paths bitwise comparable.

use crate::ids::ItemId;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;

/// Comparator for (item, score) pairs: higher score first, lower id breaks
/// ties. Total order (uses `total_cmp`).
pub fn rank_order(a: &(ItemId, f64), b: &(ItemId, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

/// Up to `k` (item, score) pairs, strictly sorted by [`rank_order`], no
/// duplicate ids.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct TopKList {
    k: usize,
    entries: Vec<(ItemId, f64)>,
}

impl TopKList {
    /// Select the top `k` of an arbitrary scored stream.
    ///
    /// The caller is responsible for not feeding the same id twice; ids are
    /// not deduplicated here (use [`TopKList::merge`] for that).
    pub fn from_scores<I>(k: usize, scored: I) -> Self
    where
        I: IntoIterator<Item = (ItemId, f64)>,
    {
        let mut entries: Vec<(ItemId, f64)> = scored.into_iter().collect();
        entries.sort_unstable_by(rank_order);
        entries.truncate(k);
        Self { k, entries }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(ItemId, f64)] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ItemId> + '_ {
        self.entries.iter().map(|(id, _)| *id)
    }

    /// First `k` entries as a new list.
    pub fn truncated(&self, k: usize) -> TopKList {
        TopKList {
            k,
            entries: self.entries.iter().take(k).copied().collect(),
        }
    }

    /// Top `k` of the union, collapsing duplicate ids to the higher score
    /// (and, for equal scores, keeping one copy).
    pub fn merge(&self, other: &TopKList, k: usize) -> TopKList {
        let mut all: Vec<(ItemId, f64)> = self
            .entries
            .iter()
            .chain(other.entries.iter())
            .copied()
            .collect();
        all.sort_unstable_by(|a, b| a.0.cmp(&b.0).then(b.1.total_cmp(&a.1)));
        all.dedup_by_key(|e| e.0);
        TopKList::from_scores(k, all)
    }
}
