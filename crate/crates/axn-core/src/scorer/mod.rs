//! Black-box similarity scoring with budget accounting.
//!
//! A [`Scorer`] maps (query, item) pairs to scalar scores. It is expensive
//! by assumption, so online callers go through a per-query [`QuerySession`]
//! which caches scores (re-scoring a pair is free) and enforces a hard call
//! budget via a [`BudgetLedger`]. Three backends are provided: a lookup
//! table over a known matrix ([`oracle`]), a seeded synthetic low-rank
//! generator ([`synthetic`]), and an external process speaking
//! newline-delimited JSON ([`external`]).

pub mod external;
pub mod oracle;
pub mod source;
pub mod synthetic;

use crate::error::{Error, Result};
use crate::ids::{ItemId, QueryId};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Deterministic black-box similarity function.
///
/// Implementations must return the same score for the same pair within a
/// session and be safe to call from concurrent query sessions.
pub trait Scorer: Send + Sync {
    /// Backend name for logs and provenance.
    fn descriptor(&self) -> String;

    /// Scores positionally aligned with `items`. Every returned value is
    /// finite.
    fn score_batch(&self, query: QueryId, items: &[ItemId]) -> Result<Vec<f64>>;

    /// Corpus size, when the backend knows it.
    fn num_items(&self) -> Option<usize> {
        None
    }
}

/// Per-query call budget.
///
/// `used` counts distinct (query, item) pairs sent to the backend; cache
/// hits are free. `used <= budget` always holds: a batch that would
/// overflow is rejected atomically before any call is made.
#[derive(Clone, Debug)]
pub struct BudgetLedger {
    budget: usize,
    used: usize,
    log: Option<Vec<(QueryId, ItemId)>>,
}

impl BudgetLedger {
    pub fn new(budget: usize) -> Self {
        Self {
            budget,
            used: 0,
            log: None,
        }
    }

    pub fn unlimited() -> Self {
        Self::new(usize::MAX)
    }

    /// Keep a log of every scored pair (for audits and tests).
    pub fn with_log(mut self) -> Self {
        self.log = Some(Vec::new());
        self
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn used(&self) -> usize {
        self.used
    }

    pub fn remaining(&self) -> usize {
        self.budget - self.used
    }

    pub fn log(&self) -> Option<&[(QueryId, ItemId)]> {
        self.log.as_deref()
    }

    fn reserve(&mut self, requested: usize) -> Result<()> {
        if requested > self.remaining() {
            return Err(Error::BudgetExhausted {
                used: self.used,
                budget: self.budget,
                requested,
            });
        }
        Ok(())
    }

    fn charge(&mut self, query: QueryId, items: &[ItemId]) {
        self.used += items.len();
        if let Some(log) = &mut self.log {
            log.extend(items.iter().map(|&i| (query, i)));
        }
    }
}

/// Rank-preserving affine map `s -> beta * (s - alpha)` used to bring
/// black-box scores onto the scale of a reference (dot-product) score
/// distribution. `beta > 0`, so applying it never changes an argsort.
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
pub struct ScoreNormalizer {
    pub alpha: f64,
    pub beta: f64,
}

impl ScoreNormalizer {
    pub fn identity() -> Self {
        Self {
            alpha: 0.0,
            beta: 1.0,
        }
    }

    /// Fit so that mapping `ce_scores` reproduces the mean and standard
    /// deviation of `ref_scores`.
    pub fn fit(ce_scores: &[f64], ref_scores: &[f64]) -> Result<Self> {
        if ce_scores.len() < 2 || ref_scores.len() < 2 {
            return Err(Error::DegenerateDistribution(
                "need at least 2 samples on each side".into(),
            ));
        }
        let (ce_mean, ce_std) = mean_std(ce_scores);
        let (ref_mean, ref_std) = mean_std(ref_scores);
        if ce_std <= 0.0 || ref_std <= 0.0 {
            return Err(Error::DegenerateDistribution(
                "zero variance in score sample".into(),
            ));
        }
        let beta = ref_std / ce_std;
        let alpha = ce_mean - ref_mean / beta;
        Ok(Self { alpha, beta })
    }

    pub fn apply(&self, s: f64) -> f64 {
        self.beta * (s - self.alpha)
    }

    pub fn apply_slice(&self, scores: &mut [f64]) {
        for s in scores {
            *s = self.apply(*s);
        }
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// One query's scoring session: cache + ledger + optional normalization.
///
/// The cache is scoped to the session, matching the accounting where
/// re-scoring an already retrieved item is never counted twice.
pub struct QuerySession<'a> {
    scorer: &'a dyn Scorer,
    query: QueryId,
    ledger: BudgetLedger,
    cache: HashMap<ItemId, f64>,
    normalizer: Option<ScoreNormalizer>,
}

impl<'a> QuerySession<'a> {
    pub fn new(scorer: &'a dyn Scorer, query: QueryId, ledger: BudgetLedger) -> Self {
        Self {
            scorer,
            query,
            ledger,
            cache: HashMap::new(),
            normalizer: None,
        }
    }

    /// Apply `n` to every backend score before caching/returning it.
    pub fn with_normalizer(mut self, n: Option<ScoreNormalizer>) -> Self {
        self.normalizer = n;
        self
    }

    pub fn query(&self) -> QueryId {
        self.query
    }

    pub fn ledger(&self) -> &BudgetLedger {
        &self.ledger
    }

    /// Exact scores for `items`, positionally aligned.
    ///
    /// Charges the ledger only for items not already cached; fails with
    /// `BudgetExhausted` (ledger untouched, no backend call) if the uncached
    /// remainder does not fit in the budget.
    pub fn score_batch(&mut self, items: &[ItemId]) -> Result<Vec<f64>> {
        let mut uncached: Vec<ItemId> = Vec::new();
        let mut seen_new: HashMap<ItemId, ()> = HashMap::new();
        for &it in items {
            if !self.cache.contains_key(&it) && seen_new.insert(it, ()).is_none() {
                uncached.push(it);
            }
        }
        self.ledger.reserve(uncached.len())?;
        if !uncached.is_empty() {
            let mut scores = self.scorer.score_batch(self.query, &uncached)?;
            if scores.len() != uncached.len() {
                return Err(Error::BackendFailure(format!(
                    "backend returned {} scores for {} items",
                    scores.len(),
                    uncached.len()
                )));
            }
            if let Some(pos) = scores.iter().position(|s| !s.is_finite()) {
                return Err(Error::BackendFailure(format!(
                    "backend returned non-finite score for item {}",
                    uncached[pos]
                )));
            }
            if let Some(n) = &self.normalizer {
                n.apply_slice(&mut scores);
            }
            self.ledger.charge(self.query, &uncached);
            for (it, s) in uncached.iter().zip(scores) {
                self.cache.insert(*it, s);
            }
        }
        Ok(items.iter().map(|it| self.cache[it]).collect())
    }

    pub fn cached(&self, item: ItemId) -> Option<f64> {
        self.cache.get(&item).copied()
    }

    pub fn calls_used(&self) -> usize {
        self.ledger.used()
    }
}
