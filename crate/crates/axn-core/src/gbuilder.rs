//! Construction of the sparse train-score matrix.
//!
//! Chooses which (train query, item) coordinates to observe, computes their
//! exact scores through the black-box scorer, and assembles a
//! [`SparseScoreMatrix`]. Per-query strategies cost `k_d * n_queries`
//! scorer calls; the per-item strategy costs `k_d * n_items` calls and
//! guarantees every item is observed.

use crate::error::{Error, Result};
use crate::ids::{ItemId, QueryId};
use crate::linalg::dot;
use crate::matrix::EmbeddingMatrix;
use crate::rng;
use crate::scorer::{ScoreNormalizer, Scorer};
use crate::sparse::{ScoreEntry, SparseScoreMatrix};
use crate::topk::TopKList;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum GStrategy {
    /// Per train query, the top `k_d` items by base dot product.
    #[serde(rename = "q-topk")]
    QTopK,
    /// Per train query, `k_d` items uniformly at random (without
    /// replacement).
    #[serde(rename = "q-random")]
    QRandom,
    /// Per item, the top `k_d` train queries by base dot product.
    #[serde(rename = "i-topk")]
    ITopKQueries,
}

#[derive(Clone, Debug)]
pub struct GBuildSpec {
    pub strategy: GStrategy,
    pub k_d: usize,
    pub seed: u64,
    pub n_queries: usize,
    pub n_items: usize,
    /// Base embeddings; required by the top-k strategies and by
    /// normalization.
    pub base_query_embs: Option<EmbeddingMatrix>,
    pub base_item_embs: Option<EmbeddingMatrix>,
    /// When set, fit a [`ScoreNormalizer`] on the observed entries of the
    /// first `n` train queries (matching base dot products as reference)
    /// and store normalized scores.
    pub normalize_fit_queries: Option<usize>,
    /// Items per scorer call; amortizes round trips to external backends.
    pub batch_size: usize,
}

pub const DEFAULT_SCORE_BATCH: usize = 64;

impl GBuildSpec {
    fn validate(&self) -> Result<()> {
        if self.k_d == 0 {
            return Err(Error::InvalidSpec("k_d must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidSpec("batch_size must be at least 1".into()));
        }
        match self.strategy {
            GStrategy::QTopK | GStrategy::QRandom => {
                if self.k_d > self.n_items {
                    return Err(Error::InvalidSpec(format!(
                        "k_d {} exceeds corpus size {}",
                        self.k_d, self.n_items
                    )));
                }
            }
            GStrategy::ITopKQueries => {
                if self.k_d > self.n_queries {
                    return Err(Error::InvalidSpec(format!(
                        "k_d {} exceeds train query pool size {}",
                        self.k_d, self.n_queries
                    )));
                }
            }
        }
        let needs_embs = matches!(self.strategy, GStrategy::QTopK | GStrategy::ITopKQueries)
            || self.normalize_fit_queries.is_some();
        if needs_embs {
            let q = self.base_query_embs.as_ref().ok_or_else(|| {
                Error::InvalidSpec("strategy/normalization requires base query embeddings".into())
            })?;
            let i = self.base_item_embs.as_ref().ok_or_else(|| {
                Error::InvalidSpec("strategy/normalization requires base item embeddings".into())
            })?;
            if q.rows() != self.n_queries || i.rows() != self.n_items {
                return Err(Error::InvalidSpec(format!(
                    "base embedding rows ({}, {}) do not match counts ({}, {})",
                    q.rows(),
                    i.rows(),
                    self.n_queries,
                    self.n_items
                )));
            }
            if q.dim() != i.dim() {
                return Err(Error::DimensionMismatch(format!(
                    "base query dim {} != base item dim {}",
                    q.dim(),
                    i.dim()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct GBuildOutput {
    pub g: SparseScoreMatrix,
    /// Total scorer calls charged by the build (one per coordinate).
    pub scorer_calls: usize,
    /// The fitted normalizer, when normalization was requested; callers
    /// must reuse it for test-time scoring so train and test scores live
    /// on the same scale.
    pub normalizer: Option<ScoreNormalizer>,
}

/// Choose coordinates per the strategy and score them.
///
/// Deterministic given the spec seed. Scoring parallelizes across queries
/// when `workers > 1`; assembly is order-independent because the final
/// entry list is sorted by coordinate.
pub fn build_sparse_matrix(
    spec: &GBuildSpec,
    scorer: &dyn Scorer,
    workers: usize,
) -> Result<GBuildOutput> {
    spec.validate()?;
    let per_query = select_coordinates(spec);

    let score_query = |(&q, items): (&usize, &Vec<usize>)| -> Result<Vec<ScoreEntry>> {
        let ids: Vec<ItemId> = items.iter().map(|&i| ItemId(i)).collect();
        let mut out = Vec::with_capacity(ids.len());
        for chunk in ids.chunks(spec.batch_size) {
            let scores = scorer.score_batch(QueryId(q), chunk)?;
            if scores.len() != chunk.len() {
                return Err(Error::BackendFailure(format!(
                    "backend returned {} scores for {} items",
                    scores.len(),
                    chunk.len()
                )));
            }
            out.extend(chunk.iter().zip(scores).map(|(&item, score)| ScoreEntry {
                query: QueryId(q),
                item,
                score,
            }));
        }
        Ok(out)
    };

    let queries: Vec<usize> = per_query.iter().map(|(q, _)| *q).collect();
    let rows: Vec<Vec<ScoreEntry>> = if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::BackendFailure(format!("thread pool: {e}")))?;
        pool.install(|| {
            per_query
                .par_iter()
                .map(|(q, items)| score_query((q, items)))
                .collect::<Result<Vec<_>>>()
        })?
    } else {
        per_query
            .iter()
            .map(|(q, items)| score_query((q, items)))
            .collect::<Result<Vec<_>>>()?
    };
    debug_assert_eq!(queries.len(), rows.len());

    let mut entries: Vec<ScoreEntry> = rows.into_iter().flatten().collect();
    let scorer_calls = entries.len();

    let normalizer = match spec.normalize_fit_queries {
        None => None,
        Some(fit_queries) => {
            let base_q = spec.base_query_embs.as_ref().expect("validated");
            let base_i = spec.base_item_embs.as_ref().expect("validated");
            let limit = fit_queries.min(spec.n_queries);
            let mut ce = Vec::new();
            let mut reference = Vec::new();
            for e in entries.iter().filter(|e| e.query.0 < limit) {
                ce.push(e.score);
                reference.push(dot(base_q.row(e.query.0), base_i.row(e.item.0)));
            }
            let n = ScoreNormalizer::fit(&ce, &reference)?;
            for e in &mut entries {
                e.score = n.apply(e.score);
            }
            Some(n)
        }
    };

    Ok(GBuildOutput {
        g: SparseScoreMatrix::new(spec.n_queries, spec.n_items, entries)?,
        scorer_calls,
        normalizer,
    })
}

/// Coordinates to observe, grouped by query id (ascending).
fn select_coordinates(spec: &GBuildSpec) -> Vec<(usize, Vec<usize>)> {
    match spec.strategy {
        GStrategy::QTopK => {
            let base_q = spec.base_query_embs.as_ref().expect("validated");
            let base_i = spec.base_item_embs.as_ref().expect("validated");
            (0..spec.n_queries)
                .map(|q| (q, top_rows_by_dot(base_q.row(q), base_i, spec.k_d)))
                .collect()
        }
        GStrategy::QRandom => {
            let base = rng::derive_seed(spec.seed, "g-random");
            (0..spec.n_queries)
                .map(|q| {
                    let mut r = rng::stream(rng::splitmix64(
                        base ^ (q as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
                    ));
                    let mut items = rng::sample_without_replacement(&mut r, spec.n_items, spec.k_d);
                    items.sort_unstable();
                    (q, items)
                })
                .collect()
        }
        GStrategy::ITopKQueries => {
            let base_q = spec.base_query_embs.as_ref().expect("validated");
            let base_i = spec.base_item_embs.as_ref().expect("validated");
            let mut per_query: Vec<(usize, Vec<usize>)> =
                (0..spec.n_queries).map(|q| (q, Vec::new())).collect();
            for i in 0..spec.n_items {
                for q in top_rows_by_dot(base_i.row(i), base_q, spec.k_d) {
                    per_query[q].1.push(i);
                }
            }
            per_query.retain(|(_, items)| !items.is_empty());
            per_query
        }
    }
}

/// Indices of the top-k rows of `m` by dot product with `v` (ties broken
/// by lower index, the global rank order).
fn top_rows_by_dot(v: &[f64], m: &EmbeddingMatrix, k: usize) -> Vec<usize> {
    let scored = (0..m.rows()).map(|r| (ItemId(r), dot(v, m.row(r))));
    TopKList::from_scores(k, scored)
        .ids()
        .map(|id| id.0)
        .collect()
}

#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
pub struct CoverageStats {
    pub min_entries_per_item: usize,
    pub mean_entries_per_item: f64,
    pub max_entries_per_item: usize,
    /// Fraction of items with no observed entry at all.
    pub zero_item_fraction: f64,
}

pub fn coverage_stats(g: &SparseScoreMatrix) -> CoverageStats {
    let n_items = g.n_items();
    if n_items == 0 {
        return CoverageStats {
            min_entries_per_item: 0,
            mean_entries_per_item: 0.0,
            max_entries_per_item: 0,
            zero_item_fraction: 1.0,
        };
    }
    let mut counts = vec![0usize; n_items];
    for e in g.entries() {
        counts[e.item.0] += 1;
    }
    let zero = counts.iter().filter(|&&c| c == 0).count();
    CoverageStats {
        min_entries_per_item: counts.iter().copied().min().unwrap_or(0),
        mean_entries_per_item: g.nnz() as f64 / n_items as f64,
        max_entries_per_item: counts.iter().copied().max().unwrap_or(0),
        zero_item_fraction: zero as f64 / n_items as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scorer::synthetic::{make_synthetic_oracle, SyntheticOracleSpec};

    fn synthetic(
        n_queries: usize,
        n_items: usize,
    ) -> (impl Scorer, EmbeddingMatrix, EmbeddingMatrix) {
        make_synthetic_oracle(SyntheticOracleSpec {
            n_queries,
            n_items,
            rank: 3,
            dim: 3,
            sigma: 0.0,
            seed: 5,
        })
        .unwrap()
    }

    fn spec(strategy: GStrategy, k_d: usize, nq: usize, ni: usize) -> GBuildSpec {
        let (_, u, v) = synthetic(nq, ni);
        GBuildSpec {
            strategy,
            k_d,
            seed: 42,
            n_queries: nq,
            n_items: ni,
            base_query_embs: Some(u),
            base_item_embs: Some(v),
            normalize_fit_queries: None,
            batch_size: DEFAULT_SCORE_BATCH,
        }
    }

    #[test]
    fn per_query_strategies_have_exact_nnz() {
        let (scorer, _, _) = synthetic(6, 10);
        for strategy in [GStrategy::QTopK, GStrategy::QRandom] {
            let out = build_sparse_matrix(&spec(strategy, 4, 6, 10), &scorer, 1).unwrap();
            assert_eq!(out.g.nnz(), 4 * 6);
            assert_eq!(out.scorer_calls, 4 * 6);
            for q in 0..6 {
                assert_eq!(out.g.query_row(QueryId(q)).len(), 4);
            }
        }
    }

    #[test]
    fn per_item_strategy_has_exact_nnz_and_full_coverage() {
        let (scorer, _, _) = synthetic(6, 10);
        let out =
            build_sparse_matrix(&spec(GStrategy::ITopKQueries, 2, 6, 10), &scorer, 1).unwrap();
        assert_eq!(out.g.nnz(), 2 * 10);
        let stats = coverage_stats(&out.g);
        assert_eq!(stats.min_entries_per_item, 2);
        assert_eq!(stats.max_entries_per_item, 2);
        assert_eq!(stats.mean_entries_per_item, 2.0);
        assert_eq!(stats.zero_item_fraction, 0.0);
    }

    #[test]
    fn q_random_is_deterministic_per_seed() {
        let (scorer, _, _) = synthetic(5, 12);
        let s = spec(GStrategy::QRandom, 3, 5, 12);
        let a = build_sparse_matrix(&s, &scorer, 1).unwrap();
        let b = build_sparse_matrix(&s, &scorer, 1).unwrap();
        assert_eq!(a.g, b.g);
        let mut s2 = spec(GStrategy::QRandom, 3, 5, 12);
        s2.seed = 43;
        let c = build_sparse_matrix(&s2, &scorer, 1).unwrap();
        assert_ne!(a.g, c.g);
    }

    #[test]
    fn q_topk_matches_brute_force_selection() {
        let (scorer, u, v) = synthetic(3, 4);
        let s = spec(GStrategy::QTopK, 2, 3, 4);
        let out = build_sparse_matrix(&s, &scorer, 1).unwrap();
        for q in 0..3 {
            let mut dots: Vec<(usize, f64)> =
                (0..4).map(|i| (i, dot(u.row(q), v.row(i)))).collect();
            dots.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            let mut expected: Vec<usize> = dots.iter().take(2).map(|(i, _)| *i).collect();
            expected.sort_unstable();
            let got: Vec<usize> = out
                .g
                .query_row(QueryId(q))
                .iter()
                .map(|e| e.item.0)
                .collect();
            assert_eq!(got, expected);
        }
    }

    #[test]
    fn stored_scores_match_independent_scorer_calls() {
        let (scorer, _, _) = synthetic(4, 8);
        let out = build_sparse_matrix(&spec(GStrategy::QTopK, 3, 4, 8), &scorer, 1).unwrap();
        for e in out.g.entries() {
            let s = scorer.score_batch(e.query, &[e.item]).unwrap()[0];
            assert_eq!(e.score, s);
        }
    }

    #[test]
    fn parallel_build_matches_sequential() {
        let (scorer, _, _) = synthetic(6, 10);
        let s = spec(GStrategy::QRandom, 4, 6, 10);
        let seq = build_sparse_matrix(&s, &scorer, 1).unwrap();
        let par = build_sparse_matrix(&s, &scorer, 4).unwrap();
        assert_eq!(seq.g, par.g);
    }

    #[test]
    fn normalization_rescales_scores() {
        let (scorer, _, _) = synthetic(5, 10);
        let mut s = spec(GStrategy::QTopK, 4, 5, 10);
        s.normalize_fit_queries = Some(100);
        let out = build_sparse_matrix(&s, &scorer, 1).unwrap();
        let n = out.normalizer.unwrap();
        assert!(n.beta > 0.0);
        // stored = n.apply(raw)
        let raw = build_sparse_matrix(&spec(GStrategy::QTopK, 4, 5, 10), &scorer, 1).unwrap();
        for (a, b) in out.g.entries().iter().zip(raw.g.entries()) {
            assert!((a.score - n.apply(b.score)).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_matrix_coverage() {
        let g = SparseScoreMatrix::new(3, 5, vec![]).unwrap();
        let stats = coverage_stats(&g);
        assert_eq!(stats.zero_item_fraction, 1.0);
        assert_eq!(stats.mean_entries_per_item, 0.0);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = spec(GStrategy::QTopK, 20, 3, 4); // k_d > n_items
        assert!(build_sparse_matrix(&s, &synthetic(3, 4).0, 1).is_err());
        s = spec(GStrategy::QTopK, 2, 3, 4);
        s.base_item_embs = None;
        assert!(build_sparse_matrix(&s, &synthetic(3, 4).0, 1).is_err());
        s = spec(GStrategy::ITopKQueries, 5, 3, 4); // k_d > n_queries
        assert!(build_sparse_matrix(&s, &synthetic(3, 4).0, 1).is_err());
    }
}
