//! Online search under a scorer call budget.
//!
//! The adaptive searcher splits the budget over `R` rounds. Round 1 scores
//! an initial candidate set (random, embedding top-k, or a precomputed
//! ranking). Every later round refits the query embedding by solving the
//! least-squares system `V_A u = a` over the items scored so far (optionally
//! mixing in a parametric query embedding), retrieves the next batch of
//! unseen items by dot product with the refitted embedding, and scores them.
//! The final top-k is always ranked by exact scores.
//!
//! Baselines: retrieve-and-rerank ([`rnr_search`], equivalent to a single
//! round), per-round gradient refinement ([`tour_search`]), and exhaustive
//! [`brute_force_knn`].

use crate::error::{Error, Result};
use crate::ids::{ItemId, QueryId};
use crate::linalg::{self, dot};
use crate::matrix::EmbeddingMatrix;
use crate::rng;
use crate::scorer::{BudgetLedger, QuerySession, ScoreNormalizer, Scorer};
use crate::topk::TopKList;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

pub const DEFAULT_PINV_TOLERANCE: f64 = 1e-10;

/// How the first round (and the shortlist, when enabled) picks items.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitPolicy {
    /// Uniformly at random without replacement (seeded).
    Random,
    /// Top items by dot product with the parametric query embedding.
    EmbTopK,
    /// First items of a caller-supplied ranking.
    PrecomputedRanking,
}

#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
pub struct AxnConfig {
    /// Exact-scorer call budget per query.
    pub budget: usize,
    /// Number of retrieval rounds.
    pub rounds: usize,
    /// Items per round. Defaults to `budget / rounds` with the remainder
    /// front-loaded into the earliest rounds.
    pub k_s: Option<usize>,
    /// Mixing weight for the parametric query embedding (0 = pure
    /// least-squares solution).
    pub lambda: f64,
    pub init: InitPolicy,
    /// When set, restrict all rounds' retrieval to the init policy's top
    /// that-many items.
    pub shortlist_size: Option<usize>,
    /// Relative singular-value cutoff for the least-squares solve.
    pub pinv_tolerance: f64,
    pub seed: u64,
    /// Also return approximate scores from the final refitted embedding.
    pub keep_approx_scores: bool,
}

impl AxnConfig {
    pub fn new(budget: usize, rounds: usize) -> Self {
        Self {
            budget,
            rounds,
            k_s: None,
            lambda: 0.0,
            init: InitPolicy::EmbTopK,
            shortlist_size: None,
            pinv_tolerance: DEFAULT_PINV_TOLERANCE,
            seed: 0,
            keep_approx_scores: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::InvalidSpec("rounds must be at least 1".into()));
        }
        if self.budget == 0 {
            return Err(Error::InvalidSpec("budget must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) || !self.lambda.is_finite() {
            return Err(Error::LambdaOutOfRange(self.lambda));
        }
        if let Some(ks) = self.k_s {
            if ks == 0 {
                return Err(Error::InvalidSpec("k_s must be at least 1".into()));
            }
            if ks.checked_mul(self.rounds).is_none_or(|t| t > self.budget) {
                return Err(Error::InvalidSpec(format!(
                    "rounds * k_s = {} exceeds budget {}",
                    self.rounds * ks,
                    self.budget
                )));
            }
        }
        if !(self.pinv_tolerance.is_finite() && self.pinv_tolerance >= 0.0) {
            return Err(Error::InvalidSpec(
                "pinv tolerance must be finite and non-negative".into(),
            ));
        }
        if self.shortlist_size == Some(0) {
            return Err(Error::InvalidSpec("shortlist size must be positive".into()));
        }
        Ok(())
    }
}

/// Per-query state carried between rounds: the cumulative retrieved set,
/// its exact scores, the current query embedding and the round counter.
#[derive(Clone, Debug, Default)]
pub struct SearchState {
    items: Vec<ItemId>,
    scores: Vec<f64>,
    member: HashSet<ItemId>,
    u_q: Option<Vec<f64>>,
    round: usize,
}

impl SearchState {
    fn extend(&mut self, new_items: &[ItemId], new_scores: Vec<f64>) {
        debug_assert_eq!(new_items.len(), new_scores.len());
        self.member.extend(new_items.iter().copied());
        self.items.extend(new_items.iter().copied());
        self.scores.extend(new_scores);
    }

    pub fn items(&self) -> &[ItemId] {
        &self.items
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn contains(&self, id: ItemId) -> bool {
        self.member.contains(&id)
    }

    pub fn query_embedding(&self) -> Option<&[f64]> {
        self.u_q.as_deref()
    }

    pub fn round(&self) -> usize {
        self.round
    }

    fn item_rows<'a>(&self, v: &'a EmbeddingMatrix) -> Vec<&'a [f64]> {
        self.items.iter().map(|id| v.row(id.0)).collect()
    }

    fn topk(&self, k: usize) -> TopKList {
        TopKList::from_scores(
            k,
            self.items.iter().copied().zip(self.scores.iter().copied()),
        )
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: usize,
    pub new_items: Vec<ItemId>,
    /// `||V_A u - a||` of the solve feeding this round's retrieval
    /// (absent for the init round).
    pub residual_norm: Option<f64>,
    /// The candidate pool ran out before the planned round size.
    pub truncated: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SearchResult {
    /// Top-k of all retrieved items, ranked by exact scores.
    pub topk: TopKList,
    /// Approximate scores from the final refitted embedding, when requested.
    pub approx_scores: Option<Vec<(ItemId, f64)>>,
    pub calls_used: usize,
    pub trace: Vec<RoundTrace>,
}

/// Exact top-k by scoring every item (costs `n_items` calls).
pub fn brute_force_knn(
    scorer: &dyn Scorer,
    query: QueryId,
    n_items: usize,
    k: usize,
) -> Result<TopKList> {
    let mut session = QuerySession::new(scorer, query, BudgetLedger::unlimited());
    let ids: Vec<ItemId> = (0..n_items).map(ItemId).collect();
    let mut scored = Vec::with_capacity(n_items);
    for chunk in ids.chunks(512) {
        let scores = session.score_batch(chunk)?;
        scored.extend(chunk.iter().copied().zip(scores));
    }
    Ok(TopKList::from_scores(k, scored))
}

/// Top-k rows of `v` by dot product with `u`, over `shortlist` (or all
/// rows) minus `exclude`.
pub fn dot_topk(
    u: &[f64],
    v: &EmbeddingMatrix,
    k: usize,
    exclude: &HashSet<ItemId>,
    shortlist: Option<&[ItemId]>,
) -> Result<TopKList> {
    if u.len() != v.dim() {
        return Err(Error::DimensionMismatch(format!(
            "query dim {} != item dim {}",
            u.len(),
            v.dim()
        )));
    }
    let score = |id: ItemId| (id, dot(u, v.row(id.0)));
    let list = match shortlist {
        Some(ids) => TopKList::from_scores(
            k,
            ids.iter()
                .filter(|id| !exclude.contains(id))
                .map(|&id| score(id)),
        ),
        None => TopKList::from_scores(
            k,
            (0..v.rows())
                .map(ItemId)
                .filter(|id| !exclude.contains(id))
                .map(score),
        ),
    };
    Ok(list)
}

/// Approximate scores `u . v_i` for the shortlist (or all items).
pub fn approx_scores(
    u: &[f64],
    v: &EmbeddingMatrix,
    shortlist: Option<&[ItemId]>,
) -> Result<Vec<(ItemId, f64)>> {
    if u.len() != v.dim() {
        return Err(Error::DimensionMismatch(format!(
            "query dim {} != item dim {}",
            u.len(),
            v.dim()
        )));
    }
    let out = match shortlist {
        Some(ids) => ids.iter().map(|&id| (id, dot(u, v.row(id.0)))).collect(),
        None => (0..v.rows())
            .map(|i| (ItemId(i), dot(u, v.row(i))))
            .collect(),
    };
    Ok(out)
}

/// Minimum-norm least-squares fit of the query embedding to exact scores:
/// solves `V_A u = a` where `item_rows` are the embeddings of the scored
/// items and `scores` their exact scores.
pub fn solve_query_embedding(item_rows: &[&[f64]], scores: &[f64], tol: f64) -> Result<Vec<f64>> {
    linalg::min_norm_lstsq(item_rows, scores, tol)
}

/// Convex combination `(1 - lambda) * u_lstsq + lambda * u_param`.
pub fn mix_embedding(u_lstsq: &[f64], u_param: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&lambda) || !lambda.is_finite() {
        return Err(Error::LambdaOutOfRange(lambda));
    }
    if u_lstsq.len() != u_param.len() {
        return Err(Error::DimensionMismatch(format!(
            "mix of {}-dim and {}-dim embeddings",
            u_lstsq.len(),
            u_param.len()
        )));
    }
    if lambda == 0.0 {
        return Ok(u_lstsq.to_vec());
    }
    if lambda == 1.0 {
        return Ok(u_param.to_vec());
    }
    Ok(u_lstsq
        .iter()
        .zip(u_param)
        .map(|(a, b)| (1.0 - lambda) * a + lambda * b)
        .collect())
}

/// Per-round item counts: `budget / rounds` each, remainder front-loaded.
fn round_sizes(budget: usize, rounds: usize, k_s: Option<usize>) -> Vec<usize> {
    match k_s {
        Some(ks) => vec![ks; rounds],
        None => {
            let base = budget / rounds;
            let rem = budget % rounds;
            (0..rounds).map(|r| base + usize::from(r < rem)).collect()
        }
    }
}

/// The shortlist implied by the init policy, or `None` when disabled.
fn compute_shortlist(
    cfg_init: InitPolicy,
    shortlist_size: Option<usize>,
    seed: u64,
    v: &EmbeddingMatrix,
    u_param: Option<&[f64]>,
    init_ranking: Option<&[ItemId]>,
) -> Result<Option<Vec<ItemId>>> {
    let Some(size) = shortlist_size else {
        return Ok(None);
    };
    Ok(Some(ranked_prefix(
        cfg_init,
        size,
        seed,
        v,
        u_param,
        init_ranking,
    )?))
}

/// First `n` items of the init policy's ranking.
fn ranked_prefix(
    init: InitPolicy,
    n: usize,
    seed: u64,
    v: &EmbeddingMatrix,
    u_param: Option<&[f64]>,
    init_ranking: Option<&[ItemId]>,
) -> Result<Vec<ItemId>> {
    match init {
        InitPolicy::Random => {
            let mut r = rng::stream(rng::derive_seed(seed, "search-init"));
            let take = n.min(v.rows());
            Ok(rng::sample_without_replacement(&mut r, v.rows(), take)
                .into_iter()
                .map(ItemId)
                .collect())
        }
        InitPolicy::EmbTopK => {
            let u = u_param.ok_or_else(|| {
                Error::InvalidSpec("embedding-based init requires a query embedding".into())
            })?;
            Ok(dot_topk(u, v, n, &HashSet::new(), None)?.ids().collect())
        }
        InitPolicy::PrecomputedRanking => {
            let ranking = init_ranking.ok_or_else(|| {
                Error::InvalidSpec("ranking init requires a precomputed ranking".into())
            })?;
            let mut seen = HashSet::new();
            let mut out = Vec::new();
            for &id in ranking {
                if id.0 >= v.rows() {
                    return Err(Error::InvalidSpec(format!(
                        "ranking refers to item {} outside corpus of {}",
                        id,
                        v.rows()
                    )));
                }
                if seen.insert(id) {
                    out.push(id);
                    if out.len() == n {
                        break;
                    }
                }
            }
            Ok(out)
        }
    }
}

/// Multi-round adaptive search (see module docs).
///
/// `u_param` is required when `init` is embedding-based or `lambda > 0`;
/// `init_ranking` is required for the precomputed-ranking init.
#[allow(clippy::too_many_arguments)]
pub fn axn_search(
    cfg: &AxnConfig,
    v: &EmbeddingMatrix,
    scorer: &dyn Scorer,
    query: QueryId,
    k: usize,
    u_param: Option<&[f64]>,
    init_ranking: Option<&[ItemId]>,
    normalizer: Option<ScoreNormalizer>,
) -> Result<SearchResult> {
    cfg.validate()?;
    if (cfg.init == InitPolicy::EmbTopK || cfg.lambda > 0.0) && u_param.is_none() {
        return Err(Error::InvalidSpec(
            "this configuration requires a parametric query embedding".into(),
        ));
    }
    if let Some(u) = u_param {
        if u.len() != v.dim() {
            return Err(Error::DimensionMismatch(format!(
                "query embedding dim {} != item dim {}",
                u.len(),
                v.dim()
            )));
        }
    }

    let sizes = round_sizes(cfg.budget, cfg.rounds, cfg.k_s);
    let shortlist = compute_shortlist(
        cfg.init,
        cfg.shortlist_size,
        cfg.seed,
        v,
        u_param,
        init_ranking,
    )?;

    let mut session =
        QuerySession::new(scorer, query, BudgetLedger::new(cfg.budget)).with_normalizer(normalizer);
    let mut state = SearchState::default();
    let mut trace: Vec<RoundTrace> = Vec::with_capacity(cfg.rounds);

    let refit = |state: &SearchState| -> Result<Vec<f64>> {
        let rows = state.item_rows(v);
        let u_lstsq = solve_query_embedding(&rows, state.scores(), cfg.pinv_tolerance)?;
        if cfg.lambda > 0.0 {
            mix_embedding(&u_lstsq, u_param.expect("validated above"), cfg.lambda)
        } else {
            Ok(u_lstsq)
        }
    };

    for (round_idx, &size) in sizes.iter().enumerate() {
        if size == 0 {
            continue;
        }
        state.round = round_idx + 1;
        let (new_items, residual) = if round_idx == 0 {
            let picked = match &shortlist {
                Some(list) => list.iter().take(size).copied().collect(),
                None => ranked_prefix(cfg.init, size, cfg.seed, v, u_param, init_ranking)?,
            };
            (picked, None)
        } else {
            let u = refit(&state)?;
            let residual = residual_norm(&state.item_rows(v), &u, state.scores());
            let picked: Vec<ItemId> = dot_topk(&u, v, size, &state.member, shortlist.as_deref())?
                .ids()
                .collect();
            state.u_q = Some(u);
            (picked, Some(residual))
        };

        let truncated = new_items.len() < size;
        if new_items.is_empty() {
            trace.push(RoundTrace {
                round: state.round,
                new_items,
                residual_norm: residual,
                truncated: true,
            });
            break;
        }
        let new_scores = session.score_batch(&new_items)?;
        state.extend(&new_items, new_scores);
        trace.push(RoundTrace {
            round: state.round,
            new_items,
            residual_norm: residual,
            truncated,
        });
        if truncated {
            break;
        }
    }

    let approx = if cfg.keep_approx_scores {
        // refit on everything scored, as the final approximate-score output
        let u = refit(&state)?;
        let out = approx_scores(&u, v, shortlist.as_deref())?;
        state.u_q = Some(u);
        Some(out)
    } else {
        None
    };

    Ok(SearchResult {
        topk: state.topk(k),
        approx_scores: approx,
        calls_used: session.calls_used(),
        trace,
    })
}

fn residual_norm(rows: &[&[f64]], u: &[f64], targets: &[f64]) -> f64 {
    rows.iter()
        .zip(targets)
        .map(|(row, &t)| {
            let r = dot(row, u) - t;
            r * r
        })
        .sum::<f64>()
        .sqrt()
}

/// Retrieve-and-rerank: top `budget` items by dot product with the given
/// query embedding, reranked by exact scores.
pub fn rnr_search(
    u: &[f64],
    v: &EmbeddingMatrix,
    scorer: &dyn Scorer,
    query: QueryId,
    budget: usize,
    k: usize,
    normalizer: Option<ScoreNormalizer>,
) -> Result<SearchResult> {
    if budget == 0 {
        return Err(Error::InvalidSpec("budget must be at least 1".into()));
    }
    let candidates: Vec<ItemId> = dot_topk(u, v, budget, &HashSet::new(), None)?
        .ids()
        .collect();
    let mut session =
        QuerySession::new(scorer, query, BudgetLedger::new(budget)).with_normalizer(normalizer);
    let scores = session.score_batch(&candidates)?;
    let truncated = candidates.len() < budget;
    Ok(SearchResult {
        topk: TopKList::from_scores(k, candidates.iter().copied().zip(scores.iter().copied())),
        approx_scores: None,
        calls_used: session.calls_used(),
        trace: vec![RoundTrace {
            round: 1,
            new_items: candidates,
            residual_norm: None,
            truncated,
        }],
    })
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TourVariant {
    /// Squared error between approximate and exact scores.
    Mse,
    /// KL divergence from the exact-score softmax to the approximate-score
    /// softmax (temperature 1).
    KlDiv,
}

#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
pub struct TourConfig {
    pub budget: usize,
    pub rounds: usize,
    pub k_s: Option<usize>,
    pub learning_rate: f64,
    pub variant: TourVariant,
    pub init: InitPolicy,
    pub shortlist_size: Option<usize>,
    pub seed: u64,
}

impl TourConfig {
    pub fn new(budget: usize, rounds: usize, variant: TourVariant) -> Self {
        Self {
            budget,
            rounds,
            k_s: None,
            learning_rate: match variant {
                TourVariant::Mse => 1e-3,
                TourVariant::KlDiv => 0.1,
            },
            variant,
            init: InitPolicy::EmbTopK,
            shortlist_size: None,
            seed: 0,
        }
    }
}

/// Gradient of the mean squared error `mean_i (u . v_i - a_i)^2` w.r.t. `u`.
pub fn tour_mse_gradient(u: &[f64], item_rows: &[&[f64]], targets: &[f64]) -> Vec<f64> {
    let n = item_rows.len().max(1) as f64;
    let mut grad = vec![0.0; u.len()];
    for (row, &t) in item_rows.iter().zip(targets) {
        let r = 2.0 * (dot(row, u) - t) / n;
        for (g, &c) in grad.iter_mut().zip(*row) {
            *g += r * c;
        }
    }
    grad
}

/// Gradient of `KL(softmax(targets) || softmax(u . V))` w.r.t. `u`.
pub fn tour_kl_gradient(u: &[f64], item_rows: &[&[f64]], targets: &[f64]) -> Vec<f64> {
    let approx: Vec<f64> = item_rows.iter().map(|row| dot(row, u)).collect();
    let p = softmax(targets);
    let q = softmax(&approx);
    let mut grad = vec![0.0; u.len()];
    for (j, row) in item_rows.iter().enumerate() {
        let coeff = q[j] - p[j];
        for (g, &c) in grad.iter_mut().zip(*row) {
            *g += coeff * c;
        }
    }
    grad
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&x| libm::exp(x - max)).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Pseudo-relevance-feedback baseline: one gradient step on the query
/// embedding per round, against that round's exact scores.
#[allow(clippy::too_many_arguments)]
pub fn tour_search(
    cfg: &TourConfig,
    v: &EmbeddingMatrix,
    scorer: &dyn Scorer,
    query: QueryId,
    k: usize,
    u_param: &[f64],
    init_ranking: Option<&[ItemId]>,
    normalizer: Option<ScoreNormalizer>,
) -> Result<SearchResult> {
    if cfg.rounds == 0 || cfg.budget == 0 {
        return Err(Error::InvalidSpec(
            "budget and rounds must be positive".into(),
        ));
    }
    if !(cfg.learning_rate.is_finite() && cfg.learning_rate >= 0.0) {
        return Err(Error::InvalidSpec(
            "learning rate must be finite and non-negative".into(),
        ));
    }
    if u_param.len() != v.dim() {
        return Err(Error::DimensionMismatch(format!(
            "query embedding dim {} != item dim {}",
            u_param.len(),
            v.dim()
        )));
    }
    if let Some(ks) = cfg.k_s {
        if ks == 0 || ks * cfg.rounds > cfg.budget {
            return Err(Error::InvalidSpec("invalid k_s for budget".into()));
        }
    }

    let sizes = round_sizes(cfg.budget, cfg.rounds, cfg.k_s);
    let shortlist = compute_shortlist(
        cfg.init,
        cfg.shortlist_size,
        cfg.seed,
        v,
        Some(u_param),
        init_ranking,
    )?;
    let mut session =
        QuerySession::new(scorer, query, BudgetLedger::new(cfg.budget)).with_normalizer(normalizer);
    let mut u = u_param.to_vec();
    let mut state = SearchState::default();
    let mut trace = Vec::with_capacity(cfg.rounds);

    for (round_idx, &size) in sizes.iter().enumerate() {
        if size == 0 {
            continue;
        }
        state.round = round_idx + 1;
        let new_items: Vec<ItemId> = if round_idx == 0 {
            match &shortlist {
                Some(list) => list.iter().take(size).copied().collect(),
                None => ranked_prefix(cfg.init, size, cfg.seed, v, Some(&u), init_ranking)?,
            }
        } else {
            dot_topk(&u, v, size, &state.member, shortlist.as_deref())?
                .ids()
                .collect()
        };
        let truncated = new_items.len() < size;
        if new_items.is_empty() {
            trace.push(RoundTrace {
                round: state.round,
                new_items,
                residual_norm: None,
                truncated: true,
            });
            break;
        }
        let new_scores = session.score_batch(&new_items)?;

        let rows: Vec<&[f64]> = new_items.iter().map(|id| v.row(id.0)).collect();
        let residual = residual_norm(&rows, &u, &new_scores);
        if cfg.learning_rate > 0.0 {
            let grad = match cfg.variant {
                TourVariant::Mse => tour_mse_gradient(&u, &rows, &new_scores),
                TourVariant::KlDiv => tour_kl_gradient(&u, &rows, &new_scores),
            };
            for (uc, g) in u.iter_mut().zip(grad) {
                *uc -= cfg.learning_rate * g;
            }
        }

        state.extend(&new_items, new_scores);
        trace.push(RoundTrace {
            round: state.round,
            new_items,
            residual_norm: Some(residual),
            truncated,
        });
        if truncated {
            break;
        }
    }
    state.u_q = Some(u);

    Ok(SearchResult {
        topk: state.topk(k),
        approx_scores: None,
        calls_used: session.calls_used(),
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::EmbeddingRole;
    use crate::scorer::synthetic::{make_synthetic_oracle, SyntheticOracleSpec};

    fn bench(
        n_items: usize,
        rank: usize,
        dim: usize,
        sigma: f64,
    ) -> (impl Scorer, EmbeddingMatrix, EmbeddingMatrix) {
        make_synthetic_oracle(SyntheticOracleSpec {
            n_queries: 10,
            n_items,
            rank,
            dim,
            sigma,
            seed: 21,
        })
        .unwrap()
    }

    #[test]
    fn brute_force_matches_full_scan() {
        let (scorer, u, v) = bench(50, 4, 4, 0.0);
        for q in 0..3 {
            let got = brute_force_knn(&scorer, QueryId(q), 50, 5).unwrap();
            let mut scored: Vec<(ItemId, f64)> = (0..50)
                .map(|i| (ItemId(i), dot(u.row(q), v.row(i))))
                .collect();
            scored.sort_by(crate::topk::rank_order);
            let expect: Vec<ItemId> = scored.iter().take(5).map(|e| e.0).collect();
            let got_ids: Vec<ItemId> = got.ids().collect();
            assert_eq!(got_ids, expect);
        }
    }

    #[test]
    fn brute_force_full_k_returns_everything_sorted() {
        let (scorer, _, _) = bench(20, 3, 3, 0.1);
        let got = brute_force_knn(&scorer, QueryId(0), 20, 20).unwrap();
        assert_eq!(got.len(), 20);
        for w in got.entries().windows(2) {
            assert!(w[0].1 >= w[1].1);
        }
    }

    #[test]
    fn dot_topk_basis_case() {
        let v = EmbeddingMatrix::new(
            3,
            3,
            EmbeddingRole::Item,
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let top = dot_topk(&[1.0, 0.0, 0.0], &v, 1, &HashSet::new(), None).unwrap();
        assert_eq!(top.entries(), &[(ItemId(0), 1.0)]);
        let mut exclude = HashSet::new();
        exclude.insert(ItemId(0));
        let top = dot_topk(&[1.0, 0.0, 0.0], &v, 1, &exclude, None).unwrap();
        // remaining items tie at score 0; lower id wins
        assert_eq!(top.entries(), &[(ItemId(1), 0.0)]);
    }

    #[test]
    fn dot_topk_matches_argsort_reference() {
        let (_, u, v) = bench(400, 6, 6, 0.0);
        let q = u.row(3);
        let got: Vec<ItemId> = dot_topk(q, &v, 25, &HashSet::new(), None)
            .unwrap()
            .ids()
            .collect();
        let mut all: Vec<(ItemId, f64)> = (0..400).map(|i| (ItemId(i), dot(q, v.row(i)))).collect();
        all.sort_by(crate::topk::rank_order);
        let expect: Vec<ItemId> = all.iter().take(25).map(|e| e.0).collect();
        assert_eq!(got, expect);
    }

    #[test]
    fn dot_topk_respects_shortlist() {
        let (_, u, v) = bench(100, 3, 3, 0.0);
        let shortlist: Vec<ItemId> = (0..10).map(ItemId).collect();
        let got = dot_topk(u.row(0), &v, 100, &HashSet::new(), Some(&shortlist)).unwrap();
        assert!(got.len() <= 10);
        assert!(got.ids().all(|id| id.0 < 10));
    }

    #[test]
    fn solve_square_identity() {
        let rows: Vec<&[f64]> = vec![&[1.0, 0.0], &[0.0, 1.0]];
        let u = solve_query_embedding(&rows, &[3.0, -1.0], 1e-10).unwrap();
        assert!((u[0] - 3.0).abs() < 1e-12 && (u[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn solve_rank_deficient_takes_min_norm() {
        let rows: Vec<&[f64]> = vec![&[1.0, 0.0], &[1.0, 0.0]];
        let u = solve_query_embedding(&rows, &[2.0, 2.0], 1e-10).unwrap();
        assert!((u[0] - 2.0).abs() < 1e-12 && u[1].abs() < 1e-12);
    }

    #[test]
    fn solve_recovers_generating_query_factor() {
        // consistent overdetermined system from an exact low-rank scorer
        let (scorer, u_true, v) = bench(60, 5, 5, 0.0);
        let q = 2;
        let sample: Vec<ItemId> = (0..20).map(ItemId).collect();
        let scores = scorer.score_batch(QueryId(q), &sample).unwrap();
        let rows: Vec<&[f64]> = sample.iter().map(|id| v.row(id.0)).collect();
        let u = solve_query_embedding(&rows, &scores, 1e-10).unwrap();
        for (got, want) in u.iter().zip(u_true.row(q)) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn solve_satisfies_normal_equations() {
        let (scorer, _, v) = bench(40, 4, 6, 0.3);
        let sample: Vec<ItemId> = (5..17).map(ItemId).collect();
        let scores = scorer.score_batch(QueryId(1), &sample).unwrap();
        let rows: Vec<&[f64]> = sample.iter().map(|id| v.row(id.0)).collect();
        let u = solve_query_embedding(&rows, &scores, 1e-10).unwrap();
        // V_A^T (V_A u - a) ~ 0
        let mut resid = vec![0.0; rows.len()];
        for (j, row) in rows.iter().enumerate() {
            resid[j] = dot(row, &u) - scores[j];
        }
        let scale: f64 = scores.iter().map(|s| s.abs()).fold(1.0, f64::max);
        for c in 0..v.dim() {
            let g: f64 = rows.iter().zip(&resid).map(|(row, r)| row[c] * r).sum();
            assert!(g.abs() < 1e-8 * scale, "normal-equation residual {g}");
        }
    }

    #[test]
    fn mix_endpoints_are_exact() {
        let a = vec![1.0, 2.0];
        let b = vec![-3.0, 4.0];
        assert_eq!(mix_embedding(&a, &b, 0.0).unwrap(), a);
        assert_eq!(mix_embedding(&a, &b, 1.0).unwrap(), b);
        let m = mix_embedding(&a, &b, 0.25).unwrap();
        assert!((m[0] - 0.0).abs() < 1e-15 && (m[1] - 2.5).abs() < 1e-15);
        assert!(matches!(
            mix_embedding(&a, &b, 1.5).unwrap_err(),
            Error::LambdaOutOfRange(_)
        ));
    }

    #[test]
    fn round_sizes_front_load_remainder() {
        assert_eq!(round_sizes(103, 5, None), vec![21, 21, 21, 20, 20]);
        assert_eq!(round_sizes(100, 10, None), vec![10; 10]);
        assert_eq!(round_sizes(3, 5, None), vec![1, 1, 1, 0, 0]);
        assert_eq!(round_sizes(100, 4, Some(20)), vec![20; 4]);
    }

    #[test]
    fn axn_single_round_equals_rnr_bitwise() {
        let (scorer, u, v) = bench(80, 4, 4, 0.2);
        for q in 0..5 {
            let mut cfg = AxnConfig::new(17, 1);
            cfg.init = InitPolicy::EmbTopK;
            let a =
                axn_search(&cfg, &v, &scorer, QueryId(q), 6, Some(u.row(q)), None, None).unwrap();
            let b = rnr_search(u.row(q), &v, &scorer, QueryId(q), 17, 6, None).unwrap();
            assert_eq!(a.topk, b.topk);
            assert_eq!(a.calls_used, b.calls_used);
        }
    }

    #[test]
    fn axn_exact_recovery_on_noiseless_low_rank() {
        // with V = true factors and k_s >= rank, the round-2 solve already
        // reproduces every score, so recall must be exact
        let (scorer, _, v) = bench(300, 4, 4, 0.0);
        let mut cfg = AxnConfig::new(40, 4);
        cfg.init = InitPolicy::Random;
        cfg.seed = 5;
        for q in 0..10 {
            let res = axn_search(&cfg, &v, &scorer, QueryId(q), 3, None, None, None).unwrap();
            let gold = brute_force_knn(&scorer, QueryId(q), 300, 3).unwrap();
            let got: Vec<ItemId> = res.topk.ids().collect();
            let want: Vec<ItemId> = gold.ids().collect();
            assert_eq!(got, want, "query {q}");
            assert_eq!(res.calls_used, 40);
        }
    }

    #[test]
    fn axn_remainder_budget_is_fully_used() {
        let (scorer, u, v) = bench(500, 4, 4, 0.1);
        let cfg = AxnConfig::new(103, 5);
        let res = axn_search(
            &cfg,
            &v,
            &scorer,
            QueryId(0),
            10,
            Some(u.row(0)),
            None,
            None,
        )
        .unwrap();
        assert_eq!(res.calls_used, 103);
        let sizes: Vec<usize> = res.trace.iter().map(|t| t.new_items.len()).collect();
        assert_eq!(sizes, vec![21, 21, 21, 20, 20]);
    }

    #[test]
    fn axn_small_corpus_scores_everything_and_stops() {
        let (scorer, u, v) = bench(30, 3, 3, 0.1);
        let cfg = AxnConfig::new(100, 5);
        let res = axn_search(&cfg, &v, &scorer, QueryId(2), 5, Some(u.row(2)), None, None).unwrap();
        assert_eq!(res.calls_used, 30);
        assert!(res.trace.iter().any(|t| t.truncated));
    }

    #[test]
    fn axn_trace_is_duplicate_free_and_growing() {
        let (scorer, u, v) = bench(200, 4, 4, 0.3);
        let cfg = AxnConfig::new(60, 6);
        let res = axn_search(
            &cfg,
            &v,
            &scorer,
            QueryId(1),
            10,
            Some(u.row(1)),
            None,
            None,
        )
        .unwrap();
        let mut seen = HashSet::new();
        for t in &res.trace {
            for id in &t.new_items {
                assert!(seen.insert(*id), "duplicate retrieval of {id}");
            }
        }
        assert_eq!(seen.len(), res.calls_used);
        // rounds past the first carry the regression residual
        assert!(res.trace[0].residual_norm.is_none());
        assert!(res.trace[1..].iter().all(|t| t.residual_norm.is_some()));
    }

    #[test]
    fn axn_ranking_init_uses_prefix() {
        let (scorer, _, v) = bench(50, 3, 3, 0.0);
        let ranking: Vec<ItemId> = (0..50).rev().map(ItemId).collect();
        let mut cfg = AxnConfig::new(10, 2);
        cfg.init = InitPolicy::PrecomputedRanking;
        let res = axn_search(&cfg, &v, &scorer, QueryId(0), 5, None, Some(&ranking), None).unwrap();
        let first: Vec<ItemId> = res.trace[0].new_items.clone();
        assert_eq!(first, (45..50).rev().map(ItemId).collect::<Vec<_>>());
    }

    #[test]
    fn axn_shortlist_constrains_all_rounds() {
        let (scorer, u, v) = bench(200, 4, 4, 0.2);
        let mut cfg = AxnConfig::new(40, 4);
        cfg.shortlist_size = Some(50);
        let res = axn_search(&cfg, &v, &scorer, QueryId(3), 5, Some(u.row(3)), None, None).unwrap();
        let shortlist: HashSet<ItemId> = dot_topk(u.row(3), &v, 50, &HashSet::new(), None)
            .unwrap()
            .ids()
            .collect();
        for t in &res.trace {
            assert!(t.new_items.iter().all(|id| shortlist.contains(id)));
        }
    }

    #[test]
    fn axn_approx_scores_cover_corpus() {
        let (scorer, u, v) = bench(60, 4, 4, 0.0);
        let mut cfg = AxnConfig::new(20, 2);
        cfg.keep_approx_scores = true;
        let res = axn_search(&cfg, &v, &scorer, QueryId(0), 5, Some(u.row(0)), None, None).unwrap();
        let approx = res.approx_scores.unwrap();
        assert_eq!(approx.len(), 60);
        // noiseless: the refit reproduces the oracle exactly
        let all: Vec<ItemId> = (0..60).map(ItemId).collect();
        let exact = scorer.score_batch(QueryId(0), &all).unwrap();
        for ((_, a), e) in approx.iter().zip(exact) {
            assert!((a - e).abs() < 1e-8);
        }
    }

    #[test]
    fn rnr_with_full_budget_equals_brute_force() {
        let (scorer, u, v) = bench(40, 4, 4, 0.2);
        let rnr = rnr_search(u.row(1), &v, &scorer, QueryId(1), 40, 7, None).unwrap();
        let gold = brute_force_knn(&scorer, QueryId(1), 40, 7).unwrap();
        assert_eq!(rnr.topk, gold);
    }

    #[test]
    fn rnr_recall_never_drops_with_budget() {
        // the retrieved set at a smaller budget is a prefix of the set at a
        // larger one, so per-query gold hits can only grow
        let (scorer, u, v) = bench(150, 4, 4, 0.5);
        for q in 0..6 {
            let gold: HashSet<ItemId> = brute_force_knn(&scorer, QueryId(q), 150, 5)
                .unwrap()
                .ids()
                .collect();
            let mut prev_hits = 0;
            for budget in [10, 30, 70, 150] {
                let res = rnr_search(u.row(q), &v, &scorer, QueryId(q), budget, 5, None).unwrap();
                let hits = res.topk.ids().filter(|id| gold.contains(id)).count();
                assert!(hits >= prev_hits, "query {q} budget {budget}");
                prev_hits = hits;
            }
            assert_eq!(prev_hits, 5);
        }
    }

    #[test]
    fn tour_zero_lr_matches_rnr_topk() {
        let (scorer, u, v) = bench(120, 4, 4, 0.3);
        let mut cfg = TourConfig::new(30, 3, TourVariant::Mse);
        cfg.learning_rate = 0.0;
        for q in 0..4 {
            let t = tour_search(&cfg, &v, &scorer, QueryId(q), 8, u.row(q), None, None).unwrap();
            let r = rnr_search(u.row(q), &v, &scorer, QueryId(q), 30, 8, None).unwrap();
            assert_eq!(t.topk, r.topk);
            assert_eq!(t.calls_used, r.calls_used);
        }
    }

    #[test]
    fn tour_mse_gradient_matches_finite_differences() {
        let (_, u, v) = bench(30, 5, 5, 0.4);
        let rows: Vec<&[f64]> = (0..8).map(|i| v.row(i)).collect();
        let targets: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).sin()).collect();
        let u0 = u.row(0);
        let grad = tour_mse_gradient(u0, &rows, &targets);
        let loss = |uu: &[f64]| -> f64 {
            rows.iter()
                .zip(&targets)
                .map(|(row, &t)| {
                    let r = dot(row, uu) - t;
                    r * r
                })
                .sum::<f64>()
                / rows.len() as f64
        };
        let h = 1e-6;
        for c in 0..u0.len() {
            let mut up = u0.to_vec();
            let mut dn = u0.to_vec();
            up[c] += h;
            dn[c] -= h;
            let fd = (loss(&up) - loss(&dn)) / (2.0 * h);
            let denom = grad[c].abs().max(fd.abs()).max(1e-8);
            assert!(
                ((grad[c] - fd) / denom).abs() < 1e-4,
                "component {c}: {} vs {fd}",
                grad[c]
            );
        }
    }

    #[test]
    fn tour_kl_gradient_matches_finite_differences() {
        let (_, u, v) = bench(30, 5, 5, 0.4);
        let rows: Vec<&[f64]> = (3..11).map(|i| v.row(i)).collect();
        let targets: Vec<f64> = (0..8).map(|i| (i as f64 * 0.61).cos()).collect();
        let u0 = u.row(2);
        let grad = tour_kl_gradient(u0, &rows, &targets);
        let loss = |uu: &[f64]| -> f64 {
            let approx: Vec<f64> = rows.iter().map(|row| dot(row, uu)).collect();
            let p = softmax(&targets);
            let q = softmax(&approx);
            p.iter()
                .zip(&q)
                .map(|(&pi, &qi)| pi * (pi.ln() - qi.ln()))
                .sum()
        };
        let h = 1e-6;
        for c in 0..u0.len() {
            let mut up = u0.to_vec();
            let mut dn = u0.to_vec();
            up[c] += h;
            dn[c] -= h;
            let fd = (loss(&up) - loss(&dn)) / (2.0 * h);
            let denom = grad[c].abs().max(fd.abs()).max(1e-8);
            assert!(
                ((grad[c] - fd) / denom).abs() < 1e-4,
                "component {c}: {} vs {fd}",
                grad[c]
            );
        }
    }

    #[test]
    fn approx_scores_zero_query_is_all_zero() {
        let (_, _, v) = bench(15, 3, 3, 0.0);
        let scores = approx_scores(&[0.0, 0.0, 0.0], &v, None).unwrap();
        assert!(scores.iter().all(|(_, s)| *s == 0.0));
    }

    #[test]
    fn approx_scores_match_scalar_loop() {
        let (_, u, v) = bench(25, 3, 3, 0.0);
        let scores = approx_scores(u.row(4), &v, None).unwrap();
        for (id, s) in scores {
            let mut expect = 0.0;
            for c in 0..3 {
                expect += u.row(4)[c] * v.row(id.0)[c];
            }
            assert_eq!(s, expect);
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let (scorer, u, v) = bench(20, 3, 3, 0.0);
        let mut cfg = AxnConfig::new(10, 2);
        cfg.lambda = 1.5;
        assert!(matches!(
            axn_search(&cfg, &v, &scorer, QueryId(0), 3, Some(u.row(0)), None, None).unwrap_err(),
            Error::LambdaOutOfRange(_)
        ));
        let mut cfg = AxnConfig::new(10, 2);
        cfg.k_s = Some(6); // 2 * 6 > 10
        assert!(axn_search(&cfg, &v, &scorer, QueryId(0), 3, Some(u.row(0)), None, None).is_err());
        let cfg = AxnConfig::new(10, 2); // EmbTopK without u_param
        assert!(axn_search(&cfg, &v, &scorer, QueryId(0), 3, None, None, None).is_err());
    }

    #[test]
    fn lambda_mix_pulls_solution_toward_param() {
        let (scorer, u, v) = bench(100, 4, 4, 0.5);
        let mut cfg = AxnConfig::new(20, 2);
        cfg.lambda = 1.0;
        cfg.keep_approx_scores = true;
        let res = axn_search(&cfg, &v, &scorer, QueryId(0), 5, Some(u.row(0)), None, None).unwrap();
        // lambda = 1 means the refit is exactly the parametric embedding
        let approx = res.approx_scores.unwrap();
        for (id, s) in approx.iter().take(10) {
            let direct = dot(u.row(0), v.row(id.0));
            assert!((s - direct).abs() < 1e-12);
        }
    }
}
