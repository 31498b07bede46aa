//! Seeded synthetic similarity oracle.
//!
//! A desk-scale stand-in for an expensive neural scorer: the full score
//! matrix is `U* V*^T + sigma * eta` where the base factors are i.i.d.
//! standard normal draws from the seed and `eta` is per-coordinate standard
//! normal noise from a counter-based generator (nothing is materialized).
//! The ground-truth factors are returned so tests can grade recall against
//! brute-force gold labels.

use crate::error::{Error, Result};
use crate::ids::{ItemId, QueryId};
use crate::matrix::{EmbeddingMatrix, EmbeddingRole};
use crate::rng;
use crate::scorer::Scorer;
use serde::{Deserialize, Serialize};

/// Specification of the synthetic oracle.
///
/// The score matrix has rank `rank`; the returned factor matrices have
/// `dim >= rank` columns (when `dim > rank`, the rank-`rank` factors are
/// rotated into the larger space by a row-orthonormal map, which leaves
/// every pairwise score unchanged).
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
pub struct SyntheticOracleSpec {
    pub n_queries: usize,
    pub n_items: usize,
    pub rank: usize,
    pub dim: usize,
    pub sigma: f64,
    pub seed: u64,
}

impl SyntheticOracleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_queries == 0 || self.n_items == 0 {
            return Err(Error::InvalidSpec(
                "need at least one query and item".into(),
            ));
        }
        if self.rank == 0 {
            return Err(Error::InvalidSpec("rank must be positive".into()));
        }
        if self.rank > self.n_queries.min(self.n_items) {
            return Err(Error::InvalidSpec(format!(
                "rank {} exceeds min(n_queries, n_items) = {}",
                self.rank,
                self.n_queries.min(self.n_items)
            )));
        }
        if self.dim < self.rank {
            return Err(Error::InvalidSpec(format!(
                "dim {} smaller than rank {}",
                self.dim, self.rank
            )));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::InvalidSpec(
                "sigma must be a finite non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Black-box view of the synthetic score matrix.
pub struct SyntheticOracle {
    spec: SyntheticOracleSpec,
    noise_seed: u64,
    // rank-dimensional base factors, row-major
    base_q: Vec<f64>,
    base_i: Vec<f64>,
}

impl SyntheticOracle {
    pub fn spec(&self) -> &SyntheticOracleSpec {
        &self.spec
    }

    fn score(&self, q: usize, i: usize) -> Result<f64> {
        if q >= self.spec.n_queries || i >= self.spec.n_items {
            return Err(Error::BackendFailure(format!(
                "pair ({q}, {i}) outside {}x{} synthetic matrix",
                self.spec.n_queries, self.spec.n_items
            )));
        }
        let r = self.spec.rank;
        let uq = &self.base_q[q * r..(q + 1) * r];
        let vi = &self.base_i[i * r..(i + 1) * r];
        let mut s: f64 = uq.iter().zip(vi).map(|(a, b)| a * b).sum();
        if self.spec.sigma > 0.0 {
            s += self.spec.sigma * rng::counter_normal(self.noise_seed, q, i);
        }
        Ok(s)
    }
}

impl Scorer for SyntheticOracle {
    fn descriptor(&self) -> String {
        format!(
            "synthetic({}x{}, rank {}, sigma {}, seed {})",
            self.spec.n_queries, self.spec.n_items, self.spec.rank, self.spec.sigma, self.spec.seed
        )
    }

    fn score_batch(&self, query: QueryId, items: &[ItemId]) -> Result<Vec<f64>> {
        items.iter().map(|&i| self.score(query.0, i.0)).collect()
    }

    fn num_items(&self) -> Option<usize> {
        Some(self.spec.n_items)
    }
}

/// Build the oracle and return it together with the ground-truth
/// `dim`-dimensional factor matrices (queries, items).
pub fn make_synthetic_oracle(
    spec: SyntheticOracleSpec,
) -> Result<(SyntheticOracle, EmbeddingMatrix, EmbeddingMatrix)> {
    spec.validate()?;
    let mut factor_rng = rng::stream(rng::derive_seed(spec.seed, "synthetic-factors"));
    let base_q = rng::normal_vec(&mut factor_rng, spec.n_queries * spec.rank);
    let base_i = rng::normal_vec(&mut factor_rng, spec.n_items * spec.rank);

    let (u, v) = if spec.dim == spec.rank {
        (base_q.clone(), base_i.clone())
    } else {
        let basis = orthonormal_rows(
            spec.rank,
            spec.dim,
            rng::derive_seed(spec.seed, "synthetic-basis"),
        );
        (
            rotate(&base_q, spec.n_queries, spec.rank, spec.dim, &basis),
            rotate(&base_i, spec.n_items, spec.rank, spec.dim, &basis),
        )
    };

    let u = EmbeddingMatrix::new(spec.n_queries, spec.dim, EmbeddingRole::Query, u)?;
    let v = EmbeddingMatrix::new(spec.n_items, spec.dim, EmbeddingRole::Item, v)?;
    let oracle = SyntheticOracle {
        spec,
        noise_seed: rng::derive_seed(spec.seed, "synthetic-noise"),
        base_q,
        base_i,
    };
    Ok((oracle, u, v))
}

/// `rank x dim` matrix with orthonormal rows (Gaussian draws, modified
/// Gram-Schmidt).
fn orthonormal_rows(rank: usize, dim: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::stream(seed);
    let mut rows = rng::normal_vec(&mut r, rank * dim);
    for i in 0..rank {
        for j in 0..i {
            let dot: f64 = (0..dim)
                .map(|c| rows[i * dim + c] * rows[j * dim + c])
                .sum();
            for c in 0..dim {
                rows[i * dim + c] -= dot * rows[j * dim + c];
            }
        }
        let norm: f64 = (0..dim)
            .map(|c| rows[i * dim + c] * rows[i * dim + c])
            .sum::<f64>()
            .sqrt();
        // Gaussian rows are linearly independent with probability one;
        // norm cannot be zero for the sizes this generator is used at.
        for c in 0..dim {
            rows[i * dim + c] /= norm;
        }
    }
    rows
}

fn rotate(base: &[f64], rows: usize, rank: usize, dim: usize, basis: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * dim];
    for r in 0..rows {
        for k in 0..rank {
            let coeff = base[r * rank + k];
            for c in 0..dim {
                out[r * dim + c] += coeff * basis[k * dim + c];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(sigma: f64) -> SyntheticOracleSpec {
        SyntheticOracleSpec {
            n_queries: 20,
            n_items: 30,
            rank: 4,
            dim: 4,
            sigma,
            seed: 7,
        }
    }

    #[test]
    fn noiseless_scores_equal_factor_dot_products() {
        let (oracle, u, v) = make_synthetic_oracle(spec(0.0)).unwrap();
        for q in 0..20 {
            let scores = oracle
                .score_batch(QueryId(q), &(0..30).map(ItemId).collect::<Vec<_>>())
                .unwrap();
            for (i, score) in scores.iter().enumerate() {
                let dot: f64 = u.row(q).iter().zip(v.row(i)).map(|(a, b)| a * b).sum();
                assert!((score - dot).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rotated_factors_preserve_scores() {
        let mut s = spec(0.0);
        s.dim = 9;
        let (oracle, u, v) = make_synthetic_oracle(s).unwrap();
        assert_eq!(u.dim(), 9);
        for q in [0, 7, 19] {
            for i in [0, 11, 29] {
                let dot: f64 = u.row(q).iter().zip(v.row(i)).map(|(a, b)| a * b).sum();
                let score = oracle.score_batch(QueryId(q), &[ItemId(i)]).unwrap()[0];
                assert!((score - dot).abs() < 1e-10, "q={q} i={i}: {score} vs {dot}");
            }
        }
    }

    #[test]
    fn same_seed_same_matrix() {
        let (a, _, _) = make_synthetic_oracle(spec(0.3)).unwrap();
        let (b, _, _) = make_synthetic_oracle(spec(0.3)).unwrap();
        let items: Vec<ItemId> = (0..30).map(ItemId).collect();
        for q in 0..20 {
            assert_eq!(
                a.score_batch(QueryId(q), &items).unwrap(),
                b.score_batch(QueryId(q), &items).unwrap()
            );
        }
    }

    #[test]
    fn different_seed_different_noise() {
        let mut s2 = spec(0.3);
        s2.seed = 8;
        let (a, _, _) = make_synthetic_oracle(spec(0.3)).unwrap();
        let (b, _, _) = make_synthetic_oracle(s2).unwrap();
        let sa = a.score_batch(QueryId(0), &[ItemId(0)]).unwrap();
        let sb = b.score_batch(QueryId(0), &[ItemId(0)]).unwrap();
        assert_ne!(sa, sb);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = spec(0.0);
        s.rank = 25; // exceeds n_queries = 20
        assert!(make_synthetic_oracle(s).is_err());
        let mut s = spec(0.0);
        s.dim = 2;
        assert!(make_synthetic_oracle(s).is_err());
        let mut s = spec(0.0);
        s.sigma = -1.0;
        assert!(make_synthetic_oracle(s).is_err());
    }
}
