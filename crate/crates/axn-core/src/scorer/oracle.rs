//! Lookup-table scorer over a known score matrix.

use crate::error::{Error, Result};
use crate::ids::{ItemId, QueryId};
use crate::scorer::Scorer;
use crate::sparse::SparseScoreMatrix;
use std::collections::HashMap;

enum Table {
    Dense(Vec<f64>),
    Sparse(HashMap<(usize, usize), f64>),
}

/// Scorer backed by an explicit matrix.
///
/// Serves exactly the stored entries; asking for an unobserved pair of a
/// sparse table is a backend failure (the table cannot invent scores).
pub struct MatrixOracle {
    n_queries: usize,
    n_items: usize,
    table: Table,
}

impl MatrixOracle {
    pub fn from_dense(n_queries: usize, n_items: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_queries * n_items {
            return Err(Error::InvalidMatrix(format!(
                "dense score table length {} does not equal {n_queries}*{n_items}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidMatrix(
                "non-finite value in score table".into(),
            ));
        }
        Ok(Self {
            n_queries,
            n_items,
            table: Table::Dense(data),
        })
    }

    pub fn from_sparse(g: &SparseScoreMatrix) -> Self {
        let n_queries = g.n_queries();
        let n_items = g.n_items();
        if g.nnz() == n_queries * n_items {
            let mut data = vec![0.0; g.nnz()];
            for e in g.entries() {
                data[e.query.0 * n_items + e.item.0] = e.score;
            }
            Self {
                n_queries,
                n_items,
                table: Table::Dense(data),
            }
        } else {
            let map = g
                .entries()
                .iter()
                .map(|e| ((e.query.0, e.item.0), e.score))
                .collect();
            Self {
                n_queries,
                n_items,
                table: Table::Sparse(map),
            }
        }
    }

    pub fn n_queries(&self) -> usize {
        self.n_queries
    }

    fn lookup(&self, q: usize, i: usize) -> Result<f64> {
        if q >= self.n_queries || i >= self.n_items {
            return Err(Error::BackendFailure(format!(
                "pair ({q}, {i}) outside {}x{} score table",
                self.n_queries, self.n_items
            )));
        }
        match &self.table {
            Table::Dense(data) => Ok(data[q * self.n_items + i]),
            Table::Sparse(map) => map.get(&(q, i)).copied().ok_or_else(|| {
                Error::BackendFailure(format!("pair ({q}, {i}) not observed in sparse table"))
            }),
        }
    }
}

impl Scorer for MatrixOracle {
    fn descriptor(&self) -> String {
        format!("matrix-oracle({}x{})", self.n_queries, self.n_items)
    }

    fn score_batch(&self, query: QueryId, items: &[ItemId]) -> Result<Vec<f64>> {
        items.iter().map(|&i| self.lookup(query.0, i.0)).collect()
    }

    fn num_items(&self) -> Option<usize> {
        Some(self.n_items)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::ScoreEntry;

    #[test]
    fn dense_lookup() {
        let o = MatrixOracle::from_dense(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(
            o.score_batch(QueryId(0), &[ItemId(2), ItemId(5 - 5)])
                .unwrap(),
            vec![3.0, 1.0]
        );
        assert!(o.score_batch(QueryId(2), &[ItemId(0)]).is_err());
    }

    #[test]
    fn sparse_missing_pair_is_backend_failure() {
        let g = SparseScoreMatrix::new(
            2,
            2,
            vec![ScoreEntry {
                query: QueryId(0),
                item: ItemId(0),
                score: 1.0,
            }],
        )
        .unwrap();
        let o = MatrixOracle::from_sparse(&g);
        assert_eq!(o.score_batch(QueryId(0), &[ItemId(0)]).unwrap(), vec![1.0]);
        assert!(matches!(
            o.score_batch(QueryId(0), &[ItemId(1)]).unwrap_err(),
            Error::BackendFailure(_)
        ));
    }

    #[test]
    fn fully_observed_sparse_becomes_dense() {
        let entries = (0..2)
            .flat_map(|q| {
                (0..2).map(move |i| ScoreEntry {
                    query: QueryId(q),
                    item: ItemId(i),
                    score: (q * 2 + i) as f64,
                })
            })
            .collect();
        let g = SparseScoreMatrix::new(2, 2, entries).unwrap();
        let o = MatrixOracle::from_sparse(&g);
        assert_eq!(
            o.score_batch(QueryId(1), &[ItemId(0), ItemId(1)]).unwrap(),
            vec![2.0, 3.0]
        );
    }
}
