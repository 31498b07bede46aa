//! Sparse (query, item, score) matrices.
//!
//! Holds the observed entries of a partially scored query-item matrix.
//! Binary layout (little-endian): magic `AXNG`, version `u32 = 1`,
//! `n_queries u64`, `n_items u64`, `nnz u64`, then `nnz` triples of
//! `(u64 query, u64 item, f64 score)`. CSV form: header
//! `query_id,item_id,score`, one entry per line.

use crate::error::{Error, Result};
use crate::ids::{ItemId, QueryId};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"AXNG";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, PartialEq, Debug)]
pub struct ScoreEntry {
    pub query: QueryId,
    pub item: ItemId,
    pub score: f64,
}

/// Observed entries of a `n_queries x n_items` score matrix.
///
/// Entries are stored sorted by `(query, item)`; duplicate coordinates,
/// out-of-range ids and non-finite scores are rejected at construction.
#[derive(Clone, PartialEq, Debug)]
pub struct SparseScoreMatrix {
    n_queries: usize,
    n_items: usize,
    entries: Vec<ScoreEntry>,
}

impl SparseScoreMatrix {
    pub fn new(n_queries: usize, n_items: usize, mut entries: Vec<ScoreEntry>) -> Result<Self> {
        for e in &entries {
            if e.query.0 >= n_queries {
                return Err(Error::InvalidMatrix(format!(
                    "query id {} out of range (n_queries = {n_queries})",
                    e.query
                )));
            }
            if e.item.0 >= n_items {
                return Err(Error::InvalidMatrix(format!(
                    "item id {} out of range (n_items = {n_items})",
                    e.item
                )));
            }
            if !e.score.is_finite() {
                return Err(Error::InvalidMatrix(format!(
                    "non-finite score at ({}, {})",
                    e.query, e.item
                )));
            }
        }
        entries.sort_unstable_by_key(|e| (e.query, e.item));
        if let Some(w) = entries
            .windows(2)
            .find(|w| w[0].query == w[1].query && w[0].item == w[1].item)
        {
            return Err(Error::InvalidMatrix(format!(
                "duplicate coordinate ({}, {})",
                w[0].query, w[0].item
            )));
        }
        Ok(Self {
            n_queries,
            n_items,
            entries,
        })
    }

    pub fn n_queries(&self) -> usize {
        self.n_queries
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[ScoreEntry] {
        &self.entries
    }

    /// Entries of one query's row (entries are sorted, so this is a
    /// contiguous slice).
    pub fn query_row(&self, q: QueryId) -> &[ScoreEntry] {
        let start = self.entries.partition_point(|e| e.query < q);
        let end = self.entries.partition_point(|e| e.query <= q);
        &self.entries[start..end]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.n_queries as u64).to_le_bytes())?;
        w.write_all(&(self.n_items as u64).to_le_bytes())?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for e in &self.entries {
            w.write_all(&(e.query.0 as u64).to_le_bytes())?;
            w.write_all(&(e.item.0 as u64).to_le_bytes())?;
            w.write_all(&e.score.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        read_exact_format(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:?} (expected {:?})",
                magic, MAGIC
            )));
        }
        let mut buf4 = [0u8; 4];
        read_exact_format(&mut r, &mut buf4)?;
        let version = u32::from_le_bytes(buf4);
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format version {version}"
            )));
        }
        let n_queries = read_u64(&mut r)? as usize;
        let n_items = read_u64(&mut r)? as usize;
        let nnz = read_u64(&mut r)? as usize;
        let mut entries = Vec::with_capacity(nnz);
        for _ in 0..nnz {
            let q = read_u64(&mut r)? as usize;
            let i = read_u64(&mut r)? as usize;
            let mut buf8 = [0u8; 8];
            read_exact_format(&mut r, &mut buf8)?;
            entries.push(ScoreEntry {
                query: QueryId(q),
                item: ItemId(i),
                score: f64::from_le_bytes(buf8),
            });
        }
        if r.read(&mut [0u8; 1])? != 0 {
            return Err(Error::Format("trailing bytes after payload".into()));
        }
        Self::new(n_queries, n_items, entries)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "query_id,item_id,score")?;
        for e in &self.entries {
            writeln!(w, "{},{},{}", e.query, e.item, e.score)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Parse the CSV form. Shape is taken as `max id + 1` unless explicit
    /// counts are given.
    pub fn load_csv(path: &Path, shape: Option<(usize, usize)>) -> Result<Self> {
        let r = BufReader::new(File::open(path)?);
        let mut entries = Vec::new();
        let mut max_q = 0usize;
        let mut max_i = 0usize;
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() || (lineno == 0 && trimmed.starts_with("query_id")) {
                continue;
            }
            let mut parts = trimmed.split(',');
            let parse_err = |e: String| Error::Format(format!("line {}: {e}", lineno + 1));
            let q: usize = parts
                .next()
                .ok_or_else(|| parse_err("missing query_id".into()))?
                .trim()
                .parse()
                .map_err(|e| parse_err(format!("{e}")))?;
            let i: usize = parts
                .next()
                .ok_or_else(|| parse_err("missing item_id".into()))?
                .trim()
                .parse()
                .map_err(|e| parse_err(format!("{e}")))?;
            let s: f64 = parts
                .next()
                .ok_or_else(|| parse_err("missing score".into()))?
                .trim()
                .parse()
                .map_err(|e| parse_err(format!("{e}")))?;
            if parts.next().is_some() {
                return Err(parse_err("too many columns".into()));
            }
            max_q = max_q.max(q);
            max_i = max_i.max(i);
            entries.push(ScoreEntry {
                query: QueryId(q),
                item: ItemId(i),
                score: s,
            });
        }
        let (n_queries, n_items) = match shape {
            Some(s) => s,
            None if entries.is_empty() => (0, 0),
            None => (max_q + 1, max_i + 1),
        };
        Self::new(n_queries, n_items, entries)
    }
}

fn read_exact_format<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format("truncated file".into())
        } else {
            Error::Io(e)
        }
    })
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    read_exact_format(r, &mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn entry(q: usize, i: usize, s: f64) -> ScoreEntry {
        ScoreEntry {
            query: QueryId(q),
            item: ItemId(i),
            score: s,
        }
    }

    #[test]
    fn duplicate_coordinates_rejected() {
        let err =
            SparseScoreMatrix::new(2, 2, vec![entry(0, 1, 1.0), entry(0, 1, 2.0)]).unwrap_err();
        assert!(matches!(err, Error::InvalidMatrix(_)));
    }

    #[test]
    fn out_of_range_ids_rejected() {
        assert!(SparseScoreMatrix::new(2, 2, vec![entry(2, 0, 1.0)]).is_err());
        assert!(SparseScoreMatrix::new(2, 2, vec![entry(0, 2, 1.0)]).is_err());
    }

    #[test]
    fn entries_are_sorted_and_rows_sliced() {
        let g = SparseScoreMatrix::new(
            3,
            4,
            vec![entry(2, 0, 5.0), entry(0, 3, 1.0), entry(0, 1, 2.0)],
        )
        .unwrap();
        let coords: Vec<(usize, usize)> =
            g.entries().iter().map(|e| (e.query.0, e.item.0)).collect();
        assert_eq!(coords, vec![(0, 1), (0, 3), (2, 0)]);
        assert_eq!(g.query_row(QueryId(0)).len(), 2);
        assert_eq!(g.query_row(QueryId(1)).len(), 0);
        assert_eq!(g.query_row(QueryId(2)).len(), 1);
    }

    #[test]
    fn binary_round_trip() {
        let g = SparseScoreMatrix::new(
            3,
            4,
            vec![entry(1, 2, -0.125), entry(0, 0, 7.5), entry(2, 3, 1e-9)],
        )
        .unwrap();
        let dir = tempdir().unwrap();
        let p = dir.path().join("g.bin");
        g.save(&p).unwrap();
        assert_eq!(SparseScoreMatrix::load(&p).unwrap(), g);
    }

    #[test]
    fn csv_round_trip() {
        let g = SparseScoreMatrix::new(3, 4, vec![entry(1, 2, -0.125), entry(0, 0, 7.5)]).unwrap();
        let dir = tempdir().unwrap();
        let p = dir.path().join("g.csv");
        g.save_csv(&p).unwrap();
        assert_eq!(SparseScoreMatrix::load_csv(&p, Some((3, 4))).unwrap(), g);
    }

    #[test]
    fn truncated_binary_is_format_error() {
        let g = SparseScoreMatrix::new(2, 2, vec![entry(0, 0, 1.0), entry(1, 1, 2.0)]).unwrap();
        let dir = tempdir().unwrap();
        let p = dir.path().join("g.bin");
        g.save(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            SparseScoreMatrix::load(&p).unwrap_err(),
            Error::Format(_)
        ));
    }
}
