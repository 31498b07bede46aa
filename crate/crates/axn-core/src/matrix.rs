//! Dense row-major embedding matrices and their on-disk formats.
//!
//! Binary layout (little-endian): magic `AXNE`, format version `u32 = 1`,
//! role `u8` (0 = query, 1 = item), rows `u64`, dim `u64`, then
//! `rows * dim` payload `f64`s. Save/load round-trips bit-exactly. A CSV
//! form (one row per embedding, comma-separated values) is provided for
//! interoperability.

use crate::error::{Error, Result};
use crate::rng::{self, ChaCha8Rng};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"AXNE";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum EmbeddingRole {
    Query,
    Item,
}

impl EmbeddingRole {
    fn to_byte(self) -> u8 {
        match self {
            EmbeddingRole::Query => 0,
            EmbeddingRole::Item => 1,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(EmbeddingRole::Query),
            1 => Ok(EmbeddingRole::Item),
            other => Err(Error::Format(format!(
                "unknown embedding role byte {other}"
            ))),
        }
    }
}

/// Row-major matrix of d-dimensional f64 embeddings.
///
/// Immutable after construction; every value is finite and `dim > 0`.
#[derive(Clone, PartialEq, Debug)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    role: EmbeddingRole,
    data: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, dim: usize, role: EmbeddingRole, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidMatrix("dim must be positive".into()));
        }
        if data.len() != rows * dim {
            return Err(Error::InvalidMatrix(format!(
                "data length {} does not equal rows*dim = {}",
                data.len(),
                rows * dim
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidMatrix(format!(
                "non-finite value at flat index {pos}"
            )));
        }
        Ok(Self {
            rows,
            dim,
            role,
            data,
        })
    }

    /// Matrix with i.i.d. N(0, std^2) entries.
    pub fn random_normal(
        rows: usize,
        dim: usize,
        role: EmbeddingRole,
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let data = rng::normal_vec(rng, rows * dim)
            .into_iter()
            .map(|v| v * std)
            .collect();
        Self::new(rows, dim, role, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn role(&self) -> EmbeddingRole {
        self.role
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.dim..(r + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    /// Same data under a different role tag.
    pub fn with_role(mut self, role: EmbeddingRole) -> Self {
        self.role = role;
        self
    }

    /// Copy of the row range `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.rows {
            return Err(Error::InvalidMatrix(format!(
                "row range {start}..{end} outside 0..{}",
                self.rows
            )));
        }
        Self::new(
            end - start,
            self.dim,
            self.role,
            self.data[start * self.dim..end * self.dim].to_vec(),
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if self.rows == 0 {
            return Err(Error::InvalidMatrix(
                "refusing to save an empty (0-row) matrix".into(),
            ));
        }
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&[self.role.to_byte()])?;
        w.write_all(&(self.rows as u64).to_le_bytes())?;
        w.write_all(&(self.dim as u64).to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
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
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format version {version}"
            )));
        }
        let mut role_byte = [0u8; 1];
        read_exact_format(&mut r, &mut role_byte)?;
        let role = EmbeddingRole::from_byte(role_byte[0])?;
        let rows = read_u64(&mut r)? as usize;
        let dim = read_u64(&mut r)? as usize;
        if dim == 0 {
            return Err(Error::Format("dim = 0 in header".into()));
        }
        if rows == 0 {
            return Err(Error::Format("rows = 0 in header".into()));
        }
        let n = rows
            .checked_mul(dim)
            .ok_or_else(|| Error::Format("rows*dim overflows".into()))?;
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            read_exact_format(&mut r, &mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        // trailing garbage means the file is not ours
        if r.read(&mut [0u8; 1])? != 0 {
            return Err(Error::Format("trailing bytes after payload".into()));
        }
        Self::new(rows, dim, role, data)
    }

    /// One embedding per line, values comma-separated, no header.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        if self.rows == 0 {
            return Err(Error::InvalidMatrix(
                "refusing to save an empty (0-row) matrix".into(),
            ));
        }
        let mut w = BufWriter::new(File::create(path)?);
        for row in self.iter_rows() {
            let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_csv(path: &Path, role: EmbeddingRole) -> Result<Self> {
        let content = std::fs::read_to_string(path)?;
        let mut data = Vec::new();
        let mut dim = None;
        let mut rows = 0;
        for (lineno, line) in content.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|tok| {
                    tok.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))
                })
                .collect::<Result<_>>()?;
            match dim {
                None => dim = Some(vals.len()),
                Some(d) if d != vals.len() => {
                    return Err(Error::Format(format!(
                        "line {}: expected {} values, got {}",
                        lineno + 1,
                        d,
                        vals.len()
                    )))
                }
                _ => {}
            }
            rows += 1;
            data.extend(vals);
        }
        let dim = dim.ok_or_else(|| Error::Format("empty CSV".into()))?;
        Self::new(rows, dim, role, data)
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

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact_format(r, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    read_exact_format(r, &mut buf)?;
    Ok(u64::from_le_bytes(buf))
}
