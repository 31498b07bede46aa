//! Typed scorer backend descriptors.
//!
//! The string grammar is shared with the command line:
//! `oracle:<g-file>`, `synth:<spec-file>`, `exec:<command line>`.

use crate::error::{Error, Result};
use crate::scorer::external::{ExternalScorer, PROTOCOL_VERSION};
use crate::scorer::oracle::MatrixOracle;
use crate::scorer::synthetic::{make_synthetic_oracle, SyntheticOracleSpec};
use crate::scorer::Scorer;
use crate::sparse::SparseScoreMatrix;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::path::PathBuf;

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum ScorerSource {
    /// Lookup table over a saved score-matrix file.
    MatrixFile(PathBuf),
    /// Seeded synthetic oracle from a JSON spec file.
    SynthFile(PathBuf),
    /// External process speaking the JSON-lines wire protocol.
    Exec(String),
}

impl ScorerSource {
    pub fn parse(spec: &str) -> Result<Self> {
        if let Some(path) = spec.strip_prefix("oracle:") {
            return Ok(ScorerSource::MatrixFile(PathBuf::from(path)));
        }
        if let Some(path) = spec.strip_prefix("synth:") {
            return Ok(ScorerSource::SynthFile(PathBuf::from(path)));
        }
        if let Some(command) = spec.strip_prefix("exec:") {
            return Ok(ScorerSource::Exec(command.to_string()));
        }
        Err(Error::InvalidSpec(format!(
            "unknown scorer spec `{spec}` (expected oracle:<file>, synth:<file> or exec:<command>)"
        )))
    }

    pub fn connect(&self) -> Result<Box<dyn Scorer>> {
        match self {
            ScorerSource::MatrixFile(path) => {
                let g = SparseScoreMatrix::load(path)?;
                Ok(Box::new(MatrixOracle::from_sparse(&g)))
            }
            ScorerSource::SynthFile(path) => {
                let spec: SyntheticOracleSpec =
                    serde_json::from_str(&std::fs::read_to_string(path)?)
                        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
                let (oracle, _, _) = make_synthetic_oracle(spec)?;
                Ok(Box::new(oracle))
            }
            ScorerSource::Exec(command) => Ok(Box::new(ExternalScorer::connect(
                command,
                PROTOCOL_VERSION,
            )?)),
        }
    }
}

impl std::fmt::Display for ScorerSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScorerSource::MatrixFile(p) => write!(f, "oracle:{}", p.display()),
            ScorerSource::SynthFile(p) => write!(f, "synth:{}", p.display()),
            ScorerSource::Exec(c) => write!(f, "exec:{c}"),
        }
    }
}

impl Serialize for ScorerSource {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ScorerSource {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        ScorerSource::parse(&s).map_err(D::Error::custom)
    }
}

/// Convenience: parse and connect in one step.
pub fn connect_scorer(spec: &str) -> Result<Box<dyn Scorer>> {
    ScorerSource::parse(spec)?.connect()
}
