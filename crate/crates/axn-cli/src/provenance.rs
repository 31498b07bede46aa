//! Reproducibility metadata embedded in every report.

use axn_core::rng::fnv1a64;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    /// Hash of the canonical (re-serialized) config document.
    pub config_hash: String,
    pub seed: u64,
    /// Content hashes of the artifact files the report was computed from.
    pub input_hashes: BTreeMap<String, String>,
}

pub fn config_hash<T: Serialize>(config: &T) -> String {
    let canonical = serde_json::to_string(config).unwrap_or_default();
    format!("{:016x}", fnv1a64(canonical.as_bytes()))
}

pub fn file_hash(path: &Path) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(format!("{:016x}", fnv1a64(&bytes)))
}

pub fn provenance<T: Serialize>(
    config: &T,
    seed: u64,
    inputs: &[&Path],
) -> std::io::Result<Provenance> {
    let mut input_hashes = BTreeMap::new();
    for path in inputs {
        input_hashes.insert(
            path.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| path.display().to_string()),
            file_hash(path)?,
        );
    }
    Ok(Provenance {
        tool: "axn".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config_hash: config_hash(config),
        seed,
        input_hashes,
    })
}
