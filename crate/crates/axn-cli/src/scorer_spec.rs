//! Backend spec grammar shared by the subcommands.
//!
//! - `oracle:<g-file>`: lookup table over a saved score matrix (sparse
//!   tables serve only their observed pairs)
//! - `synth:<spec-file>`: seeded synthetic oracle from a JSON spec
//! - `exec:<command line>`: external process speaking the JSON-lines wire
//!   protocol

use crate::CliError;
use axn_core::scorer::source::ScorerSource;
use axn_core::scorer::Scorer;

pub fn parse_scorer(spec: &str) -> Result<Box<dyn Scorer>, CliError> {
    let source = ScorerSource::parse(spec).map_err(|e| CliError::Config(format!("{e}")))?;
    match &source {
        // spawn failures are runtime errors, bad files are config errors
        ScorerSource::Exec(_) => source.connect().map_err(CliError::from),
        _ => source
            .connect()
            .map_err(|e| CliError::Config(format!("{e}"))),
    }
}
