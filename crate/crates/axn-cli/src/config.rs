//! Declarative pipeline configuration.
//!
//! A JSON document with optional sections; every field has a documented
//! default, unknown keys are rejected, and validation runs before any
//! computation starts. Flags on the command line override file values.

use crate::CliError;
use axn_core::evalharness::{MethodKind, MethodSpec, MfInit};
use axn_core::factorize::optim::OptimizerKind;
use axn_core::factorize::MfKind;
use axn_core::gbuilder::GStrategy;
use axn_core::retrieve::{InitPolicy, DEFAULT_PINV_TOLERANCE};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::Path;

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Single master seed; every stage derives its own stream from it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub scorer: ScorerConfig,
    #[serde(default)]
    pub gbuild: GBuildConfig,
    /// Factorization stage; omit to search directly over the base
    /// embeddings.
    #[serde(default)]
    pub mf: Option<MfConfig>,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Ingested corpus for `eval`: when present, evaluation runs over
    /// these artifacts (with the `scorer` backend) instead of generating a
    /// synthetic benchmark.
    #[serde(default)]
    pub files: Option<FilesConfig>,
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilesConfig {
    pub item_embs: std::path::PathBuf,
    /// Test-query embeddings; row i is scorer query id `query_id_offset + i`.
    pub query_embs: std::path::PathBuf,
    #[serde(default)]
    pub query_id_offset: usize,
    #[serde(default)]
    pub gold_cache: Option<std::path::PathBuf>,
}

fn default_workers() -> usize {
    1
}

#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    #[serde(default = "default_n_train")]
    pub n_train_queries: usize,
    #[serde(default = "default_n_test")]
    pub n_test_queries: usize,
    #[serde(default = "default_n_items")]
    pub n_items: usize,
    #[serde(default = "default_rank")]
    pub rank: usize,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    /// Gaussian perturbation added to the true factors to form the base
    /// embeddings (models an imperfect first-stage encoder).
    #[serde(default = "default_base_noise")]
    pub base_noise: f64,
}

fn default_n_train() -> usize {
    200
}
fn default_n_test() -> usize {
    200
}
fn default_n_items() -> usize {
    2000
}
fn default_rank() -> usize {
    8
}
fn default_dim() -> usize {
    16
}
fn default_sigma() -> f64 {
    0.1
}
fn default_base_noise() -> f64 {
    0.8
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_train_queries: default_n_train(),
            n_test_queries: default_n_test(),
            n_items: default_n_items(),
            rank: default_rank(),
            dim: default_dim(),
            sigma: default_sigma(),
            base_noise: default_base_noise(),
        }
    }
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScorerConfig {
    /// Backend spec: `synth` (the generated corpus oracle), `oracle:<g-file>`
    /// or `exec:<command line>`. The pipeline only supports `synth`; the
    /// standalone subcommands accept all three.
    #[serde(default = "default_backend")]
    pub backend: String,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_backend() -> String {
    "synth".into()
}
fn default_batch() -> usize {
    axn_core::gbuilder::DEFAULT_SCORE_BATCH
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            backend: default_backend(),
            batch_size: default_batch(),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GBuildConfig {
    #[serde(default = "default_strategy")]
    pub strategy: GStrategy,
    #[serde(default = "default_kd")]
    pub kd: usize,
    /// Fit a score normalizer on the first `fit_queries` train queries and
    /// store normalized scores.
    #[serde(default)]
    pub normalize: bool,
    #[serde(default = "default_fit_queries")]
    pub fit_queries: usize,
}

fn default_strategy() -> GStrategy {
    GStrategy::QTopK
}
fn default_kd() -> usize {
    100
}
fn default_fit_queries() -> usize {
    100
}

impl Default for GBuildConfig {
    fn default() -> Self {
        Self {
            strategy: default_strategy(),
            kd: default_kd(),
            normalize: false,
            fit_queries: default_fit_queries(),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MfConfig {
    #[serde(default = "default_mf_kind")]
    pub kind: MfKind,
    /// Embedding dimension; defaults to the corpus dim.
    #[serde(default)]
    pub dim: Option<usize>,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub max_wall_seconds: Option<f64>,
    #[serde(default = "default_mf_init")]
    pub init: MfInitConfig,
}

fn default_mf_kind() -> MfKind {
    MfKind::Transductive
}
fn default_lr() -> f64 {
    0.001
}
fn default_epochs() -> usize {
    20
}
fn default_batch_size() -> usize {
    256
}
fn default_mf_init() -> MfInitConfig {
    MfInitConfig::Base
}

#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MfInitConfig {
    Base,
    Random,
}

impl MfInitConfig {
    pub fn to_core(self) -> MfInit {
        match self {
            MfInitConfig::Base => MfInit::Base,
            MfInitConfig::Random => MfInit::Random { std: 0.1 },
        }
    }
}

impl Default for MfConfig {
    fn default() -> Self {
        Self {
            kind: default_mf_kind(),
            dim: None,
            learning_rate: default_lr(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            max_wall_seconds: None,
            init: default_mf_init(),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default = "default_init_policy")]
    pub init: InitPolicy,
    #[serde(default)]
    pub shortlist_size: Option<usize>,
    #[serde(default = "default_pinv")]
    pub pinv_tolerance: f64,
}

fn default_rounds() -> usize {
    5
}
fn default_init_policy() -> InitPolicy {
    InitPolicy::EmbTopK
}
fn default_pinv() -> f64 {
    DEFAULT_PINV_TOLERANCE
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            rounds: default_rounds(),
            lambda: 0.0,
            init: default_init_policy(),
            shortlist_size: None,
            pinv_tolerance: default_pinv(),
        }
    }
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Method entries as accepted by the experiment runner; when omitted, a
    /// retrieve-and-rerank baseline plus one adaptive method built from the
    /// `search` section.
    #[serde(default)]
    pub methods: Option<Vec<MethodSpec>>,
    #[serde(default = "default_budgets")]
    pub budgets: Vec<usize>,
    #[serde(default = "default_k_values")]
    pub k_values: Vec<usize>,
    #[serde(default = "default_n_seeds")]
    pub n_seeds: usize,
    #[serde(default = "default_timers")]
    pub timers: bool,
}

fn default_budgets() -> Vec<usize> {
    vec![50, 100, 200, 500]
}
fn default_k_values() -> Vec<usize> {
    vec![1, 10]
}
fn default_n_seeds() -> usize {
    1
}
fn default_timers() -> bool {
    true
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            methods: None,
            budgets: default_budgets(),
            k_values: default_k_values(),
            n_seeds: default_n_seeds(),
            timers: default_timers(),
        }
    }
}

impl PipelineConfig {
    pub fn from_path(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let raw: Value = serde_json::from_str(text)
            .map_err(|e| CliError::Config(format!("parse config: {e}")))?;
        validate_method_keys(&raw)?;
        let cfg: PipelineConfig = serde_json::from_value(raw)
            .map_err(|e| CliError::Config(format!("decode config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let c = &self.corpus;
        if c.n_items == 0 || c.n_train_queries == 0 || c.n_test_queries == 0 {
            return Err(CliError::Config("corpus counts must be positive".into()));
        }
        if c.rank == 0 || c.rank > c.dim {
            return Err(CliError::Config(format!(
                "corpus rank {} must be in 1..=dim ({})",
                c.rank, c.dim
            )));
        }
        if !(c.sigma.is_finite() && c.sigma >= 0.0) {
            return Err(CliError::Config("corpus sigma must be non-negative".into()));
        }
        if !(c.base_noise.is_finite() && c.base_noise >= 0.0) {
            return Err(CliError::Config(
                "corpus base_noise must be non-negative".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.search.lambda) {
            return Err(CliError::Config(format!(
                "search lambda {} outside [0, 1]",
                self.search.lambda
            )));
        }
        if self.search.rounds == 0 {
            return Err(CliError::Config("search rounds must be positive".into()));
        }
        // gbuild only applies to the synthetic route
        if self.files.is_none() && (self.gbuild.kd == 0 || self.gbuild.kd > c.n_items) {
            return Err(CliError::Config(format!(
                "gbuild kd {} outside 1..={}",
                self.gbuild.kd, c.n_items
            )));
        }
        if let Some(mf) = &self.mf {
            if mf.learning_rate < 0.0 || !mf.learning_rate.is_finite() {
                return Err(CliError::Config(
                    "mf learning rate must be non-negative".into(),
                ));
            }
            if mf.batch_size == 0 {
                return Err(CliError::Config("mf batch size must be positive".into()));
            }
        }
        if self.eval.budgets.is_empty() || self.eval.k_values.is_empty() {
            return Err(CliError::Config(
                "eval budgets and k_values must be non-empty".into(),
            ));
        }
        let kmax = *self.eval.k_values.iter().max().expect("non-empty");
        let mmin = *self.eval.budgets.iter().min().expect("non-empty");
        if kmax > mmin {
            return Err(CliError::Config(format!(
                "largest k {kmax} exceeds smallest budget {mmin}"
            )));
        }
        if self.eval.n_seeds == 0 {
            return Err(CliError::Config("n_seeds must be positive".into()));
        }
        if self.files.is_some() && !self.scorer.backend.contains(':') {
            return Err(CliError::Config(
                "a file corpus needs an explicit scorer backend \
                 (oracle:<file>, synth:<file> or exec:<command>)"
                    .into(),
            ));
        }
        if let Some(methods) = &self.eval.methods {
            for m in methods {
                if let MethodKind::Axn { lambda, rounds, .. } = &m.kind {
                    if !(0.0..=1.0).contains(lambda) {
                        return Err(CliError::Config(format!(
                            "method {}: lambda {lambda} outside [0, 1]",
                            m.name
                        )));
                    }
                    if *rounds == 0 {
                        return Err(CliError::Config(format!(
                            "method {}: rounds must be positive",
                            m.name
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Effective MF training dimension.
    pub fn mf_dim(&self) -> usize {
        self.mf
            .as_ref()
            .and_then(|m| m.dim)
            .unwrap_or(self.corpus.dim)
    }

    /// Methods to evaluate: explicit list, or RNR plus one adaptive method
    /// derived from the `search` section.
    pub fn methods(&self) -> Vec<MethodSpec> {
        match &self.eval.methods {
            Some(ms) => ms.clone(),
            None => vec![
                MethodSpec {
                    name: "rnr".into(),
                    kind: MethodKind::Rnr,
                },
                MethodSpec {
                    name: "axn".into(),
                    kind: MethodKind::Axn {
                        rounds: self.search.rounds,
                        lambda: self.search.lambda,
                        init: self.search.init,
                        shortlist_size: self.search.shortlist_size,
                        pinv_tolerance: self.search.pinv_tolerance,
                    },
                },
            ],
        }
    }

    pub fn optimizer(&self) -> OptimizerKind {
        OptimizerKind::default_adamw()
    }
}

/// Method entries use an internally tagged representation, which serde
/// cannot pair with `deny_unknown_fields`; check their keys by hand so a
/// typo never silently becomes a default.
fn validate_method_keys(raw: &Value) -> Result<(), CliError> {
    let Some(methods) = raw.pointer("/eval/methods").and_then(Value::as_array) else {
        return Ok(());
    };
    for (i, m) in methods.iter().enumerate() {
        let Some(obj) = m.as_object() else {
            return Err(CliError::Config(format!(
                "eval.methods[{i}] must be an object"
            )));
        };
        let kind = obj
            .get("kind")
            .and_then(Value::as_str)
            .ok_or_else(|| CliError::Config(format!("eval.methods[{i}] needs a string `kind`")))?;
        let allowed: &[&str] = match kind {
            "exact" | "rnr" => &["name", "kind"],
            "axn" => &[
                "name",
                "kind",
                "rounds",
                "lambda",
                "init",
                "shortlist_size",
                "pinv_tolerance",
            ],
            "tour" => &[
                "name",
                "kind",
                "rounds",
                "learning_rate",
                "variant",
                "init",
                "shortlist_size",
            ],
            other => {
                return Err(CliError::Config(format!(
                    "eval.methods[{i}]: unknown kind `{other}`"
                )))
            }
        };
        for key in obj.keys() {
            if !allowed.contains(&key.as_str()) {
                return Err(CliError::Config(format!(
                    "eval.methods[{i}]: unknown key `{key}` for kind `{kind}`"
                )));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gets_all_defaults() {
        let cfg = PipelineConfig::from_json("{}").unwrap();
        assert_eq!(cfg.search.rounds, 5);
        assert_eq!(cfg.search.lambda, 0.0);
        assert_eq!(cfg.gbuild.kd, 100);
        assert_eq!(cfg.search.pinv_tolerance, 1e-10);
        assert_eq!(cfg.corpus.n_items, 2000);
        assert!(cfg.mf.is_none());
    }

    #[test]
    fn unknown_top_level_key_rejected() {
        let err = PipelineConfig::from_json(r#"{"serach": {}}"#).unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
    }

    #[test]
    fn unknown_section_key_rejected() {
        let err = PipelineConfig::from_json(r#"{"search": {"round": 5}}"#).unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
    }

    #[test]
    fn unknown_method_key_rejected() {
        let err = PipelineConfig::from_json(
            r#"{"eval": {"methods": [{"name": "a", "kind": "axn", "lambada": 0.5}]}}"#,
        )
        .unwrap_err();
        let CliError::Config(msg) = err else {
            panic!("wrong error kind")
        };
        assert!(msg.contains("lambada"), "{msg}");
    }

    #[test]
    fn out_of_range_lambda_rejected_before_work() {
        let err = PipelineConfig::from_json(r#"{"search": {"lambda": 1.5}}"#).unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
    }

    #[test]
    fn method_defaults_fill_in() {
        let cfg =
            PipelineConfig::from_json(r#"{"eval": {"methods": [{"name": "a", "kind": "axn"}]}}"#)
                .unwrap();
        let methods = cfg.methods();
        match &methods[0].kind {
            MethodKind::Axn {
                rounds,
                lambda,
                pinv_tolerance,
                ..
            } => {
                assert_eq!(*rounds, 5);
                assert_eq!(*lambda, 0.0);
                assert_eq!(*pinv_tolerance, 1e-10);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
