//! Staged experiment pipeline over on-disk artifacts.
//!
//! Stages run in dependency order per seed directory:
//!
//! 1. `synth-gen`: oracle spec, base embeddings, brute-force gold labels
//! 2. `build-g`: the sparse observed score matrix
//! 3. `train-mf`: the factorization model (skipped when `mf` is absent)
//! 4. `eval`: method sweeps, pooled report (CSV + JSON with provenance)
//!
//! A stage is skipped when its outputs are newer than its inputs (pass
//! `force` to rerun); partial artifacts survive failures. All randomness
//! derives from the single config seed.

use crate::config::PipelineConfig;
use crate::provenance::{config_hash, file_hash, Provenance};
use crate::CliError;
use axn_core::evalharness::{evaluate_methods, rows_from_samples, EvalInputs, ReportRow, Samples};
use axn_core::factorize::{
    embed_items, embed_query, train_inductive, train_transductive, MfHyperparams, MfKind, MfModel,
};
use axn_core::gbuilder::{build_sparse_matrix, coverage_stats, GBuildSpec};
use axn_core::ids::QueryId;
use axn_core::matrix::EmbeddingMatrix;
use axn_core::rng;
use axn_core::scorer::synthetic::{make_synthetic_oracle, SyntheticOracleSpec};
use axn_core::sparse::SparseScoreMatrix;
use axn_core::topk::TopKList;
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainStats {
    pub seed_index: usize,
    pub epochs_run: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// The report document. `timing` is the only section expected to differ
/// between reruns of an identical config.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CliReport {
    pub provenance: Provenance,
    pub rows: Vec<ReportRow>,
    pub train: Vec<TrainStats>,
    pub timing: BTreeMap<String, f64>,
}

#[derive(Debug, Default)]
pub struct PipelineOutcome {
    pub stages_run: Vec<String>,
    pub stages_skipped: Vec<String>,
    pub report_json: PathBuf,
    pub report_csv: PathBuf,
}

/// True when every output exists and is at least as new as every input.
fn fresh(outputs: &[PathBuf], inputs: &[PathBuf]) -> bool {
    let newest_input = inputs
        .iter()
        .filter_map(|p| std::fs::metadata(p).and_then(|m| m.modified()).ok())
        .max();
    let mut oldest_output = None;
    for out in outputs {
        match std::fs::metadata(out).and_then(|m| m.modified()) {
            Ok(t) => {
                oldest_output = Some(oldest_output.map_or(t, |o: std::time::SystemTime| o.min(t)))
            }
            Err(_) => return false,
        }
    }
    match (oldest_output, newest_input) {
        (Some(out), Some(inp)) => out >= inp,
        (Some(_), None) => true,
        (None, _) => false,
    }
}

fn log_stage(name: &str, status: &str, seconds: f64) {
    eprintln!("stage={name} status={status} seconds={seconds:.3}");
}

struct SeedPaths {
    dir: PathBuf,
    oracle: PathBuf,
    base_q: PathBuf,
    base_i: PathBuf,
    gold: PathBuf,
    g: PathBuf,
    normalizer: PathBuf,
    model_dir: PathBuf,
}

impl SeedPaths {
    fn new(out_dir: &Path, seed_index: usize) -> Self {
        let dir = out_dir.join(format!("seed-{seed_index}"));
        Self {
            oracle: dir.join("oracle.json"),
            base_q: dir.join("base_q.emb"),
            base_i: dir.join("base_i.emb"),
            gold: dir.join("gold.bin"),
            g: dir.join("g.bin"),
            normalizer: dir.join("normalizer.json"),
            model_dir: dir.join("model"),
            dir,
        }
    }
}

pub fn run_pipeline(
    cfg: &PipelineConfig,
    config_path: Option<&Path>,
    out_dir: &Path,
    force: bool,
) -> Result<PipelineOutcome, CliError> {
    cfg.validate()?;
    if cfg.scorer.backend != "synth" {
        return Err(CliError::Config(format!(
            "the pipeline generates its own synthetic oracle; scorer backend `{}` is only \
             usable with the standalone subcommands",
            cfg.scorer.backend
        )));
    }
    if let Some(mf) = &cfg.mf {
        if mf.dim.is_some_and(|d| d != cfg.corpus.dim) {
            return Err(CliError::Config(
                "pipeline factorization dim must match the corpus dim".into(),
            ));
        }
    }
    std::fs::create_dir_all(out_dir)?;

    let mut outcome = PipelineOutcome::default();
    let mut timing: BTreeMap<String, f64> = BTreeMap::new();
    let mut train_stats = Vec::new();
    let config_input: Vec<PathBuf> = config_path.iter().map(|p| p.to_path_buf()).collect();
    let kmax = *cfg.eval.k_values.iter().max().expect("validated non-empty");

    let mut seed_paths = Vec::new();
    for seed_index in 0..cfg.eval.n_seeds {
        let paths = SeedPaths::new(out_dir, seed_index);
        std::fs::create_dir_all(&paths.dir)?;
        let run_seed = rng::derive_seed(cfg.seed, &format!("run-{seed_index}"));

        // --- synth-gen ---------------------------------------------------
        let stage = format!("synth-gen[{seed_index}]");
        let outputs = vec![
            paths.oracle.clone(),
            paths.base_q.clone(),
            paths.base_i.clone(),
            paths.gold.clone(),
        ];
        if !force && fresh(&outputs, &config_input) {
            log_stage(&stage, "skipped", 0.0);
            outcome.stages_skipped.push(stage);
        } else {
            let t = Instant::now();
            let oracle_spec = SyntheticOracleSpec {
                n_queries: cfg.corpus.n_train_queries + cfg.corpus.n_test_queries,
                n_items: cfg.corpus.n_items,
                rank: cfg.corpus.rank,
                dim: cfg.corpus.dim,
                sigma: cfg.corpus.sigma,
                seed: rng::derive_seed(run_seed, "oracle"),
            };
            let (oracle, true_q, true_i) = make_synthetic_oracle(oracle_spec)?;
            let base_q = axn_core::evalharness::perturb_embeddings(
                &true_q,
                cfg.corpus.base_noise,
                rng::derive_seed(run_seed, "base-noise-q"),
            )?;
            let base_i = axn_core::evalharness::perturb_embeddings(
                &true_i,
                cfg.corpus.base_noise,
                rng::derive_seed(run_seed, "base-noise-i"),
            )?;
            std::fs::write(
                &paths.oracle,
                serde_json::to_string_pretty(&oracle_spec)
                    .map_err(|e| CliError::Runtime(anyhow::anyhow!(e)))?,
            )?;
            base_q.save(&paths.base_q)?;
            base_i.save(&paths.base_i)?;
            let test_queries: Vec<QueryId> = (cfg.corpus.n_train_queries
                ..cfg.corpus.n_train_queries + cfg.corpus.n_test_queries)
                .map(QueryId)
                .collect();
            // gold must not be read from a stale cache here
            if paths.gold.exists() {
                std::fs::remove_file(&paths.gold)?;
            }
            axn_core::evalharness::make_gold(
                &oracle,
                &test_queries,
                cfg.corpus.n_items,
                kmax,
                Some(&paths.gold),
            )?;
            let secs = t.elapsed().as_secs_f64();
            *timing.entry("embed_base_seconds".into()).or_default() += secs;
            log_stage(&stage, "ran", secs);
            outcome.stages_run.push(stage);
        }

        // --- build-g -----------------------------------------------------
        let stage = format!("build-g[{seed_index}]");
        let mut outputs = vec![paths.g.clone()];
        if cfg.gbuild.normalize {
            outputs.push(paths.normalizer.clone());
        }
        let mut inputs = config_input.clone();
        inputs.extend([
            paths.oracle.clone(),
            paths.base_q.clone(),
            paths.base_i.clone(),
        ]);
        if !force && fresh(&outputs, &inputs) {
            log_stage(&stage, "skipped", 0.0);
            outcome.stages_skipped.push(stage);
        } else {
            let t = Instant::now();
            let scorer =
                crate::scorer_spec::parse_scorer(&format!("synth:{}", paths.oracle.display()))?;
            let base_q = EmbeddingMatrix::load(&paths.base_q)?;
            let base_i = EmbeddingMatrix::load(&paths.base_i)?;
            let train_q = base_q.slice_rows(0, cfg.corpus.n_train_queries)?;
            let spec = GBuildSpec {
                strategy: cfg.gbuild.strategy,
                k_d: cfg.gbuild.kd,
                seed: rng::derive_seed(run_seed, "gbuild"),
                n_queries: cfg.corpus.n_train_queries,
                n_items: cfg.corpus.n_items,
                base_query_embs: Some(train_q),
                base_item_embs: Some(base_i),
                normalize_fit_queries: cfg.gbuild.normalize.then_some(cfg.gbuild.fit_queries),
                batch_size: cfg.scorer.batch_size,
            };
            let built = build_sparse_matrix(&spec, scorer.as_ref(), cfg.workers)?;
            built.g.save(&paths.g)?;
            if let Some(n) = &built.normalizer {
                std::fs::write(
                    &paths.normalizer,
                    serde_json::to_string_pretty(n)
                        .map_err(|e| CliError::Runtime(anyhow::anyhow!(e)))?,
                )?;
            }
            let secs = t.elapsed().as_secs_f64();
            *timing.entry("build_g_seconds".into()).or_default() += secs;
            log_stage(&stage, "ran", secs);
            outcome.stages_run.push(stage);
        }

        // --- train-mf ----------------------------------------------------
        if let Some(mf) = &cfg.mf {
            let stage = format!("train-mf[{seed_index}]");
            let outputs = vec![paths.model_dir.join("model.json")];
            let mut inputs = config_input.clone();
            inputs.extend([paths.g.clone(), paths.base_q.clone(), paths.base_i.clone()]);
            if !force && fresh(&outputs, &inputs) {
                log_stage(&stage, "skipped", 0.0);
                outcome.stages_skipped.push(stage);
            } else {
                let t = Instant::now();
                let g = SparseScoreMatrix::load(&paths.g)?;
                let base_q = EmbeddingMatrix::load(&paths.base_q)?;
                let base_i = EmbeddingMatrix::load(&paths.base_i)?;
                let train_q = base_q.slice_rows(0, cfg.corpus.n_train_queries)?;
                let hyper = MfHyperparams {
                    dim: cfg.mf_dim(),
                    learning_rate: mf.learning_rate,
                    epochs: mf.epochs,
                    batch_size: mf.batch_size,
                    seed: rng::derive_seed(run_seed, "mf-train"),
                    max_wall_seconds: mf.max_wall_seconds,
                    optimizer: cfg.optimizer(),
                    // parallel gradients are opt-in and not bit-reproducible
                    // against the single-threaded path; the pipeline favors
                    // byte-identical reruns
                    workers: 1,
                };
                let (init_u, init_v) = match mf.init.to_core() {
                    axn_core::evalharness::MfInit::Base => (train_q.clone(), base_i.clone()),
                    axn_core::evalharness::MfInit::Random { std } => {
                        let mut r = rng::stream(rng::derive_seed(run_seed, "mf-init"));
                        (
                            EmbeddingMatrix::random_normal(
                                cfg.corpus.n_train_queries,
                                hyper.dim,
                                axn_core::matrix::EmbeddingRole::Query,
                                std,
                                &mut r,
                            )?,
                            EmbeddingMatrix::random_normal(
                                cfg.corpus.n_items,
                                hyper.dim,
                                axn_core::matrix::EmbeddingRole::Item,
                                std,
                                &mut r,
                            )?,
                        )
                    }
                };
                let (model, summary) = match mf.kind {
                    MfKind::Transductive => train_transductive(&g, &init_u, &init_v, &hyper)?,
                    MfKind::Inductive => train_inductive(&g, &train_q, &base_i, &hyper)?,
                };
                model.save_dir(&paths.model_dir)?;
                train_stats.push(TrainStats {
                    seed_index,
                    epochs_run: summary.epochs_run,
                    initial_loss: summary.initial_loss,
                    final_loss: summary.final_loss,
                });
                let secs = t.elapsed().as_secs_f64();
                *timing.entry("train_seconds".into()).or_default() += secs;
                log_stage(&stage, "ran", secs);
                outcome.stages_run.push(stage);
            }
        }

        seed_paths.push((run_seed, paths));
    }

    // --- eval (always recomputed; it is cheap relative to indexing) ------
    let stage = "eval".to_string();
    let t = Instant::now();
    let mut pooled: Samples = BTreeMap::new();
    let methods = cfg.methods();
    for (run_seed, paths) in &seed_paths {
        let scorer =
            crate::scorer_spec::parse_scorer(&format!("synth:{}", paths.oracle.display()))?;
        let base_q = EmbeddingMatrix::load(&paths.base_q)?;
        let base_i = EmbeddingMatrix::load(&paths.base_i)?;
        let model = if cfg.mf.is_some() {
            Some(MfModel::load_dir(&paths.model_dir)?)
        } else {
            None
        };
        let item_embs = match &model {
            Some(m) => {
                let t_embed = Instant::now();
                let v = embed_items(m)?;
                *timing.entry("embed_items_seconds".into()).or_default() +=
                    t_embed.elapsed().as_secs_f64();
                v
            }
            None => base_i.clone(),
        };
        let test_queries: Vec<QueryId> = (cfg.corpus.n_train_queries
            ..cfg.corpus.n_train_queries + cfg.corpus.n_test_queries)
            .map(QueryId)
            .collect();
        let u_params: Vec<Vec<f64>> = test_queries
            .iter()
            .map(|&q| {
                let base = base_q.row(q.0);
                match &model {
                    Some(m) if m.kind == MfKind::Inductive => embed_query(m, base),
                    _ => Ok(base.to_vec()),
                }
            })
            .collect::<axn_core::Result<_>>()?;
        let gold_map = axn_core::evalharness::make_gold(
            scorer.as_ref(),
            &test_queries,
            cfg.corpus.n_items,
            kmax,
            Some(&paths.gold),
        )?;
        let gold: Vec<TopKList> = test_queries.iter().map(|q| gold_map[q].clone()).collect();
        let inputs = EvalInputs {
            scorer: scorer.as_ref(),
            item_embs: &item_embs,
            test_queries: &test_queries,
            u_params: Some(&u_params),
            init_rankings: None,
            gold: &gold,
        };
        let samples = evaluate_methods(
            &inputs,
            &methods,
            &cfg.eval.budgets,
            &cfg.eval.k_values,
            rng::derive_seed(*run_seed, "eval"),
            cfg.workers,
        )?;
        for (key, (recalls, calls)) in samples {
            let cell = pooled.entry(key).or_default();
            cell.0.extend(recalls);
            cell.1.extend(calls);
        }
    }
    let rows = rows_from_samples(&pooled);
    let secs = t.elapsed().as_secs_f64();
    *timing.entry("eval_seconds".into()).or_default() += secs;
    log_stage(&stage, "ran", secs);
    outcome.stages_run.push(stage);

    // --- report -----------------------------------------------------------
    let mut input_hashes = BTreeMap::new();
    for (_, paths) in &seed_paths {
        for file in [
            &paths.oracle,
            &paths.base_q,
            &paths.base_i,
            &paths.g,
            &paths.gold,
        ] {
            if file.exists() {
                let name = file
                    .strip_prefix(out_dir)
                    .unwrap_or(file)
                    .display()
                    .to_string();
                input_hashes.insert(name, file_hash(file)?);
            }
        }
        let model_meta = paths.model_dir.join("model.json");
        if model_meta.exists() {
            let name = model_meta
                .strip_prefix(out_dir)
                .unwrap_or(&model_meta)
                .display()
                .to_string();
            input_hashes.insert(name, file_hash(&model_meta)?);
        }
    }
    let report = CliReport {
        provenance: Provenance {
            tool: "axn".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_hash: config_hash(cfg),
            seed: cfg.seed,
            input_hashes,
        },
        rows,
        train: train_stats,
        timing,
    };
    let report_json = out_dir.join("report.json");
    let report_csv = out_dir.join("report.csv");
    let mut body =
        serde_json::to_string_pretty(&report).map_err(|e| CliError::Runtime(anyhow::anyhow!(e)))?;
    body.push('\n');
    std::fs::write(&report_json, body)?;
    write_csv(&report.rows, &report.timing, &report_csv)?;
    outcome.report_json = report_json;
    outcome.report_csv = report_csv;
    Ok(outcome)
}

fn write_csv(
    rows: &[ReportRow],
    timing: &BTreeMap<String, f64>,
    path: &Path,
) -> Result<(), CliError> {
    let total: f64 = timing
        .iter()
        .filter(|(k, _)| k.as_str() != "eval_seconds")
        .map(|(_, v)| v)
        .sum();
    let mut csv =
        String::from("method,k,m,recall_mean,recall_stderr,calls_used,index_seconds_total\n");
    for r in rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.method, r.k, r.m, r.recall_mean, r.recall_stderr, r.mean_calls_used, total
        ));
    }
    std::fs::write(path, csv)?;
    Ok(())
}

/// Coverage summary for a saved sparse matrix, as printed by `build-g`.
pub fn coverage_json(g: &SparseScoreMatrix) -> serde_json::Value {
    let stats = coverage_stats(g);
    json!({
        "n_queries": g.n_queries(),
        "n_items": g.n_items(),
        "nnz": g.nnz(),
        "coverage": stats,
    })
}
