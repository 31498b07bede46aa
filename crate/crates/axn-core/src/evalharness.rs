//! Recall evaluation against brute-force gold labels.
//!
//! Gold top-k lists come from exhaustive scoring (cacheable to disk);
//! methods are graded by Top-k-Recall@m: the fraction of the exact top-k
//! found among the top-k of the m exactly-scored items a budgeted method
//! returns. [`run_experiment`] drives the full seeded synthetic pipeline
//! (oracle, sparse matrix, factorization, search sweeps) and reports
//! pooled means with standard errors plus indexing-phase wall times.

use crate::error::{Error, Result};
use crate::factorize::{
    embed_items, embed_query, train_inductive, train_transductive, MfHyperparams, MfKind, MfModel,
    TrainSummary,
};
use crate::gbuilder::{build_sparse_matrix, GBuildSpec, GStrategy, DEFAULT_SCORE_BATCH};
use crate::ids::{ItemId, QueryId};
use crate::matrix::{EmbeddingMatrix, EmbeddingRole};
use crate::retrieve::{
    axn_search, brute_force_knn, rnr_search, tour_search, AxnConfig, InitPolicy, TourConfig,
    TourVariant, DEFAULT_PINV_TOLERANCE,
};
use crate::rng;
use crate::scorer::Scorer;
use crate::sparse::{ScoreEntry, SparseScoreMatrix};
use crate::topk::TopKList;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Fraction of the gold top-k present in the method's top-k.
///
/// `retrieved` is truncated to the gold length, so passing a method's
/// longer list grades only its best k items.
pub fn topk_recall_at_m(gold: &TopKList, retrieved: &TopKList) -> Result<f64> {
    let k = gold.len();
    if k == 0 {
        return Err(Error::SizeMismatch("gold list is empty".into()));
    }
    let gold_ids: HashSet<ItemId> = gold.ids().collect();
    let hits = retrieved
        .ids()
        .take(k)
        .filter(|id| gold_ids.contains(id))
        .count();
    Ok(hits as f64 / k as f64)
}

/// Exact top-k per query by brute force, with an optional file cache.
///
/// When `cache_path` exists it is loaded instead of recomputed (zero
/// scorer calls); otherwise results are computed and, if a path is given,
/// saved for next time.
pub fn make_gold(
    scorer: &dyn Scorer,
    queries: &[QueryId],
    n_items: usize,
    k: usize,
    cache_path: Option<&Path>,
) -> Result<BTreeMap<QueryId, TopKList>> {
    if let Some(path) = cache_path {
        if path.exists() {
            return load_gold(path, queries, k);
        }
    }
    let mut gold = BTreeMap::new();
    for &q in queries {
        gold.insert(q, brute_force_knn(scorer, q, n_items, k)?);
    }
    if let Some(path) = cache_path {
        save_gold(&gold, n_items, path)?;
    }
    Ok(gold)
}

fn save_gold(gold: &BTreeMap<QueryId, TopKList>, n_items: usize, path: &Path) -> Result<()> {
    let mut entries = Vec::new();
    let mut max_q = 0;
    for (&q, list) in gold {
        max_q = max_q.max(q.0);
        for &(item, score) in list.entries() {
            entries.push(ScoreEntry {
                query: q,
                item,
                score,
            });
        }
    }
    SparseScoreMatrix::new(max_q + 1, n_items, entries)?.save(path)
}

fn load_gold(path: &Path, queries: &[QueryId], k: usize) -> Result<BTreeMap<QueryId, TopKList>> {
    let g = SparseScoreMatrix::load(path)?;
    let mut gold = BTreeMap::new();
    for &q in queries {
        let row = g.query_row(q);
        if row.len() != k {
            return Err(Error::SizeMismatch(format!(
                "gold cache has {} entries for query {q}, expected {k}",
                row.len()
            )));
        }
        gold.insert(
            q,
            TopKList::from_scores(k, row.iter().map(|e| (e.item, e.score))),
        );
    }
    Ok(gold)
}

/// Retrieval method under evaluation. Budgets come from the experiment's
/// sweep; `Exact` ignores them and always scores the whole corpus.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum MethodKind {
    Exact,
    Rnr,
    Axn {
        #[serde(default = "default_rounds")]
        rounds: usize,
        #[serde(default)]
        lambda: f64,
        #[serde(default = "default_init")]
        init: InitPolicy,
        #[serde(default)]
        shortlist_size: Option<usize>,
        #[serde(default = "default_pinv_tolerance")]
        pinv_tolerance: f64,
    },
    Tour {
        #[serde(default = "default_rounds")]
        rounds: usize,
        learning_rate: f64,
        variant: TourVariant,
        #[serde(default = "default_init")]
        init: InitPolicy,
        #[serde(default)]
        shortlist_size: Option<usize>,
    },
}

fn default_rounds() -> usize {
    5
}

fn default_init() -> InitPolicy {
    InitPolicy::EmbTopK
}

fn default_pinv_tolerance() -> f64 {
    DEFAULT_PINV_TOLERANCE
}

impl MethodKind {
    pub fn axn(rounds: usize, lambda: f64, init: InitPolicy) -> Self {
        MethodKind::Axn {
            rounds,
            lambda,
            init,
            shortlist_size: None,
            pinv_tolerance: DEFAULT_PINV_TOLERANCE,
        }
    }
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct MethodSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: MethodKind,
}

/// How the factorization initializes its embeddings.
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "init")]
pub enum MfInit {
    /// Start from the base (ground-truth-factor) embeddings.
    Base,
    /// Start from seeded Gaussian embeddings.
    Random { std: f64 },
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct IndexSpec {
    pub strategy: GStrategy,
    pub k_d: usize,
    pub mf_kind: MfKind,
    pub hyper: MfHyperparams,
    pub mf_init: MfInit,
}

/// Seeded synthetic benchmark: oracle queries `0..n_train` are the train
/// split, the rest are test queries.
///
/// `base_noise` models the gap between the black-box scorer and the base
/// embeddings a real deployment would ingest: the benchmark's base
/// embeddings are the true factors plus i.i.d. Gaussian noise of this
/// scale. At 0 the base embeddings reproduce the scorer exactly (up to
/// score noise) and retrieve-and-rerank is already near-perfect.
/// With no [`IndexSpec`], search runs directly over the base item
/// embeddings.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct SyntheticBenchmarkSpec {
    pub oracle: crate::scorer::synthetic::SyntheticOracleSpec,
    pub n_train_queries: usize,
    #[serde(default)]
    pub base_noise: f64,
    pub index: Option<IndexSpec>,
}

impl SyntheticBenchmarkSpec {
    pub fn validate(&self) -> Result<()> {
        self.oracle.validate()?;
        if self.n_train_queries >= self.oracle.n_queries {
            return Err(Error::InvalidSpec(format!(
                "train split {} leaves no test queries out of {}",
                self.n_train_queries, self.oracle.n_queries
            )));
        }
        if !(self.base_noise.is_finite() && self.base_noise >= 0.0) {
            return Err(Error::InvalidSpec(
                "base noise must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Ingested corpus: embeddings and a scorer from files. Row `i` of the
/// query embeddings is scorer query id `query_id_offset + i`.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct FileBenchmarkSpec {
    pub item_embs: PathBuf,
    pub query_embs: PathBuf,
    #[serde(default)]
    pub query_id_offset: usize,
    pub scorer: crate::scorer::source::ScorerSource,
    /// Brute-force gold labels are cached here across runs.
    #[serde(default)]
    pub gold_cache: Option<PathBuf>,
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchmarkSource {
    Synthetic(SyntheticBenchmarkSpec),
    Files(FileBenchmarkSpec),
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub benchmark: BenchmarkSource,
    pub methods: Vec<MethodSpec>,
    pub budgets: Vec<usize>,
    pub k_values: Vec<usize>,
    pub n_test_queries: usize,
    pub seeds: Vec<u64>,
    pub timers: bool,
    pub workers: usize,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.budgets.is_empty() || self.k_values.is_empty() {
            return Err(Error::InvalidSpec(
                "methods, budgets and k values must be non-empty".into(),
            ));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidSpec("need at least one seed".into()));
        }
        if self.n_test_queries == 0 {
            return Err(Error::InvalidSpec("need at least one test query".into()));
        }
        if let BenchmarkSource::Synthetic(bench) = &self.benchmark {
            bench.validate()?;
            let n_test_avail = bench.oracle.n_queries - bench.n_train_queries;
            if self.n_test_queries > n_test_avail {
                return Err(Error::InvalidSpec(format!(
                    "{} test queries requested, benchmark has {}",
                    self.n_test_queries, n_test_avail
                )));
            }
        }
        let kmax = *self.k_values.iter().max().expect("non-empty");
        let mmin = *self.budgets.iter().min().expect("non-empty");
        if kmax > mmin {
            return Err(Error::InvalidSpec(format!(
                "largest k {kmax} exceeds smallest budget {mmin}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub k: usize,
    pub m: usize,
    pub recall_mean: f64,
    pub recall_stderr: f64,
    pub mean_calls_used: f64,
    pub n_samples: usize,
}

/// Wall-clock seconds per indexing phase, summed over seeds.
#[derive(Clone, PartialEq, Debug, Default, Serialize, Deserialize)]
pub struct TimingBreakdown {
    pub embed_base_seconds: f64,
    pub build_g_seconds: f64,
    pub train_seconds: f64,
    pub embed_items_seconds: f64,
}

impl TimingBreakdown {
    pub fn total(&self) -> f64 {
        self.embed_base_seconds
            + self.build_g_seconds
            + self.train_seconds
            + self.embed_items_seconds
    }
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct RecallReport {
    pub rows: Vec<ReportRow>,
    pub timing: TimingBreakdown,
    pub train_summaries: Vec<TrainSummary>,
}

/// Per-query inputs shared by every method at evaluation time.
pub struct EvalInputs<'a> {
    pub scorer: &'a dyn Scorer,
    pub item_embs: &'a EmbeddingMatrix,
    pub test_queries: &'a [QueryId],
    /// Parametric query embeddings aligned with `test_queries` (needed by
    /// embedding-based inits, lambda mixing, RNR and TOUR).
    pub u_params: Option<&'a [Vec<f64>]>,
    /// Precomputed rankings aligned with `test_queries`.
    pub init_rankings: Option<&'a [Vec<ItemId>]>,
    /// Gold top-k lists aligned with `test_queries` (`k = max k value`).
    pub gold: &'a [TopKList],
}

/// (method name, k, budget m).
pub type SampleKey = (String, usize, usize);
/// Per-cell (recalls, calls-used) samples in query order.
pub type Samples = BTreeMap<SampleKey, (Vec<f64>, Vec<f64>)>;

/// Evaluate every (method, budget, query) cell once; returns per-cell
/// recall and calls-used samples in query order.
pub fn evaluate_methods(
    inputs: &EvalInputs<'_>,
    methods: &[MethodSpec],
    budgets: &[usize],
    k_values: &[usize],
    seed: u64,
    workers: usize,
) -> Result<Samples> {
    let kmax = *k_values
        .iter()
        .max()
        .ok_or_else(|| Error::InvalidSpec("k values must be non-empty".into()))?;
    let n_items = inputs.item_embs.rows();
    let mut samples: Samples = BTreeMap::new();

    let run_query = |method: &MethodSpec, budget: usize, idx: usize| -> Result<(Vec<f64>, f64)> {
        let q = inputs.test_queries[idx];
        let u_param = inputs.u_params.map(|u| u[idx].as_slice());
        let ranking = inputs.init_rankings.map(|r| r[idx].as_slice());
        let query_seed = rng::splitmix64(
            rng::derive_seed(seed, "search") ^ (q.0 as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
        );
        let topk = match &method.kind {
            MethodKind::Exact => brute_force_knn(inputs.scorer, q, n_items, kmax)?,
            MethodKind::Rnr => {
                let u = u_param.ok_or_else(|| {
                    Error::InvalidSpec("retrieve-and-rerank needs query embeddings".into())
                })?;
                rnr_search(u, inputs.item_embs, inputs.scorer, q, budget, kmax, None)?.topk
            }
            MethodKind::Axn {
                rounds,
                lambda,
                init,
                shortlist_size,
                pinv_tolerance,
            } => {
                let cfg = AxnConfig {
                    budget,
                    rounds: *rounds,
                    k_s: None,
                    lambda: *lambda,
                    init: *init,
                    shortlist_size: *shortlist_size,
                    pinv_tolerance: *pinv_tolerance,
                    seed: query_seed,
                    keep_approx_scores: false,
                };
                axn_search(
                    &cfg,
                    inputs.item_embs,
                    inputs.scorer,
                    q,
                    kmax,
                    u_param,
                    ranking,
                    None,
                )?
                .topk
            }
            MethodKind::Tour {
                rounds,
                learning_rate,
                variant,
                init,
                shortlist_size,
            } => {
                let u = u_param.ok_or_else(|| {
                    Error::InvalidSpec("gradient-update search needs query embeddings".into())
                })?;
                let cfg = TourConfig {
                    budget,
                    rounds: *rounds,
                    k_s: None,
                    learning_rate: *learning_rate,
                    variant: *variant,
                    init: *init,
                    shortlist_size: *shortlist_size,
                    seed: query_seed,
                };
                tour_search(
                    &cfg,
                    inputs.item_embs,
                    inputs.scorer,
                    q,
                    kmax,
                    u,
                    ranking,
                    None,
                )?
                .topk
            }
        };
        let calls = match &method.kind {
            MethodKind::Exact => n_items as f64,
            _ => budget.min(n_items) as f64,
        };
        let recalls = k_values
            .iter()
            .map(|&k| topk_recall_at_m(&inputs.gold[idx].truncated(k), &topk))
            .collect::<Result<Vec<f64>>>()?;
        Ok((recalls, calls))
    };

    let pool = if workers > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .map_err(|e| Error::BackendFailure(format!("thread pool: {e}")))?,
        )
    } else {
        None
    };

    for method in methods {
        let effective_budgets: Vec<usize> = match method.kind {
            MethodKind::Exact => vec![n_items],
            _ => budgets.to_vec(),
        };
        for budget in effective_budgets {
            let indices: Vec<usize> = (0..inputs.test_queries.len()).collect();
            let results: Vec<(Vec<f64>, f64)> = match &pool {
                Some(p) => p.install(|| {
                    indices
                        .par_iter()
                        .map(|&idx| run_query(method, budget, idx))
                        .collect::<Result<Vec<_>>>()
                })?,
                None => indices
                    .iter()
                    .map(|&idx| run_query(method, budget, idx))
                    .collect::<Result<Vec<_>>>()?,
            };
            for (ki, &k) in k_values.iter().enumerate() {
                let cell = samples.entry((method.name.clone(), k, budget)).or_default();
                for (recalls, calls) in &results {
                    cell.0.push(recalls[ki]);
                    cell.1.push(*calls);
                }
            }
        }
    }
    Ok(samples)
}

/// Compensated (Kahan) sum.
fn kahan_sum(xs: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for &x in xs {
        let y = x - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    sum
}

fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = kahan_sum(xs) / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let sq: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var = kahan_sum(&sq) / (n as f64 - 1.0);
    (mean, (var / n as f64).sqrt())
}

pub fn rows_from_samples(samples: &Samples) -> Vec<ReportRow> {
    let mut rows: Vec<ReportRow> = samples
        .iter()
        .map(|((method, k, m), (recalls, calls))| {
            let (recall_mean, recall_stderr) = mean_stderr(recalls);
            let (mean_calls_used, _) = mean_stderr(calls);
            ReportRow {
                method: method.clone(),
                k: *k,
                m: *m,
                recall_mean,
                recall_stderr,
                mean_calls_used,
                n_samples: recalls.len(),
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        a.method
            .cmp(&b.method)
            .then(a.k.cmp(&b.k))
            .then(a.m.cmp(&b.m))
    });
    rows
}

/// Artifacts of one seeded indexing run.
pub struct IndexedBenchmark {
    pub oracle: crate::scorer::synthetic::SyntheticOracle,
    pub base_queries: EmbeddingMatrix,
    pub base_items: EmbeddingMatrix,
    pub item_embs: EmbeddingMatrix,
    pub model: Option<MfModel>,
    pub train_summary: Option<TrainSummary>,
    pub timing: TimingBreakdown,
    pub g: Option<SparseScoreMatrix>,
}

/// True factors plus i.i.d. Gaussian noise: the benchmark's stand-in for
/// ingested base encoder embeddings.
pub fn perturb_embeddings(m: &EmbeddingMatrix, noise: f64, seed: u64) -> Result<EmbeddingMatrix> {
    let mut r = rng::stream(seed);
    let data: Vec<f64> = m
        .data()
        .iter()
        .map(|&v| v + noise * rng::normal(&mut r))
        .collect();
    EmbeddingMatrix::new(m.rows(), m.dim(), m.role(), data)
}

/// Build one seed of the synthetic benchmark: oracle, base embeddings,
/// sparse matrix and factorization per the index spec.
pub fn build_benchmark(spec: &SyntheticBenchmarkSpec, seed: u64) -> Result<IndexedBenchmark> {
    spec.validate()?;
    let mut oracle_spec = spec.oracle;
    oracle_spec.seed = rng::splitmix64(spec.oracle.seed ^ seed);
    let mut timing = TimingBreakdown::default();

    let t = Instant::now();
    let (oracle, true_q, true_i) = crate::scorer::synthetic::make_synthetic_oracle(oracle_spec)?;
    let (base_q, base_i) = if spec.base_noise > 0.0 {
        (
            perturb_embeddings(
                &true_q,
                spec.base_noise,
                rng::derive_seed(seed, "base-noise-q"),
            )?,
            perturb_embeddings(
                &true_i,
                spec.base_noise,
                rng::derive_seed(seed, "base-noise-i"),
            )?,
        )
    } else {
        (true_q, true_i)
    };
    timing.embed_base_seconds = t.elapsed().as_secs_f64();

    let Some(index) = &spec.index else {
        let item_embs = base_i.clone();
        return Ok(IndexedBenchmark {
            oracle,
            base_queries: base_q,
            base_items: base_i,
            item_embs,
            model: None,
            train_summary: None,
            timing,
            g: None,
        });
    };

    let train_q = base_q.slice_rows(0, spec.n_train_queries)?;
    let t = Instant::now();
    let gspec = GBuildSpec {
        strategy: index.strategy,
        k_d: index.k_d,
        seed: rng::derive_seed(seed, "gbuild"),
        n_queries: spec.n_train_queries,
        n_items: spec.oracle.n_items,
        base_query_embs: Some(train_q.clone()),
        base_item_embs: Some(base_i.clone()),
        normalize_fit_queries: None,
        batch_size: DEFAULT_SCORE_BATCH,
    };
    let built = build_sparse_matrix(&gspec, &oracle, 1)?;
    timing.build_g_seconds = t.elapsed().as_secs_f64();

    let mut hyper = index.hyper;
    hyper.seed = rng::derive_seed(seed, "mf-train");
    let (init_u, init_v) = match index.mf_init {
        MfInit::Base => (train_q.clone(), base_i.clone()),
        MfInit::Random { std } => {
            let mut r = rng::stream(rng::derive_seed(seed, "mf-init"));
            (
                EmbeddingMatrix::random_normal(
                    spec.n_train_queries,
                    hyper.dim,
                    EmbeddingRole::Query,
                    std,
                    &mut r,
                )?,
                EmbeddingMatrix::random_normal(
                    spec.oracle.n_items,
                    hyper.dim,
                    EmbeddingRole::Item,
                    std,
                    &mut r,
                )?,
            )
        }
    };

    let t = Instant::now();
    let (model, summary) = match index.mf_kind {
        MfKind::Transductive => train_transductive(&built.g, &init_u, &init_v, &hyper)?,
        MfKind::Inductive => train_inductive(&built.g, &train_q, &base_i, &hyper)?,
    };
    timing.train_seconds = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let item_embs = embed_items(&model)?;
    timing.embed_items_seconds = t.elapsed().as_secs_f64();

    Ok(IndexedBenchmark {
        oracle,
        base_queries: base_q,
        base_items: base_i,
        item_embs,
        model: Some(model),
        train_summary: Some(summary),
        timing,
        g: Some(built.g),
    })
}

/// Run the full experiment and pool samples across seeds; recall
/// statistics are over queries.
///
/// Synthetic benchmarks are indexed per seed (oracle, sparse matrix,
/// factorization) before evaluation; file benchmarks load their artifacts
/// once and the seeds only vary search randomness.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<RecallReport> {
    spec.validate()?;
    match &spec.benchmark {
        BenchmarkSource::Synthetic(bench) => run_synthetic_experiment(spec, bench),
        BenchmarkSource::Files(files) => run_file_experiment(spec, files),
    }
}

fn run_synthetic_experiment(
    spec: &ExperimentSpec,
    benchmark: &SyntheticBenchmarkSpec,
) -> Result<RecallReport> {
    let kmax = *spec.k_values.iter().max().expect("validated");
    let mut pooled: Samples = BTreeMap::new();
    let mut timing = TimingBreakdown::default();
    let mut train_summaries = Vec::new();

    for &seed in &spec.seeds {
        let bench = build_benchmark(benchmark, seed)?;
        timing.embed_base_seconds += bench.timing.embed_base_seconds;
        timing.build_g_seconds += bench.timing.build_g_seconds;
        timing.train_seconds += bench.timing.train_seconds;
        timing.embed_items_seconds += bench.timing.embed_items_seconds;
        if let Some(s) = bench.train_summary {
            train_summaries.push(s);
        }

        let test_queries: Vec<QueryId> = (benchmark.n_train_queries
            ..benchmark.n_train_queries + spec.n_test_queries)
            .map(QueryId)
            .collect();

        // parametric query embedding: base factor row, passed through the
        // query tower for inductive models
        let u_params: Vec<Vec<f64>> = test_queries
            .iter()
            .map(|&q| {
                let base = bench.base_queries.row(q.0);
                match &bench.model {
                    Some(m) if m.kind == MfKind::Inductive => embed_query(m, base),
                    _ => Ok(base.to_vec()),
                }
            })
            .collect::<Result<Vec<_>>>()?;

        let gold = gold_for_queries(
            &bench.oracle,
            &test_queries,
            benchmark.oracle.n_items,
            kmax,
            spec.workers,
        )?;

        let inputs = EvalInputs {
            scorer: &bench.oracle,
            item_embs: &bench.item_embs,
            test_queries: &test_queries,
            u_params: Some(&u_params),
            init_rankings: None,
            gold: &gold,
        };
        let samples = evaluate_methods(
            &inputs,
            &spec.methods,
            &spec.budgets,
            &spec.k_values,
            rng::derive_seed(seed, "eval"),
            spec.workers,
        )?;
        merge_samples(&mut pooled, samples);
    }

    if !spec.timers {
        timing = TimingBreakdown::default();
    }
    Ok(RecallReport {
        rows: rows_from_samples(&pooled),
        timing,
        train_summaries,
    })
}

fn run_file_experiment(spec: &ExperimentSpec, files: &FileBenchmarkSpec) -> Result<RecallReport> {
    let kmax = *spec.k_values.iter().max().expect("validated");
    let scorer = files.scorer.connect()?;
    let item_embs = EmbeddingMatrix::load(&files.item_embs)?;
    let query_embs = EmbeddingMatrix::load(&files.query_embs)?;
    if query_embs.dim() != item_embs.dim() {
        return Err(Error::DimensionMismatch(format!(
            "query dim {} != item dim {}",
            query_embs.dim(),
            item_embs.dim()
        )));
    }
    if let Some(n) = scorer.num_items() {
        if n != item_embs.rows() {
            return Err(Error::InvalidSpec(format!(
                "scorer covers {n} items but the embedding file has {}",
                item_embs.rows()
            )));
        }
    }
    if spec.n_test_queries > query_embs.rows() {
        return Err(Error::InvalidSpec(format!(
            "{} test queries requested, query file has {}",
            spec.n_test_queries,
            query_embs.rows()
        )));
    }

    let test_queries: Vec<QueryId> = (0..spec.n_test_queries)
        .map(|i| QueryId(files.query_id_offset + i))
        .collect();
    let u_params: Vec<Vec<f64>> = (0..spec.n_test_queries)
        .map(|i| query_embs.row(i).to_vec())
        .collect();
    let gold_map = make_gold(
        scorer.as_ref(),
        &test_queries,
        item_embs.rows(),
        kmax,
        files.gold_cache.as_deref(),
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
    let mut pooled: Samples = BTreeMap::new();
    for &seed in &spec.seeds {
        let samples = evaluate_methods(
            &inputs,
            &spec.methods,
            &spec.budgets,
            &spec.k_values,
            rng::derive_seed(seed, "eval"),
            spec.workers,
        )?;
        merge_samples(&mut pooled, samples);
    }
    Ok(RecallReport {
        rows: rows_from_samples(&pooled),
        timing: TimingBreakdown::default(),
        train_summaries: Vec::new(),
    })
}

fn merge_samples(pooled: &mut Samples, samples: Samples) {
    for (key, (recalls, calls)) in samples {
        let cell = pooled.entry(key).or_default();
        cell.0.extend(recalls);
        cell.1.extend(calls);
    }
}

fn gold_for_queries(
    scorer: &dyn Scorer,
    queries: &[QueryId],
    n_items: usize,
    k: usize,
    workers: usize,
) -> Result<Vec<TopKList>> {
    if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::BackendFailure(format!("thread pool: {e}")))?;
        pool.install(|| {
            queries
                .par_iter()
                .map(|&q| brute_force_knn(scorer, q, n_items, k))
                .collect()
        })
    } else {
        queries
            .iter()
            .map(|&q| brute_force_knn(scorer, q, n_items, k))
            .collect()
    }
}

/// Write the report as CSV plus a JSON mirror.
///
/// CSV columns: `method,k,m,recall_mean,recall_stderr,calls_used,index_seconds_total`,
/// sorted by (method, k, m).
pub fn emit_plotdata(report: &RecallReport, csv_path: &Path, json_path: &Path) -> Result<()> {
    let mut rows = report.rows.clone();
    rows.sort_by(|a, b| {
        a.method
            .cmp(&b.method)
            .then(a.k.cmp(&b.k))
            .then(a.m.cmp(&b.m))
    });
    let total = report.timing.total();
    let mut csv =
        String::from("method,k,m,recall_mean,recall_stderr,calls_used,index_seconds_total\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.method, r.k, r.m, r.recall_mean, r.recall_stderr, r.mean_calls_used, total
        ));
    }
    std::fs::write(csv_path, csv)?;
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Format(format!("encode report: {e}")))?;
    std::fs::write(json_path, json)?;
    Ok(())
}

/// The frozen desk-scale benchmark: 200 train + 200 test queries over
/// 2000 items, rank-8 scores in a 16-dimensional embedding space, base
/// embeddings perturbed at scale 0.8 (so first-stage retrieval is
/// imperfect, as with a real dual encoder on a new domain).
pub fn desk_benchmark(sigma: f64) -> SyntheticBenchmarkSpec {
    SyntheticBenchmarkSpec {
        oracle: crate::scorer::synthetic::SyntheticOracleSpec {
            n_queries: 400,
            n_items: 2000,
            rank: 8,
            dim: 16,
            sigma,
            seed: 0xa11ce,
        },
        n_train_queries: 200,
        base_noise: 0.8,
        index: None,
    }
}

/// Standard transductive index configuration for the desk benchmark.
pub fn desk_index_spec() -> IndexSpec {
    IndexSpec {
        strategy: GStrategy::QTopK,
        k_d: 100,
        mf_kind: MfKind::Transductive,
        hyper: MfHyperparams {
            dim: 16,
            learning_rate: 0.001,
            epochs: 30,
            batch_size: 256,
            seed: 0,
            max_wall_seconds: None,
            optimizer: crate::factorize::optim::OptimizerKind::default_adamw(),
            workers: 1,
        },
        mf_init: MfInit::Base,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scorer::synthetic::{make_synthetic_oracle, SyntheticOracleSpec};
    use std::sync::atomic::{AtomicUsize, Ordering};
    use tempfile::tempdir;

    fn list(pairs: &[(usize, f64)]) -> TopKList {
        TopKList::from_scores(pairs.len(), pairs.iter().map(|&(i, s)| (ItemId(i), s)))
    }

    #[test]
    fn recall_counts_intersection() {
        let gold = list(&[(1, 9.0), (2, 8.0), (3, 7.0)]);
        let retrieved = list(&[(2, 9.5), (3, 9.0), (4, 8.0)]);
        assert!((topk_recall_at_m(&gold, &retrieved).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(topk_recall_at_m(&gold, &gold).unwrap(), 1.0);
        let disjoint = list(&[(7, 1.0), (8, 0.5), (9, 0.25)]);
        assert_eq!(topk_recall_at_m(&gold, &disjoint).unwrap(), 0.0);
    }

    #[test]
    fn recall_truncates_retrieved_to_gold_length() {
        let gold = list(&[(1, 9.0)]);
        let retrieved = list(&[(2, 9.5), (1, 9.0)]);
        // only the method's best 1 counts against gold top-1
        assert_eq!(topk_recall_at_m(&gold, &retrieved).unwrap(), 0.0);
    }

    #[test]
    fn empty_gold_is_an_error() {
        let gold = TopKList::from_scores(0, std::iter::empty());
        let retrieved = list(&[(1, 1.0)]);
        assert!(topk_recall_at_m(&gold, &retrieved).is_err());
    }

    struct CountingScorer<S> {
        inner: S,
        calls: AtomicUsize,
    }

    impl<S: Scorer> Scorer for CountingScorer<S> {
        fn descriptor(&self) -> String {
            self.inner.descriptor()
        }
        fn score_batch(&self, q: QueryId, items: &[ItemId]) -> Result<Vec<f64>> {
            self.calls.fetch_add(items.len(), Ordering::Relaxed);
            self.inner.score_batch(q, items)
        }
        fn num_items(&self) -> Option<usize> {
            self.inner.num_items()
        }
    }

    #[test]
    fn gold_cache_round_trip_and_zero_recompute() {
        let (oracle, _, _) = make_synthetic_oracle(SyntheticOracleSpec {
            n_queries: 6,
            n_items: 40,
            rank: 3,
            dim: 3,
            sigma: 0.1,
            seed: 3,
        })
        .unwrap();
        let counting = CountingScorer {
            inner: oracle,
            calls: AtomicUsize::new(0),
        };
        let dir = tempdir().unwrap();
        let path = dir.path().join("gold.bin");
        let queries: Vec<QueryId> = (0..6).map(QueryId).collect();
        let first = make_gold(&counting, &queries, 40, 5, Some(&path)).unwrap();
        let after_first = counting.calls.load(Ordering::Relaxed);
        assert_eq!(after_first, 6 * 40);
        let second = make_gold(&counting, &queries, 40, 5, Some(&path)).unwrap();
        assert_eq!(counting.calls.load(Ordering::Relaxed), after_first);
        assert_eq!(first, second);
    }

    #[test]
    fn gold_matches_full_argsort() {
        let (oracle, u, v) = make_synthetic_oracle(SyntheticOracleSpec {
            n_queries: 4,
            n_items: 30,
            rank: 3,
            dim: 3,
            sigma: 0.0,
            seed: 9,
        })
        .unwrap();
        let gold = make_gold(&oracle, &[QueryId(2)], 30, 4, None).unwrap();
        let mut scored: Vec<(ItemId, f64)> = (0..30)
            .map(|i| {
                (
                    ItemId(i),
                    u.row(2).iter().zip(v.row(i)).map(|(a, b)| a * b).sum(),
                )
            })
            .collect();
        scored.sort_by(crate::topk::rank_order);
        let expect: Vec<ItemId> = scored.iter().take(4).map(|e| e.0).collect();
        let got: Vec<ItemId> = gold[&QueryId(2)].ids().collect();
        assert_eq!(got, expect);
    }

    fn tiny_experiment(methods: Vec<MethodSpec>) -> ExperimentSpec {
        ExperimentSpec {
            benchmark: BenchmarkSource::Synthetic(SyntheticBenchmarkSpec {
                oracle: SyntheticOracleSpec {
                    n_queries: 30,
                    n_items: 120,
                    rank: 4,
                    dim: 8,
                    sigma: 0.1,
                    seed: 77,
                },
                n_train_queries: 15,
                base_noise: 0.0,
                index: None,
            }),
            methods,
            budgets: vec![10, 20],
            k_values: vec![1, 5],
            n_test_queries: 10,
            seeds: vec![1, 2],
            timers: true,
            workers: 1,
        }
    }

    #[test]
    fn exact_method_attains_full_recall() {
        let spec = tiny_experiment(vec![MethodSpec {
            name: "exact".into(),
            kind: MethodKind::Exact,
        }]);
        let report = run_experiment(&spec).unwrap();
        for row in &report.rows {
            assert_eq!(row.recall_mean, 1.0, "{row:?}");
            assert_eq!(row.m, 120);
            assert_eq!(row.n_samples, 20); // 10 queries x 2 seeds
        }
    }

    #[test]
    fn experiment_is_reproducible_and_bounded() {
        let spec = tiny_experiment(vec![
            MethodSpec {
                name: "rnr".into(),
                kind: MethodKind::Rnr,
            },
            MethodSpec {
                name: "axn".into(),
                kind: MethodKind::axn(2, 0.0, InitPolicy::EmbTopK),
            },
        ]);
        let a = run_experiment(&spec).unwrap();
        let b = run_experiment(&spec).unwrap();
        assert_eq!(a.rows, b.rows);
        for row in &a.rows {
            assert!((0.0..=1.0).contains(&row.recall_mean), "{row:?}");
            assert!(row.mean_calls_used <= row.m as f64);
        }
        // every (method, k, m) combination is present
        assert_eq!(a.rows.len(), 2 * 2 * 2);
    }

    #[test]
    fn parallel_experiment_matches_sequential() {
        let mut spec = tiny_experiment(vec![MethodSpec {
            name: "axn".into(),
            kind: MethodKind::axn(2, 0.0, InitPolicy::EmbTopK),
        }]);
        let seq = run_experiment(&spec).unwrap();
        spec.workers = 4;
        let par = run_experiment(&spec).unwrap();
        assert_eq!(seq.rows, par.rows);
    }

    #[test]
    fn indexed_benchmark_runs_end_to_end() {
        let mut spec = tiny_experiment(vec![MethodSpec {
            name: "axn-mf".into(),
            kind: MethodKind::axn(2, 0.0, InitPolicy::EmbTopK),
        }]);
        let BenchmarkSource::Synthetic(bench) = &mut spec.benchmark else {
            unreachable!()
        };
        bench.index = Some(IndexSpec {
            strategy: GStrategy::QTopK,
            k_d: 10,
            mf_kind: MfKind::Transductive,
            hyper: MfHyperparams {
                dim: 8,
                learning_rate: 0.005,
                epochs: 5,
                batch_size: 64,
                seed: 0,
                max_wall_seconds: None,
                optimizer: crate::factorize::optim::OptimizerKind::default_adamw(),
                workers: 1,
            },
            mf_init: MfInit::Base,
        });
        spec.seeds = vec![3];
        let report = run_experiment(&spec).unwrap();
        assert_eq!(report.train_summaries.len(), 1);
        assert!(report.timing.total() > 0.0);
        for row in &report.rows {
            assert!((0.0..=1.0).contains(&row.recall_mean));
        }
    }

    #[test]
    fn plotdata_round_trips_through_csv() {
        let spec = tiny_experiment(vec![MethodSpec {
            name: "rnr".into(),
            kind: MethodKind::Rnr,
        }]);
        let report = run_experiment(&spec).unwrap();
        let dir = tempdir().unwrap();
        let csv_path = dir.path().join("report.csv");
        let json_path = dir.path().join("report.json");
        emit_plotdata(&report, &csv_path, &json_path).unwrap();

        let csv = std::fs::read_to_string(&csv_path).unwrap();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "method,k,m,recall_mean,recall_stderr,calls_used,index_seconds_total"
        );
        let data_rows: Vec<&str> = lines.collect();
        assert_eq!(data_rows.len(), report.rows.len());
        for (line, row) in data_rows.iter().zip(&report.rows) {
            let cols: Vec<&str> = line.split(',').collect();
            assert_eq!(cols[0], row.method);
            assert_eq!(cols[1].parse::<usize>().unwrap(), row.k);
            assert_eq!(cols[2].parse::<usize>().unwrap(), row.m);
            assert_eq!(cols[3].parse::<f64>().unwrap(), row.recall_mean);
        }
        // rows sorted by (method, k, m)
        let mut sorted = report.rows.clone();
        sorted.sort_by(|a, b| {
            a.method
                .cmp(&b.method)
                .then(a.k.cmp(&b.k))
                .then(a.m.cmp(&b.m))
        });
        assert_eq!(sorted, report.rows);

        let back: RecallReport =
            serde_json::from_str(&std::fs::read_to_string(&json_path).unwrap()).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn file_benchmark_runs_from_artifacts() {
        use crate::scorer::source::ScorerSource;
        // materialize a small corpus: embeddings plus a fully observed
        // score-matrix file used as the oracle
        let dir = tempdir().unwrap();
        let (oracle, u, v) = make_synthetic_oracle(SyntheticOracleSpec {
            n_queries: 12,
            n_items: 40,
            rank: 3,
            dim: 3,
            sigma: 0.2,
            seed: 404,
        })
        .unwrap();
        let mut entries = Vec::new();
        for q in 0..12 {
            let items: Vec<ItemId> = (0..40).map(ItemId).collect();
            let scores = oracle.score_batch(QueryId(q), &items).unwrap();
            entries.extend(items.iter().zip(scores).map(|(&item, score)| ScoreEntry {
                query: QueryId(q),
                item,
                score,
            }));
        }
        SparseScoreMatrix::new(12, 40, entries)
            .unwrap()
            .save(&dir.path().join("scores.bin"))
            .unwrap();
        v.save(&dir.path().join("items.emb")).unwrap();
        // last 5 queries are the test split
        u.slice_rows(7, 12)
            .unwrap()
            .save(&dir.path().join("queries.emb"))
            .unwrap();

        let spec = ExperimentSpec {
            benchmark: BenchmarkSource::Files(FileBenchmarkSpec {
                item_embs: dir.path().join("items.emb"),
                query_embs: dir.path().join("queries.emb"),
                query_id_offset: 7,
                scorer: ScorerSource::MatrixFile(dir.path().join("scores.bin")),
                gold_cache: Some(dir.path().join("gold.bin")),
            }),
            methods: vec![
                MethodSpec {
                    name: "exact".into(),
                    kind: MethodKind::Exact,
                },
                MethodSpec {
                    name: "axn".into(),
                    kind: MethodKind::axn(2, 0.0, InitPolicy::EmbTopK),
                },
            ],
            budgets: vec![10],
            k_values: vec![1, 3],
            n_test_queries: 5,
            seeds: vec![9],
            timers: false,
            workers: 1,
        };
        let report = run_experiment(&spec).unwrap();
        assert!(dir.path().join("gold.bin").exists());
        for row in report.rows.iter().filter(|r| r.method == "exact") {
            assert_eq!(row.recall_mean, 1.0);
        }
        for row in &report.rows {
            assert!((0.0..=1.0).contains(&row.recall_mean));
            assert_eq!(row.n_samples, 5);
        }
        // second run reuses the cached gold labels and reproduces the rows
        let again = run_experiment(&spec).unwrap();
        assert_eq!(again.rows, report.rows);
    }

    #[test]
    fn invalid_experiments_rejected() {
        let mut spec = tiny_experiment(vec![MethodSpec {
            name: "rnr".into(),
            kind: MethodKind::Rnr,
        }]);
        spec.k_values = vec![50]; // exceeds smallest budget 10
        assert!(run_experiment(&spec).is_err());
        let mut spec = tiny_experiment(vec![]);
        spec.methods = vec![];
        assert!(run_experiment(&spec).is_err());
        let mut spec = tiny_experiment(vec![MethodSpec {
            name: "rnr".into(),
            kind: MethodKind::Rnr,
        }]);
        spec.n_test_queries = 1000;
        assert!(run_experiment(&spec).is_err());
    }
}
