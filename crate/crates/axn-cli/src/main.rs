use anyhow::anyhow;
use axn_cli::config::PipelineConfig;
use axn_cli::pipeline::{coverage_json, run_pipeline};
use axn_cli::provenance;
use axn_cli::scorer_spec::parse_scorer;
use axn_cli::{CliError, EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME};
use axn_core::evalharness::{
    desk_benchmark, emit_plotdata, make_gold, run_experiment, BenchmarkSource, ExperimentSpec,
    FileBenchmarkSpec, IndexSpec,
};
use axn_core::factorize::{train_inductive, train_transductive, MfHyperparams};
use axn_core::gbuilder::{build_sparse_matrix, GBuildSpec, GStrategy};
use axn_core::ids::{ItemId, QueryId};
use axn_core::matrix::{EmbeddingMatrix, EmbeddingRole};
use axn_core::retrieve::{axn_search, AxnConfig, InitPolicy};
use axn_core::rng;
use axn_core::scorer::synthetic::{make_synthetic_oracle, SyntheticOracleSpec};
use axn_core::sparse::SparseScoreMatrix;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "axn",
    version,
    about = "Budgeted k-NN search with an expensive black-box scorer"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Materialize a seeded synthetic benchmark (embeddings, gold labels).
    SynthGen(SynthGenArgs),
    /// Build the sparse train score matrix.
    BuildG(BuildGArgs),
    /// Train a factorization model on a sparse score matrix.
    TrainMf(TrainMfArgs),
    /// Budgeted search for a set of queries.
    Search(SearchArgs),
    /// Run a recall experiment from a config file.
    Eval(EvalArgs),
    /// Full pipeline: synth-gen, build-g, train-mf, eval.
    Pipeline(PipelineArgs),
    /// Convert between the binary and CSV file formats.
    Convert(ConvertArgs),
}

#[derive(Args)]
struct SynthGenArgs {
    /// Pipeline config file (corpus + seed sections are used).
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BuildGArgs {
    #[arg(long, value_enum)]
    strategy: StrategyArg,
    #[arg(long)]
    kd: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Query embedding file (train queries).
    #[arg(long)]
    queries: PathBuf,
    /// Item embedding file.
    #[arg(long)]
    items: PathBuf,
    /// Scorer backend spec (oracle:<file>, synth:<file>, exec:<command>).
    #[arg(long)]
    scorer: String,
    #[arg(long)]
    out: PathBuf,
    /// Fit a score normalizer on the first N train queries.
    #[arg(long)]
    normalize: bool,
    #[arg(long, default_value_t = 100)]
    fit_queries: usize,
    #[arg(long, default_value_t = axn_core::gbuilder::DEFAULT_SCORE_BATCH)]
    batch_size: usize,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    QTopk,
    QRandom,
    ITopk,
}

impl StrategyArg {
    fn to_core(self) -> GStrategy {
        match self {
            StrategyArg::QTopk => GStrategy::QTopK,
            StrategyArg::QRandom => GStrategy::QRandom,
            StrategyArg::ITopk => GStrategy::ITopKQueries,
        }
    }
}

#[derive(Args)]
struct TrainMfArgs {
    #[arg(long, value_enum)]
    kind: MfKindArg,
    /// Sparse score matrix file.
    #[arg(long)]
    g: PathBuf,
    /// Initial / base query embeddings.
    #[arg(long)]
    init_q: PathBuf,
    /// Initial / base item embeddings.
    #[arg(long)]
    init_i: PathBuf,
    #[arg(long)]
    dim: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    max_wall_seconds: Option<f64>,
    /// Output model directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum MfKindArg {
    Trns,
    Ind,
}

#[derive(Args)]
struct SearchArgs {
    /// Item embedding file.
    #[arg(long)]
    items: PathBuf,
    #[arg(long)]
    scorer: String,
    #[arg(long)]
    budget: usize,
    #[arg(long, default_value_t = 5)]
    rounds: usize,
    #[arg(long, default_value_t = 0.0)]
    lambda: f64,
    /// Init policy: random, emb, or ranking:<id-list file>.
    #[arg(long, default_value = "emb")]
    init: String,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Query embedding file (row index + offset = scorer query id) or a
    /// text file with one query id per line.
    #[arg(long)]
    queries: PathBuf,
    /// Scorer query id of the first embedding row.
    #[arg(long, default_value_t = 0)]
    query_offset: usize,
    #[arg(long)]
    shortlist_size: Option<usize>,
    #[arg(long, default_value_t = axn_core::retrieve::DEFAULT_PINV_TOLERANCE)]
    pinv_tolerance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Pipeline config file.
    #[arg(long)]
    spec: PathBuf,
    /// Output directory for report.csv / report.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Rerun stages even when their outputs are fresh.
    #[arg(long)]
    force: bool,
    /// Override the config's worker count.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct ConvertArgs {
    #[command(subcommand)]
    what: ConvertCmd,
}

#[derive(Subcommand)]
enum ConvertCmd {
    /// Embedding binary -> CSV.
    EmbToCsv { input: PathBuf, output: PathBuf },
    /// CSV -> embedding binary.
    CsvToEmb {
        input: PathBuf,
        output: PathBuf,
        #[arg(long, value_enum, default_value = "item")]
        role: RoleArg,
    },
    /// Sparse score matrix binary -> CSV.
    GToCsv { input: PathBuf, output: PathBuf },
    /// CSV -> sparse score matrix binary.
    CsvToG {
        input: PathBuf,
        output: PathBuf,
        /// Explicit `queries x items` shape, e.g. 200x2000 (default: max
        /// id + 1).
        #[arg(long)]
        shape: Option<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum RoleArg {
    Query,
    Item,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::from(EXIT_OK),
        Err(CliError::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Command::SynthGen(args) => synth_gen(args),
        Command::BuildG(args) => build_g(args),
        Command::TrainMf(args) => train_mf(args),
        Command::Search(args) => search(args),
        Command::Eval(args) => eval(args),
        Command::Pipeline(args) => {
            let cfg = PipelineConfig::from_path(&args.config)?;
            let cfg = match args.workers {
                Some(w) => PipelineConfig { workers: w, ..cfg },
                None => cfg,
            };
            let outcome = run_pipeline(&cfg, Some(&args.config), &args.out, args.force)?;
            println!(
                "{}",
                json!({
                    "report_json": outcome.report_json,
                    "report_csv": outcome.report_csv,
                    "stages_run": outcome.stages_run,
                    "stages_skipped": outcome.stages_skipped,
                })
            );
            Ok(())
        }
        Command::Convert(args) => convert(args),
    }
}

fn synth_gen(args: SynthGenArgs) -> Result<(), CliError> {
    let cfg = PipelineConfig::from_path(&args.spec)?;
    std::fs::create_dir_all(&args.out)?;
    let oracle_spec = SyntheticOracleSpec {
        n_queries: cfg.corpus.n_train_queries + cfg.corpus.n_test_queries,
        n_items: cfg.corpus.n_items,
        rank: cfg.corpus.rank,
        dim: cfg.corpus.dim,
        sigma: cfg.corpus.sigma,
        seed: rng::derive_seed(cfg.seed, "oracle"),
    };
    let (oracle, true_q, true_i) = make_synthetic_oracle(oracle_spec)?;
    let base_q = axn_core::evalharness::perturb_embeddings(
        &true_q,
        cfg.corpus.base_noise,
        rng::derive_seed(cfg.seed, "base-noise-q"),
    )?;
    let base_i = axn_core::evalharness::perturb_embeddings(
        &true_i,
        cfg.corpus.base_noise,
        rng::derive_seed(cfg.seed, "base-noise-i"),
    )?;
    std::fs::write(
        args.out.join("oracle.json"),
        serde_json::to_string_pretty(&oracle_spec).map_err(|e| CliError::Runtime(anyhow!(e)))?,
    )?;
    base_q.save(&args.out.join("base_q.emb"))?;
    base_i.save(&args.out.join("base_i.emb"))?;
    let kmax = *cfg.eval.k_values.iter().max().expect("validated");
    let test_queries: Vec<QueryId> = (cfg.corpus.n_train_queries
        ..cfg.corpus.n_train_queries + cfg.corpus.n_test_queries)
        .map(QueryId)
        .collect();
    let gold_path = args.out.join("gold.bin");
    if gold_path.exists() {
        std::fs::remove_file(&gold_path)?;
    }
    make_gold(
        &oracle,
        &test_queries,
        cfg.corpus.n_items,
        kmax,
        Some(&gold_path),
    )?;

    // the sparse train matrix, per the gbuild section
    let train_q = base_q.slice_rows(0, cfg.corpus.n_train_queries)?;
    let gspec = GBuildSpec {
        strategy: cfg.gbuild.strategy,
        k_d: cfg.gbuild.kd,
        seed: rng::derive_seed(cfg.seed, "gbuild"),
        n_queries: cfg.corpus.n_train_queries,
        n_items: cfg.corpus.n_items,
        base_query_embs: Some(train_q),
        base_item_embs: Some(base_i.clone()),
        normalize_fit_queries: cfg.gbuild.normalize.then_some(cfg.gbuild.fit_queries),
        batch_size: cfg.scorer.batch_size,
    };
    let built = build_sparse_matrix(&gspec, &oracle, cfg.workers)?;
    let g_path = args.out.join("g.bin");
    built.g.save(&g_path)?;

    println!(
        "{}",
        json!({
            "oracle": args.out.join("oracle.json"),
            "base_q": args.out.join("base_q.emb"),
            "base_i": args.out.join("base_i.emb"),
            "gold": gold_path,
            "g": g_path,
            "nnz": built.g.nnz(),
            "n_queries": oracle_spec.n_queries,
            "n_items": oracle_spec.n_items,
        })
    );
    Ok(())
}

fn build_g(args: BuildGArgs) -> Result<(), CliError> {
    let base_q = EmbeddingMatrix::load(&args.queries)?;
    let base_i = EmbeddingMatrix::load(&args.items)?;
    let scorer = parse_scorer(&args.scorer)?;
    let spec = GBuildSpec {
        strategy: args.strategy.to_core(),
        k_d: args.kd,
        seed: args.seed,
        n_queries: base_q.rows(),
        n_items: base_i.rows(),
        base_query_embs: Some(base_q),
        base_item_embs: Some(base_i),
        normalize_fit_queries: args.normalize.then_some(args.fit_queries),
        batch_size: args.batch_size,
    };
    let built = build_sparse_matrix(&spec, scorer.as_ref(), args.workers)?;
    built.g.save(&args.out)?;
    if let Some(n) = &built.normalizer {
        let path = args.out.with_extension("normalizer.json");
        std::fs::write(
            &path,
            serde_json::to_string_pretty(n).map_err(|e| CliError::Runtime(anyhow!(e)))?,
        )?;
    }
    println!("{}", coverage_json(&built.g));
    Ok(())
}

fn train_mf(args: TrainMfArgs) -> Result<(), CliError> {
    let g = SparseScoreMatrix::load(&args.g)?;
    let init_q = EmbeddingMatrix::load(&args.init_q)?;
    let init_i = EmbeddingMatrix::load(&args.init_i)?;
    let hyper = MfHyperparams {
        dim: args.dim,
        learning_rate: args.lr,
        epochs: args.epochs,
        batch_size: args.batch_size,
        seed: args.seed,
        max_wall_seconds: args.max_wall_seconds,
        optimizer: axn_core::factorize::optim::OptimizerKind::default_adamw(),
        workers: 1,
    };
    let (model, summary) = match args.kind {
        MfKindArg::Trns => train_transductive(&g, &init_q, &init_i, &hyper)?,
        MfKindArg::Ind => train_inductive(&g, &init_q, &init_i, &hyper)?,
    };
    model.save_dir(&args.out)?;
    println!(
        "{}",
        json!({
            "model_dir": args.out,
            "epochs_run": summary.epochs_run,
            "initial_loss": summary.initial_loss,
            "final_loss": summary.final_loss,
            "wall_seconds": summary.wall_seconds,
        })
    );
    Ok(())
}

fn parse_init(init: &str) -> Result<(InitPolicy, Option<Vec<ItemId>>), CliError> {
    match init {
        "random" => Ok((InitPolicy::Random, None)),
        "emb" => Ok((InitPolicy::EmbTopK, None)),
        other => {
            let path = other.strip_prefix("ranking:").ok_or_else(|| {
                CliError::Config(format!(
                    "unknown init `{other}` (expected random, emb or ranking:<file>)"
                ))
            })?;
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("ranking file {path}: {e}")))?;
            let ids = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| {
                    l.trim()
                        .parse::<usize>()
                        .map(ItemId)
                        .map_err(|e| CliError::Config(format!("ranking file {path}: {e}")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok((InitPolicy::PrecomputedRanking, Some(ids)))
        }
    }
}

fn search(args: SearchArgs) -> Result<(), CliError> {
    let items = EmbeddingMatrix::load(&args.items)?;
    let scorer = parse_scorer(&args.scorer)?;
    let (init, ranking) = parse_init(&args.init)?;
    if !(0.0..=1.0).contains(&args.lambda) {
        return Err(CliError::Config(format!(
            "lambda {} outside [0, 1]",
            args.lambda
        )));
    }

    // queries: an embedding file, or a plain id list
    let (query_ids, u_params): (Vec<QueryId>, Option<Vec<Vec<f64>>>) =
        match EmbeddingMatrix::load(&args.queries) {
            Ok(m) => {
                let ids = (0..m.rows())
                    .map(|r| QueryId(args.query_offset + r))
                    .collect();
                let params = m.iter_rows().map(|r| r.to_vec()).collect();
                (ids, Some(params))
            }
            Err(axn_core::Error::Format(_)) => {
                let text = std::fs::read_to_string(&args.queries)?;
                let ids = text
                    .lines()
                    .filter(|l| !l.trim().is_empty())
                    .map(|l| {
                        l.trim()
                            .parse::<usize>()
                            .map(QueryId)
                            .map_err(|e| CliError::Config(format!("query id list: {e}")))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                (ids, None)
            }
            Err(e) => return Err(e.into()),
        };
    if init == InitPolicy::EmbTopK && u_params.is_none() {
        return Err(CliError::Config(
            "init=emb needs an embedding file for --queries".into(),
        ));
    }

    let mut results = Vec::with_capacity(query_ids.len());
    for (idx, &q) in query_ids.iter().enumerate() {
        let cfg = AxnConfig {
            budget: args.budget,
            rounds: args.rounds,
            k_s: None,
            lambda: args.lambda,
            init,
            shortlist_size: args.shortlist_size,
            pinv_tolerance: args.pinv_tolerance,
            seed: rng::splitmix64(args.seed ^ q.0 as u64),
            keep_approx_scores: false,
        };
        let u = u_params.as_ref().map(|p| p[idx].as_slice());
        let res = axn_search(
            &cfg,
            &items,
            scorer.as_ref(),
            q,
            args.k,
            u,
            ranking.as_deref(),
            None,
        )?;
        results.push(json!({
            "query_id": q,
            "calls_used": res.calls_used,
            "topk": res.topk,
            "trace": res.trace,
        }));
    }
    let prov = provenance::provenance(
        &json!({
            "budget": args.budget, "rounds": args.rounds, "lambda": args.lambda,
            "init": args.init, "k": args.k, "seed": args.seed,
        }),
        args.seed,
        &[args.items.as_path(), args.queries.as_path()],
    )?;
    let mut body = serde_json::to_string_pretty(&json!({
        "provenance": prov,
        "results": results,
    }))
    .map_err(|e| CliError::Runtime(anyhow!(e)))?;
    body.push('\n');
    std::fs::write(&args.out, body)?;
    println!("{}", json!({"out": args.out, "queries": query_ids.len()}));
    Ok(())
}

fn eval(args: EvalArgs) -> Result<(), CliError> {
    let cfg = PipelineConfig::from_path(&args.spec)?;
    std::fs::create_dir_all(&args.out)?;
    let spec = experiment_spec_from_config(&cfg)?;
    let report = run_experiment(&spec)?;
    let csv_path = args.out.join("report.csv");
    let json_path = args.out.join("report.json");
    emit_plotdata(&report, &csv_path, &json_path)?;
    println!(
        "{}",
        json!({"report_csv": csv_path, "report_json": json_path, "rows": report.rows.len()})
    );
    Ok(())
}

fn experiment_spec_from_config(cfg: &PipelineConfig) -> Result<ExperimentSpec, CliError> {
    let seeds: Vec<u64> = (0..cfg.eval.n_seeds)
        .map(|i| rng::derive_seed(cfg.seed, &format!("run-{i}")))
        .collect();

    if let Some(files) = &cfg.files {
        let scorer = axn_core::scorer::source::ScorerSource::parse(&cfg.scorer.backend)
            .map_err(|e| CliError::Config(format!("{e}")))?;
        return Ok(ExperimentSpec {
            benchmark: BenchmarkSource::Files(FileBenchmarkSpec {
                item_embs: files.item_embs.clone(),
                query_embs: files.query_embs.clone(),
                query_id_offset: files.query_id_offset,
                scorer,
                gold_cache: files.gold_cache.clone(),
            }),
            methods: cfg.methods(),
            budgets: cfg.eval.budgets.clone(),
            k_values: cfg.eval.k_values.clone(),
            n_test_queries: cfg.corpus.n_test_queries,
            seeds,
            timers: cfg.eval.timers,
            workers: cfg.workers,
        });
    }

    let index = cfg.mf.as_ref().map(|mf| IndexSpec {
        strategy: cfg.gbuild.strategy,
        k_d: cfg.gbuild.kd,
        mf_kind: mf.kind,
        hyper: MfHyperparams {
            dim: cfg.mf_dim(),
            learning_rate: mf.learning_rate,
            epochs: mf.epochs,
            batch_size: mf.batch_size,
            seed: 0, // replaced per run seed by the experiment driver
            max_wall_seconds: mf.max_wall_seconds,
            optimizer: cfg.optimizer(),
            workers: 1,
        },
        mf_init: mf.init.to_core(),
    });
    let mut benchmark = desk_benchmark(cfg.corpus.sigma);
    benchmark.oracle.n_queries = cfg.corpus.n_train_queries + cfg.corpus.n_test_queries;
    benchmark.oracle.n_items = cfg.corpus.n_items;
    benchmark.oracle.rank = cfg.corpus.rank;
    benchmark.oracle.dim = cfg.corpus.dim;
    benchmark.oracle.seed = rng::derive_seed(cfg.seed, "oracle");
    benchmark.n_train_queries = cfg.corpus.n_train_queries;
    benchmark.base_noise = cfg.corpus.base_noise;
    benchmark.index = index;
    Ok(ExperimentSpec {
        benchmark: BenchmarkSource::Synthetic(benchmark),
        methods: cfg.methods(),
        budgets: cfg.eval.budgets.clone(),
        k_values: cfg.eval.k_values.clone(),
        n_test_queries: cfg.corpus.n_test_queries,
        seeds,
        timers: cfg.eval.timers,
        workers: cfg.workers,
    })
}

fn convert(args: ConvertArgs) -> Result<(), CliError> {
    match args.what {
        ConvertCmd::EmbToCsv { input, output } => {
            EmbeddingMatrix::load(&input)?.save_csv(&output)?;
        }
        ConvertCmd::CsvToEmb {
            input,
            output,
            role,
        } => {
            let role = match role {
                RoleArg::Query => EmbeddingRole::Query,
                RoleArg::Item => EmbeddingRole::Item,
            };
            EmbeddingMatrix::load_csv(&input, role)?.save(&output)?;
        }
        ConvertCmd::GToCsv { input, output } => {
            SparseScoreMatrix::load(&input)?.save_csv(&output)?;
        }
        ConvertCmd::CsvToG {
            input,
            output,
            shape,
        } => {
            let shape = match shape {
                None => None,
                Some(s) => Some(parse_shape(&s)?),
            };
            SparseScoreMatrix::load_csv(&input, shape)?.save(&output)?;
        }
    }
    Ok(())
}

fn parse_shape(s: &str) -> Result<(usize, usize), CliError> {
    let (q, i) = s
        .split_once('x')
        .ok_or_else(|| CliError::Config(format!("shape `{s}` must look like 200x2000")))?;
    let parse = |tok: &str| {
        tok.trim()
            .parse::<usize>()
            .map_err(|e| CliError::Config(format!("shape `{s}`: {e}")))
    };
    Ok((parse(q)?, parse(i)?))
}
