//! `chasm`: build indexes, retrieve, fit routers, evaluate, time and probe.
//!
//! Exit status is 0 on success, 1 on a usage error and 2 on a data error.
//! Progress goes to stderr; stdout receives only the path of the final report.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "chasm", version, about = "Hybrid sparse/dense evidence retrieval workbench")]
struct Cli {
    /// Run data-parallel stages on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Inverted index management.
    Index {
        #[command(subcommand)]
        action: IndexAction,
    },
    /// Retrieve a ranked list for each query.
    Retrieve(RetrieveArgs),
    /// Router fitting.
    Router {
        #[command(subcommand)]
        action: RouterAction,
    },
    /// Evaluation reports.
    Eval {
        #[command(subcommand)]
        action: EvalAction,
    },
    /// Lexical probe.
    Probe {
        #[command(subcommand)]
        action: ProbeAction,
    },
    /// Dataset generation.
    Dataset {
        #[command(subcommand)]
        action: DatasetAction,
    },
}

#[derive(Subcommand, Debug)]
enum IndexAction {
    /// Build a BM25 index from a corpus JSONL file.
    Build(IndexBuildArgs),
}

#[derive(Subcommand, Debug)]
enum RouterAction {
    /// Fit a router on dev queries.
    Fit(RouterFitArgs),
}

#[derive(Subcommand, Debug)]
enum EvalAction {
    /// Gold ranks and MRR for every system; writes records for the other reports.
    Mrr(EvalMrrArgs),
    /// Paired bootstrap test between two systems of a records file.
    Bootstrap(EvalBootstrapArgs),
    /// Routing counts and improved/worse tallies from a routed records file.
    RoutingStats(RecordsArgs),
    /// Top-score histogram split by which retriever wins.
    Histogram(EvalHistogramArgs),
    /// Wall-clock timing with warm-up.
    Time(EvalTimeArgs),
}

#[derive(Subcommand, Debug)]
enum ProbeAction {
    /// Build probe targets (positive and negative term ordinals).
    Build(ProbeBuildArgs),
    /// Train probes over one or more seeds.
    Train(ProbeTrainArgs),
    /// Score a trained probe on a targets file.
    Metrics(ProbeMetricsArgs),
}

#[derive(Subcommand, Debug)]
enum DatasetAction {
    /// Write the synthetic retrieval workload and probe task.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct AnalyzerArgs {
    /// Replacement stopword list, one word per line.
    #[arg(long)]
    stopwords: Option<PathBuf>,
    /// Disable the plural stemmer.
    #[arg(long)]
    no_stem: bool,
}

#[derive(Args, Debug)]
struct IndexBuildArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Index file to write.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    analyzer: AnalyzerArgs,
    #[arg(long, default_value_t = chasm_core::sparse_index::DEFAULT_K1)]
    k1: f64,
    #[arg(long, default_value_t = chasm_core::sparse_index::DEFAULT_B)]
    b: f64,
}

#[derive(Args, Debug)]
struct DenseArgs {
    /// Document embeddings (EMB1); ids are read from the `.ids` sidecar.
    #[arg(long)]
    doc_emb: Option<PathBuf>,
    /// Query embeddings (EMB1), keyed by qid.
    #[arg(long)]
    query_emb: Option<PathBuf>,
    /// Injected latency per dense call, in milliseconds.
    #[arg(long, default_value_t = 0)]
    dense_delay_ms: u64,
}

#[derive(Args, Debug)]
struct EngineArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[command(flatten)]
    dense: DenseArgs,
    #[arg(long)]
    router: Option<PathBuf>,
    /// Ranked-list depth; defaults to the corpus size.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SystemArg {
    Sparse,
    Dense,
    Fusion,
    Hybrid,
}

#[derive(Args, Debug)]
struct RetrieveArgs {
    #[arg(long, value_enum)]
    system: SystemArg,
    #[command(flatten)]
    engine: EngineArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KindArg {
    Threshold,
    Logreg,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FeaturesArg {
    Sparse,
    Dense,
    Both,
}

#[derive(Args, Debug)]
struct RouterFitArgs {
    #[arg(long, value_enum)]
    kind: KindArg,
    #[arg(long, value_enum, default_value = "sparse")]
    features: FeaturesArg,
    /// full, or one of 1, 4, 16, 64.
    #[arg(long, default_value = "full", value_parser = ["full", "1", "4", "16", "64"])]
    topk_spec: String,
    #[command(flatten)]
    engine: EngineArgs,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 2000)]
    epochs: usize,
    #[arg(long, default_value_t = 0.0)]
    l2: f64,
    /// Router JSON to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalMrrArgs {
    #[command(flatten)]
    engine: EngineArgs,
    /// Also report bootstrap p-values against sparse and dense.
    #[arg(long)]
    bootstrap_iters: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RecordsArgs {
    /// Records JSONL written by `eval mrr`.
    #[arg(long)]
    records: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ColumnArg {
    Sparse,
    Dense,
    Fusion,
    Hybrid,
    Ceiling,
}

#[derive(Args, Debug)]
struct EvalBootstrapArgs {
    #[arg(long)]
    records: PathBuf,
    #[arg(long, value_enum)]
    a: ColumnArg,
    #[arg(long, value_enum)]
    b: ColumnArg,
    #[arg(long, default_value_t = 10_000)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalHistogramArgs {
    #[arg(long)]
    records: PathBuf,
    #[arg(long, default_value_t = 10)]
    bins: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalTimeArgs {
    #[arg(long, value_enum)]
    system: SystemArg,
    #[command(flatten)]
    engine: EngineArgs,
    /// Untimed queries run first, cycled from the query file.
    #[arg(long, default_value_t = 10)]
    warmup: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ProbeBuildArgs {
    /// Facts corpus JSONL.
    #[arg(long)]
    corpus: PathBuf,
    /// Training queries JSONL.
    #[arg(long)]
    queries: PathBuf,
    /// Dev queries JSONL.
    #[arg(long)]
    dev_queries: PathBuf,
    #[command(flatten)]
    analyzer: AnalyzerArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum InputArg {
    Tfidf,
    Dense,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ControlArg {
    None,
    RandEmbedding,
    RandLabel,
}

#[derive(Args, Debug)]
struct ProbeInputArgs {
    /// Directory written by `probe build`.
    #[arg(long)]
    probe_dir: PathBuf,
    #[arg(long, value_enum)]
    input: InputArg,
    /// Query embeddings for `--input dense`.
    #[arg(long)]
    query_emb: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ProbeTrainArgs {
    #[command(flatten)]
    inputs: ProbeInputArgs,
    #[arg(long, value_enum, default_value = "none")]
    control: ControlArg,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ProbeMetricsArgs {
    #[command(flatten)]
    inputs: ProbeInputArgs,
    /// Probe model JSON written by `probe train`.
    #[arg(long)]
    model: PathBuf,
    /// Training seed of the model; selects the same control draw as training.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    docs: usize,
    #[arg(long, default_value_t = 400)]
    queries: usize,
    /// Probe facts hold partner terms instead of the query's own terms.
    #[arg(long)]
    partner_facts: bool,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(path) => {
            println!("{}", path.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
