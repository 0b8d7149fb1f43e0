use std::collections::HashSet;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::time::Duration;

use chasm_core::corpus::{load_corpus, load_queries, write_jsonl, AnalyzerConfig, Query, Vocab};
use chasm_core::dense_store::EmbeddingStore;
use chasm_core::evaluation::{
    bootstrap_test, histogram_report, routing_report, system_rr, time_pipeline, RankRecord,
};
use chasm_core::parallel::{self, ExecMode};
use chasm_core::pipeline::{fit_router, DenseSide, Engine, FitDetail, RouterKind, System};
use chasm_core::probe::{
    apply_control, attach_inputs, build_all_targets, load_targets, metrics_csv, probe_loss_grad, probe_metrics,
    probe_vocab, train_probe, write_targets, Control, InputKind, ProbeConfig, ProbeExample, ProbeMetrics,
    ProbeModel,
};
use chasm_core::router::{FeatureSource, FeatureSpec, Ladder, LogRegConfig, RouterModel};
use chasm_core::sparse_index::InvertedIndex;
use chasm_core::synth::{synth_probe_task, synth_workload, ProbeTaskConfig, SynthConfig};
use chasm_core::Error;
use serde::Serialize;

use super::*;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    MissingPath(PathBuf),
    Data(Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::MissingPath(_) | CliError::Data(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::MissingPath(p) => write!(f, "no such file: {}", p.display()),
            CliError::Data(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Data(e)
    }
}

type CliResult<T> = Result<T, CliError>;

pub fn run(cli: Cli) -> CliResult<PathBuf> {
    let mode = if cli.sequential { ExecMode::Sequential } else { ExecMode::Parallel };
    match cli.command {
        Command::Index {
            action: IndexAction::Build(a),
        } => index_build(a),
        Command::Retrieve(a) => retrieve(a, mode),
        Command::Router {
            action: RouterAction::Fit(a),
        } => router_fit(a, mode),
        Command::Eval { action } => match action {
            EvalAction::Mrr(a) => eval_mrr(a, mode),
            EvalAction::Bootstrap(a) => eval_bootstrap(a, mode),
            EvalAction::RoutingStats(a) => eval_routing_stats(a),
            EvalAction::Histogram(a) => eval_histogram(a),
            EvalAction::Time(a) => eval_time(a),
        },
        Command::Probe { action } => match action {
            ProbeAction::Build(a) => probe_build(a),
            ProbeAction::Train(a) => probe_train(a),
            ProbeAction::Metrics(a) => probe_metrics_cmd(a, mode),
        },
        Command::Dataset {
            action: DatasetAction::Synth(a),
        } => dataset_synth(a),
    }
}

fn require(paths: &[&Path]) -> CliResult<()> {
    match paths.iter().find(|p| !p.exists()) {
        Some(p) => Err(CliError::MissingPath(p.to_path_buf())),
        None => Ok(()),
    }
}

fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Data(Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn out_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn parent_dir(file: &Path) -> CliResult<()> {
    match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => out_dir(p),
        _ => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> CliResult<PathBuf> {
    fs::write(path, text).map_err(|e| io_err(path, e))?;
    Ok(path.to_path_buf())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<PathBuf> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    write_text(path, &(text + "\n"))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(serde_json::from_str(&text).map_err(Error::from)?)
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("ids")
}

fn load_embeddings(path: &Path) -> CliResult<EmbeddingStore> {
    let ids = sidecar(path);
    require(&[path, &ids])?;
    Ok(EmbeddingStore::load(path, &ids)?)
}

fn analyzer(a: &AnalyzerArgs) -> CliResult<AnalyzerConfig> {
    let mut cfg = AnalyzerConfig {
        stem: !a.no_stem,
        ..AnalyzerConfig::default()
    };
    if let Some(p) = &a.stopwords {
        require(&[p])?;
        cfg = cfg.with_stopword_file(p)?;
    }
    Ok(cfg)
}

fn system(s: SystemArg) -> System {
    match s {
        SystemArg::Sparse => System::Sparse,
        SystemArg::Dense => System::Dense,
        SystemArg::Fusion => System::Fusion,
        SystemArg::Hybrid => System::Hybrid,
    }
}

struct Loaded {
    index: InvertedIndex,
    queries: Vec<Query>,
    docs: Option<EmbeddingStore>,
    qemb: Option<EmbeddingStore>,
    router: Option<RouterModel>,
    k: usize,
    delay: Duration,
}

impl Loaded {
    fn read(a: &EngineArgs) -> CliResult<Self> {
        let mut paths: Vec<&Path> = vec![&a.index, &a.queries];
        paths.extend(a.dense.doc_emb.as_deref());
        paths.extend(a.dense.query_emb.as_deref());
        paths.extend(a.router.as_deref());
        require(&paths)?;
        if a.dense.doc_emb.is_some() != a.dense.query_emb.is_some() {
            return Err(CliError::Usage("--doc-emb and --query-emb go together".into()));
        }

        let index = InvertedIndex::load(&a.index)?;
        let queries = load_queries(&a.queries)?;
        let ids: HashSet<&str> = index.doc_ids().iter().map(String::as_str).collect();
        if let Some(q) = queries.iter().find(|q| !ids.contains(q.gold_id.as_str())) {
            return Err(Error::UnknownGold {
                qid: q.qid.clone(),
                gold_id: q.gold_id.clone(),
            }
            .into());
        }
        let docs = a.dense.doc_emb.as_deref().map(load_embeddings).transpose()?;
        let qemb = a.dense.query_emb.as_deref().map(load_embeddings).transpose()?;
        let router = a.router.as_deref().map(RouterModel::load).transpose()?;
        eprintln!(
            "loaded index ({} docs), {} queries{}",
            index.n_docs(),
            queries.len(),
            if docs.is_some() { ", embeddings" } else { "" }
        );
        let k = a.k.unwrap_or(index.n_docs());
        Ok(Loaded {
            index,
            queries,
            docs,
            qemb,
            router,
            k,
            delay: Duration::from_millis(a.dense.dense_delay_ms),
        })
    }

    fn engine(&self, with_router: bool) -> CliResult<Engine<'_>> {
        let mut e = Engine::new(&self.index, self.k)?.with_dense_delay(self.delay);
        if let (Some(docs), Some(queries)) = (&self.docs, &self.qemb) {
            e = e.with_dense(DenseSide { docs, queries })?;
        }
        if with_router {
            if let Some(r) = &self.router {
                e = e.with_router(r)?;
            }
        }
        Ok(e)
    }

    fn check_system(&self, s: System) -> CliResult<()> {
        if s != System::Sparse && self.docs.is_none() {
            return Err(CliError::Usage(format!("--system {s} needs --doc-emb and --query-emb")));
        }
        if s == System::Hybrid && self.router.is_none() {
            return Err(CliError::Usage("--system hybrid needs --router".into()));
        }
        Ok(())
    }
}

fn index_build(a: IndexBuildArgs) -> CliResult<PathBuf> {
    require(&[&a.corpus])?;
    let cfg = analyzer(&a.analyzer)?;
    let corpus = load_corpus(&a.corpus)?;
    let index = InvertedIndex::build(&corpus, cfg, a.k1, a.b)?;
    eprintln!("indexed {} docs, {} terms", index.n_docs(), index.n_terms());
    parent_dir(&a.out)?;
    index.save(&a.out)?;
    Ok(a.out)
}

#[derive(Serialize)]
struct RunLine<'a> {
    qid: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    route: Option<chasm_core::Route>,
    hits: &'a [chasm_core::Hit],
}

fn retrieve(a: RetrieveArgs, mode: ExecMode) -> CliResult<PathBuf> {
    let loaded = Loaded::read(&a.engine)?;
    let sys = system(a.system);
    loaded.check_system(sys)?;
    let engine = loaded.engine(true)?;
    let results = parallel::try_map(mode, &loaded.queries, |q| engine.retrieve(sys, q))?;
    out_dir(&a.out)?;
    let lines: Vec<RunLine<'_>> = loaded
        .queries
        .iter()
        .zip(&results)
        .map(|(q, r)| RunLine {
            qid: &q.qid,
            route: r.route,
            hits: r.list.hits(),
        })
        .collect();
    let path = a.out.join(format!("run_{sys}.jsonl"));
    write_jsonl(&path, &lines)?;
    eprintln!("retrieved {} queries with {sys}", lines.len());
    Ok(path)
}

fn feature_spec(features: FeaturesArg, topk: &str) -> CliResult<FeatureSpec> {
    let source = match features {
        FeaturesArg::Sparse => FeatureSource::Sparse,
        FeaturesArg::Dense => FeatureSource::Dense,
        FeaturesArg::Both => FeatureSource::Both,
    };
    let ladder: Ladder = topk.parse().map_err(|e: Error| CliError::Usage(e.to_string()))?;
    Ok(FeatureSpec { source, ladder })
}

#[derive(Serialize)]
struct FitReport {
    kind: RouterKind,
    feature_spec: FeatureSpec,
    dev_queries: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    theta_grid: Option<Vec<(f64, f64)>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    final_loss: Option<f64>,
}

fn router_fit(a: RouterFitArgs, mode: ExecMode) -> CliResult<PathBuf> {
    let loaded = Loaded::read(&a.engine)?;
    if loaded.docs.is_none() {
        return Err(CliError::Usage("router fit needs --doc-emb and --query-emb for labels".into()));
    }
    let kind = match a.kind {
        KindArg::Threshold => RouterKind::Threshold,
        KindArg::Logreg => RouterKind::LogReg,
    };
    let spec = feature_spec(a.features, &a.topk_spec)?;
    let cfg = LogRegConfig {
        lr: a.lr,
        epochs: a.epochs,
        l2: a.l2,
        init_seed: None,
    };
    let engine = loaded.engine(false)?;
    let (model, detail) = fit_router(&engine, &loaded.queries, kind, spec, &cfg, mode)?;
    let report = FitReport {
        kind,
        feature_spec: model.feature_spec,
        dev_queries: loaded.queries.len(),
        theta_grid: match &detail {
            FitDetail::Threshold(t) => Some(t.grid.clone()),
            FitDetail::LogReg(_) => None,
        },
        final_loss: match &detail {
            FitDetail::LogReg(f) => f.loss_history.last().copied(),
            FitDetail::Threshold(_) => None,
        },
    };
    match &detail {
        FitDetail::Threshold(t) => eprintln!("theta = {} (dev MRR {:.4})", t.theta, t.dev_mrr),
        FitDetail::LogReg(f) => eprintln!("logreg fitted, final loss {:.5}", f.loss_history.last().unwrap_or(&f64::NAN)),
    }
    parent_dir(&a.out)?;
    model.save(&a.out)?;
    write_json(&a.out.with_extension("fit.json"), &report)?;
    Ok(a.out)
}

fn load_records(path: &Path) -> CliResult<Vec<RankRecord>> {
    require(&[path])?;
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(r);
    }
    if out.is_empty() {
        return Err(Error::EmptyInput("records file").into());
    }
    Ok(out)
}

fn eval_mrr(a: EvalMrrArgs, mode: ExecMode) -> CliResult<PathBuf> {
    let loaded = Loaded::read(&a.engine)?;
    let engine = loaded.engine(true)?;
    let records = engine.records(&loaded.queries, mode)?;
    let mut report = routing_report(&records)?;
    if let Some(iters) = a.bootstrap_iters {
        let pairs: &[(&str, &str)] = if report.routing.is_some() {
            &[("hybrid", "sparse"), ("hybrid", "dense")]
        } else {
            &[("dense", "sparse"), ("sparse", "dense")]
        };
        report.add_significance(&records, pairs, iters, a.seed, mode)?;
    }
    out_dir(&a.out)?;
    write_jsonl(&a.out.join("records.jsonl"), &records)?;
    write_text(&a.out.join("report.txt"), &report.to_text())?;
    eprint!("{}", report.to_text());
    write_text(&a.out.join("report.csv"), &report.to_csv())
}

fn column(c: ColumnArg) -> &'static str {
    match c {
        ColumnArg::Sparse => "sparse",
        ColumnArg::Dense => "dense",
        ColumnArg::Fusion => "fusion",
        ColumnArg::Hybrid => "hybrid",
        ColumnArg::Ceiling => "ceiling",
    }
}

fn eval_bootstrap(a: EvalBootstrapArgs, mode: ExecMode) -> CliResult<PathBuf> {
    let records = load_records(&a.records)?;
    let (ca, cb) = (column(a.a), column(a.b));
    let ra = system_rr(&records, ca)?;
    let rb = system_rr(&records, cb)?;
    let p = bootstrap_test(&ra, &rb, a.iters, a.seed, mode)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    eprintln!("p({ca} > {cb}) = {p}");
    out_dir(&a.out)?;
    write_text(
        &a.out.join(format!("bootstrap_{ca}_vs_{cb}.csv")),
        &format!(
            "a,b,queries,iters,seed,mrr_a,mrr_b,p_value\n{ca},{cb},{},{},{},{:.6},{:.6},{p}\n",
            records.len(),
            a.iters,
            a.seed,
            mean(&ra),
            mean(&rb)
        ),
    )
}

fn eval_routing_stats(a: RecordsArgs) -> CliResult<PathBuf> {
    let records = load_records(&a.records)?;
    let report = routing_report(&records)?;
    if report.routing.is_none() {
        return Err(Error::Invalid("records carry no routing decisions; run `eval mrr` with --router".into()).into());
    }
    out_dir(&a.out)?;
    eprint!("{}", report.to_text());
    write_text(&a.out.join("routing_stats.csv"), &report.to_csv())
}

fn eval_histogram(a: EvalHistogramArgs) -> CliResult<PathBuf> {
    let records = load_records(&a.records)?;
    let f0: Vec<f64> = records.iter().map(|r| r.top_score).collect();
    let h = histogram_report(&records, &f0, a.bins)?;
    out_dir(&a.out)?;
    write_text(&a.out.join("histogram.csv"), &h.to_csv())
}

fn eval_time(a: EvalTimeArgs) -> CliResult<PathBuf> {
    let loaded = Loaded::read(&a.engine)?;
    let sys = system(a.system);
    loaded.check_system(sys)?;
    let engine = loaded.engine(true)?;
    let t = time_pipeline(&engine, sys, &loaded.queries, &loaded.queries, a.warmup)?;
    eprintln!("{sys}: {:.4}s over {} queries", t.total, t.per_query.len());
    out_dir(&a.out)?;
    let mut per = String::from("qid,seconds\n");
    for (q, s) in loaded.queries.iter().zip(&t.per_query) {
        per.push_str(&format!("{},{s:.9}\n", q.qid));
    }
    write_text(&a.out.join(format!("timing_{sys}_per_query.csv")), &per)?;
    write_text(&a.out.join(format!("timing_{sys}.csv")), &t.to_text())
}

#[derive(Serialize, serde::Deserialize)]
struct ProbeManifest {
    n_terms: usize,
    train_examples: usize,
    dev_examples: usize,
    skipped: usize,
    seed: u64,
}

fn probe_build(a: ProbeBuildArgs) -> CliResult<PathBuf> {
    require(&[&a.corpus, &a.queries, &a.dev_queries])?;
    let cfg = analyzer(&a.analyzer)?;
    let facts = load_corpus(&a.corpus)?;
    let train_q = load_queries(&a.queries)?;
    let dev_q = load_queries(&a.dev_queries)?;
    let all: Vec<Query> = train_q.iter().chain(&dev_q).cloned().collect();
    let vocab = probe_vocab(&facts, &all, &cfg)?;
    let train = build_all_targets(&train_q, &facts, &vocab, &cfg, a.seed)?;
    let dev = build_all_targets(&dev_q, &facts, &vocab, &cfg, a.seed)?;
    out_dir(&a.out)?;
    write_json(&a.out.join("vocab.json"), &vocab)?;
    write_json(&a.out.join("analyzer.json"), &cfg)?;
    write_jsonl(&a.out.join("queries.jsonl"), &all)?;
    write_targets(&a.out.join("train_targets.jsonl"), &train)?;
    write_targets(&a.out.join("dev_targets.jsonl"), &dev)?;
    let manifest = ProbeManifest {
        n_terms: vocab.len(),
        train_examples: train.len(),
        dev_examples: dev.len(),
        skipped: all.len() - train.len() - dev.len(),
        seed: a.seed,
    };
    eprintln!(
        "probe vocab {} terms; {} train / {} dev examples",
        manifest.n_terms, manifest.train_examples, manifest.dev_examples
    );
    write_json(&a.out.join("manifest.json"), &manifest)
}

fn input_kind(i: InputArg) -> InputKind {
    match i {
        InputArg::Tfidf => InputKind::Tfidf,
        InputArg::Dense => InputKind::Dense,
    }
}

struct ProbeData {
    vocab: Vocab,
    train: Vec<ProbeExample>,
    dev: Vec<ProbeExample>,
}

fn load_probe_data(a: &ProbeInputArgs) -> CliResult<ProbeData> {
    let d = &a.probe_dir;
    let files = ["vocab.json", "analyzer.json", "queries.jsonl", "train_targets.jsonl", "dev_targets.jsonl"].map(|f| d.join(f));
    require(&files.iter().map(PathBuf::as_path).collect::<Vec<_>>())?;
    let kind = input_kind(a.input);
    if kind == InputKind::Dense && a.query_emb.is_none() {
        return Err(CliError::Usage("--input dense needs --query-emb".into()));
    }
    let text = fs::read_to_string(&files[0]).map_err(|e| io_err(&files[0], e))?;
    let vocab = Vocab::from_json(&text)?;
    let cfg: AnalyzerConfig = read_json(&files[1])?;
    let queries = load_queries(&files[2])?;
    let emb = a.query_emb.as_deref().map(load_embeddings).transpose()?;
    let attach = |p: &Path| -> CliResult<Vec<ProbeExample>> {
        Ok(attach_inputs(load_targets(p)?, &queries, kind, &vocab, &cfg, emb.as_ref())?)
    };
    let train = attach(&files[3])?;
    let dev = attach(&files[4])?;
    Ok(ProbeData { vocab, train, dev })
}

fn control(c: ControlArg) -> Control {
    match c {
        ControlArg::None => Control::None,
        ControlArg::RandEmbedding => Control::RandEmbedding,
        ControlArg::RandLabel => Control::RandLabel,
    }
}

fn probe_train(a: ProbeTrainArgs) -> CliResult<PathBuf> {
    let data = load_probe_data(&a.inputs)?;
    let kind = input_kind(a.inputs.input);
    let ctl = control(a.control);
    out_dir(&a.out)?;
    let mut rows = Vec::new();
    for &seed in &a.seeds {
        let cfg = ProbeConfig {
            lr: a.lr,
            epochs: a.epochs,
            seed,
            ..ProbeConfig::default()
        };
        let (model, m) = train_probe(&data.train, &data.dev, data.vocab.len(), kind, ctl, &cfg)?;
        eprintln!(
            "seed {seed}: epoch {} query MAP {:.4} PPL {:.3}, fact MAP {:.4} PPL {:.3}",
            m.epoch, m.query_map, m.query_ppl, m.fact_map, m.fact_ppl
        );
        write_json(&a.out.join(format!("probe_{kind}_{ctl}_seed{seed}.json")), &model)?;
        rows.push(m);
    }
    write_text(&a.out.join(format!("metrics_{kind}_{ctl}.csv")), &metrics_csv(&rows))
}

fn probe_metrics_cmd(a: ProbeMetricsArgs, mode: ExecMode) -> CliResult<PathBuf> {
    require(&[&a.model])?;
    let data = load_probe_data(&a.inputs)?;
    let model: ProbeModel = read_json(&a.model)?;
    if model.input_kind != input_kind(a.inputs.input) {
        return Err(CliError::Usage(format!("model was trained on {} input", model.input_kind)));
    }
    let dev = apply_control(&data.dev, model.dim, model.control, a.seed.wrapping_add(1));
    let dev_loss = dev
        .iter()
        .map(|ex| probe_loss_grad(&model, ex).map(|g| g.loss))
        .sum::<Result<f64, Error>>()?;
    let (query_map, query_ppl, fact_map, fact_ppl) = probe_metrics(&model, &dev, mode)?;
    let m = ProbeMetrics {
        input_kind: model.input_kind,
        control: model.control,
        seed: a.seed,
        epoch: 0,
        dev_loss,
        query_map,
        query_ppl,
        fact_map,
        fact_ppl,
    };
    out_dir(&a.out)?;
    write_text(&a.out.join("probe_metrics.csv"), &metrics_csv(&[m]))
}

#[derive(Serialize)]
struct SynthManifest {
    retrieval: SynthConfig,
    probe: ProbeTaskConfig,
    files: Vec<&'static str>,
}

fn dataset_synth(a: SynthArgs) -> CliResult<PathBuf> {
    let rcfg = SynthConfig {
        n_docs: a.docs,
        n_queries: a.queries,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let pcfg = ProbeTaskConfig {
        partner_facts: a.partner_facts,
        seed: a.seed,
        ..ProbeTaskConfig::default()
    };
    let w = synth_workload(&rcfg)?;
    w.write(&a.out)?;
    let t = synth_probe_task(&pcfg)?;
    t.write(&a.out)?;
    eprintln!(
        "wrote {} docs, {} queries ({} dev / {} test), probe task with {} queries",
        w.corpus.len(),
        w.queries.len(),
        w.dev.len(),
        w.test.len(),
        t.queries.len()
    );
    let manifest = SynthManifest {
        retrieval: rcfg,
        probe: pcfg,
        files: vec![
            "corpus.jsonl",
            "queries.jsonl",
            "dev_queries.jsonl",
            "test_queries.jsonl",
            "doc_emb.bin",
            "doc_emb.ids",
            "query_emb.bin",
            "query_emb.ids",
            "probe_facts.jsonl",
            "probe_train.jsonl",
            "probe_dev.jsonl",
            "probe_emb.bin",
            "probe_emb.ids",
        ],
    };
    write_json(&a.out.join("synth.json"), &manifest)
}
