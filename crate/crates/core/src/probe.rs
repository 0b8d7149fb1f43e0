//! Lexical probe: a linear layer from a frozen query representation to
//! per-term presence probabilities, trained on a masked BCE over the gold
//! terms and an equal number of sampled negatives.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, AnalyzerConfig, Corpus, Document, Query, Vocab};
use crate::dense_store::EmbeddingStore;
use crate::error::{Error, Result};
use crate::parallel::{self, ExecMode};
use crate::router::sigmoid;
use crate::sparse_index::{tfidf_vector, SparseVector};

const CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputKind {
    Tfidf,
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Control {
    None,
    RandEmbedding,
    RandLabel,
}

impl fmt::Display for InputKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InputKind::Tfidf => "tfidf",
            InputKind::Dense => "dense",
        })
    }
}

impl fmt::Display for Control {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Control::None => "none",
            Control::RandEmbedding => "rand-embedding",
            Control::RandLabel => "rand-label",
        })
    }
}

impl FromStr for InputKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tfidf" => Ok(InputKind::Tfidf),
            "dense" => Ok(InputKind::Dense),
            other => Err(Error::Invalid(format!("unknown input kind `{other}`"))),
        }
    }
}

impl FromStr for Control {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Control::None),
            "rand-embedding" => Ok(Control::RandEmbedding),
            "rand-label" => Ok(Control::RandLabel),
            other => Err(Error::Invalid(format!("unknown control `{other}`"))),
        }
    }
}

/// Gold and negative term ordinals for one query. All lists are sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeTargets {
    pub qid: String,
    /// Terms of the query or its fact.
    pub positive: Vec<u32>,
    pub negative: Vec<u32>,
    /// The subset of `positive` that occurs in the query.
    pub query_terms: Vec<u32>,
}

impl ProbeTargets {
    /// Positive terms that occur only in the fact.
    pub fn fact_only_terms(&self) -> Vec<u32> {
        let q: BTreeSet<u32> = self.query_terms.iter().copied().collect();
        self.positive.iter().copied().filter(|t| !q.contains(t)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProbeInput {
    Sparse(SparseVector),
    Dense(Vec<f64>),
}

impl ProbeInput {
    fn check_dim(&self, dim: usize) -> Result<()> {
        match self {
            ProbeInput::Dense(v) if v.len() != dim => Err(Error::DimensionMismatch {
                expected: dim,
                got: v.len(),
            }),
            ProbeInput::Sparse(s) => match s.entries.last() {
                Some(&(i, _)) if i as usize >= dim => Err(Error::DimensionMismatch {
                    expected: dim,
                    got: i as usize + 1,
                }),
                _ => Ok(()),
            },
            _ => Ok(()),
        }
    }

    fn dot(&self, w: &[f64]) -> f64 {
        match self {
            ProbeInput::Dense(x) => x.iter().zip(w).map(|(a, b)| a * b).sum(),
            ProbeInput::Sparse(s) => s.entries.iter().map(|&(i, v)| v * w[i as usize]).sum(),
        }
    }

    /// Calls `f(column, value)` for each stored entry.
    fn for_each(&self, mut f: impl FnMut(usize, f64)) {
        match self {
            ProbeInput::Dense(x) => x.iter().enumerate().for_each(|(i, &v)| f(i, v)),
            ProbeInput::Sparse(s) => s.entries.iter().for_each(|&(i, v)| f(i as usize, v)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeExample {
    pub targets: ProbeTargets,
    pub input: ProbeInput,
}

fn stable_hash(s: &str) -> u64 {
    // FNV-1a
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

fn unique_ordinals(text: &str, vocab: &Vocab, cfg: &AnalyzerConfig) -> BTreeSet<u32> {
    tokenize(text, cfg).iter().filter_map(|t| vocab.ordinal(t)).collect()
}

/// Gold terms are the analyzed, deduplicated in-vocabulary terms of the query
/// and its fact; `|P|` negatives are drawn uniformly without replacement from
/// the rest of the vocabulary, seeded by `(qid, seed)`.
///
/// Returns `Ok(None)` when no gold term survives analysis.
pub fn build_probe_targets(
    query: &Query,
    fact: &Document,
    vocab: &Vocab,
    cfg: &AnalyzerConfig,
    seed: u64,
) -> Result<Option<ProbeTargets>> {
    let q = unique_ordinals(&query.text, vocab, cfg);
    let mut p = q.clone();
    p.extend(unique_ordinals(&fact.indexed_text(), vocab, cfg));
    if p.is_empty() {
        return Ok(None);
    }
    let rest: Vec<u32> = (0..vocab.len() as u32).filter(|o| !p.contains(o)).collect();
    if rest.len() < p.len() {
        return Err(Error::InsufficientNegatives {
            needed: p.len(),
            available: rest.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(&query.qid) ^ seed.rotate_left(32));
    let mut negative: Vec<u32> = rand::seq::index::sample(&mut rng, rest.len(), p.len())
        .into_iter()
        .map(|i| rest[i])
        .collect();
    negative.sort_unstable();
    Ok(Some(ProbeTargets {
        qid: query.qid.clone(),
        positive: p.into_iter().collect(),
        negative,
        query_terms: q.into_iter().collect(),
    }))
}

/// Standard-normal vector determined by `qid` alone.
pub fn random_embedding(qid: &str, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(qid));
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    /// `n_terms × dim`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub n_terms: usize,
    pub dim: usize,
    pub input_kind: InputKind,
    pub control: Control,
}

impl ProbeModel {
    pub fn zeros(n_terms: usize, dim: usize, input_kind: InputKind, control: Control) -> Self {
        ProbeModel {
            weights: vec![0.0; n_terms * dim],
            bias: vec![0.0; n_terms],
            n_terms,
            dim,
            input_kind,
            control,
        }
    }

    pub fn row(&self, term: u32) -> &[f64] {
        let t = term as usize;
        &self.weights[t * self.dim..(t + 1) * self.dim]
    }

    fn logit(&self, x: &ProbeInput, term: u32) -> f64 {
        x.dot(self.row(term)) + self.bias[term as usize]
    }

    fn check(&self, x: &ProbeInput, terms: &[u32]) -> Result<()> {
        x.check_dim(self.dim)?;
        if let Some(&t) = terms.iter().find(|&&t| t as usize >= self.n_terms) {
            return Err(Error::Invalid(format!("term ordinal {t} out of range {}", self.n_terms)));
        }
        Ok(())
    }
}

/// `sigmoid(W_j · x + b_j)` for each `j` in `terms` only.
pub fn probe_forward(model: &ProbeModel, x: &ProbeInput, terms: &[u32]) -> Result<Vec<f64>> {
    model.check(x, terms)?;
    Ok(terms.iter().map(|&t| sigmoid(model.logit(x, t))).collect())
}

/// Summed BCE with probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn probe_loss(probs: &[f64], labels: &[f64]) -> f64 {
    probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(CLAMP, 1.0 - CLAMP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum()
}

/// Terms in the loss mask and their labels: positives then negatives.
fn mask(t: &ProbeTargets) -> (Vec<u32>, Vec<f64>) {
    let terms: Vec<u32> = t.positive.iter().chain(&t.negative).copied().collect();
    let labels = t
        .positive
        .iter()
        .map(|_| 1.0)
        .chain(t.negative.iter().map(|_| 0.0))
        .collect();
    (terms, labels)
}

/// Loss and its gradient for one example. `d_logits[i]` is the derivative
/// with respect to the logit of `terms[i]`; the weight-row gradient is
/// `d_logits[i] · x` and the bias gradient is `d_logits[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeGrad {
    pub loss: f64,
    pub terms: Vec<u32>,
    pub d_logits: Vec<f64>,
}

pub fn probe_loss_grad(model: &ProbeModel, ex: &ProbeExample) -> Result<ProbeGrad> {
    let (terms, labels) = mask(&ex.targets);
    let probs = probe_forward(model, &ex.input, &terms)?;
    let d_logits = probs
        .iter()
        .zip(&labels)
        .map(|(&p, &y)| if (CLAMP..=1.0 - CLAMP).contains(&p) { p - y } else { 0.0 })
        .collect();
    Ok(ProbeGrad {
        loss: probe_loss(&probs, &labels),
        terms,
        d_logits,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    /// Standard deviation of the initial weights.
    pub init_std: f64,
    /// Drives weight init, example order and rand-label pairing.
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 50,
            init_std: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeMetrics {
    pub input_kind: InputKind,
    pub control: Control,
    pub seed: u64,
    /// One-based epoch whose snapshot was kept.
    pub epoch: usize,
    pub dev_loss: f64,
    pub query_map: f64,
    pub query_ppl: f64,
    pub fact_map: f64,
    pub fact_ppl: f64,
}

pub const METRICS_CSV_HEADER: &str = "input_kind,control,seed,epoch,dev_loss,query_map,query_ppl,fact_map,fact_ppl";

impl ProbeMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.input_kind,
            self.control,
            self.seed,
            self.epoch,
            self.dev_loss,
            self.query_map,
            self.query_ppl,
            self.fact_map,
            self.fact_ppl
        )
    }
}

pub fn metrics_csv(rows: &[ProbeMetrics]) -> String {
    let mut out = format!("{METRICS_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

/// Average precision of `relevant` under a ranking by descending score;
/// ties are broken by ascending ordinal. `None` when `relevant` is empty.
pub fn average_precision(scores: &[f64], relevant: &[u32]) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let rel: BTreeSet<u32> = relevant.iter().copied().collect();
    let mut order: Vec<u32> = (0..scores.len() as u32).collect();
    order.sort_by(|&a, &b| scores[b as usize].total_cmp(&scores[a as usize]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, o) in order.iter().enumerate() {
        if rel.contains(o) {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    Some(sum / rel.len() as f64)
}

/// `exp(-mean ln p)` over the given gold-term probabilities.
pub fn perplexity(probs: &[f64]) -> Option<f64> {
    if probs.is_empty() {
        return None;
    }
    Some((-probs.iter().map(|p| p.ln()).sum::<f64>() / probs.len() as f64).exp())
}

/// Expected average precision of a uniformly random ranking of `n` items
/// with `r` relevant.
pub fn chance_map(n: usize, r: usize) -> f64 {
    if n == 0 || r == 0 {
        return 0.0;
    }
    if n == 1 {
        return 1.0;
    }
    let nf = n as f64;
    let rf = r as f64;
    (1..=n)
        .map(|k| {
            let kf = k as f64;
            1.0 / kf + (rf - 1.0) * (kf - 1.0) / ((nf - 1.0) * kf)
        })
        .sum::<f64>()
        / nf
}

fn log_sigmoid(z: f64) -> f64 {
    // -softplus(-z)
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

struct ExampleScores {
    query_ap: Option<f64>,
    fact_ap: Option<f64>,
    query_logp: Vec<f64>,
    fact_logp: Vec<f64>,
}

/// Scores every vocabulary term for each example. MAP averages per-example AP
/// over examples with a nonempty relevant set; PPL pools all relevant terms.
pub fn probe_metrics(model: &ProbeModel, examples: &[ProbeExample], mode: ExecMode) -> Result<(f64, f64, f64, f64)> {
    let per = parallel::try_map(mode, examples, |ex| -> Result<ExampleScores> {
        ex.input.check_dim(model.dim)?;
        let logits: Vec<f64> = (0..model.n_terms as u32).map(|t| model.logit(&ex.input, t)).collect();
        let q = &ex.targets.query_terms;
        let f = ex.targets.fact_only_terms();
        Ok(ExampleScores {
            query_ap: average_precision(&logits, q),
            fact_ap: average_precision(&logits, &f),
            query_logp: q.iter().map(|&t| log_sigmoid(logits[t as usize])).collect(),
            fact_logp: f.iter().map(|&t| log_sigmoid(logits[t as usize])).collect(),
        })
    })?;
    let mean = |v: Vec<f64>| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let ppl = |v: Vec<f64>| if v.is_empty() { 1.0 } else { (-v.iter().sum::<f64>() / v.len() as f64).exp() };
    let query_map = mean(per.iter().filter_map(|e| e.query_ap).collect());
    let fact_map = mean(per.iter().filter_map(|e| e.fact_ap).collect());
    let query_ppl = ppl(per.iter().flat_map(|e| e.query_logp.iter().copied()).collect());
    let fact_ppl = ppl(per.iter().flat_map(|e| e.fact_logp.iter().copied()).collect());
    Ok((query_map, query_ppl, fact_map, fact_ppl))
}

/// Applies a control task. rand-embedding swaps each input for
/// [`random_embedding`] of the same width; rand-label gives each example the
/// targets of a uniformly chosen other example in the same split.
pub fn apply_control(examples: &[ProbeExample], dim: usize, control: Control, seed: u64) -> Vec<ProbeExample> {
    match control {
        Control::None => examples.to_vec(),
        Control::RandEmbedding => examples
            .iter()
            .map(|ex| ProbeExample {
                targets: ex.targets.clone(),
                input: ProbeInput::Dense(random_embedding(&ex.targets.qid, dim)),
            })
            .collect(),
        Control::RandLabel => {
            let n = examples.len();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1abe1);
            examples
                .iter()
                .enumerate()
                .map(|(i, ex)| {
                    let j = if n < 2 {
                        i
                    } else {
                        let j = rng.random_range(0..n - 1);
                        if j >= i {
                            j + 1
                        } else {
                            j
                        }
                    };
                    let mut targets = examples[j].targets.clone();
                    targets.qid = ex.targets.qid.clone();
                    ProbeExample {
                        targets,
                        input: ex.input.clone(),
                    }
                })
                .collect()
        }
    }
}

/// Adam state touched only on the rows an example updates.
struct LazyAdam {
    m: Vec<f64>,
    v: Vec<f64>,
    mb: Vec<f64>,
    vb: Vec<f64>,
    t: i32,
}

impl LazyAdam {
    fn new(model: &ProbeModel) -> Self {
        LazyAdam {
            m: vec![0.0; model.weights.len()],
            v: vec![0.0; model.weights.len()],
            mb: vec![0.0; model.bias.len()],
            vb: vec![0.0; model.bias.len()],
            t: 0,
        }
    }

    fn step(&mut self, model: &mut ProbeModel, x: &ProbeInput, g: &ProbeGrad, cfg: &ProbeConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        let upd = |p: &mut f64, m: &mut f64, v: &mut f64, grad: f64| {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * grad;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * grad * grad;
            *p -= cfg.lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
        };
        let dim = model.dim;
        for (&term, &d) in g.terms.iter().zip(&g.d_logits) {
            let r = term as usize;
            x.for_each(|c, xv| {
                let i = r * dim + c;
                upd(&mut model.weights[i], &mut self.m[i], &mut self.v[i], d * xv);
            });
            upd(&mut model.bias[r], &mut self.mb[r], &mut self.vb[r], d);
        }
    }
}

fn total_loss(model: &ProbeModel, examples: &[ProbeExample]) -> Result<f64> {
    examples.iter().map(|ex| probe_loss_grad(model, ex).map(|g| g.loss)).sum()
}

/// Trains with per-example Adam steps in a seeded shuffled order, keeps the
/// snapshot from the epoch with the lowest total dev loss and reports its dev
/// metrics. Inputs are never updated.
pub fn train_probe(
    train: &[ProbeExample],
    dev: &[ProbeExample],
    n_terms: usize,
    input_kind: InputKind,
    control: Control,
    cfg: &ProbeConfig,
) -> Result<(ProbeModel, ProbeMetrics)> {
    if train.is_empty() {
        return Err(Error::EmptyInput("probe train split"));
    }
    if dev.is_empty() {
        return Err(Error::EmptyInput("probe dev split"));
    }
    let dim = match &train[0].input {
        ProbeInput::Dense(v) => v.len(),
        ProbeInput::Sparse(_) => n_terms,
    };
    let train = apply_control(train, dim, control, cfg.seed);
    let dev = apply_control(dev, dim, control, cfg.seed.wrapping_add(1));

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = ProbeModel::zeros(n_terms, dim, input_kind, control);
    for w in &mut model.weights {
        let z: f64 = StandardNormal.sample(&mut rng);
        *w = cfg.init_std * z;
    }
    for ex in train.iter().chain(&dev) {
        model.check(&ex.input, &ex.targets.positive)?;
        model.check(&ex.input, &ex.targets.negative)?;
    }

    let mut adam = LazyAdam::new(&model);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = (total_loss(&model, &dev)?, 0usize, model.clone());
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let g = probe_loss_grad(&model, &train[i])?;
            adam.step(&mut model, &train[i].input, &g, cfg);
        }
        let dev_loss = total_loss(&model, &dev)?;
        if dev_loss < best.0 {
            best = (dev_loss, epoch, model.clone());
        }
    }
    let (dev_loss, epoch, model) = best;
    let (query_map, query_ppl, fact_map, fact_ppl) = probe_metrics(&model, &dev, ExecMode::Sequential)?;
    Ok((
        model,
        ProbeMetrics {
            input_kind,
            control,
            seed: cfg.seed,
            epoch,
            dev_loss,
            query_map,
            query_ppl,
            fact_map,
            fact_ppl,
        },
    ))
}

/// Probe vocabulary: document frequency over facts and queries together.
pub fn probe_vocab(facts: &Corpus, queries: &[Query], cfg: &AnalyzerConfig) -> Result<Vocab> {
    let mut df: HashMap<String, u32> = HashMap::new();
    let texts = facts
        .docs()
        .iter()
        .map(|d| d.indexed_text().into_owned())
        .chain(queries.iter().map(|q| q.text.clone()));
    let mut n = 0u32;
    for text in texts {
        n += 1;
        let uniq: BTreeSet<String> = tokenize(&text, cfg).into_iter().collect();
        for t in uniq {
            *df.entry(t).or_insert(0) += 1;
        }
    }
    let min = cfg.min_count.max(1);
    Vocab::from_counts(df.into_iter().filter(|&(_, c)| c >= min), n)
}

/// Pairs targets with the query representation: the query's tf-idf vector,
/// or its row in `embeddings`.
pub fn attach_inputs(
    targets: Vec<ProbeTargets>,
    queries: &[Query],
    kind: InputKind,
    vocab: &Vocab,
    cfg: &AnalyzerConfig,
    embeddings: Option<&EmbeddingStore>,
) -> Result<Vec<ProbeExample>> {
    let by_qid: HashMap<&str, &Query> = queries.iter().map(|q| (q.qid.as_str(), q)).collect();
    targets
        .into_iter()
        .map(|t| {
            let input = match kind {
                InputKind::Tfidf => {
                    let q = by_qid.get(t.qid.as_str()).ok_or_else(|| Error::UnknownId(t.qid.clone()))?;
                    ProbeInput::Sparse(tfidf_vector(vocab, &q.text, cfg))
                }
                InputKind::Dense => {
                    let store = embeddings
                        .ok_or_else(|| Error::Invalid("dense probe input needs query embeddings".into()))?;
                    let row = store.get(&t.qid).ok_or_else(|| Error::UnknownId(t.qid.clone()))?;
                    ProbeInput::Dense(row.iter().map(|&v| f64::from(v)).collect())
                }
            };
            Ok(ProbeExample { targets: t, input })
        })
        .collect()
}

/// Targets for every query whose gold fact yields at least one term.
pub fn build_all_targets(
    queries: &[Query],
    facts: &Corpus,
    vocab: &Vocab,
    cfg: &AnalyzerConfig,
    seed: u64,
) -> Result<Vec<ProbeTargets>> {
    let mut out = Vec::with_capacity(queries.len());
    for q in queries {
        let fact = facts
            .get(&q.gold_id)
            .ok_or_else(|| Error::UnknownGold {
                qid: q.qid.clone(),
                gold_id: q.gold_id.clone(),
            })?;
        if let Some(t) = build_probe_targets(q, fact, vocab, cfg, seed)? {
            out.push(t);
        }
    }
    Ok(out)
}

pub fn write_targets(path: &Path, targets: &[ProbeTargets]) -> Result<()> {
    crate::corpus::write_jsonl(path, targets)
}

pub fn load_targets(path: &Path) -> Result<Vec<ProbeTargets>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let t: ProbeTargets = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(t);
    }
    Ok(out)
}
