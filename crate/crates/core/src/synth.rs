//! Synthetic workloads: a retrieval set where BM25 and a mock dense encoder
//! each win on a different half of the queries, and an identity-readable
//! probe task.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{write_jsonl, Corpus, Document, Query};
use crate::dense_store::EmbeddingStore;
use crate::error::{Error, Result};
use crate::evaluation::split_dev_test;

const CONSONANTS: &[u8] = b"bdfgklmnprtvz";
const VOWELS: &[u8] = b"aeiou";

/// `n` distinct three-syllable pseudo-words. None contains an `s`, so the
/// stemmer leaves them alone, and none is a stopword.
fn pseudo_words(n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w: String = (0..3)
            .flat_map(|_| {
                [
                    *CONSONANTS.choose(rng).unwrap() as char,
                    *VOWELS.choose(rng).unwrap() as char,
                ]
            })
            .collect();
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn unit_gaussian(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// `base` plus isotropic noise of norm about `sigma`, renormalized.
fn noisy_copy(base: &[f64], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let noise = unit_gaussian(base.len(), rng);
    let v: Vec<f64> = base.iter().zip(&noise).map(|(b, e)| b + sigma * e).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| (x / n) as f32).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryKind {
    /// Shares rare terms with its gold; the mock embedding points elsewhere.
    Overlap,
    /// Shares no term with its gold; the mock embedding points at it.
    Paraphrase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_docs: usize,
    pub n_queries: usize,
    pub dim: usize,
    pub rare_per_doc: usize,
    pub common_pool: usize,
    pub common_per_doc: usize,
    pub overlap_terms: usize,
    pub common_per_query: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_docs: 200,
            n_queries: 400,
            dim: 64,
            rare_per_doc: 4,
            common_pool: 100,
            common_per_doc: 6,
            overlap_terms: 3,
            common_per_query: 4,
            noise: 0.3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthWorkload {
    pub corpus: Corpus,
    pub queries: Vec<Query>,
    pub kinds: Vec<QueryKind>,
    pub doc_embeddings: EmbeddingStore,
    pub query_embeddings: EmbeddingStore,
    /// Router-fitting half.
    pub dev: Vec<usize>,
    /// Held-out half.
    pub test: Vec<usize>,
}

impl SynthWorkload {
    pub fn subset(&self, idx: &[usize]) -> Vec<Query> {
        idx.iter().map(|&i| self.queries[i].clone()).collect()
    }

    /// Writes corpus, query splits and both embedding files into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_jsonl(&dir.join("corpus.jsonl"), self.corpus.docs())?;
        write_jsonl(&dir.join("queries.jsonl"), &self.queries)?;
        write_jsonl(&dir.join("dev_queries.jsonl"), &self.subset(&self.dev))?;
        write_jsonl(&dir.join("test_queries.jsonl"), &self.subset(&self.test))?;
        self.doc_embeddings
            .save(&dir.join("doc_emb.bin"), &dir.join("doc_emb.ids"))?;
        self.query_embeddings
            .save(&dir.join("query_emb.bin"), &dir.join("query_emb.ids"))
    }
}

/// Half the queries are overlap queries (`overlap_terms` of the gold's rare
/// terms plus common filler), half are paraphrases built only from common
/// terms the gold lacks. Overlap query embeddings are noisy copies of a
/// random non-gold document; paraphrase embeddings are noisy copies of the
/// gold and always rank it first.
pub fn synth_workload(cfg: &SynthConfig) -> Result<SynthWorkload> {
    if cfg.n_docs < 2 || cfg.n_queries < 2 || cfg.dim == 0 {
        return Err(Error::Invalid("synthetic workload needs two docs, two queries and dim > 0".into()));
    }
    if cfg.overlap_terms > cfg.rare_per_doc || cfg.common_per_doc + cfg.common_per_query > cfg.common_pool {
        return Err(Error::Invalid("inconsistent synthetic term counts".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let words = pseudo_words(cfg.n_docs * cfg.rare_per_doc + cfg.common_pool, &mut rng);
    let (rare, common) = words.split_at(cfg.n_docs * cfg.rare_per_doc);

    let mut docs = Vec::with_capacity(cfg.n_docs);
    let mut doc_common: Vec<BTreeSet<usize>> = Vec::with_capacity(cfg.n_docs);
    let mut doc_vecs = Vec::with_capacity(cfg.n_docs);
    for d in 0..cfg.n_docs {
        let c: BTreeSet<usize> = rand::seq::index::sample(&mut rng, cfg.common_pool, cfg.common_per_doc)
            .into_iter()
            .collect();
        let mut toks: Vec<&str> = rare[d * cfg.rare_per_doc..(d + 1) * cfg.rare_per_doc]
            .iter()
            .map(String::as_str)
            .chain(c.iter().map(|&i| common[i].as_str()))
            .collect();
        toks.shuffle(&mut rng);
        docs.push(Document {
            id: format!("d{d:04}"),
            sentence: toks.join(" "),
            context: None,
        });
        doc_common.push(c);
        doc_vecs.push(unit_gaussian(cfg.dim, &mut rng));
    }
    let doc_rows: Vec<Vec<f32>> = doc_vecs.iter().map(|v| v.iter().map(|&x| x as f32).collect()).collect();

    let mut queries = Vec::with_capacity(cfg.n_queries);
    let mut kinds = Vec::with_capacity(cfg.n_queries);
    let mut qrows = Vec::with_capacity(cfg.n_queries);
    for qi in 0..cfg.n_queries {
        let kind = if qi % 2 == 0 { QueryKind::Overlap } else { QueryKind::Paraphrase };
        let gold = rng.random_range(0..cfg.n_docs);
        let free: Vec<usize> = (0..cfg.common_pool).filter(|i| !doc_common[gold].contains(i)).collect();
        let (mut toks, row): (Vec<&str>, Vec<f32>) = match kind {
            QueryKind::Overlap => {
                let own = &rare[gold * cfg.rare_per_doc..(gold + 1) * cfg.rare_per_doc];
                let mut toks: Vec<&str> = own
                    .choose_multiple(&mut rng, cfg.overlap_terms)
                    .map(String::as_str)
                    .collect();
                toks.extend(
                    free.choose_multiple(&mut rng, cfg.common_per_query / 2)
                        .map(|&i| common[i].as_str()),
                );
                let mut other = rng.random_range(0..cfg.n_docs - 1);
                if other >= gold {
                    other += 1;
                }
                (toks, noisy_copy(&doc_vecs[other], cfg.noise, &mut rng))
            }
            QueryKind::Paraphrase => {
                let toks: Vec<&str> = free
                    .choose_multiple(&mut rng, cfg.common_per_query)
                    .map(|&i| common[i].as_str())
                    .collect();
                let row = loop {
                    let row = noisy_copy(&doc_vecs[gold], cfg.noise, &mut rng);
                    let score = |d: &[f32]| crate::dense_store::dot(&row, d);
                    let g = score(&doc_rows[gold]);
                    if doc_rows.iter().enumerate().all(|(i, d)| i == gold || score(d) < g) {
                        break row;
                    }
                };
                (toks, row)
            }
        };
        toks.shuffle(&mut rng);
        queries.push(Query {
            qid: format!("q{qi:04}"),
            text: toks.join(" "),
            gold_id: docs[gold].id.clone(),
        });
        kinds.push(kind);
        qrows.push(row);
    }

    let doc_ids = docs.iter().map(|d| d.id.clone()).collect();
    let qids = queries.iter().map(|q| q.qid.clone()).collect();
    let (dev, test) = split_dev_test(cfg.n_queries, cfg.n_queries / 2, cfg.seed ^ 0xd1)?;
    Ok(SynthWorkload {
        corpus: Corpus::new(docs)?,
        queries,
        kinds,
        doc_embeddings: EmbeddingStore::from_rows(doc_ids, &doc_rows)?,
        query_embeddings: EmbeddingStore::from_rows(qids, &qrows)?,
        dev,
        test,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeTaskConfig {
    pub n_terms: usize,
    pub n_queries: usize,
    pub terms_per_query: usize,
    pub n_dev: usize,
    /// Facts hold the partner `pi(t)` of each query term instead of `t`.
    pub partner_facts: bool,
    pub seed: u64,
}

impl Default for ProbeTaskConfig {
    fn default() -> Self {
        ProbeTaskConfig {
            n_terms: 50,
            n_queries: 1000,
            terms_per_query: 4,
            n_dev: 200,
            partner_facts: false,
            seed: 0,
        }
    }
}

/// Queries, their facts, and embeddings that encode the query's terms
/// directly: dimension `j` is the normalized indicator of term `j`. By default
/// a fact restates its query's terms; with `partner_facts` it holds the
/// partner `pi(t)` of each query term `t` instead, so fact-only terms are
/// linearly readable from the query embedding as well.
#[derive(Debug, Clone)]
pub struct ProbeTask {
    pub facts: Corpus,
    pub queries: Vec<Query>,
    pub embeddings: EmbeddingStore,
    pub train: Vec<usize>,
    pub dev: Vec<usize>,
}

impl ProbeTask {
    pub fn subset(&self, idx: &[usize]) -> Vec<Query> {
        idx.iter().map(|&i| self.queries[i].clone()).collect()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_jsonl(&dir.join("probe_facts.jsonl"), self.facts.docs())?;
        write_jsonl(&dir.join("probe_train.jsonl"), &self.subset(&self.train))?;
        write_jsonl(&dir.join("probe_dev.jsonl"), &self.subset(&self.dev))?;
        self.embeddings
            .save(&dir.join("probe_emb.bin"), &dir.join("probe_emb.ids"))
    }
}

pub fn synth_probe_task(cfg: &ProbeTaskConfig) -> Result<ProbeTask> {
    if cfg.terms_per_query == 0 || 4 * cfg.terms_per_query > cfg.n_terms {
        return Err(Error::Invalid("probe task needs n_terms >= 4 * terms_per_query > 0".into()));
    }
    if cfg.n_dev == 0 || cfg.n_dev >= cfg.n_queries {
        return Err(Error::Invalid("probe task needs nonempty train and dev splits".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let words = pseudo_words(cfg.n_terms, &mut rng);
    let mut partner: Vec<usize> = (0..cfg.n_terms).collect();
    partner.shuffle(&mut rng);

    let mut facts = Vec::with_capacity(cfg.n_queries);
    let mut queries = Vec::with_capacity(cfg.n_queries);
    let mut rows = Vec::with_capacity(cfg.n_queries);
    let w = 1.0 / (cfg.terms_per_query as f64).sqrt();
    for qi in 0..cfg.n_queries {
        let terms = rand::seq::index::sample(&mut rng, cfg.n_terms, cfg.terms_per_query).into_vec();
        let mut row = vec![0f32; cfg.n_terms];
        for &t in &terms {
            row[t] = w as f32;
        }
        let fact_words: Vec<&str> = terms
            .iter()
            .map(|&t| words[if cfg.partner_facts { partner[t] } else { t }].as_str())
            .collect();
        let query_words: Vec<&str> = terms.iter().map(|&t| words[t].as_str()).collect();
        facts.push(Document {
            id: format!("f{qi:04}"),
            sentence: fact_words.join(" "),
            context: None,
        });
        queries.push(Query {
            qid: format!("p{qi:04}"),
            text: query_words.join(" "),
            gold_id: format!("f{qi:04}"),
        });
        rows.push(row);
    }
    let qids = queries.iter().map(|q| q.qid.clone()).collect();
    let (dev, train) = split_dev_test(cfg.n_queries, cfg.n_dev, cfg.seed ^ 0x9b)?;
    Ok(ProbeTask {
        facts: Corpus::new(facts)?,
        queries,
        embeddings: EmbeddingStore::from_rows(qids, &rows)?,
        train,
        dev,
    })
}
