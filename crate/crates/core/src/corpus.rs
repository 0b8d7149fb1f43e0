//! Dataset ingestion, text analysis and vocabulary construction.
//!
//! Corpus and query files are JSON Lines. The analyzer lowercases, splits on
//! runs of non-alphanumeric codepoints, drops single-character tokens and
//! stopwords, and optionally applies a plural-stripping stemmer.

use std::borrow::Cow;
use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Built-in English function words. Versioned with the crate; replace with
/// [`AnalyzerConfig::with_stopword_file`] when a different list is needed.
pub const STOPWORDS_VERSION: u32 = 1;

const DEFAULT_STOPWORDS: &[&str] = &[
    "a", "about", "above", "after", "again", "against", "all", "am", "an", "and", "any", "are",
    "as", "at", "be", "because", "been", "before", "being", "below", "between", "both", "but",
    "by", "can", "could", "did", "do", "does", "doing", "down", "during", "each", "few", "for",
    "from", "further", "had", "has", "have", "having", "he", "her", "here", "hers", "herself",
    "him", "himself", "his", "how", "i", "if", "in", "into", "is", "it", "its", "itself", "just",
    "me", "more", "most", "my", "myself", "no", "nor", "not", "now", "of", "off", "on", "once",
    "only", "or", "other", "our", "ours", "ourselves", "out", "over", "own", "same", "she",
    "should", "so", "some", "such", "than", "that", "the", "their", "theirs", "them",
    "themselves", "then", "there", "these", "they", "this", "those", "through", "to", "too",
    "under", "until", "up", "very", "was", "we", "were", "what", "when", "where", "which",
    "while", "who", "whom", "why", "will", "with", "would", "you", "your", "yours", "yourself",
    "yourselves",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub sentence: String,
    #[serde(default)]
    pub context: Option<String>,
}

impl Document {
    /// Text fed to the sparse index: the sentence followed by its context
    /// paragraph when one exists. Contexts usually contain the sentence, so
    /// it is counted twice.
    pub fn indexed_text(&self) -> Cow<'_, str> {
        match &self.context {
            Some(ctx) => Cow::Owned(format!("{} {}", self.sentence, ctx)),
            None => Cow::Borrowed(&self.sentence),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub qid: String,
    pub text: String,
    pub gold_id: String,
}

/// An ordered collection of documents with unique ids.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    docs: Vec<Document>,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(docs: Vec<Document>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(docs.len());
        for (i, d) in docs.iter().enumerate() {
            if d.id.is_empty() {
                return Err(Error::Invalid(format!("document {} has an empty id", i + 1)));
            }
            if d.sentence.is_empty() {
                return Err(Error::Invalid(format!("document `{}` has an empty sentence", d.id)));
            }
            if by_id.insert(d.id.clone(), i).is_some() {
                return Err(Error::DuplicateId {
                    kind: "document",
                    id: d.id.clone(),
                    line: i + 1,
                });
            }
        }
        Ok(Corpus { docs, by_id })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn docs(&self) -> &[Document] {
        &self.docs
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.by_id.get(id).map(|&i| &self.docs[i])
    }

    pub fn ordinal(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalyzerConfig {
    pub lowercase: bool,
    pub stem: bool,
    pub stopwords: BTreeSet<String>,
    pub min_count: u32,
}

impl Default for AnalyzerConfig {
    fn default() -> Self {
        AnalyzerConfig {
            lowercase: true,
            stem: true,
            stopwords: DEFAULT_STOPWORDS.iter().map(|s| s.to_string()).collect(),
            min_count: 1,
        }
    }
}

impl AnalyzerConfig {
    /// Replaces the stopword list with the non-empty lines of `path`.
    pub fn with_stopword_file(mut self, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.stopwords = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect();
        Ok(self)
    }

    /// Stable fingerprint of the analysis settings. Routers record it so that
    /// features are never computed against a differently analyzed index.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("lc={};stem={};min={};sw=", self.lowercase, self.stem, self.min_count));
        for w in &self.stopwords {
            h.update(w.as_bytes());
            h.update([0u8]);
        }
        h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Plural-stripping stemmer: `ies`→`y`, else `es`→`e`, else drop a final `s`,
/// with the usual exceptions (`aies`/`eies`, `aes`/`ees`/`oes`, `us`/`ss`).
/// Never produces a token shorter than two characters.
pub fn s_stem(word: &str) -> Cow<'_, str> {
    let len = word.chars().count();
    if let Some(stem) = word.strip_suffix("ies") {
        if !stem.ends_with(['a', 'e']) && len >= 4 {
            return Cow::Owned(format!("{stem}y"));
        }
    }
    if let Some(stem) = word.strip_suffix("es") {
        if !stem.ends_with(['a', 'e', 'o']) && len > 2 {
            return Cow::Borrowed(&word[..word.len() - 1]);
        }
    }
    if let Some(stem) = word.strip_suffix('s') {
        if !stem.ends_with(['u', 's']) && len > 2 {
            return Cow::Borrowed(stem);
        }
    }
    Cow::Borrowed(word)
}

pub fn tokenize(text: &str, cfg: &AnalyzerConfig) -> Vec<String> {
    let text: Cow<'_, str> = if cfg.lowercase {
        Cow::Owned(text.to_lowercase())
    } else {
        Cow::Borrowed(text)
    };
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| t.chars().nth(1).is_some())
        .filter(|t| !cfg.stopwords.contains(*t))
        .map(|t| if cfg.stem { s_stem(t).into_owned() } else { t.to_string() })
        // a stem can land on a stopword ("hes" -> "he")
        .filter(|t| !cfg.stopwords.contains(t))
        .collect()
}

/// Term dictionary with ordinals in lexicographic order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    terms: Vec<String>,
    doc_freq: Vec<u32>,
    n_docs: u32,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Builds from `(term, doc_freq)` pairs; terms are sorted and must be unique.
    pub fn from_counts(counts: impl IntoIterator<Item = (String, u32)>, n_docs: u32) -> Result<Self> {
        let mut pairs: Vec<(String, u32)> = counts.into_iter().collect();
        pairs.sort();
        if pairs.is_empty() {
            return Err(Error::EmptyVocab);
        }
        let (terms, doc_freq): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let mut v = Vocab {
            terms,
            doc_freq,
            n_docs,
            index: HashMap::new(),
        };
        v.rebuild_index()?;
        Ok(v)
    }

    fn rebuild_index(&mut self) -> Result<()> {
        self.index = HashMap::with_capacity(self.terms.len());
        for (i, t) in self.terms.iter().enumerate() {
            if self.index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::DuplicateId {
                    kind: "term",
                    id: t.clone(),
                    line: i + 1,
                });
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut v: Vocab = serde_json::from_str(text)?;
        v.rebuild_index()?;
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    pub fn term(&self, ordinal: u32) -> &str {
        &self.terms[ordinal as usize]
    }

    pub fn ordinal(&self, term: &str) -> Option<u32> {
        self.index.get(term).copied()
    }

    pub fn doc_freq(&self, ordinal: u32) -> u32 {
        self.doc_freq[ordinal as usize]
    }

    pub fn n_docs(&self) -> u32 {
        self.n_docs
    }
}

/// Counts document frequency over the corpus (sentence plus context) and
/// keeps terms whose document frequency reaches `cfg.min_count`.
pub fn build_vocab(corpus: &Corpus, cfg: &AnalyzerConfig) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut df: HashMap<String, u32> = HashMap::new();
    for doc in corpus.docs() {
        let uniq: HashSet<String> = tokenize(&doc.indexed_text(), cfg).into_iter().collect();
        for t in uniq {
            *df.entry(t).or_insert(0) += 1;
        }
    }
    let min = cfg.min_count.max(1);
    Vocab::from_counts(df.into_iter().filter(|&(_, c)| c >= min), corpus.len() as u32)
}

fn field_str(obj: &Value, field: &'static str, path: &Path, line: usize) -> Result<String> {
    match obj.get(field) {
        Some(Value::String(s)) => Ok(s.clone()),
        None | Some(Value::Null) => Err(Error::MissingField {
            path: path.to_path_buf(),
            line,
            field,
        }),
        Some(other) => Err(Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("field `{field}` must be a string, found {other}"),
        }),
    }
}

fn for_each_record(path: &Path, mut f: impl FnMut(Value, usize) -> Result<()>) -> Result<()> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            message: e.to_string(),
        })?;
        if !value.is_object() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno,
                message: "expected a JSON object".into(),
            });
        }
        f(value, lineno)?;
    }
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let mut docs = Vec::new();
    let mut seen = HashSet::new();
    for_each_record(path, |v, line| {
        let id = field_str(&v, "id", path, line)?;
        let sentence = field_str(&v, "sentence", path, line)?;
        let context = match v.get("context") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(other) => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: format!("field `context` must be a string or null, found {other}"),
                })
            }
        };
        if !seen.insert(id.clone()) {
            return Err(Error::DuplicateId {
                kind: "document",
                id,
                line,
            });
        }
        docs.push(Document { id, sentence, context });
        Ok(())
    })?;
    Corpus::new(docs)
}

pub fn load_queries(path: &Path) -> Result<Vec<Query>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for_each_record(path, |v, line| {
        let qid = field_str(&v, "qid", path, line)?;
        let text = field_str(&v, "text", path, line)?;
        let gold_id = field_str(&v, "gold_id", path, line)?;
        if !seen.insert(qid.clone()) {
            return Err(Error::DuplicateId {
                kind: "query",
                id: qid,
                line,
            });
        }
        out.push(Query { qid, text, gold_id });
        Ok(())
    })?;
    Ok(out)
}

pub fn load_dataset(corpus_path: &Path, queries_path: &Path) -> Result<(Corpus, Vec<Query>)> {
    Ok((load_corpus(corpus_path)?, load_queries(queries_path)?))
}

/// Checks that every query's gold id names a corpus document.
pub fn validate_queries(corpus: &Corpus, queries: &[Query]) -> Result<()> {
    match queries.iter().find(|q| corpus.get(&q.gold_id).is_none()) {
        Some(q) => Err(Error::UnknownGold {
            qid: q.qid.clone(),
            gold_id: q.gold_id.clone(),
        }),
        None => Ok(()),
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
