//! Inverted index with Okapi BM25 ranking, plus the smooth-idf tf-idf
//! vectorizer used as the probe's sparse query representation.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{ByteReader, ByteWriter};
use crate::corpus::{tokenize, AnalyzerConfig, Corpus, Vocab};
use crate::dense_store::{Hit, ScoredList};
use crate::error::{Error, Result};

pub const INDEX_MAGIC: &[u8; 4] = b"SIX1";
pub const INDEX_VERSION: u16 = 1;

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex {
    analyzer: AnalyzerConfig,
    k1: f64,
    b: f64,
    doc_ids: Vec<String>,
    doc_len: Vec<u32>,
    avg_doc_len: f64,
    postings: HashMap<String, Vec<Posting>>,
}

fn mean_len(doc_len: &[u32]) -> f64 {
    if doc_len.is_empty() {
        return 0.0;
    }
    doc_len.iter().map(|&l| u64::from(l)).sum::<u64>() as f64 / doc_len.len() as f64
}

/// `ln(1 + (N - df + 0.5) / (df + 0.5))`
pub fn bm25_idf(n_docs: usize, df: usize) -> f64 {
    let (n, df) = (n_docs as f64, df as f64);
    (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
}

impl InvertedIndex {
    pub fn build(corpus: &Corpus, analyzer: AnalyzerConfig, k1: f64, b: f64) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if !(k1 > 0.0 && k1.is_finite()) || !(0.0..=1.0).contains(&b) {
            return Err(Error::Invalid(format!("bm25 parameters out of range: k1={k1}, b={b}")));
        }
        let mut postings: HashMap<String, Vec<Posting>> = HashMap::new();
        let mut doc_len = Vec::with_capacity(corpus.len());
        let mut doc_ids = Vec::with_capacity(corpus.len());
        for (ord, doc) in corpus.docs().iter().enumerate() {
            let tokens = tokenize(&doc.indexed_text(), &analyzer);
            doc_len.push(tokens.len() as u32);
            doc_ids.push(doc.id.clone());
            let mut tf: HashMap<String, u32> = HashMap::new();
            for t in tokens {
                *tf.entry(t).or_insert(0) += 1;
            }
            for (term, count) in tf {
                postings.entry(term).or_default().push(Posting {
                    doc: ord as u32,
                    tf: count,
                });
            }
        }
        let avg_doc_len = mean_len(&doc_len);
        Ok(InvertedIndex {
            analyzer,
            k1,
            b,
            doc_ids,
            doc_len,
            avg_doc_len,
            postings,
        })
    }

    pub fn analyzer(&self) -> &AnalyzerConfig {
        &self.analyzer
    }

    pub fn n_docs(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn doc_len(&self) -> &[u32] {
        &self.doc_len
    }

    pub fn avg_doc_len(&self) -> f64 {
        self.avg_doc_len
    }

    pub fn params(&self) -> (f64, f64) {
        (self.k1, self.b)
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map_or(&[], Vec::as_slice)
    }

    pub fn n_terms(&self) -> usize {
        self.postings.len()
    }

    pub fn bm25_topk(&self, query: &str, k: usize) -> ScoredList {
        self.bm25_topk_terms(&tokenize(query, &self.analyzer), k)
    }

    /// Scores already-analyzed query terms. Repeated query terms count once.
    pub fn bm25_topk_terms<S: AsRef<str>>(&self, terms: &[S], k: usize) -> ScoredList {
        let uniq: BTreeSet<&str> = terms.iter().map(AsRef::as_ref).collect();
        let n = self.n_docs();
        let mut acc: HashMap<u32, f64> = HashMap::new();
        for term in uniq {
            let plist = self.postings(term);
            if plist.is_empty() {
                continue;
            }
            let idf = bm25_idf(n, plist.len());
            for p in plist {
                let tf = f64::from(p.tf);
                let norm = 1.0 - self.b + self.b * f64::from(self.doc_len[p.doc as usize]) / self.avg_doc_len;
                *acc.entry(p.doc).or_insert(0.0) += idf * tf * (self.k1 + 1.0) / (tf + self.k1 * norm);
            }
        }
        let hits = acc
            .into_iter()
            .map(|(doc, score)| Hit {
                id: self.doc_ids[doc as usize].clone(),
                score,
            })
            .collect();
        ScoredList::top_k(hits, k)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(INDEX_MAGIC);
        w.u16(INDEX_VERSION);

        let mut a = ByteWriter::new();
        a.u8(u8::from(self.analyzer.lowercase) | (u8::from(self.analyzer.stem) << 1));
        a.u32(self.analyzer.min_count);
        a.u32(self.analyzer.stopwords.len() as u32);
        for s in &self.analyzer.stopwords {
            a.str(s);
        }
        w.section(a);

        let mut s = ByteWriter::new();
        s.f64(self.k1);
        s.f64(self.b);
        s.u32(self.doc_ids.len() as u32);
        for (id, len) in self.doc_ids.iter().zip(&self.doc_len) {
            s.str(id);
            s.varint(u64::from(*len));
        }
        w.section(s);

        let mut p = ByteWriter::new();
        let mut terms: Vec<&String> = self.postings.keys().collect();
        terms.sort();
        p.u32(terms.len() as u32);
        for term in terms {
            let plist = &self.postings[term];
            p.str(term);
            p.varint(plist.len() as u64);
            let mut prev = 0u32;
            for post in plist {
                p.varint(u64::from(post.doc - prev));
                p.varint(u64::from(post.tf));
                prev = post.doc;
            }
        }
        w.section(p);
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4).ok() != Some(&INDEX_MAGIC[..]) {
            return Err(Error::Format("not a SIX1 index (bad magic)".into()));
        }
        let version = r.u16()?;
        if version != INDEX_VERSION {
            return Err(Error::Format(format!("unsupported index version {version}")));
        }

        let mut a = r.section()?;
        let flags = a.u8()?;
        let min_count = a.u32()?;
        let n_stop = a.u32()?;
        let mut stopwords = BTreeSet::new();
        for _ in 0..n_stop {
            stopwords.insert(a.str()?);
        }
        a.finish("analyzer section")?;
        let analyzer = AnalyzerConfig {
            lowercase: flags & 1 != 0,
            stem: flags & 2 != 0,
            stopwords,
            min_count,
        };

        let mut s = r.section()?;
        let k1 = s.f64()?;
        let b = s.f64()?;
        let n_docs = s.u32()? as usize;
        let mut doc_ids = Vec::with_capacity(n_docs);
        let mut doc_len = Vec::with_capacity(n_docs);
        for _ in 0..n_docs {
            doc_ids.push(s.str()?);
            doc_len.push(
                u32::try_from(s.varint()?).map_err(|_| Error::Format("document length overflow".into()))?,
            );
        }
        s.finish("statistics section")?;

        let mut p = r.section()?;
        let n_terms = p.u32()? as usize;
        let mut postings = HashMap::with_capacity(n_terms);
        for _ in 0..n_terms {
            let term = p.str()?;
            let count = p.varint()? as usize;
            let mut plist = Vec::with_capacity(count.min(n_docs));
            let mut doc = 0u64;
            for i in 0..count {
                let delta = p.varint()?;
                if i > 0 && delta == 0 {
                    return Err(Error::Format(format!("postings for `{term}` not strictly sorted")));
                }
                doc += delta;
                let tf = p.varint()?;
                if doc >= n_docs as u64 {
                    return Err(Error::Format(format!("posting doc {doc} out of range")));
                }
                plist.push(Posting {
                    doc: doc as u32,
                    tf: u32::try_from(tf).map_err(|_| Error::Format("tf overflow".into()))?,
                });
            }
            postings.insert(term, plist);
        }
        p.finish("postings section")?;
        r.finish("index file")?;

        Ok(InvertedIndex {
            analyzer,
            k1,
            b,
            avg_doc_len: mean_len(&doc_len),
            doc_ids,
            doc_len,
            postings,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Sparse vector with strictly increasing ordinals.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SparseVector {
    pub entries: Vec<(u32, f64)>,
}

impl SparseVector {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|(_, w)| w * w).sum::<f64>().sqrt()
    }

    pub fn to_dense(&self, dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; dim];
        for &(i, w) in &self.entries {
            out[i as usize] = w;
        }
        out
    }
}

/// tf · (ln((1 + N) / (1 + df)) + 1), L2-normalized; out-of-vocabulary terms dropped.
pub fn tfidf_vector(vocab: &Vocab, text: &str, cfg: &AnalyzerConfig) -> SparseVector {
    let mut tf: HashMap<u32, u32> = HashMap::new();
    for t in tokenize(text, cfg) {
        if let Some(o) = vocab.ordinal(&t) {
            *tf.entry(o).or_insert(0) += 1;
        }
    }
    let n = f64::from(vocab.n_docs());
    let mut entries: Vec<(u32, f64)> = tf
        .into_iter()
        .map(|(o, c)| {
            let idf = ((1.0 + n) / (1.0 + f64::from(vocab.doc_freq(o)))).ln() + 1.0;
            (o, f64::from(c) * idf)
        })
        .collect();
    entries.sort_unstable_by_key(|&(o, _)| o);
    let norm = entries.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
    if norm > 0.0 {
        for e in &mut entries {
            e.1 /= norm;
        }
    }
    SparseVector { entries }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, Document};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn corpus(texts: &[&str]) -> Corpus {
        Corpus::new(
            texts
                .iter()
                .enumerate()
                .map(|(i, t)| Document {
                    id: format!("d{}", i + 1),
                    sentence: t.to_string(),
                    context: None,
                })
                .collect(),
        )
        .unwrap()
    }

    fn build(texts: &[&str]) -> InvertedIndex {
        InvertedIndex::build(&corpus(texts), AnalyzerConfig::default(), DEFAULT_K1, DEFAULT_B).unwrap()
    }

    fn random_corpus(rng: &mut ChaCha8Rng, n_docs: usize, vocab: usize) -> Vec<String> {
        (0..n_docs)
            .map(|_| {
                let len = rng.random_range(1..12);
                (0..len)
                    .map(|_| format!("w{}x", rng.random_range(0..vocab)))
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect()
    }

    #[test]
    fn single_doc_stats() {
        let idx = build(&["cat dog"]);
        assert_eq!(idx.doc_len(), [2]);
        assert_eq!(idx.avg_doc_len(), 2.0);
    }

    #[test]
    fn sentence_and_context_are_concatenated() {
        let c = Corpus::new(vec![Document {
            id: "d1".into(),
            sentence: "a cat".into(),
            context: Some("see a cat run".into()),
        }])
        .unwrap();
        let mut cfg = AnalyzerConfig::default();
        cfg.stopwords.clear();
        // single-character tokens are dropped by the analyzer, so count by hand over >=2-char tokens
        let idx = InvertedIndex::build(&c, cfg.clone(), DEFAULT_K1, DEFAULT_B).unwrap();
        assert_eq!(tokenize("a cat see a cat run", &cfg).len() as u32, idx.doc_len()[0]);
        assert_eq!(idx.postings("cat"), [Posting { doc: 0, tf: 2 }]);
        assert_eq!(c.docs()[0].indexed_text(), "a cat see a cat run");
        assert_eq!(c.docs()[0].indexed_text().split(' ').count(), 6);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let err = InvertedIndex::build(&Corpus::default(), AnalyzerConfig::default(), 1.2, 0.75);
        assert!(matches!(err, Err(Error::EmptyCorpus)));
    }

    #[test]
    fn no_overlap_gives_empty_list() {
        let idx = build(&["cat", "dog"]);
        assert!(idx.bm25_topk("bird", 10).is_empty());
    }

    #[test]
    fn hand_evaluated_score() {
        let idx = build(&["cat", "dog"]);
        let out = idx.bm25_topk("cat", 10);
        assert_eq!(out.len(), 1);
        assert_eq!(out.hits()[0].id, "d1");
        assert!((out.hits()[0].score - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ties_break_by_id() {
        let idx = build(&["zeta cat", "alpha cat", "cat beta"]);
        let out = idx.bm25_topk("cat", 3);
        let ids: Vec<_> = out.hits().iter().map(|h| h.id.as_str()).collect();
        assert_eq!(ids, ["d1", "d2", "d3"]);
    }

    /// Dense term-count matrix scorer applying the same formula.
    fn brute_force(texts: &[String], query: &str, k1: f64, b: f64) -> Vec<(String, f64)> {
        let cfg = AnalyzerConfig::default();
        let docs: Vec<Vec<String>> = texts.iter().map(|t| tokenize(t, &cfg)).collect();
        let mut terms: Vec<String> = docs.iter().flatten().cloned().collect();
        terms.sort();
        terms.dedup();
        let counts: Vec<Vec<usize>> = docs
            .iter()
            .map(|d| terms.iter().map(|t| d.iter().filter(|x| *x == t).count()).collect())
            .collect();
        let n = texts.len() as f64;
        let avg = docs.iter().map(Vec::len).sum::<usize>() as f64 / n;
        let mut q: Vec<String> = tokenize(query, &cfg);
        q.sort();
        q.dedup();
        let mut out = Vec::new();
        for (d, row) in counts.iter().enumerate() {
            let mut score = 0.0;
            let mut matched = false;
            for qt in &q {
                let Some(j) = terms.iter().position(|t| t == qt) else { continue };
                let tf = row[j] as f64;
                if tf == 0.0 {
                    continue;
                }
                matched = true;
                let df = counts.iter().filter(|r| r[j] > 0).count() as f64;
                let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
                let len = docs[d].len() as f64;
                score += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * len / avg));
            }
            if matched {
                out.push((format!("d{}", d + 1), score));
            }
        }
        out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        out
    }

    #[test]
    fn matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let texts = random_corpus(&mut rng, 50, 30);
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let idx = build(&refs);
        for _ in 0..20 {
            let q = (0..rng.random_range(1..5))
                .map(|_| format!("w{}x", rng.random_range(0..35)))
                .collect::<Vec<_>>()
                .join(" ");
            let got = idx.bm25_topk(&q, 50);
            let want = brute_force(&texts, &q, DEFAULT_K1, DEFAULT_B);
            assert_eq!(got.len(), want.len());
            for (h, (id, s)) in got.hits().iter().zip(&want) {
                assert_eq!(&h.id, id);
                assert!((h.score - s).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn postings_match_nested_loop_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let texts = random_corpus(&mut rng, 50, 25);
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let idx = build(&refs);
        let cfg = AnalyzerConfig::default();
        for v in 0..25 {
            let term = format!("w{v}x");
            let mut want = Vec::new();
            for (d, t) in texts.iter().enumerate() {
                let tf = tokenize(t, &cfg).iter().filter(|x| **x == term).count();
                if tf > 0 {
                    want.push(Posting { doc: d as u32, tf: tf as u32 });
                }
            }
            assert_eq!(idx.postings(&term), want.as_slice());
        }
        let sum: u64 = idx.doc_len().iter().map(|&l| l as u64).sum();
        assert_eq!(idx.avg_doc_len(), sum as f64 / 50.0);
    }

    #[test]
    fn binary_roundtrip_and_rejection() {
        let idx = build(&["cat dog", "dog bird bird", "fish"]);
        let bytes = idx.to_bytes();
        assert_eq!(&bytes[..4], b"SIX1");
        let back = InvertedIndex::from_bytes(&bytes).unwrap();
        assert_eq!(back, idx);
        assert_eq!(back.to_bytes(), bytes);

        let mut bad = bytes.clone();
        bad[0] = b'Z';
        assert!(InvertedIndex::from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(InvertedIndex::from_bytes(&bad), Err(Error::Format(m)) if m.contains("version")));
        assert!(InvertedIndex::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn tfidf_example() {
        let c = corpus(&["cat dog"]);
        let cfg = AnalyzerConfig::default();
        let vocab = build_vocab(&c, &cfg).unwrap();
        let v = tfidf_vector(&vocab, "cat cat dog", &cfg);
        let s5 = 5f64.sqrt();
        assert_eq!(v.entries.len(), 2);
        assert!((v.entries[0].1 - 2.0 / s5).abs() < 1e-15);
        assert!((v.entries[1].1 - 1.0 / s5).abs() < 1e-15);
        assert!(tfidf_vector(&vocab, "bird fish", &cfg).is_empty());
    }

    #[test]
    fn tfidf_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = AnalyzerConfig::default();
        for _ in 0..20 {
            let texts = random_corpus(&mut rng, 15, 20);
            let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
            let vocab = build_vocab(&corpus(&refs), &cfg).unwrap();
            let text = random_corpus(&mut rng, 1, 25).remove(0);
            let got = tfidf_vector(&vocab, &text, &cfg).to_dense(vocab.len());
            // oracle: count per vocab term, document frequency by scanning the texts
            let toks = tokenize(&text, &cfg);
            let n = texts.len() as f64;
            let mut want: Vec<f64> = vocab
                .terms()
                .iter()
                .map(|t| {
                    let tf = toks.iter().filter(|x| *x == t).count() as f64;
                    let df = texts.iter().filter(|d| tokenize(d, &cfg).contains(t)).count() as f64;
                    tf * (((1.0 + n) / (1.0 + df)).ln() + 1.0)
                })
                .collect();
            let norm = want.iter().map(|w| w * w).sum::<f64>().sqrt();
            if norm > 0.0 {
                want.iter_mut().for_each(|w| *w /= norm);
            }
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn tfidf_is_unit_norm(seed: u64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let texts = random_corpus(&mut rng, 10, 15);
            let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
            let cfg = AnalyzerConfig::default();
            let vocab = build_vocab(&corpus(&refs), &cfg).unwrap();
            let v = tfidf_vector(&vocab, &random_corpus(&mut rng, 1, 15)[0], &cfg);
            if !v.is_empty() {
                prop_assert!((v.norm() - 1.0).abs() < 1e-12);
                prop_assert!(v.entries.windows(2).all(|w| w[0].0 < w[1].0));
            }
        }

        #[test]
        fn scores_nonnegative_and_full_k_returns_all(seed: u64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let texts = random_corpus(&mut rng, 30, 20);
            let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
            let idx = build(&refs);
            let q = random_corpus(&mut rng, 1, 20).remove(0);
            let out = idx.bm25_topk(&q, idx.n_docs());
            prop_assert!(out.scores().iter().all(|&s| s >= 0.0));
            let mut ids: Vec<_> = out.hits().iter().map(|h| h.id.clone()).collect();
            let n = ids.len();
            ids.sort();
            ids.dedup();
            prop_assert_eq!(ids.len(), n);
            prop_assert_eq!(n, brute_force(&texts, &q, DEFAULT_K1, DEFAULT_B).len());
        }

        #[test]
        fn disjoint_document_only_rescales_idf(seed: u64, qterm in 0usize..15) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let texts = random_corpus(&mut rng, 20, 15);
            let mut refs: Vec<&str> = texts.iter().map(String::as_str).collect();
            let q = format!("w{qterm}x");
            let a = InvertedIndex::build(&corpus(&refs), AnalyzerConfig::default(), DEFAULT_K1, 0.0).unwrap();
            refs.push("zzqq yyrr zzqq");
            let b = InvertedIndex::build(&corpus(&refs), AnalyzerConfig::default(), DEFAULT_K1, 0.0).unwrap();
            let sa = a.bm25_topk(&q, 100);
            let sb = b.bm25_topk(&q, 100);
            // the new document never matches; N moves by one, so each score is
            // rescaled by the same idf ratio and the ranking is untouched
            prop_assert_eq!(sa.len(), sb.len());
            if let Some(first) = sa.hits().first() {
                let df = a.postings(&q).len();
                let ratio = bm25_idf(21, df) / bm25_idf(20, df);
                for (x, y) in sa.hits().iter().zip(sb.hits()) {
                    prop_assert_eq!(&x.id, &y.id);
                    prop_assert!((y.score - x.score * ratio).abs() < 1e-12);
                }
                prop_assert!(first.score > 0.0);
            }
        }

        #[test]
        fn monotone_in_tf(extra in 0usize..6) {
            let base = "cat dog bird";
            let heavy = format!("{base}{}", " cat".repeat(extra));
            // b = 0 holds the length normalization fixed
            let score = |text: &str| {
                InvertedIndex::build(&corpus(&[text, "dog fish", "emu owl"]), AnalyzerConfig::default(), DEFAULT_K1, 0.0)
                    .unwrap()
                    .bm25_topk("cat", 1)
                    .hits()[0]
                    .score
            };
            prop_assert!(score(&heavy) >= score(base));
            prop_assert!(score(base) > 0.0);
        }
    }
}
