//! Precomputed embeddings and exact dot-product retrieval.
//!
//! Vectors live in an `EMB1` file: the 4-byte magic, a little-endian `u32`
//! row count, a `u32` dimension, then `count * dim` little-endian `f32`
//! values in row-major order. Row ids sit in a sidecar text file, one id per
//! LF-terminated line.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::parallel::{self, ExecMode};
use crate::router::softmax;

pub const EMB_MAGIC: &[u8; 4] = b"EMB1";

/// Rows scored per parallel work unit.
const ROW_CHUNK: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: String,
    pub score: f64,
}

/// Ranked retrieval output: scores non-increasing, ties by ascending id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoredList {
    hits: Vec<Hit>,
}

fn rank_order(a: &Hit, b: &Hit) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id))
}

impl ScoredList {
    /// Keeps the best `k` of `hits` in rank order.
    pub fn top_k(mut hits: Vec<Hit>, k: usize) -> Self {
        if k == 0 {
            return ScoredList::default();
        }
        if hits.len() > k {
            hits.select_nth_unstable_by(k - 1, rank_order);
            hits.truncate(k);
        }
        hits.sort_unstable_by(rank_order);
        ScoredList { hits }
    }

    pub fn hits(&self) -> &[Hit] {
        &self.hits
    }

    pub fn len(&self) -> usize {
        self.hits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.hits.iter().map(|h| h.score).collect()
    }

    pub fn truncated(&self, k: usize) -> ScoredList {
        ScoredList {
            hits: self.hits.iter().take(k).cloned().collect(),
        }
    }

    /// 1-based position of `id`, if retrieved.
    pub fn position(&self, id: &str) -> Option<usize> {
        self.hits.iter().position(|h| h.id == id).map(|p| p + 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    ids: Vec<String>,
    data: Vec<f32>,
    by_id: HashMap<String, usize>,
}

impl EmbeddingStore {
    pub fn new(ids: Vec<String>, dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Format("embedding dimension must be positive".into()));
        }
        if data.len() != ids.len() * dim {
            return Err(Error::LengthMismatch {
                left: ids.len() * dim,
                right: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding matrix"));
        }
        let mut by_id = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if id.is_empty() {
                return Err(Error::Format(format!("empty id on line {}", i + 1)));
            }
            if by_id.insert(id.clone(), i).is_some() {
                return Err(Error::DuplicateId {
                    kind: "embedding",
                    id: id.clone(),
                    line: i + 1,
                });
            }
        }
        Ok(EmbeddingStore { dim, ids, data, by_id })
    }

    pub fn from_rows(ids: Vec<String>, rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: bad.len(),
            });
        }
        Self::new(ids, dim, rows.concat())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.by_id.get(id).map(|&i| self.row(i))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(EMB_MAGIC);
        w.u32(self.ids.len() as u32);
        w.u32(self.dim as u32);
        for v in &self.data {
            w.bytes(&v.to_le_bytes());
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8], ids: Vec<String>) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4).ok() != Some(&EMB_MAGIC[..]) {
            return Err(Error::Format("not an EMB1 file (bad magic)".into()));
        }
        let count = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let expected = count
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format("header overflows".into()))?;
        if r.remaining() != expected {
            return Err(Error::Format(format!(
                "payload is {} bytes but header declares {count}x{dim} f32 ({expected} bytes)",
                r.remaining()
            )));
        }
        if ids.len() != count {
            return Err(Error::Format(format!(
                "{} ids for {count} vectors",
                ids.len()
            )));
        }
        let data = r
            .take(expected)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(ids, dim, data)
    }

    pub fn load(vec_path: &Path, ids_path: &Path) -> Result<Self> {
        let bytes = std::fs::read(vec_path).map_err(|e| Error::io(vec_path, e))?;
        let ids = read_ids(ids_path)?;
        Self::from_bytes(&bytes, ids)
    }

    pub fn save(&self, vec_path: &Path, ids_path: &Path) -> Result<()> {
        std::fs::write(vec_path, self.to_bytes()).map_err(|e| Error::io(vec_path, e))?;
        let mut text = String::new();
        for id in &self.ids {
            text.push_str(id);
            text.push('\n');
        }
        std::fs::write(ids_path, text).map_err(|e| Error::io(ids_path, e))
    }

    /// Dot product of `query` with every row, in row order.
    pub fn scores(&self, query: &[f32], mode: ExecMode) -> Result<Vec<f64>> {
        if query.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: query.len(),
            });
        }
        let n_chunks = self.len().div_ceil(ROW_CHUNK);
        let chunks = parallel::map_range(mode, n_chunks, |c| {
            let end = ((c + 1) * ROW_CHUNK).min(self.len());
            (c * ROW_CHUNK..end).map(|i| dot(self.row(i), query)).collect::<Vec<_>>()
        });
        Ok(chunks.concat())
    }

    /// Exact top-k by dot product; ties by ascending id.
    pub fn dense_topk(&self, query: &[f32], k: usize, mode: ExecMode) -> Result<ScoredList> {
        let scores = self.scores(query, mode)?;
        let hits = scores
            .into_iter()
            .zip(&self.ids)
            .map(|(score, id)| Hit {
                id: id.clone(),
                score,
            })
            .collect();
        Ok(ScoredList::top_k(hits, k))
    }
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

fn read_ids(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut ids: Vec<String> = text.split('\n').map(str::to_string).collect();
    if ids.last().is_some_and(String::is_empty) {
        ids.pop();
    }
    Ok(ids)
}

/// Score-sum fusion: each list is softmax-normalized on its own, then the
/// normalized scores are summed per document (absent counts as 0).
pub fn sum_fusion(sparse: &ScoredList, dense: &ScoredList, k: usize) -> ScoredList {
    let mut fused: HashMap<&str, f64> = HashMap::new();
    for list in [sparse, dense] {
        let probs = softmax(&list.scores());
        for (hit, p) in list.hits().iter().zip(probs) {
            *fused.entry(hit.id.as_str()).or_insert(0.0) += p;
        }
    }
    let hits = fused
        .into_iter()
        .map(|(id, score)| Hit {
            id: id.to_string(),
            score,
        })
        .collect();
    ScoredList::top_k(hits, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn list(pairs: &[(&str, f64)]) -> ScoredList {
        ScoredList::top_k(
            pairs
                .iter()
                .map(|&(id, score)| Hit {
                    id: id.into(),
                    score,
                })
                .collect(),
            pairs.len(),
        )
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("d{i:03}")).collect()
    }

    #[test]
    fn orthonormal_topk() {
        let store =
            EmbeddingStore::from_rows(vec!["d1".into(), "d2".into()], &[vec![1.0, 0.0], vec![0.0, 1.0]])
                .unwrap();
        let out = store.dense_topk(&[1.0, 0.0], 2, ExecMode::Sequential).unwrap();
        assert_eq!(out, list(&[("d1", 1.0), ("d2", 0.0)]));
    }

    #[test]
    fn zero_query_orders_by_id() {
        let store = EmbeddingStore::from_rows(
            vec!["b".into(), "c".into(), "a".into()],
            &[vec![1.0], vec![2.0], vec![3.0]],
        )
        .unwrap();
        let out = store.dense_topk(&[0.0], 3, ExecMode::Sequential).unwrap();
        let got: Vec<_> = out.hits().iter().map(|h| h.id.as_str()).collect();
        assert_eq!(got, ["a", "b", "c"]);
        assert!(out.scores().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn dimension_mismatch() {
        let store = EmbeddingStore::from_rows(vec!["a".into()], &[vec![1.0, 2.0]]).unwrap();
        assert!(matches!(
            store.dense_topk(&[1.0], 1, ExecMode::Sequential),
            Err(Error::DimensionMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn header_arithmetic_and_truncation() {
        let store = EmbeddingStore::from_rows(
            vec!["a".into(), "b".into()],
            &[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]],
        )
        .unwrap();
        let bytes = store.to_bytes();
        assert_eq!(bytes.len(), 12 + 24);
        let back = EmbeddingStore::from_bytes(&bytes, vec!["a".into(), "b".into()]).unwrap();
        assert_eq!((back.len(), back.dim()), (2, 3));

        let cut = &bytes[..bytes.len() - 4];
        assert!(matches!(
            EmbeddingStore::from_bytes(cut, vec!["a".into(), "b".into()]),
            Err(Error::Format(_))
        ));
        assert!(EmbeddingStore::from_bytes(&bytes, vec!["a".into()]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(EmbeddingStore::from_bytes(&bad, vec!["a".into(), "b".into()]).is_err());
        let mut nan = bytes.clone();
        nan[12..16].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            EmbeddingStore::from_bytes(&nan, vec!["a".into(), "b".into()]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn file_roundtrip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f32>> = (0..10)
            .map(|_| (0..7).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let store = EmbeddingStore::from_rows(ids(10), &rows).unwrap();
        let (v1, i1) = (dir.path().join("a.emb"), dir.path().join("a.ids"));
        let (v2, i2) = (dir.path().join("b.emb"), dir.path().join("b.ids"));
        store.save(&v1, &i1).unwrap();
        let loaded = EmbeddingStore::load(&v1, &i1).unwrap();
        loaded.save(&v2, &i2).unwrap();
        assert_eq!(std::fs::read(&v1).unwrap(), std::fs::read(&v2).unwrap());
        assert_eq!(std::fs::read(&i1).unwrap(), std::fs::read(&i2).unwrap());
        assert_eq!(loaded, store);
    }

    #[test]
    fn random_store_matches_argsort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rows: Vec<Vec<f32>> = (0..200)
            .map(|_| (0..16).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let store = EmbeddingStore::from_rows(ids(200), &rows).unwrap();
        for _ in 0..20 {
            let q: Vec<f32> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            // oracle: full score table, stable argsort
            let mut table: Vec<(f64, usize)> = rows
                .iter()
                .enumerate()
                .map(|(i, r)| (r.iter().zip(&q).map(|(a, b)| *a as f64 * *b as f64).sum(), i))
                .collect();
            table.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            for mode in [ExecMode::Sequential, ExecMode::Parallel] {
                let got = store.dense_topk(&q, 10, mode).unwrap();
                let want: Vec<String> = table[..10].iter().map(|&(_, i)| format!("d{i:03}")).collect();
                let got_ids: Vec<String> = got.hits().iter().map(|h| h.id.clone()).collect();
                assert_eq!(got_ids, want);
            }
        }
    }

    #[test]
    fn fusion_examples() {
        let dense = list(&[("d1", 0.9), ("d2", 0.1)]);
        let fused = sum_fusion(&ScoredList::default(), &dense, 10);
        let norm = softmax(&dense.scores());
        assert_eq!(fused.hits()[0].id, "d1");
        assert!((fused.hits()[0].score - norm[0]).abs() < 1e-15);
        assert!((fused.hits()[1].score - norm[1]).abs() < 1e-15);

        let one = list(&[("d1", 5.0)]);
        let fused = sum_fusion(&one, &list(&[("d1", -3.0)]), 5);
        assert_eq!(fused, list(&[("d1", 2.0)]));
    }

    #[test]
    fn fusion_overlapping_lists_by_hand() {
        // sparse: d1=ln 3, d2=0 -> softmax [3/4, 1/4]
        // dense:  d2=ln 2, d3=0 -> softmax [2/3, 1/3]
        let sparse = list(&[("d1", 3f64.ln()), ("d2", 0.0)]);
        let dense = list(&[("d2", 2f64.ln()), ("d3", 0.0)]);
        let fused = sum_fusion(&sparse, &dense, 3);
        let want = [("d2", 0.25 + 2.0 / 3.0), ("d1", 0.75), ("d3", 1.0 / 3.0)];
        for (h, (id, s)) in fused.hits().iter().zip(want) {
            assert_eq!(h.id, id);
            assert!((h.score - s).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn appending_a_weak_row_keeps_topk(seed: u64, k in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<Vec<f32>> = (0..20)
                .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let q: Vec<f32> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let store = EmbeddingStore::from_rows(ids(20), &rows).unwrap();
            let before = store.dense_topk(&q, k, ExecMode::Sequential).unwrap();
            let kth = before.hits().last().unwrap().score;
            // row = -q scaled has dot -|q|^2 * s; pick the scale to land strictly below kth
            let qq: f64 = q.iter().map(|&x| f64::from(x) * f64::from(x)).sum();
            prop_assume!(qq > 1e-6);
            let scale = ((kth.abs() + 1.0) / qq) as f32;
            let weak: Vec<f32> = q.iter().map(|&x| -x * scale).collect();
            prop_assume!(dot(&weak, &q) < kth);
            let mut rows2 = rows.clone();
            rows2.push(weak);
            let store2 = EmbeddingStore::from_rows(ids(21), &rows2).unwrap();
            prop_assert_eq!(store2.dense_topk(&q, k, ExecMode::Sequential).unwrap(), before);
        }

        #[test]
        fn unit_rows_score_in_unit_interval(seed: u64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let unit = |rng: &mut ChaCha8Rng| {
                let v: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
                let n = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-6);
                v.into_iter().map(|x| x / n).collect::<Vec<f32>>()
            };
            let rows: Vec<Vec<f32>> = (0..10).map(|_| unit(&mut rng)).collect();
            let store = EmbeddingStore::from_rows(ids(10), &rows).unwrap();
            let q = unit(&mut rng);
            for s in store.scores(&q, ExecMode::Sequential).unwrap() {
                prop_assert!((-1.0 - 1e-5..=1.0 + 1e-5).contains(&s));
            }
        }
    }
}
