//! Gold ranks, MRR, paired bootstrap significance, routing statistics, the
//! top-score histogram and the wall-clock timing harness.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Query;
use crate::dense_store::ScoredList;
use crate::error::{Error, Result};
use crate::parallel::{self, ExecMode};
use crate::pipeline::{Engine, System};
use crate::router::{make_label, Rank, Route};

/// Resamples drawn per parallel work unit.
const BOOTSTRAP_BLOCK: usize = 1000;

pub fn gold_rank(list: &ScoredList, gold_id: &str) -> Rank {
    list.position(gold_id)
}

pub fn reciprocal_rank(rank: Rank) -> f64 {
    rank.map_or(0.0, |r| 1.0 / r as f64)
}

pub fn reciprocal_ranks(ranks: &[Rank]) -> Vec<f64> {
    ranks.iter().map(|&r| reciprocal_rank(r)).collect()
}

/// Mean reciprocal rank; a missing gold contributes 0.
pub fn mrr(ranks: &[Rank]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::EmptyInput("rank list"));
    }
    Ok(ranks.iter().map(|&r| reciprocal_rank(r)).sum::<f64>() / ranks.len() as f64)
}

/// One-sided paired bootstrap. Query indices are resampled with replacement
/// `iters` times; the p-value is the fraction of resamples in which system A
/// does not beat system B (mean difference `<= 0`).
///
/// Resamples are drawn in blocks of 1000, block `i` from ChaCha stream `i` of
/// `seed`, so the result does not depend on `mode`.
pub fn bootstrap_test(rr_a: &[f64], rr_b: &[f64], iters: usize, seed: u64, mode: ExecMode) -> Result<f64> {
    if rr_a.len() != rr_b.len() {
        return Err(Error::LengthMismatch {
            left: rr_a.len(),
            right: rr_b.len(),
        });
    }
    if rr_a.is_empty() {
        return Err(Error::EmptyInput("bootstrap sample"));
    }
    if iters == 0 {
        return Err(Error::Invalid("bootstrap needs at least one iteration".into()));
    }
    let diffs: Vec<f64> = rr_a.iter().zip(rr_b).map(|(a, b)| a - b).collect();
    let n = diffs.len();
    let blocks = iters.div_ceil(BOOTSTRAP_BLOCK);
    let counts = parallel::map_range(mode, blocks, |block| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(block as u64);
        let draws = BOOTSTRAP_BLOCK.min(iters - block * BOOTSTRAP_BLOCK);
        (0..draws)
            .filter(|_| {
                let total: f64 = (0..n).map(|_| diffs[rng.random_range(0..n)]).sum();
                total <= 0.0
            })
            .count()
    });
    Ok(counts.iter().sum::<usize>() as f64 / iters as f64)
}

/// Per-query gold ranks under each system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRecord {
    pub qid: String,
    pub sparse_rank: Rank,
    pub dense_rank: Rank,
    #[serde(default)]
    pub fusion_rank: Rank,
    #[serde(default)]
    pub ceiling_rank: Rank,
    #[serde(default)]
    pub routed: Option<Route>,
    #[serde(default)]
    pub routed_rank: Rank,
    /// Top softmax-normalized BM25 score, `f[0]`.
    #[serde(default)]
    pub top_score: f64,
}

impl RankRecord {
    pub fn label(&self) -> Route {
        make_label(self.sparse_rank, self.dense_rank)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Comparison {
    pub improved: usize,
    pub worse: usize,
    pub unchanged: usize,
}

impl Comparison {
    fn tally(pairs: impl Iterator<Item = (Rank, Rank)>) -> Self {
        let key = |r: Rank| r.unwrap_or(usize::MAX);
        let mut c = Comparison::default();
        for (routed, base) in pairs {
            match key(routed).cmp(&key(base)) {
                std::cmp::Ordering::Less => c.improved += 1,
                std::cmp::Ordering::Greater => c.worse += 1,
                std::cmp::Ordering::Equal => c.unchanged += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.improved + self.worse + self.unchanged
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingStats {
    pub routed_sparse: usize,
    pub routed_dense: usize,
    pub vs_sparse: Comparison,
    pub vs_dense: Comparison,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub mrr: BTreeMap<String, f64>,
    pub routing: Option<RoutingStats>,
    /// Keyed `"a>b"`: one-sided bootstrap p-value that `a` beats `b`.
    pub p_values: BTreeMap<String, f64>,
}

fn column(records: &[RankRecord], f: impl Fn(&RankRecord) -> Rank) -> Vec<Rank> {
    records.iter().map(f).collect()
}

/// MRR per system plus, when every record was routed, the routing counts and
/// improved/worse tallies against each individual retriever (absent = worst).
pub fn routing_report(records: &[RankRecord]) -> Result<EvalReport> {
    let sparse = column(records, |r| r.sparse_rank);
    let dense = column(records, |r| r.dense_rank);
    let mut mrrs = BTreeMap::new();
    mrrs.insert("sparse".to_string(), mrr(&sparse)?);
    mrrs.insert("dense".to_string(), mrr(&dense)?);
    mrrs.insert("fusion".to_string(), mrr(&column(records, |r| r.fusion_rank))?);
    mrrs.insert("ceiling".to_string(), mrr(&column(records, |r| r.ceiling_rank))?);

    let routing = if records.iter().all(|r| r.routed.is_some()) {
        mrrs.insert("hybrid".to_string(), mrr(&column(records, |r| r.routed_rank))?);
        let routed_dense = records.iter().filter(|r| r.routed == Some(Route::Dense)).count();
        Some(RoutingStats {
            routed_sparse: records.len() - routed_dense,
            routed_dense,
            vs_sparse: Comparison::tally(records.iter().map(|r| (r.routed_rank, r.sparse_rank))),
            vs_dense: Comparison::tally(records.iter().map(|r| (r.routed_rank, r.dense_rank))),
        })
    } else {
        None
    };
    Ok(EvalReport {
        n: records.len(),
        mrr: mrrs,
        routing,
        p_values: BTreeMap::new(),
    })
}

/// Reciprocal ranks of one system's column.
pub fn system_rr(records: &[RankRecord], system: &str) -> Result<Vec<f64>> {
    let pick: fn(&RankRecord) -> Rank = match system {
        "sparse" => |r| r.sparse_rank,
        "dense" => |r| r.dense_rank,
        "fusion" => |r| r.fusion_rank,
        "ceiling" => |r| r.ceiling_rank,
        "hybrid" => |r| r.routed_rank,
        other => return Err(Error::Invalid(format!("unknown system column `{other}`"))),
    };
    Ok(records.iter().map(|r| reciprocal_rank(pick(r))).collect())
}

impl EvalReport {
    /// Adds `a>b` bootstrap p-values for each pair.
    pub fn add_significance(
        &mut self,
        records: &[RankRecord],
        pairs: &[(&str, &str)],
        iters: usize,
        seed: u64,
        mode: ExecMode,
    ) -> Result<()> {
        for (a, b) in pairs {
            let p = bootstrap_test(&system_rr(records, a)?, &system_rr(records, b)?, iters, seed, mode)?;
            self.p_values.insert(format!("{a}>{b}"), p);
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        let _ = writeln!(out, "n,{}", self.n);
        for (k, v) in &self.mrr {
            let _ = writeln!(out, "mrr_{k},{v:.6}");
        }
        if let Some(r) = &self.routing {
            let _ = writeln!(out, "routed_sparse,{}", r.routed_sparse);
            let _ = writeln!(out, "routed_dense,{}", r.routed_dense);
            for (name, c) in [("sparse", r.vs_sparse), ("dense", r.vs_dense)] {
                let _ = writeln!(out, "improved_vs_{name},{}", c.improved);
                let _ = writeln!(out, "worse_vs_{name},{}", c.worse);
                let _ = writeln!(out, "unchanged_vs_{name},{}", c.unchanged);
            }
        }
        for (k, v) in &self.p_values {
            let _ = writeln!(out, "p_{k},{v:.6}");
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("queries: {}\n", self.n);
        for (k, v) in &self.mrr {
            let _ = writeln!(out, "  MRR {k:<8} {v:.4}");
        }
        if let Some(r) = &self.routing {
            let _ = writeln!(out, "routed to sparse: {}", r.routed_sparse);
            let _ = writeln!(out, "routed to dense:  {}", r.routed_dense);
            let _ = writeln!(out, "improved vs sparse: {}  worse: {}", r.vs_sparse.improved, r.vs_sparse.worse);
            let _ = writeln!(out, "improved vs dense:  {}  worse: {}", r.vs_dense.improved, r.vs_dense.worse);
        }
        for (k, v) in &self.p_values {
            let _ = writeln!(out, "p({k}) = {v:.5}");
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub sparse_no_worse: usize,
    pub dense_better: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bins: Vec<HistogramBin>,
}

impl Histogram {
    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.sparse_no_worse + b.dense_better).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,sparse_no_worse,dense_better\n");
        for b in &self.bins {
            let _ = writeln!(out, "{:.2},{:.2},{},{}", b.lo, b.hi, b.sparse_no_worse, b.dense_better);
        }
        out
    }
}

/// Counts queries per top-score bin on `[0, 1]`, split by which retriever
/// ranked the gold better. The last bin is closed on the right.
pub fn histogram_report(records: &[RankRecord], f0: &[f64], bins: usize) -> Result<Histogram> {
    if records.len() != f0.len() {
        return Err(Error::LengthMismatch {
            left: records.len(),
            right: f0.len(),
        });
    }
    if bins == 0 {
        return Err(Error::Invalid("histogram needs at least one bin".into()));
    }
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|i| HistogramBin {
            lo: i as f64 / bins as f64,
            hi: (i + 1) as f64 / bins as f64,
            sparse_no_worse: 0,
            dense_better: 0,
        })
        .collect();
    for (r, &f) in records.iter().zip(f0) {
        let i = ((f * bins as f64).floor().max(0.0) as usize).min(bins - 1);
        match r.label() {
            Route::Sparse => out[i].sparse_no_worse += 1,
            Route::Dense => out[i].dense_better += 1,
        }
    }
    Ok(Histogram { bins: out })
}

/// `size` distinct indices from `0..n`, sorted.
pub fn sample_indices(n: usize, size: usize, seed: u64) -> Result<Vec<usize>> {
    if size > n {
        return Err(Error::Invalid(format!("cannot sample {size} of {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, size).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Random dev subset of `dev_size` queries; the rest is the test split.
pub fn split_dev_test(n: usize, dev_size: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let dev = sample_indices(n, dev_size, seed)?;
    let mut is_dev = vec![false; n];
    for &i in &dev {
        is_dev[i] = true;
    }
    let test = (0..n).filter(|&i| !is_dev[i]).collect();
    Ok((dev, test))
}

/// Shuffled `k`-fold partition of `0..n`; fold sizes differ by at most one.
pub fn kfold(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k == 0 || k > n {
        return Err(Error::Invalid(format!("cannot split {n} items into {k} folds")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); k];
    for (i, idx) in perm.into_iter().enumerate() {
        folds[i % k].push(idx);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub system: System,
    pub warmup: usize,
    /// Seconds per timed query, in query order.
    pub per_query: Vec<f64>,
    pub total: f64,
    pub routed_dense: usize,
}

impl TimingReport {
    pub fn to_text(&self) -> String {
        format!(
            "# clock: std::time::Instant (monotonic), resolution ~{}ns\nsystem,queries,warmup,total_s,routed_dense\n{},{},{},{:.6},{}\n",
            clock_resolution().as_nanos(),
            self.system,
            self.per_query.len(),
            self.warmup,
            self.total,
            self.routed_dense,
        )
    }
}

/// Smallest nonzero step observed on the monotonic clock.
pub fn clock_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..64 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

/// Runs `warmup` untimed queries (cycled from `warmup_pool`), then times each
/// body query end to end with batch size one. Single-threaded.
pub fn time_pipeline(
    engine: &Engine<'_>,
    system: System,
    warmup_pool: &[Query],
    body: &[Query],
    warmup: usize,
) -> Result<TimingReport> {
    if !warmup_pool.is_empty() {
        for q in warmup_pool.iter().cycle().take(warmup) {
            std::hint::black_box(engine.retrieve(system, q)?);
        }
    }
    let mut per_query = Vec::with_capacity(body.len());
    let mut routed_dense = 0;
    for q in body {
        let start = Instant::now();
        let out = engine.retrieve(system, q)?;
        per_query.push(start.elapsed().as_secs_f64());
        if out.route == Some(Route::Dense) {
            routed_dense += 1;
        }
        std::hint::black_box(out);
    }
    Ok(TimingReport {
        system,
        warmup,
        total: per_query.iter().fold(0.0, |a, b| a + b),
        per_query,
        routed_dense,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense_store::Hit;
    use proptest::prelude::*;

    fn rec(sparse: Rank, dense: Rank, routed: Option<Route>) -> RankRecord {
        let routed_rank = routed.and_then(|r| match r {
            Route::Sparse => sparse,
            Route::Dense => dense,
        });
        RankRecord {
            qid: "q".into(),
            sparse_rank: sparse,
            dense_rank: dense,
            fusion_rank: None,
            ceiling_rank: crate::router::ceiling_rank(sparse, dense),
            routed,
            routed_rank,
            top_score: 0.0,
        }
    }

    #[test]
    fn gold_rank_examples() {
        let list = ScoredList::top_k(
            vec![
                Hit { id: "d1".into(), score: 0.9 },
                Hit { id: "d2".into(), score: 0.5 },
            ],
            2,
        );
        assert_eq!(gold_rank(&list, "d2"), Some(2));
        assert_eq!(gold_rank(&list, "d9"), None);
        let tied = ScoredList::top_k(
            vec![
                Hit { id: "b".into(), score: 1.0 },
                Hit { id: "a".into(), score: 1.0 },
            ],
            2,
        );
        assert_eq!(gold_rank(&tied, "a"), Some(1));
        assert_eq!(gold_rank(&tied, "b"), Some(2));
    }

    #[test]
    fn mrr_examples() {
        assert_eq!(mrr(&[Some(1), Some(1), Some(1)]).unwrap(), 1.0);
        assert_eq!(mrr(&[Some(1), Some(2), Some(4)]).unwrap(), 7.0 / 12.0);
        assert_eq!(mrr(&[None, Some(1)]).unwrap(), 0.5);
        assert!(mrr(&[]).is_err());
    }

    #[test]
    fn bootstrap_examples() {
        let x: Vec<f64> = (0..50).map(|i| 1.0 / (1 + i % 7) as f64).collect();
        assert_eq!(bootstrap_test(&x, &x, 10_000, 3, ExecMode::Parallel).unwrap(), 1.0);
        assert_eq!(bootstrap_test(&[1.0; 100], &[0.5; 100], 10_000, 3, ExecMode::Parallel).unwrap(), 0.0);
        assert!(bootstrap_test(&[1.0], &[1.0, 2.0], 10, 0, ExecMode::Sequential).is_err());
    }

    #[test]
    fn bootstrap_is_mode_independent_and_seeded() {
        let a: Vec<f64> = (0..200).map(|i| ((i * 37) % 11) as f64 / 10.0).collect();
        let b: Vec<f64> = (0..200).map(|i| ((i * 17) % 13) as f64 / 12.0).collect();
        let p1 = bootstrap_test(&a, &b, 2500, 9, ExecMode::Sequential).unwrap();
        let p2 = bootstrap_test(&a, &b, 2500, 9, ExecMode::Parallel).unwrap();
        assert_eq!(p1, p2);
        assert!(p1 > 0.0 && p1 < 1.0);
    }

    #[test]
    fn routing_report_examples() {
        let all_sparse: Vec<_> = [(Some(1), Some(2)), (Some(3), Some(1)), (None, Some(4))]
            .into_iter()
            .map(|(s, d)| rec(s, d, Some(Route::Sparse)))
            .collect();
        let r = routing_report(&all_sparse).unwrap();
        let stats = r.routing.unwrap();
        assert_eq!((stats.vs_sparse.improved, stats.vs_sparse.worse), (0, 0));
        assert_eq!(stats.routed_sparse, 3);

        // hand tally over four records
        let recs = vec![
            rec(Some(1), Some(3), Some(Route::Dense)),  // vs sparse worse, vs dense same
            rec(Some(5), Some(1), Some(Route::Dense)),  // vs sparse improved
            rec(None, Some(2), Some(Route::Sparse)),    // vs dense worse
            rec(Some(2), None, Some(Route::Sparse)),    // vs dense improved
        ];
        let r = routing_report(&recs).unwrap();
        let s = r.routing.clone().unwrap();
        assert_eq!((s.routed_sparse, s.routed_dense), (2, 2));
        assert_eq!(s.vs_sparse, Comparison { improved: 1, worse: 1, unchanged: 2 });
        assert_eq!(s.vs_dense, Comparison { improved: 1, worse: 1, unchanged: 2 });
        assert!(r.to_csv().contains("improved_vs_sparse,1"));
    }

    #[test]
    fn routing_counts_cover_every_query() {
        let mut recs = Vec::new();
        for i in 0..500 {
            let route = if i < 306 { Route::Sparse } else { Route::Dense };
            recs.push(rec(Some(1 + i % 3), Some(1 + i % 5), Some(route)));
        }
        let s = routing_report(&recs).unwrap().routing.unwrap();
        assert_eq!((s.routed_sparse, s.routed_dense), (306, 194));
        assert_eq!(s.vs_sparse.total(), 500);
    }

    #[test]
    fn histogram_examples() {
        let h = histogram_report(&[rec(Some(1), Some(4), None)], &[0.95], 10).unwrap();
        assert_eq!(h.bins[9].sparse_no_worse, 1);
        assert_eq!(h.total(), 1);
        let recs: Vec<_> = (0..11).map(|_| rec(Some(2), Some(1), None)).collect();
        let f0: Vec<f64> = (0..11).map(|i| i as f64 / 10.0).collect();
        let h = histogram_report(&recs, &f0, 10).unwrap();
        assert_eq!(h.total(), 11);
        assert_eq!(h.bins[9].dense_better, 2);
        assert!(h.to_csv().starts_with("bin_lo,bin_hi"));
    }

    #[test]
    fn histogram_bimodal_shape() {
        let mut recs = Vec::new();
        let mut f0 = Vec::new();
        for i in 0..100 {
            if i % 2 == 0 {
                recs.push(rec(Some(1), Some(7), None));
                f0.push(0.85 + (i % 10) as f64 / 100.0);
            } else {
                recs.push(rec(None, Some(1), None));
                f0.push((i % 19) as f64 / 100.0);
            }
        }
        let h = histogram_report(&recs, &f0, 10).unwrap();
        assert_eq!(h.bins[8].sparse_no_worse + h.bins[9].sparse_no_worse, 50);
        assert_eq!(h.bins[0].dense_better + h.bins[1].dense_better, 50);
    }

    #[test]
    fn splits_are_reproducible() {
        let (dev, test) = split_dev_test(100, 30, 5).unwrap();
        assert_eq!((dev.len(), test.len()), (30, 70));
        assert_eq!(split_dev_test(100, 30, 5).unwrap().0, dev);
        let folds = kfold(103, 5, 1).unwrap();
        let mut all: Vec<usize> = folds.concat();
        all.sort_unstable();
        assert_eq!(all, (0..103).collect::<Vec<_>>());
        assert_eq!(kfold(103, 5, 1).unwrap(), folds);
        assert!(sample_indices(3, 4, 0).is_err());
    }

    fn arb_rank() -> impl Strategy<Value = Rank> {
        prop_oneof![Just(None), (1usize..50).prop_map(Some)]
    }

    proptest! {
        #[test]
        fn ceiling_dominates_and_counts_conserve(ranks in proptest::collection::vec((arb_rank(), arb_rank(), any::<bool>()), 1..60)) {
            let recs: Vec<_> = ranks
                .iter()
                .map(|&(s, d, dense)| rec(s, d, Some(if dense { Route::Dense } else { Route::Sparse })))
                .collect();
            let r = routing_report(&recs).unwrap();
            let c = r.mrr["ceiling"];
            prop_assert!(c >= r.mrr["sparse"] && c >= r.mrr["dense"]);
            prop_assert!((0.0..=1.0).contains(&c));
            let s = r.routing.unwrap();
            prop_assert_eq!(s.vs_sparse.total(), recs.len());
            prop_assert_eq!(s.vs_dense.total(), recs.len());

            // routing every query by its own label attains the ceiling
            let oracle: Vec<_> = ranks.iter().map(|&(s, d, _)| rec(s, d, Some(make_label(s, d)))).collect();
            let ro = routing_report(&oracle).unwrap();
            prop_assert_eq!(ro.mrr["hybrid"], ro.mrr["ceiling"]);
        }

        #[test]
        fn bootstrap_self_comparison_is_one(xs in proptest::collection::vec(0.0f64..1.0, 1..40), seed: u64) {
            prop_assert_eq!(bootstrap_test(&xs, &xs, 500, seed, ExecMode::Sequential).unwrap(), 1.0);
        }
    }
}
