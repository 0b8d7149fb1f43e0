//! End-to-end retrieval over the four systems: BM25 alone, dense alone, score
//! fusion, and the routed hybrid.

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::corpus::Query;
use crate::dense_store::{sum_fusion, EmbeddingStore, ScoredList};
use crate::error::{Error, Result};
use crate::evaluation::RankRecord;
use crate::parallel::{self, ExecMode};
use crate::evaluation::mrr;
use crate::router::{
    ceiling_rank, feature_variants, fit_logreg, fit_threshold, make_label, softmax_normalize, FeatureSpec,
    LogRegConfig, LogRegFit, NormalizedTop, Rank, Route, RouterModel, ThresholdFit, TOP_K,
};
use crate::sparse_index::InvertedIndex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum System {
    Sparse,
    Dense,
    Fusion,
    Hybrid,
}

impl System {
    pub const ALL: [System; 4] = [System::Sparse, System::Dense, System::Fusion, System::Hybrid];
}

impl fmt::Display for System {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            System::Sparse => "sparse",
            System::Dense => "dense",
            System::Fusion => "fusion",
            System::Hybrid => "hybrid",
        })
    }
}

impl FromStr for System {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sparse" => Ok(System::Sparse),
            "dense" => Ok(System::Dense),
            "fusion" => Ok(System::Fusion),
            "hybrid" => Ok(System::Hybrid),
            other => Err(Error::Invalid(format!("unknown system `{other}`"))),
        }
    }
}

/// Document embeddings plus the precomputed query embeddings, keyed by qid.
#[derive(Debug, Clone, Copy)]
pub struct DenseSide<'a> {
    pub docs: &'a EmbeddingStore,
    pub queries: &'a EmbeddingStore,
}

#[derive(Debug, Clone)]
pub struct Engine<'a> {
    index: &'a InvertedIndex,
    dense: Option<DenseSide<'a>>,
    router: Option<&'a RouterModel>,
    k: usize,
    /// Added to every dense call; stands in for query-encoder latency.
    dense_delay: Duration,
}

/// Everything the router and the evaluator need for one query.
#[derive(Debug, Clone)]
pub struct QueryAnalysis {
    /// BM25 list at depth `max(k, 64)`.
    pub sparse: ScoredList,
    pub dense: Option<ScoredList>,
    pub sparse_top: NormalizedTop,
    pub dense_top: NormalizedTop,
}

impl QueryAnalysis {
    pub fn features(&self, spec: &FeatureSpec) -> Vec<f64> {
        feature_variants(&self.sparse_top, &self.dense_top, spec)
    }
}

#[derive(Debug, Clone)]
pub struct Retrieval {
    pub list: ScoredList,
    pub route: Option<Route>,
}

impl<'a> Engine<'a> {
    pub fn new(index: &'a InvertedIndex, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Invalid("k must be at least 1".into()));
        }
        Ok(Engine {
            index,
            dense: None,
            router: None,
            k,
            dense_delay: Duration::ZERO,
        })
    }

    pub fn with_dense(mut self, dense: DenseSide<'a>) -> Result<Self> {
        if dense.docs.dim() != dense.queries.dim() {
            return Err(Error::DimensionMismatch {
                expected: dense.docs.dim(),
                got: dense.queries.dim(),
            });
        }
        self.dense = Some(dense);
        Ok(self)
    }

    pub fn with_router(mut self, router: &'a RouterModel) -> Result<Self> {
        router.check_analyzer(&self.index.analyzer().fingerprint())?;
        self.router = Some(router);
        Ok(self)
    }

    pub fn with_dense_delay(mut self, delay: Duration) -> Self {
        self.dense_delay = delay;
        self
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn index(&self) -> &InvertedIndex {
        self.index
    }

    fn sparse_depth(&self) -> usize {
        self.k.max(TOP_K)
    }

    fn dense_side(&self) -> Result<DenseSide<'a>> {
        self.dense
            .ok_or_else(|| Error::Invalid("dense retrieval requested without embeddings".into()))
    }

    pub fn sparse_list(&self, query: &Query) -> ScoredList {
        self.index.bm25_topk(&query.text, self.sparse_depth())
    }

    pub fn dense_list(&self, query: &Query) -> Result<ScoredList> {
        let side = self.dense_side()?;
        let qvec = side
            .queries
            .get(&query.qid)
            .ok_or_else(|| Error::UnknownId(query.qid.clone()))?;
        if !self.dense_delay.is_zero() {
            std::thread::sleep(self.dense_delay);
        }
        side.docs.dense_topk(qvec, self.k.max(TOP_K), ExecMode::Sequential)
    }

    /// Runs both retrievers and normalizes their top scores.
    pub fn analyze(&self, query: &Query) -> Result<QueryAnalysis> {
        let sparse = self.sparse_list(query);
        let sparse_top = softmax_normalize(&sparse.scores(), TOP_K)?;
        let (dense, dense_top) = match self.dense {
            Some(_) => {
                let d = self.dense_list(query)?;
                let top = softmax_normalize(&d.scores(), TOP_K)?;
                (Some(d), top)
            }
            None => (None, NormalizedTop::default()),
        };
        Ok(QueryAnalysis {
            sparse,
            dense,
            sparse_top,
            dense_top,
        })
    }

    fn router(&self) -> Result<&'a RouterModel> {
        self.router
            .ok_or_else(|| Error::Invalid("hybrid retrieval requested without a router".into()))
    }

    /// One query through `system`, doing only the work that system needs:
    /// the hybrid calls the dense retriever only when routed there (or when
    /// its features need dense scores).
    pub fn retrieve(&self, system: System, query: &Query) -> Result<Retrieval> {
        let list = match system {
            System::Sparse => self.index.bm25_topk(&query.text, self.k),
            System::Dense => self.dense_list(query)?.truncated(self.k),
            System::Fusion => {
                let s = self.index.bm25_topk(&query.text, self.k);
                let d = self.dense_list(query)?.truncated(self.k);
                sum_fusion(&s, &d, self.k)
            }
            System::Hybrid => {
                let router = self.router()?;
                let spec = router.feature_spec;
                let sparse = self.sparse_list(query);
                let sparse_top = softmax_normalize(&sparse.scores(), TOP_K)?;
                let mut dense = None;
                let dense_top = if spec.uses_dense() {
                    let d = self.dense_list(query)?;
                    let top = softmax_normalize(&d.scores(), TOP_K)?;
                    dense = Some(d);
                    top
                } else {
                    NormalizedTop::default()
                };
                let route = router.route(&feature_variants(&sparse_top, &dense_top, &spec));
                let list = match route {
                    Route::Sparse => sparse.truncated(self.k),
                    Route::Dense => match dense {
                        Some(d) => d.truncated(self.k),
                        None => self.dense_list(query)?.truncated(self.k),
                    },
                };
                return Ok(Retrieval {
                    list,
                    route: Some(route),
                });
            }
        };
        Ok(Retrieval { list, route: None })
    }

    /// Rank record for one query: gold ranks under every available system.
    pub fn record(&self, query: &Query) -> Result<RankRecord> {
        let a = self.analyze(query)?;
        let sparse = a.sparse.truncated(self.k);
        let sparse_rank = sparse.position(&query.gold_id);
        let (dense_rank, fusion_rank) = match &a.dense {
            Some(d) => {
                let d = d.truncated(self.k);
                let fused = sum_fusion(&sparse, &d, self.k);
                (d.position(&query.gold_id), fused.position(&query.gold_id))
            }
            None => (None, None),
        };
        let routed = self.router.map(|r| r.route(&a.features(&r.feature_spec)));
        let routed_rank: Rank = routed.and_then(|r| match r {
            Route::Sparse => sparse_rank,
            Route::Dense => dense_rank,
        });
        Ok(RankRecord {
            qid: query.qid.clone(),
            sparse_rank,
            dense_rank,
            fusion_rank,
            ceiling_rank: ceiling_rank(sparse_rank, dense_rank),
            routed,
            routed_rank,
            top_score: a.sparse_top.top(),
        })
    }

    /// Rank records for a query batch; fans out across queries.
    pub fn records(&self, queries: &[Query], mode: ExecMode) -> Result<Vec<RankRecord>> {
        parallel::try_map(mode, queries, |q| self.record(q))
    }

    /// Per-query analyses for a batch; fans out across queries.
    pub fn analyses(&self, queries: &[Query], mode: ExecMode) -> Result<Vec<QueryAnalysis>> {
        parallel::try_map(mode, queries, |q| self.analyze(q))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RouterKind {
    Threshold,
    LogReg,
}

impl FromStr for RouterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "threshold" => Ok(RouterKind::Threshold),
            "logreg" => Ok(RouterKind::LogReg),
            other => Err(Error::Invalid(format!("unknown router kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub enum FitDetail {
    Threshold(ThresholdFit),
    LogReg(LogRegFit),
}

/// Fits a router on `dev` queries. The engine must carry dense embeddings;
/// any router already attached is ignored. The threshold router always reads
/// `f[0]` of the BM25 ladder, so `spec` only applies to logistic regression.
pub fn fit_router(
    engine: &Engine<'_>,
    dev: &[Query],
    kind: RouterKind,
    spec: FeatureSpec,
    cfg: &LogRegConfig,
    mode: ExecMode,
) -> Result<(RouterModel, FitDetail)> {
    if dev.is_empty() {
        return Err(Error::EmptyInput("router dev set"));
    }
    engine.dense_side()?;
    let analyses = engine.analyses(dev, mode)?;
    let ranks: Vec<(Rank, Rank)> = analyses
        .iter()
        .zip(dev)
        .map(|(a, q)| {
            let d = a.dense.as_ref().expect("dense side present");
            (
                a.sparse.truncated(engine.k).position(&q.gold_id),
                d.truncated(engine.k).position(&q.gold_id),
            )
        })
        .collect();
    let hash = engine.index.analyzer().fingerprint();
    match kind {
        RouterKind::Threshold => {
            let f0: Vec<f64> = analyses.iter().map(|a| a.sparse_top.top()).collect();
            let fit = fit_threshold(&f0, |routes| {
                let chosen: Vec<Rank> = routes
                    .iter()
                    .zip(&ranks)
                    .map(|(r, &(s, d))| if *r == Route::Sparse { s } else { d })
                    .collect();
                mrr(&chosen).unwrap_or(0.0)
            })?;
            Ok((RouterModel::threshold(fit.theta, hash), FitDetail::Threshold(fit)))
        }
        RouterKind::LogReg => {
            let xs: Vec<Vec<f64>> = analyses.iter().map(|a| a.features(&spec)).collect();
            let labels: Vec<Route> = ranks.iter().map(|&(s, d)| make_label(s, d)).collect();
            let fit = fit_logreg(&xs, &labels, cfg)?;
            Ok((RouterModel::logreg(&fit, spec, hash), FitDetail::LogReg(fit)))
        }
    }
}
