//! Per-query routing between the sparse and dense retrievers.
//!
//! The top BM25 scores of a query are softmax-normalized and summarized as a
//! ladder of prefix means, `f[i] = mean(S[0..2^i])` for `i = 0..=6`. A router
//! either thresholds `f[0]` or applies a logistic-regression model to the
//! ladder. Label convention: `Dense` is 1, `Sparse` is 0.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of top scores normalized before feature extraction.
pub const TOP_K: usize = 64;
/// Ladder length: prefix means over 1, 2, 4, ..., 64 entries.
pub const LADDER_LEN: usize = 7;

/// Softmax with max subtraction. Empty in, empty out.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let Some(max) = scores.iter().copied().reduce(f64::max) else {
        return Vec::new();
    };
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Softmax-normalized top scores, descending.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NormalizedTop {
    probs: Vec<f64>,
}

impl NormalizedTop {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn top(&self) -> f64 {
        self.probs.first().copied().unwrap_or(0.0)
    }
}

/// Softmax over the `min(k, scores.len())` largest scores, returned in
/// descending order. Input order does not matter.
pub fn softmax_normalize(scores: &[f64], k: usize) -> Result<NormalizedTop> {
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("retrieval scores"));
    }
    let mut head = scores.to_vec();
    head.sort_unstable_by(|a, b| b.total_cmp(a));
    head.truncate(k);
    Ok(NormalizedTop { probs: softmax(&head) })
}

pub type FeatureVector = [f64; LADDER_LEN];

/// Prefix means of the probabilities zero-padded to [`TOP_K`] entries.
pub fn extract_features(top: &NormalizedTop) -> FeatureVector {
    let p = |j: usize| top.probs.get(j).copied().unwrap_or(0.0);
    let mut f = [0.0; LADDER_LEN];
    let mut prefix = p(0);
    f[0] = prefix;
    for (i, slot) in f.iter_mut().enumerate().skip(1) {
        // each block is summed on its own so that, for descending input, the
        // new block sum never exceeds the previous prefix sum after rounding
        let lo = 1usize << (i - 1);
        let block: f64 = (lo..2 * lo).map(p).sum();
        prefix += block;
        *slot = prefix / (2 * lo) as f64;
    }
    f
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Route {
    Sparse,
    Dense,
}

impl Route {
    pub fn label(self) -> f64 {
        match self {
            Route::Sparse => 0.0,
            Route::Dense => 1.0,
        }
    }
}

impl fmt::Display for Route {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Route::Sparse => "sparse",
            Route::Dense => "dense",
        })
    }
}

/// 1-based rank of the gold document; `None` when it was not retrieved.
pub type Rank = Option<usize>;

fn rank_key(r: Rank) -> usize {
    r.unwrap_or(usize::MAX)
}

/// `Dense` only when the dense retriever ranks the gold strictly better.
pub fn make_label(sparse: Rank, dense: Rank) -> Route {
    if rank_key(dense) < rank_key(sparse) {
        Route::Dense
    } else {
        Route::Sparse
    }
}

pub fn ceiling_rank(sparse: Rank, dense: Rank) -> Rank {
    match (sparse, dense) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSource {
    Sparse,
    Dense,
    Both,
}

/// Either the whole ladder or the single prefix mean over the top `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Ladder {
    Full,
    TopMean(u32),
}

impl Ladder {
    fn rung(k: u32) -> Option<usize> {
        (k.is_power_of_two() && k as usize <= TOP_K).then(|| k.trailing_zeros() as usize)
    }
}

impl FromStr for Ladder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "full" {
            return Ok(Ladder::Full);
        }
        let k: u32 = s
            .parse()
            .map_err(|_| Error::Invalid(format!("ladder must be `full` or a power of two, got `{s}`")))?;
        Ladder::rung(k)
            .map(|_| Ladder::TopMean(k))
            .ok_or_else(|| Error::Invalid(format!("top-k mean must be a power of two <= {TOP_K}, got {k}")))
    }
}

impl TryFrom<String> for Ladder {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Ladder> for String {
    fn from(l: Ladder) -> String {
        match l {
            Ladder::Full => "full".into(),
            Ladder::TopMean(k) => k.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub source: FeatureSource,
    pub ladder: Ladder,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        FeatureSpec {
            source: FeatureSource::Sparse,
            ladder: Ladder::Full,
        }
    }
}

impl FeatureSpec {
    pub fn uses_sparse(&self) -> bool {
        self.source != FeatureSource::Dense
    }

    pub fn uses_dense(&self) -> bool {
        self.source != FeatureSource::Sparse
    }

    pub fn len(&self) -> usize {
        let per = match self.ladder {
            Ladder::Full => LADDER_LEN,
            Ladder::TopMean(_) => 1,
        };
        match self.source {
            FeatureSource::Both => 2 * per,
            _ => per,
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn names(&self) -> Vec<String> {
        let rungs: Vec<usize> = match self.ladder {
            Ladder::Full => (0..LADDER_LEN).collect(),
            Ladder::TopMean(k) => vec![Ladder::rung(k).unwrap_or(0)],
        };
        let sources: &[&str] = match self.source {
            FeatureSource::Sparse => &["sparse"],
            FeatureSource::Dense => &["dense"],
            FeatureSource::Both => &["sparse", "dense"],
        };
        sources
            .iter()
            .flat_map(|s| rungs.iter().map(move |&i| format!("{s}_top{}", 1usize << i)))
            .collect()
    }
}

/// Builds the feature vector for `spec`. Sparse features come first when both
/// sources are used.
pub fn feature_variants(sparse: &NormalizedTop, dense: &NormalizedTop, spec: &FeatureSpec) -> Vec<f64> {
    let pick = |top: &NormalizedTop| -> Vec<f64> {
        let f = extract_features(top);
        match spec.ladder {
            Ladder::Full => f.to_vec(),
            Ladder::TopMean(k) => vec![f[Ladder::rung(k).unwrap_or(0)]],
        }
    };
    match spec.source {
        FeatureSource::Sparse => pick(sparse),
        FeatureSource::Dense => pick(dense),
        FeatureSource::Both => {
            let mut v = pick(sparse);
            v.extend(pick(dense));
            v
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RouterParams {
    Threshold { theta: f64 },
    LogReg { weights: Vec<f64>, bias: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouterModel {
    pub params: RouterParams,
    pub feature_spec: FeatureSpec,
    pub analyzer_hash: String,
}

#[derive(Serialize, Deserialize)]
struct RouterFile {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    theta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias: Option<f64>,
    feature_spec: FeatureSpec,
    analyzer_hash: String,
}

impl RouterModel {
    pub fn threshold(theta: f64, analyzer_hash: impl Into<String>) -> Self {
        RouterModel {
            params: RouterParams::Threshold { theta },
            feature_spec: FeatureSpec {
                source: FeatureSource::Sparse,
                ladder: Ladder::TopMean(1),
            },
            analyzer_hash: analyzer_hash.into(),
        }
    }

    pub fn logreg(fit: &LogRegFit, feature_spec: FeatureSpec, analyzer_hash: impl Into<String>) -> Self {
        RouterModel {
            params: RouterParams::LogReg {
                weights: fit.weights.clone(),
                bias: fit.bias,
            },
            feature_spec,
            analyzer_hash: analyzer_hash.into(),
        }
    }

    /// Probability of label 1 (`Dense`); `None` for threshold routers.
    pub fn dense_probability(&self, features: &[f64]) -> Option<f64> {
        match &self.params {
            RouterParams::Threshold { .. } => None,
            RouterParams::LogReg { weights, bias } => {
                let z: f64 = weights.iter().zip(features).map(|(w, x)| w * x).sum::<f64>() + bias;
                Some(sigmoid(z))
            }
        }
    }

    pub fn route(&self, features: &[f64]) -> Route {
        match &self.params {
            RouterParams::Threshold { theta } => {
                if features.first().copied().unwrap_or(0.0) >= *theta {
                    Route::Sparse
                } else {
                    Route::Dense
                }
            }
            RouterParams::LogReg { .. } => {
                if self.dense_probability(features).unwrap_or(0.5) >= 0.5 {
                    Route::Dense
                } else {
                    Route::Sparse
                }
            }
        }
    }

    /// Named coefficients (logistic regression) or the threshold.
    pub fn coefficients(&self) -> Vec<(String, f64)> {
        match &self.params {
            RouterParams::Threshold { theta } => vec![("theta".into(), *theta)],
            RouterParams::LogReg { weights, bias } => self
                .feature_spec
                .names()
                .into_iter()
                .zip(weights.iter().copied())
                .chain(std::iter::once(("bias".to_string(), *bias)))
                .collect(),
        }
    }

    pub fn check_analyzer(&self, fingerprint: &str) -> Result<()> {
        if self.analyzer_hash != fingerprint {
            return Err(Error::AnalyzerMismatch {
                expected: self.analyzer_hash.clone(),
                got: fingerprint.to_string(),
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let (kind, theta, weights, bias) = match &self.params {
            RouterParams::Threshold { theta } => ("threshold", Some(*theta), None, None),
            RouterParams::LogReg { weights, bias } => ("logreg", None, Some(weights.clone()), Some(*bias)),
        };
        Ok(serde_json::to_string_pretty(&RouterFile {
            kind: kind.into(),
            theta,
            weights,
            bias,
            feature_spec: self.feature_spec,
            analyzer_hash: self.analyzer_hash.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: RouterFile = serde_json::from_str(text)?;
        let params = match (f.kind.as_str(), f.theta, f.weights, f.bias) {
            ("threshold", Some(theta), None, None) => {
                if !(0.0..=1.0).contains(&theta) {
                    return Err(Error::Invalid(format!("threshold {theta} outside [0, 1]")));
                }
                RouterParams::Threshold { theta }
            }
            ("logreg", None, Some(weights), Some(bias)) => {
                if weights.len() != f.feature_spec.len() {
                    return Err(Error::DimensionMismatch {
                        expected: f.feature_spec.len(),
                        got: weights.len(),
                    });
                }
                RouterParams::LogReg { weights, bias }
            }
            (kind, ..) => {
                return Err(Error::Invalid(format!(
                    "router kind `{kind}` with a mismatched payload"
                )))
            }
        };
        Ok(RouterModel {
            params,
            feature_spec: f.feature_spec,
            analyzer_hash: f.analyzer_hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Grid-search result for the one-parameter router.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdFit {
    pub theta: f64,
    pub dev_mrr: f64,
    /// `(theta, dev MRR)` for every grid point.
    pub grid: Vec<(f64, f64)>,
}

/// Evaluates θ ∈ {0.0, 0.1, …, 1.0}, routing `Sparse` iff `f0 >= θ`, and keeps
/// the θ with the best `dev_mrr`; ties go to the smallest θ.
pub fn fit_threshold(f0: &[f64], dev_mrr: impl Fn(&[Route]) -> f64) -> Result<ThresholdFit> {
    if f0.is_empty() {
        return Err(Error::EmptyInput("threshold dev set"));
    }
    let mut grid = Vec::with_capacity(11);
    let mut best: Option<(f64, f64)> = None;
    for step in 0..=10 {
        let theta = f64::from(step) / 10.0;
        let routes: Vec<Route> = f0
            .iter()
            .map(|&f| if f >= theta { Route::Sparse } else { Route::Dense })
            .collect();
        let score = dev_mrr(&routes);
        grid.push((theta, score));
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((theta, score));
        }
    }
    let (theta, dev_mrr) = best.expect("grid is non-empty");
    Ok(ThresholdFit { theta, dev_mrr, grid })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRegConfig {
    pub lr: f64,
    pub epochs: usize,
    pub l2: f64,
    /// `None` starts from all zeros; `Some(seed)` draws N(0, 0.01²) weights.
    pub init_seed: Option<u64>,
}

impl Default for LogRegConfig {
    fn default() -> Self {
        LogRegConfig {
            lr: 0.1,
            epochs: 2000,
            l2: 0.0,
            init_seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRegFit {
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Objective value before each epoch's update, plus the final value.
    pub loss_history: Vec<f64>,
}

impl LogRegFit {
    pub fn predict_proba(&self, x: &[f64]) -> f64 {
        sigmoid(self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad_w: Vec<f64>,
    pub grad_b: f64,
}

/// Mean binary cross-entropy of `sigmoid(w·x + b)` plus `l2/2 · |w|²`, and its gradient.
pub fn logreg_loss_grad(weights: &[f64], bias: f64, xs: &[Vec<f64>], ys: &[f64], l2: f64) -> LossGrad {
    let n = xs.len() as f64;
    let mut loss = 0.0;
    let mut grad_w = vec![0.0; weights.len()];
    let mut grad_b = 0.0;
    for (x, &y) in xs.iter().zip(ys) {
        let z: f64 = weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + bias;
        loss += softplus(z) - y * z;
        let r = sigmoid(z) - y;
        for (g, v) in grad_w.iter_mut().zip(x) {
            *g += r * v;
        }
        grad_b += r;
    }
    loss /= n;
    grad_b /= n;
    for (g, w) in grad_w.iter_mut().zip(weights) {
        *g = *g / n + l2 * w;
    }
    loss += 0.5 * l2 * weights.iter().map(|w| w * w).sum::<f64>();
    LossGrad { loss, grad_w, grad_b }
}

/// Full-batch gradient descent on the mean cross-entropy.
pub fn fit_logreg(xs: &[Vec<f64>], labels: &[Route], cfg: &LogRegConfig) -> Result<LogRegFit> {
    if xs.is_empty() {
        return Err(Error::EmptyInput("logistic regression training set"));
    }
    if xs.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: xs.len(),
            right: labels.len(),
        });
    }
    let dim = xs[0].len();
    if let Some(bad) = xs.iter().find(|x| x.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: bad.len(),
        });
    }
    if xs.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("router features"));
    }
    let ys: Vec<f64> = labels.iter().map(|r| r.label()).collect();
    let mut weights = match cfg.init_seed {
        None => vec![0.0; dim],
        Some(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, 0.01).expect("valid normal");
            (0..dim).map(|_| normal.sample(&mut rng)).collect()
        }
    };
    let mut bias = 0.0;
    let mut loss_history = Vec::with_capacity(cfg.epochs + 1);
    for _ in 0..cfg.epochs {
        let g = logreg_loss_grad(&weights, bias, xs, &ys, cfg.l2);
        loss_history.push(g.loss);
        for (w, gw) in weights.iter_mut().zip(&g.grad_w) {
            *w -= cfg.lr * gw;
        }
        bias -= cfg.lr * g.grad_b;
    }
    loss_history.push(logreg_loss_grad(&weights, bias, xs, &ys, cfg.l2).loss);
    Ok(LogRegFit {
        weights,
        bias,
        loss_history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_examples() {
        let t = softmax_normalize(&[2f64.ln(), 0.0], TOP_K).unwrap();
        assert!(close(t.probs()[0], 2.0 / 3.0, 1e-15));
        assert!(close(t.probs()[1], 1.0 / 3.0, 1e-15));
        for c in [-5.0, 0.0, 3.5, 1e6] {
            let t = softmax_normalize(&[c; 4], TOP_K).unwrap();
            assert!(t.probs().iter().all(|&p| p == 0.25));
        }
        assert!(softmax_normalize(&[], TOP_K).unwrap().probs().is_empty());
        assert!(softmax_normalize(&[1.0, f64::NAN], TOP_K).is_err());
        assert_eq!(softmax_normalize(&[3.0, 2.0, 1.0], 2).unwrap().probs().len(), 2);
    }

    #[test]
    fn ladder_examples() {
        let t = NormalizedTop {
            probs: vec![0.4, 0.3, 0.2, 0.1],
        };
        let want = [0.4, 0.35, 0.25, 0.125, 0.0625, 0.03125, 0.015625];
        for (g, w) in extract_features(&t).iter().zip(want) {
            assert!(close(*g, w, 1e-15), "{g} vs {w}");
        }
        let one = NormalizedTop { probs: vec![1.0] };
        let f = extract_features(&one);
        for (i, v) in f.iter().enumerate() {
            assert_eq!(*v, 1.0 / (1u32 << i) as f64);
        }
        assert_eq!(extract_features(&NormalizedTop::default()), [0.0; LADDER_LEN]);
    }

    #[test]
    fn labels_and_ceiling() {
        assert_eq!(make_label(Some(1), Some(3)), Route::Sparse);
        assert_eq!(make_label(Some(5), Some(1)), Route::Dense);
        assert_eq!(make_label(Some(2), Some(2)), Route::Sparse);
        assert_eq!(make_label(None, None), Route::Sparse);
        assert_eq!(make_label(None, Some(9)), Route::Dense);
        assert_eq!(ceiling_rank(Some(1), Some(3)), Some(1));
        assert_eq!(ceiling_rank(None, Some(2)), Some(2));
        assert_eq!(ceiling_rank(None, None), None);
    }

    #[test]
    fn route_rules() {
        let m = RouterModel::threshold(0.8, "h");
        assert_eq!(m.route(&[0.9]), Route::Sparse);
        assert_eq!(m.route(&[0.5]), Route::Dense);
        assert_eq!(m.route(&[0.8]), Route::Sparse);
        let lr = RouterModel {
            params: RouterParams::LogReg {
                weights: vec![0.0; 7],
                bias: 0.0,
            },
            feature_spec: FeatureSpec::default(),
            analyzer_hash: "h".into(),
        };
        assert_eq!(lr.dense_probability(&[0.3; 7]), Some(0.5));
        assert_eq!(lr.route(&[0.3; 7]), Route::Dense);
    }

    #[test]
    fn variants_shapes() {
        let s = NormalizedTop {
            probs: vec![0.4, 0.3, 0.2, 0.1],
        };
        let d = NormalizedTop {
            probs: vec![0.7, 0.1, 0.1, 0.1],
        };
        let both = FeatureSpec {
            source: FeatureSource::Both,
            ladder: Ladder::Full,
        };
        let v = feature_variants(&s, &d, &both);
        assert_eq!(v.len(), 14);
        assert_eq!(&v[..7], &extract_features(&s));
        assert_eq!(&v[7..], &extract_features(&d));
        let top1 = FeatureSpec {
            source: FeatureSource::Sparse,
            ladder: Ladder::TopMean(1),
        };
        assert_eq!(feature_variants(&s, &d, &top1), vec![0.4]);
        let top16 = FeatureSpec {
            source: FeatureSource::Dense,
            ladder: Ladder::TopMean(16),
        };
        assert_eq!(feature_variants(&s, &d, &top16), vec![extract_features(&d)[4]]);
        assert_eq!(both.names()[7], "dense_top1");
        assert!("3".parse::<Ladder>().is_err());
        assert!("128".parse::<Ladder>().is_err());
    }

    #[test]
    fn threshold_degenerate_sparse_dev() {
        // sparse always better: routing everything sparse is optimal and θ=0 wins the tie
        let f0 = [0.3, 0.9, 0.05, 0.6, 0.45];
        let fit = fit_threshold(&f0, |routes| {
            routes.iter().filter(|r| **r == Route::Sparse).count() as f64 / routes.len() as f64
        })
        .unwrap();
        assert_eq!(fit.theta, 0.0);
        assert_eq!(fit.grid.len(), 11);
    }

    #[test]
    fn threshold_dense_dev_enumerated() {
        // five dev queries, dense always better, all f0 < 1
        let f0 = [0.3, 0.95, 0.05, 0.6, 0.45];
        let mrr = |routes: &[Route]| {
            routes.iter().filter(|r| **r == Route::Dense).count() as f64 / routes.len() as f64
        };
        let fit = fit_threshold(&f0, mrr).unwrap();
        // hand enumeration: θ=1.0 is the only grid point with every f0 < θ
        assert_eq!(fit.theta, 1.0);
        assert!(f0.iter().all(|&f| f < fit.theta));
        assert_eq!(fit.dev_mrr, 1.0);
        assert!(fit_threshold(&[], mrr).is_err());
    }

    #[test]
    fn threshold_bimodal_dev_recovers_ceiling() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut f0 = Vec::new();
        let mut best = Vec::new();
        for i in 0..40 {
            if i % 2 == 0 {
                f0.push(0.9 + rng.random_range(-0.05..0.05));
                best.push(Route::Sparse);
            } else {
                f0.push(0.1 + rng.random_range(-0.05..0.05));
                best.push(Route::Dense);
            }
        }
        let mrr = |routes: &[Route]| {
            routes.iter().zip(&best).filter(|(a, b)| a == b).count() as f64 / routes.len() as f64
        };
        let fit = fit_threshold(&f0, mrr).unwrap();
        assert_eq!(fit.theta, 0.2);
        assert_eq!(fit.dev_mrr, 1.0);
        for (theta, score) in &fit.grid {
            if (0.2..=0.8).contains(theta) {
                assert_eq!(*score, 1.0);
            }
        }
    }

    fn separable_set() -> (Vec<Vec<f64>>, Vec<Route>) {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        while xs.len() < 100 {
            let f0: f64 = rng.random_range(0.0..1.0);
            if (f0 - 0.5).abs() < 0.1 {
                continue;
            }
            let rest: Vec<f64> = (1..LADDER_LEN).map(|i| f0 / (1u32 << i) as f64).collect();
            let mut x = vec![f0];
            x.extend(rest);
            ys.push(if f0 < 0.5 { Route::Dense } else { Route::Sparse });
            xs.push(x);
        }
        (xs, ys)
    }

    #[test]
    fn zero_init_predicts_half() {
        let (xs, ys) = separable_set();
        let cfg = LogRegConfig {
            epochs: 0,
            ..LogRegConfig::default()
        };
        let fit = fit_logreg(&xs, &ys, &cfg).unwrap();
        assert!(xs.iter().all(|x| fit.predict_proba(x) == 0.5));
    }

    #[test]
    fn separable_set_reaches_full_accuracy_with_monotone_loss() {
        let (xs, ys) = separable_set();
        let fit = fit_logreg(&xs, &ys, &LogRegConfig {
            epochs: 20_000,
            ..LogRegConfig::default()
        })
        .unwrap();
        let correct = xs
            .iter()
            .zip(&ys)
            .filter(|(x, y)| (fit.predict_proba(x) >= 0.5) == (**y == Route::Dense))
            .count();
        assert_eq!(correct, xs.len());
        assert!(fit.loss_history.windows(2).all(|w| w[1] <= w[0] + 1e-15));
    }

    #[test]
    fn logreg_rejects_bad_input() {
        assert!(fit_logreg(&[], &[], &LogRegConfig::default()).is_err());
        assert!(fit_logreg(&[vec![f64::NAN]], &[Route::Dense], &LogRegConfig::default()).is_err());
        assert!(fit_logreg(&[vec![1.0], vec![1.0, 2.0]], &[Route::Dense, Route::Sparse], &LogRegConfig::default()).is_err());
        // single-label data is allowed
        let fit = fit_logreg(&[vec![0.2], vec![0.4]], &[Route::Sparse; 2], &LogRegConfig::default()).unwrap();
        assert!(fit.predict_proba(&[0.3]) < 0.5);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let eps = 1e-5;
        for _ in 0..20 {
            let dim = rng.random_range(1..10);
            let n = rng.random_range(1..20);
            let xs: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
            let ys: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..2u8))).collect();
            let w: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
            let b = rng.random_range(-1.0..1.0);
            let l2 = rng.random_range(0.0..0.1);
            let g = logreg_loss_grad(&w, b, &xs, &ys, l2);
            for j in 0..dim {
                let mut wp = w.clone();
                wp[j] += eps;
                let mut wm = w.clone();
                wm[j] -= eps;
                let fd = (logreg_loss_grad(&wp, b, &xs, &ys, l2).loss - logreg_loss_grad(&wm, b, &xs, &ys, l2).loss) / (2.0 * eps);
                assert!((fd - g.grad_w[j]).abs() <= 1e-5 * g.grad_w[j].abs().max(1e-3));
            }
        }
    }

    #[test]
    fn model_json_roundtrip_and_validation() {
        let fit = LogRegFit {
            weights: vec![0.1, -0.2, 0.3, 0.0, 0.0, 0.0, 1.0],
            bias: -0.5,
            loss_history: vec![],
        };
        let m = RouterModel::logreg(&fit, FeatureSpec::default(), "abc");
        let back = RouterModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        let t = RouterModel::threshold(0.3, "abc");
        assert_eq!(RouterModel::from_json(&t.to_json().unwrap()).unwrap(), t);
        let bad = r#"{"kind":"threshold","theta":0.5,"bias":1.0,"feature_spec":{"source":"sparse","ladder":"1"},"analyzer_hash":"x"}"#;
        assert!(RouterModel::from_json(bad).is_err());
        assert!(t.check_analyzer("abc").is_ok());
        assert!(t.check_analyzer("zzz").is_err());
        assert_eq!(m.coefficients().last().unwrap(), &("bias".to_string(), -0.5));
    }

    proptest! {
        #[test]
        fn normalization_and_ladder_invariants(mut scores in proptest::collection::vec(-50.0f64..50.0, 0..120), shift in -100.0f64..100.0) {
            scores.sort_by(|a, b| b.total_cmp(a));
            let t = softmax_normalize(&scores, TOP_K).unwrap();
            if !scores.is_empty() {
                prop_assert!((t.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
            let t2 = softmax_normalize(&shifted, TOP_K).unwrap();
            for (a, b) in t.probs().iter().zip(t2.probs()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            let f = extract_features(&t);
            prop_assert!(f.windows(2).all(|w| w[0] >= w[1]));
            prop_assert!(f[LADDER_LEN - 1] >= 0.0);
            if scores.len() >= TOP_K {
                prop_assert!((f[6] - 1.0 / 64.0).abs() < 1e-9);
            }
            let m = RouterModel::threshold(0.5, "h");
            prop_assert_eq!(m.route(&f), m.route(&extract_features(&t2)));
        }
    }
}
