//! Exact cosine retrieval with three truncation policies.
//!
//! The index is a dense matrix of unit-norm item embeddings; every query is
//! scored against every item (no approximate search), so retrieval results
//! are exact and every oracle comparison is sharp. Ties at equal score are
//! broken by ascending item id, which keeps results identical across runs
//! and implementations.
//!
//! Truncation policies:
//!
//! - `TopK { k }`: the k best-scoring items.
//! - `ScoreThreshold { t }`: every item with score ≥ t.
//! - `CdfCutoff { p, mode }`: a per-query threshold t* chosen so that a
//!   probability mass `p` of the query's learned score distribution lies
//!   at or above t*, i.e. `P(x ≥ t*) = p`. The distribution is
//!   `Beta(α_g = 1/τ_q, β_g = 1)` in `Plain` mode, or its spherical
//!   marginal (surface-measure factor for the embedding dimension) in
//!   `Spherical` mode.
//!
//! `calibrate_policy_for_avg_k` tunes a policy family's scalar parameter by
//! bisection until the mean retrieved count over a query set hits a target
//! k within ±1%, which is how fixed-k and threshold policies are compared
//! on equal footing.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::dist::{build_cdf_table, CdfTable, DistError, MarginalBase, ScoreDistribution};
use crate::kv::atomic_write;
use crate::model::{EmbeddingVector, FeatureBatch, FeatureRecord, ModelError, ModelParams};
use crate::synth::ClickLogDataset;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("index is empty")]
    EmptyIndex,
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("CDF-cutoff retrieval requires the query temperature")]
    MissingTau,
    #[error("item ids must be unique; {0:?} repeats")]
    DuplicateId(String),
    #[error("index row {row} has norm {norm}, not unit")]
    NotUnitNorm { row: usize, norm: f64 },
    #[error("index file: {0}")]
    IndexFile(String),
    #[error("target average k of {target_k} exceeds index size {available}")]
    InfeasibleTarget { target_k: usize, available: usize },
    #[error(
        "calibration did not reach the target: mean count {achieved:.2} vs target {target} (±1%)"
    )]
    CalibrationFailed { achieved: f64, target: usize },
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Immutable matrix of unit-norm item embeddings plus their ids.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemIndex {
    ids: Vec<String>,
    embeddings: Array2<f64>,
}

impl ItemIndex {
    pub fn new(ids: Vec<String>, embeddings: Array2<f64>) -> Result<Self, RetrievalError> {
        if ids.len() != embeddings.nrows() {
            return Err(RetrievalError::IndexFile(format!(
                "{} ids but {} embedding rows",
                ids.len(),
                embeddings.nrows()
            )));
        }
        let mut seen = BTreeSet::new();
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(RetrievalError::DuplicateId(id.clone()));
            }
        }
        for (row, r) in embeddings.rows().into_iter().enumerate() {
            let norm = r.dot(&r).sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(RetrievalError::NotUnitNorm { row, norm });
            }
        }
        Ok(ItemIndex { ids, embeddings })
    }

    /// Encodes every item in the dataset through the item tower.
    pub fn build(model: &ModelParams, data: &ClickLogDataset) -> Result<Self, RetrievalError> {
        let items = data.items();
        if items.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        let n = model.embedding_dim();
        let mut embeddings = Array2::zeros((items.len(), n));
        for chunk_start in (0..items.len()).step_by(1024) {
            let chunk_end = (chunk_start + 1024).min(items.len());
            let records: Vec<&FeatureRecord> = items[chunk_start..chunk_end]
                .iter()
                .map(|i| &i.features)
                .collect();
            let fb = FeatureBatch::from_records(&records, model.encoding, model.item.input_dim())?;
            let (v, _) = model.item.forward_batch(fb)?;
            embeddings
                .slice_mut(ndarray::s![chunk_start..chunk_end, ..])
                .assign(&v);
        }
        let ids = items.iter().map(|i| i.id.clone()).collect();
        ItemIndex::new(ids, embeddings)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn id(&self, index: usize) -> &str {
        &self.ids[index]
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }

    /// Scores of every item against a query embedding.
    pub fn scores(&self, v_q: &EmbeddingVector) -> Array1<f64> {
        self.embeddings.dot(v_q.values())
    }

    /// Index file: little-endian binary with layout
    /// `magic "CUTINDEX" | version u32 | config_hash u64 | M u64 | n u32 |
    /// M × (id_len u32, id bytes) | M×n f64 row-major embeddings`.
    pub fn save(&self, path: &Path, config_hash: u64) -> Result<(), RetrievalError> {
        let mut w: Vec<u8> = Vec::new();
        w.write_all(INDEX_MAGIC)?;
        w.write_all(&INDEX_VERSION.to_le_bytes())?;
        w.write_all(&config_hash.to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&(self.dim() as u32).to_le_bytes())?;
        for id in &self.ids {
            let bytes = id.as_bytes();
            w.write_all(&(bytes.len() as u32).to_le_bytes())?;
            w.write_all(bytes)?;
        }
        for v in self.embeddings.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        atomic_write(path, &w)?;
        Ok(())
    }

    /// Loads an index file, returning the index and the config hash in its
    /// header.
    pub fn load(path: &Path) -> Result<(Self, u64), RetrievalError> {
        let file = File::open(path)?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != INDEX_MAGIC {
            return Err(RetrievalError::IndexFile(format!(
                "bad magic {magic:?}, not an item index"
            )));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != INDEX_VERSION {
            return Err(RetrievalError::IndexFile(format!(
                "unsupported index version {version}"
            )));
        }
        r.read_exact(&mut b8)?;
        let config_hash = u64::from_le_bytes(b8);
        r.read_exact(&mut b8)?;
        let m = u64::from_le_bytes(b8) as usize;
        r.read_exact(&mut b4)?;
        let n = u32::from_le_bytes(b4) as usize;
        let mut ids = Vec::with_capacity(m);
        for _ in 0..m {
            r.read_exact(&mut b4)?;
            let len = u32::from_le_bytes(b4) as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf)?;
            ids.push(String::from_utf8(buf).map_err(|e| {
                RetrievalError::IndexFile(format!("id is not valid UTF-8: {e}"))
            })?);
        }
        let mut data = vec![0f64; m * n];
        let mut buf = vec![0u8; m * n * 8];
        r.read_exact(&mut buf)?;
        for (i, chunk) in buf.chunks_exact(8).enumerate() {
            data[i] = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        let embeddings = Array2::from_shape_vec((m, n), data)
            .map_err(|e| RetrievalError::IndexFile(e.to_string()))?;
        let index = ItemIndex::new(ids, embeddings)?;
        Ok((index, config_hash))
    }
}

pub const INDEX_MAGIC: &[u8; 8] = b"CUTINDEX";
pub const INDEX_VERSION: u32 = 1;

/// Which score distribution backs the CDF cutoff.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DistributionMode {
    /// `Beta(1/τ_q, 1)`, the training-time density.
    #[default]
    Plain,
    /// The spherical marginal of that Beta in the embedding dimension.
    Spherical,
}

impl DistributionMode {
    pub fn name(&self) -> &'static str {
        match self {
            DistributionMode::Plain => "plain",
            DistributionMode::Spherical => "spherical",
        }
    }
}

/// How retrieval is truncated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RetrievalPolicy {
    TopK { k: usize },
    ScoreThreshold { t: f64 },
    /// `p` is the upper-tail mass to keep: the threshold satisfies
    /// `P(x ≥ t*) = p`.
    CdfCutoff { p: f64, mode: DistributionMode },
}

impl RetrievalPolicy {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        match *self {
            RetrievalPolicy::TopK { k } => {
                if k < 1 {
                    return Err(RetrievalError::InvalidPolicy("topk needs k >= 1".into()));
                }
            }
            RetrievalPolicy::ScoreThreshold { t } => {
                if !(-1.0..=1.0).contains(&t) {
                    return Err(RetrievalError::InvalidPolicy(format!(
                        "score threshold {t} outside [-1, 1]"
                    )));
                }
            }
            RetrievalPolicy::CdfCutoff { p, .. } => {
                if !(p > 0.0 && p < 1.0) {
                    return Err(RetrievalError::InvalidPolicy(format!(
                        "cdf cutoff p = {p} outside (0, 1)"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Parses the command-line descriptor grammar:
    /// `topk:k=1500`, `score:t=0.4`, `cdf:p=0.985[,mode=plain|spherical]`.
    pub fn parse(desc: &str) -> Result<Self, RetrievalError> {
        let bad = |msg: String| RetrievalError::InvalidPolicy(msg);
        let (kind, rest) = desc
            .split_once(':')
            .ok_or_else(|| bad(format!("{desc:?}: expected kind:params")))?;
        let mut fields = std::collections::BTreeMap::new();
        for part in rest.split(',') {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| bad(format!("{part:?}: expected key=value")))?;
            fields.insert(k.trim().to_string(), v.trim().to_string());
        }
        let policy = match kind {
            "topk" => {
                let k = fields
                    .remove("k")
                    .ok_or_else(|| bad("topk requires k".into()))?
                    .parse::<usize>()
                    .map_err(|e| bad(format!("k: {e}")))?;
                RetrievalPolicy::TopK { k }
            }
            "score" => {
                let t = fields
                    .remove("t")
                    .ok_or_else(|| bad("score requires t".into()))?
                    .parse::<f64>()
                    .map_err(|e| bad(format!("t: {e}")))?;
                RetrievalPolicy::ScoreThreshold { t }
            }
            "cdf" => {
                let p = fields
                    .remove("p")
                    .ok_or_else(|| bad("cdf requires p".into()))?
                    .parse::<f64>()
                    .map_err(|e| bad(format!("p: {e}")))?;
                let mode = match fields.remove("mode").as_deref() {
                    None | Some("plain") => DistributionMode::Plain,
                    Some("spherical") => DistributionMode::Spherical,
                    Some(other) => return Err(bad(format!("unknown mode {other:?}"))),
                };
                RetrievalPolicy::CdfCutoff { p, mode }
            }
            other => return Err(bad(format!("unknown policy kind {other:?}"))),
        };
        if let Some(extra) = fields.keys().next() {
            return Err(bad(format!("unexpected field {extra:?}")));
        }
        policy.validate()?;
        Ok(policy)
    }

    pub fn descriptor(&self) -> String {
        match self {
            RetrievalPolicy::TopK { k } => format!("topk:k={k}"),
            RetrievalPolicy::ScoreThreshold { t } => format!("score:t={t}"),
            RetrievalPolicy::CdfCutoff { p, mode } => {
                format!("cdf:p={p},mode={}", mode.name())
            }
        }
    }
}

/// One retrieved item.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredItem {
    pub index: usize,
    pub id: String,
    pub score: f64,
}

/// Items sorted by score descending (ties by ascending id), the threshold
/// that was applied, and the count.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub items: Vec<ScoredItem>,
    pub threshold_used: f64,
    pub count: usize,
}

/// Solves `P(x ≥ t*) = p` for the query's learned score distribution; one
/// table per (τ_q, mode, dim) serves every p.
pub struct CdfCutoffSolver {
    table: CdfTable,
}

impl CdfCutoffSolver {
    pub fn new(tau_q: f64, mode: DistributionMode, dim: usize) -> Result<Self, RetrievalError> {
        if !(tau_q > 0.0) || !tau_q.is_finite() {
            return Err(RetrievalError::InvalidPolicy(format!(
                "temperature {tau_q} must be positive"
            )));
        }
        let alpha = 1.0 / tau_q;
        let dist = match mode {
            DistributionMode::Plain => ScoreDistribution::beta(alpha, 1.0)?,
            DistributionMode::Spherical => ScoreDistribution::spherical(
                MarginalBase::Beta { alpha, beta: 1.0 },
                dim as u32,
            )?,
        };
        Ok(CdfCutoffSolver {
            table: build_cdf_table(&dist)?,
        })
    }

    /// The threshold keeping upper-tail mass `p`: `inverse_cdf(1 - p)`.
    pub fn threshold(&self, p: f64) -> Result<f64, RetrievalError> {
        Ok(self.table.inverse(1.0 - p)?)
    }

    pub fn table(&self) -> &CdfTable {
        &self.table
    }
}

/// Retrieves items for one query under a policy. `tau_q` is required by
/// the CDF cutoff and ignored by the other policies.
pub fn retrieve(
    index: &ItemIndex,
    v_q: &EmbeddingVector,
    tau_q: Option<f64>,
    policy: &RetrievalPolicy,
) -> Result<RetrievalResult, RetrievalError> {
    if index.is_empty() {
        return Err(RetrievalError::EmptyIndex);
    }
    policy.validate()?;
    let scores = index.scores(v_q);
    match *policy {
        RetrievalPolicy::TopK { k } => {
            let mut order: Vec<usize> = (0..index.len()).collect();
            sort_by_score_then_id(&mut order, &scores, index);
            order.truncate(k.min(index.len()));
            let items = materialize(&order, &scores, index);
            let threshold_used = items.last().map(|i| i.score).unwrap_or(-1.0);
            Ok(RetrievalResult {
                count: items.len(),
                items,
                threshold_used,
            })
        }
        RetrievalPolicy::ScoreThreshold { t } => Ok(threshold_retrieve(index, &scores, t)),
        RetrievalPolicy::CdfCutoff { p, mode } => {
            let tau = tau_q.ok_or(RetrievalError::MissingTau)?;
            let solver = CdfCutoffSolver::new(tau, mode, index.dim())?;
            let t = solver.threshold(p)?;
            Ok(threshold_retrieve(index, &scores, t))
        }
    }
}

fn threshold_retrieve(index: &ItemIndex, scores: &Array1<f64>, t: f64) -> RetrievalResult {
    let mut order: Vec<usize> = (0..index.len()).filter(|&i| scores[i] >= t).collect();
    sort_by_score_then_id(&mut order, scores, index);
    let items = materialize(&order, scores, index);
    RetrievalResult {
        count: items.len(),
        items,
        threshold_used: t,
    }
}

fn sort_by_score_then_id(order: &mut [usize], scores: &Array1<f64>, index: &ItemIndex) {
    order.sort_unstable_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| index.id(a).cmp(index.id(b)))
    });
}

fn materialize(order: &[usize], scores: &Array1<f64>, index: &ItemIndex) -> Vec<ScoredItem> {
    order
        .iter()
        .map(|&i| ScoredItem {
            index: i,
            id: index.id(i).to_string(),
            score: scores[i],
        })
        .collect()
}

/// Which policy family a calibration targets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PolicyFamily {
    ScoreThreshold,
    CdfCutoff(DistributionMode),
}

/// A calibrated policy and the mean retrieved count it achieves.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationOutcome {
    pub policy: RetrievalPolicy,
    pub mean_count: f64,
}

/// Finds the scalar policy parameter (threshold t, or tail mass p) whose
/// mean retrieved count over the query set is within ±1% of `target_k`,
/// by bisection; the count is monotone in either parameter.
pub fn calibrate_policy_for_avg_k(
    index: &ItemIndex,
    queries: &[(EmbeddingVector, f64)],
    target_k: usize,
    family: PolicyFamily,
) -> Result<CalibrationOutcome, RetrievalError> {
    if index.is_empty() {
        return Err(RetrievalError::EmptyIndex);
    }
    if queries.is_empty() {
        return Err(RetrievalError::InvalidPolicy("empty query set".into()));
    }
    if target_k < 1 || target_k > index.len() {
        return Err(RetrievalError::InfeasibleTarget {
            target_k,
            available: index.len(),
        });
    }

    // Scores per query, descending: counts become binary searches.
    let sorted: Vec<Vec<f64>> = queries
        .iter()
        .map(|(v, _)| {
            let mut s = index.scores(v).to_vec();
            s.sort_unstable_by(|a, b| b.total_cmp(a));
            s
        })
        .collect();
    let count_at = |sorted_scores: &[f64], t: f64| -> usize {
        sorted_scores.partition_point(|s| *s >= t)
    };
    let mean_for_thresholds = |ts: &dyn Fn(usize) -> f64| -> f64 {
        let total: usize = sorted
            .iter()
            .enumerate()
            .map(|(i, s)| count_at(s, ts(i)))
            .sum();
        total as f64 / sorted.len() as f64
    };
    let target = target_k as f64;
    let tol = 0.01 * target;

    match family {
        PolicyFamily::ScoreThreshold => {
            let mut lo = -1.0f64; // mean(lo) = M >= target
            let mut hi = 1.0f64;
            let mut best = (f64::INFINITY, -1.0f64, 0.0f64); // (gap, t, mean)
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                let mean = mean_for_thresholds(&|_| mid);
                let gap = (mean - target).abs();
                if gap < best.0 {
                    best = (gap, mid, mean);
                }
                if mean > target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            // The boundary itself may be the answer (target_k = M).
            let mean_lo = mean_for_thresholds(&|_| -1.0);
            if (mean_lo - target).abs() < best.0 {
                best = ((mean_lo - target).abs(), -1.0, mean_lo);
            }
            if best.0 > tol {
                return Err(RetrievalError::CalibrationFailed {
                    achieved: best.2,
                    target: target_k,
                });
            }
            Ok(CalibrationOutcome {
                policy: RetrievalPolicy::ScoreThreshold { t: best.1 },
                mean_count: best.2,
            })
        }
        PolicyFamily::CdfCutoff(mode) => {
            let solvers: Vec<CdfCutoffSolver> = queries
                .iter()
                .map(|(_, tau)| CdfCutoffSolver::new(*tau, mode, index.dim()))
                .collect::<Result<_, _>>()?;
            let mean_at_p = |p: f64| -> Result<f64, RetrievalError> {
                let mut total = 0usize;
                for (s, solver) in sorted.iter().zip(&solvers) {
                    total += count_at(s, solver.threshold(p)?);
                }
                Ok(total as f64 / sorted.len() as f64)
            };
            let mut lo = 1e-9f64;
            let mut hi = 1.0 - 1e-9;
            let mut best = (f64::INFINITY, hi, 0.0f64);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                let mean = mean_at_p(mid)?;
                let gap = (mean - target).abs();
                if gap < best.0 {
                    best = (gap, mid, mean);
                }
                if mean > target {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            let mean_hi = mean_at_p(1.0 - 1e-9)?;
            if (mean_hi - target).abs() < best.0 {
                best = ((mean_hi - target).abs(), 1.0 - 1e-9, mean_hi);
            }
            if best.0 > tol {
                return Err(RetrievalError::CalibrationFailed {
                    achieved: best.2,
                    target: target_k,
                });
            }
            Ok(CalibrationOutcome {
                policy: RetrievalPolicy::CdfCutoff { p: best.1, mode },
                mean_count: best.2,
            })
        }
    }
}
