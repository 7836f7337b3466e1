//! Stratified retrieval evaluation: precision/recall at an average depth k,
//! retrieved-count sweeps over CDF cutoffs, and per-stratum count
//! histograms.
//!
//! Per query: `recall = |retrieved ∩ relevant| / |relevant|` and
//! `precision = |retrieved ∩ relevant| / |retrieved|` (0 when nothing is
//! retrieved; such queries are counted). Queries without a relevance set
//! are excluded from the averages and reported. Aggregation is an
//! unweighted (macro) mean within each stratum, with an `all` row over
//! every evaluated query.
//!
//! Reports serialize both as an aligned text table and as JSON lines, each
//! carrying the config hash of the run that produced them; identical inputs
//! produce byte-identical reports.

use ndarray::{Array1, Array2};
use serde::Serialize;
use thiserror::Error;

use crate::kv::hash_header;
use crate::model::{FeatureBatch, FeatureRecord, ModelError, ModelParams};
use crate::retrieval::{
    retrieve, CdfCutoffSolver, DistributionMode, ItemIndex, RetrievalError, RetrievalPolicy,
};
use crate::synth::{ClickLogDataset, Stratum};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid evaluation parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Report rows: the three strata plus the `all` aggregate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportStratum {
    All,
    Head,
    Torso,
    Tail,
}

impl ReportStratum {
    pub const ALL_ROWS: [ReportStratum; 4] = [
        ReportStratum::All,
        ReportStratum::Head,
        ReportStratum::Torso,
        ReportStratum::Tail,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ReportStratum::All => "all",
            ReportStratum::Head => "head",
            ReportStratum::Torso => "torso",
            ReportStratum::Tail => "tail",
        }
    }

    fn of(stratum: Stratum) -> ReportStratum {
        match stratum {
            Stratum::Head => ReportStratum::Head,
            Stratum::Torso => ReportStratum::Torso,
            Stratum::Tail => ReportStratum::Tail,
        }
    }
}

/// One histogram bin: query counts with retrieved-count in `[lo, hi)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct HistBin {
    pub lo: u64,
    pub hi: u64,
    pub count: u64,
}

/// Metrics for one stratum.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StratumMetrics {
    pub stratum: ReportStratum,
    /// Queries belonging to the stratum.
    pub queries: usize,
    /// Queries with a nonempty relevance set, entering the averages.
    pub evaluated: usize,
    /// Queries without any relevance set.
    pub excluded: usize,
    /// Evaluated queries that retrieved nothing (precision counted as 0).
    pub empty_retrievals: usize,
    pub precision_at_k: f64,
    pub recall_at_k: f64,
    pub mean_retrieved: f64,
    /// Occupied bins only; totals sum to `evaluated`.
    pub histogram: Vec<HistBin>,
}

/// Full evaluation report for one policy.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub policy: String,
    pub k: usize,
    pub bin_width: usize,
    pub strata: Vec<StratumMetrics>,
}

impl EvalReport {
    pub fn stratum(&self, s: ReportStratum) -> &StratumMetrics {
        self.strata.iter().find(|m| m.stratum == s).unwrap()
    }

    /// Aligned text table with the config hash in the header.
    pub fn to_text(&self, config_hash: u64) -> String {
        let mut out = String::new();
        out.push_str(&hash_header(config_hash));
        out.push('\n');
        out.push_str(&format!("# policy: {}\n", self.policy));
        out.push_str(&format!("# k: {}\n", self.k));
        out.push_str(&format!("# bin_width: {}\n", self.bin_width));
        out.push_str(&format!(
            "{:<8} {:>8} {:>10} {:>9} {:>6} {:>15} {:>12} {:>15}\n",
            "stratum", "queries", "evaluated", "excluded", "empty", "precision_at_k", "recall_at_k", "mean_retrieved"
        ));
        for m in &self.strata {
            out.push_str(&format!(
                "{:<8} {:>8} {:>10} {:>9} {:>6} {:>15.6} {:>12.6} {:>15.2}\n",
                m.stratum.name(),
                m.queries,
                m.evaluated,
                m.excluded,
                m.empty_retrievals,
                m.precision_at_k,
                m.recall_at_k,
                m.mean_retrieved
            ));
        }
        out.push_str("# histogram: stratum lo hi queries\n");
        for m in &self.strata {
            for b in &m.histogram {
                out.push_str(&format!(
                    "hist {} {} {} {}\n",
                    m.stratum.name(),
                    b.lo,
                    b.hi,
                    b.count
                ));
            }
        }
        out
    }

    /// Machine-readable JSON lines: a header record then one record per
    /// stratum.
    pub fn to_jsonl(&self, config_hash: u64) -> String {
        #[derive(Serialize)]
        struct Header<'a> {
            record: &'static str,
            config_hash: String,
            policy: &'a str,
            k: usize,
            bin_width: usize,
        }
        let mut out = serde_json::to_string(&Header {
            record: "header",
            config_hash: format!("{config_hash:#018x}"),
            policy: &self.policy,
            k: self.k,
            bin_width: self.bin_width,
        })
        .expect("serializable");
        out.push('\n');
        #[derive(Serialize)]
        struct Row<'a> {
            record: &'static str,
            #[serde(flatten)]
            metrics: &'a StratumMetrics,
        }
        for m in &self.strata {
            out.push_str(
                &serde_json::to_string(&Row {
                    record: "stratum",
                    metrics: m,
                })
                .expect("serializable"),
            );
            out.push('\n');
        }
        out
    }
}

/// Encodes every dataset query through the query tower; returns the
/// embedding matrix and per-query temperatures, in dataset order.
pub fn encode_queries(
    model: &ModelParams,
    data: &ClickLogDataset,
) -> Result<(Array2<f64>, Array1<f64>), EvalError> {
    let queries = data.queries();
    let n = model.embedding_dim();
    let mut embeddings = Array2::zeros((queries.len(), n));
    for chunk_start in (0..queries.len()).step_by(1024) {
        let chunk_end = (chunk_start + 1024).min(queries.len());
        let records: Vec<&FeatureRecord> = queries[chunk_start..chunk_end]
            .iter()
            .map(|q| &q.features)
            .collect();
        let fb = FeatureBatch::from_records(&records, model.encoding, model.query.input_dim())?;
        let (v, _) = model.query.forward_batch(fb)?;
        embeddings
            .slice_mut(ndarray::s![chunk_start..chunk_end, ..])
            .assign(&v);
    }
    let taus = model.temperature.value_batch(&embeddings);
    Ok((embeddings, taus))
}

struct StratumAccumulator {
    queries: usize,
    evaluated: usize,
    excluded: usize,
    empty_retrievals: usize,
    sum_precision: f64,
    sum_recall: f64,
    sum_count: f64,
    counts: Vec<usize>,
}

impl StratumAccumulator {
    fn new() -> Self {
        StratumAccumulator {
            queries: 0,
            evaluated: 0,
            excluded: 0,
            empty_retrievals: 0,
            sum_precision: 0.0,
            sum_recall: 0.0,
            sum_count: 0.0,
            counts: Vec::new(),
        }
    }

    fn finish(&self, stratum: ReportStratum, bin_width: usize) -> StratumMetrics {
        let denom = self.evaluated.max(1) as f64;
        StratumMetrics {
            stratum,
            queries: self.queries,
            evaluated: self.evaluated,
            excluded: self.excluded,
            empty_retrievals: self.empty_retrievals,
            precision_at_k: self.sum_precision / denom,
            recall_at_k: self.sum_recall / denom,
            mean_retrieved: self.sum_count / denom,
            histogram: histogram_bins(&self.counts, bin_width),
        }
    }
}

fn histogram_bins(counts: &[usize], bin_width: usize) -> Vec<HistBin> {
    let mut bins: std::collections::BTreeMap<u64, u64> = std::collections::BTreeMap::new();
    for &c in counts {
        let lo = (c / bin_width) as u64 * bin_width as u64;
        *bins.entry(lo).or_insert(0) += 1;
    }
    bins.into_iter()
        .map(|(lo, count)| HistBin {
            lo,
            hi: lo + bin_width as u64,
            count,
        })
        .collect()
}

/// Default histogram bin width (retrieved-count units).
pub const DEFAULT_BIN_WIDTH: usize = 50;

/// Evaluates one policy over the whole dataset. `k` is the nominal average
/// retrieval depth the policies were calibrated to; it labels the
/// `precision_at_k` / `recall_at_k` columns.
pub fn evaluate(
    index: &ItemIndex,
    model: &ModelParams,
    data: &ClickLogDataset,
    policy: &RetrievalPolicy,
    k: usize,
    bin_width: usize,
) -> Result<EvalReport, EvalError> {
    if bin_width == 0 {
        return Err(EvalError::InvalidParameter("bin_width must be positive".into()));
    }
    policy.validate().map_err(EvalError::Retrieval)?;
    let (embeddings, taus) = encode_queries(model, data)?;

    let mut all = StratumAccumulator::new();
    let mut per: std::collections::BTreeMap<Stratum, StratumAccumulator> = Stratum::ALL
        .iter()
        .map(|s| (*s, StratumAccumulator::new()))
        .collect();

    for (qi, meta) in data.queries().iter().enumerate() {
        let acc = per.get_mut(&meta.stratum).unwrap();
        acc.queries += 1;
        all.queries += 1;
        let relevant = data.relevant(qi);
        if relevant.is_empty() {
            acc.excluded += 1;
            all.excluded += 1;
            continue;
        }
        let v_q = crate::model::EmbeddingVector::normalize(embeddings.row(qi).to_owned())?;
        let result = retrieve(index, &v_q, Some(taus[qi]), policy)?;
        let hits = result
            .items
            .iter()
            .filter(|item| relevant.binary_search(&(item.index as u32)).is_ok())
            .count();
        let recall = hits as f64 / relevant.len() as f64;
        let precision = if result.count == 0 {
            0.0
        } else {
            hits as f64 / result.count as f64
        };
        for a in [&mut *acc, &mut all] {
            a.evaluated += 1;
            if result.count == 0 {
                a.empty_retrievals += 1;
            }
            a.sum_precision += precision;
            a.sum_recall += recall;
            a.sum_count += result.count as f64;
            a.counts.push(result.count);
        }
    }

    let mut strata = vec![all.finish(ReportStratum::All, bin_width)];
    for s in Stratum::ALL {
        strata.push(per[&s].finish(ReportStratum::of(s), bin_width));
    }
    Ok(EvalReport {
        policy: policy.descriptor(),
        k,
        bin_width,
        strata,
    })
}

/// Mean retrieved counts per stratum per cutoff CDF value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepTable {
    pub mode: String,
    pub p_values: Vec<f64>,
    /// One row per stratum: mean retrieved count per p, aligned with
    /// `p_values`.
    pub rows: Vec<(ReportStratum, Vec<f64>)>,
}

impl SweepTable {
    pub fn row(&self, s: ReportStratum) -> &[f64] {
        &self
            .rows
            .iter()
            .find(|(stratum, _)| *stratum == s)
            .unwrap()
            .1
    }

    pub fn to_text(&self, config_hash: u64) -> String {
        let mut out = String::new();
        out.push_str(&hash_header(config_hash));
        out.push('\n');
        out.push_str(&format!("# mode: {}\n", self.mode));
        out.push_str(&format!("{:<8}", "stratum"));
        for p in &self.p_values {
            out.push_str(&format!(" {:>10}", format!("p={p}")));
        }
        out.push('\n');
        for (stratum, means) in &self.rows {
            out.push_str(&format!("{:<8}", stratum.name()));
            for m in means {
                out.push_str(&format!(" {m:>10.2}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_jsonl(&self, config_hash: u64) -> String {
        #[derive(Serialize)]
        struct Header {
            record: &'static str,
            config_hash: String,
            mode: String,
            p_values: Vec<f64>,
        }
        #[derive(Serialize)]
        struct Row<'a> {
            record: &'static str,
            stratum: ReportStratum,
            mean_retrieved: &'a [f64],
        }
        let mut out = serde_json::to_string(&Header {
            record: "header",
            config_hash: format!("{config_hash:#018x}"),
            mode: self.mode.clone(),
            p_values: self.p_values.clone(),
        })
        .expect("serializable");
        out.push('\n');
        for (stratum, means) in &self.rows {
            out.push_str(
                &serde_json::to_string(&Row {
                    record: "sweep_row",
                    stratum: *stratum,
                    mean_retrieved: means,
                })
                .expect("serializable"),
            );
            out.push('\n');
        }
        out
    }
}

// Per-query retrieved counts for each p, via one score pass and one CDF
// table per query.
fn counts_per_query(
    index: &ItemIndex,
    embeddings: &Array2<f64>,
    taus: &Array1<f64>,
    p_values: &[f64],
    mode: DistributionMode,
) -> Result<Vec<Vec<usize>>, EvalError> {
    let mut out = Vec::with_capacity(embeddings.nrows());
    for qi in 0..embeddings.nrows() {
        let mut scores = index.embeddings().dot(&embeddings.row(qi)).to_vec();
        scores.sort_unstable_by(|a, b| b.total_cmp(a));
        let solver = CdfCutoffSolver::new(taus[qi], mode, index.dim())?;
        let mut counts = Vec::with_capacity(p_values.len());
        for &p in p_values {
            let t = solver.threshold(p).map_err(EvalError::Retrieval)?;
            counts.push(scores.partition_point(|s| *s >= t));
        }
        out.push(counts);
    }
    Ok(out)
}

/// Mean retrieved count per stratum for each cutoff CDF value; counts need
/// no relevance sets, so every query participates.
pub fn cdf_sweep(
    index: &ItemIndex,
    model: &ModelParams,
    data: &ClickLogDataset,
    p_values: &[f64],
    mode: DistributionMode,
) -> Result<SweepTable, EvalError> {
    if p_values.is_empty() {
        return Err(EvalError::InvalidParameter("no p values".into()));
    }
    for &p in p_values {
        if !(p > 0.0 && p < 1.0) {
            return Err(EvalError::InvalidParameter(format!(
                "cutoff CDF value {p} outside (0, 1)"
            )));
        }
    }
    let (embeddings, taus) = encode_queries(model, data)?;
    let counts = counts_per_query(index, &embeddings, &taus, p_values, mode)?;

    let mut rows = Vec::with_capacity(4);
    for stratum in ReportStratum::ALL_ROWS {
        let members: Vec<usize> = match stratum {
            ReportStratum::All => (0..data.queries().len()).collect(),
            ReportStratum::Head => data.query_indices_of(Stratum::Head),
            ReportStratum::Torso => data.query_indices_of(Stratum::Torso),
            ReportStratum::Tail => data.query_indices_of(Stratum::Tail),
        };
        let mut means = Vec::with_capacity(p_values.len());
        for (pi, _) in p_values.iter().enumerate() {
            let total: usize = members.iter().map(|&q| counts[q][pi]).sum();
            means.push(total as f64 / members.len().max(1) as f64);
        }
        rows.push((stratum, means));
    }
    Ok(SweepTable {
        mode: mode.name().to_string(),
        p_values: p_values.to_vec(),
        rows,
    })
}

/// Per-stratum histogram of retrieved counts at one cutoff CDF value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistogramReport {
    pub p: f64,
    pub mode: String,
    pub bin_width: usize,
    pub rows: Vec<StratumHistogram>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StratumHistogram {
    pub stratum: ReportStratum,
    pub queries: usize,
    pub mean_retrieved: f64,
    pub bins: Vec<HistBin>,
}

impl HistogramReport {
    pub fn row(&self, s: ReportStratum) -> &StratumHistogram {
        self.rows.iter().find(|r| r.stratum == s).unwrap()
    }

    pub fn to_text(&self, config_hash: u64) -> String {
        let mut out = String::new();
        out.push_str(&hash_header(config_hash));
        out.push('\n');
        out.push_str(&format!("# p: {}\n# mode: {}\n# bin_width: {}\n", self.p, self.mode, self.bin_width));
        out.push_str(&format!(
            "{:<8} {:>8} {:>8} {:>8}\n",
            "stratum", "lo", "hi", "queries"
        ));
        for row in &self.rows {
            for b in &row.bins {
                out.push_str(&format!(
                    "{:<8} {:>8} {:>8} {:>8}\n",
                    row.stratum.name(),
                    b.lo,
                    b.hi,
                    b.count
                ));
            }
        }
        out
    }

    pub fn to_jsonl(&self, config_hash: u64) -> String {
        #[derive(Serialize)]
        struct Header {
            record: &'static str,
            config_hash: String,
            p: f64,
            mode: String,
            bin_width: usize,
        }
        let mut out = serde_json::to_string(&Header {
            record: "header",
            config_hash: format!("{config_hash:#018x}"),
            p: self.p,
            mode: self.mode.clone(),
            bin_width: self.bin_width,
        })
        .expect("serializable");
        out.push('\n');
        #[derive(Serialize)]
        struct Row<'a> {
            record: &'static str,
            #[serde(flatten)]
            row: &'a StratumHistogram,
        }
        for row in &self.rows {
            out.push_str(
                &serde_json::to_string(&Row {
                    record: "histogram",
                    row,
                })
                .expect("serializable"),
            );
            out.push('\n');
        }
        out
    }
}

/// Histogram of per-query retrieved counts per stratum under
/// `CdfCutoff { p }`.
pub fn count_histogram(
    index: &ItemIndex,
    model: &ModelParams,
    data: &ClickLogDataset,
    p: f64,
    mode: DistributionMode,
    bin_width: usize,
) -> Result<HistogramReport, EvalError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(EvalError::InvalidParameter(format!(
            "cutoff CDF value {p} outside (0, 1)"
        )));
    }
    if bin_width == 0 {
        return Err(EvalError::InvalidParameter("bin_width must be positive".into()));
    }
    let (embeddings, taus) = encode_queries(model, data)?;
    let counts = counts_per_query(index, &embeddings, &taus, &[p], mode)?;

    let mut rows = Vec::with_capacity(4);
    for stratum in ReportStratum::ALL_ROWS {
        let members: Vec<usize> = match stratum {
            ReportStratum::All => (0..data.queries().len()).collect(),
            ReportStratum::Head => data.query_indices_of(Stratum::Head),
            ReportStratum::Torso => data.query_indices_of(Stratum::Torso),
            ReportStratum::Tail => data.query_indices_of(Stratum::Tail),
        };
        let stratum_counts: Vec<usize> = members.iter().map(|&q| counts[q][0]).collect();
        let mean = stratum_counts.iter().sum::<usize>() as f64 / members.len().max(1) as f64;
        rows.push(StratumHistogram {
            stratum,
            queries: members.len(),
            mean_retrieved: mean,
            bins: histogram_bins(&stratum_counts, bin_width),
        });
    }
    Ok(HistogramReport {
        p,
        mode: mode.name().to_string(),
        bin_width,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_bins_cover_all_counts() {
        let bins = histogram_bins(&[0, 3, 49, 50, 120, 120], 50);
        let total: u64 = bins.iter().map(|b| b.count).sum();
        assert_eq!(total, 6);
        assert_eq!(bins[0], HistBin { lo: 0, hi: 50, count: 3 });
        assert_eq!(bins[1], HistBin { lo: 50, hi: 100, count: 1 });
        assert_eq!(bins[2], HistBin { lo: 100, hi: 150, count: 2 });
    }

    #[test]
    fn identical_counts_occupy_a_single_bin() {
        let bins = histogram_bins(&[75, 75, 75], 50);
        assert_eq!(bins.len(), 1);
        assert_eq!(bins[0], HistBin { lo: 50, hi: 100, count: 3 });
    }
}
