//! The end-to-end experiment: data → train → index → calibrate →
//! evaluate → sweep → histogram, with every artifact stamped by the
//! config hash and written via `.partial` renames.
//!
//! The three-way comparison follows one protocol: top-k retrieval at the
//! target k, and the score-threshold and CDF-cutoff policies calibrated by
//! bisection until their mean retrieved count matches that same k, so all
//! three spend the same average retrieval budget.

use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::Context;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use cdfcut_core::eval::{
    cdf_sweep, count_histogram, encode_queries, evaluate, EvalReport, HistogramReport, SweepTable,
    DEFAULT_BIN_WIDTH,
};
use cdfcut_core::kv::{atomic_write, config_hash, KvError, KvMap};
use cdfcut_core::model::{checkpoint, EmbeddingVector, ModelParams};
use cdfcut_core::retrieval::{
    calibrate_policy_for_avg_k, DistributionMode, ItemIndex, PolicyFamily, RetrievalPolicy,
};
use cdfcut_core::synth::{generate, ClickLogDataset, SynthSpec};
use cdfcut_core::train::{train, TrainConfig};

/// A stage failure: which stage halted the run, and why.
#[derive(Debug, Error)]
#[error("stage {stage}: {source}")]
pub struct PipelineError {
    pub stage: &'static str,
    #[source]
    pub source: anyhow::Error,
}

fn stage<T, E: Into<anyhow::Error>>(
    name: &'static str,
    r: Result<T, E>,
) -> Result<T, PipelineError> {
    r.map_err(|e| PipelineError {
        stage: name,
        source: e.into(),
    })
}

/// Full experiment settings. The key-value file uses these top-level keys
/// plus `train.*` and `synth.*` sections; `seed` fills any unset
/// `train.seed` / `synth.seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// When set, ingest this dataset instead of generating one.
    pub data_dir: Option<PathBuf>,
    pub target_k: usize,
    /// The probabilistic policy under comparison; its tail mass is
    /// recalibrated to the target k, its mode is kept.
    pub policy: RetrievalPolicy,
    pub sweep_p: Vec<f64>,
    pub histogram_p: f64,
    pub bin_width: usize,
    pub train: TrainConfig,
    pub synth: SynthSpec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 42,
            out_dir: PathBuf::from("run"),
            data_dir: None,
            target_k: 300,
            policy: RetrievalPolicy::CdfCutoff {
                p: 0.985,
                mode: DistributionMode::Plain,
            },
            sweep_p: vec![0.99, 0.95, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4],
            histogram_p: 0.985,
            bin_width: DEFAULT_BIN_WIDTH,
            train: TrainConfig::default(),
            synth: SynthSpec::default(),
        }
        .with_master_seed(42)
    }
}

impl PipelineConfig {
    /// Sets the master seed and propagates it to the training and data
    /// generation seeds.
    pub fn with_master_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self.synth.seed = seed;
        self
    }

    pub fn from_kv_text(text: &str) -> Result<Self, anyhow::Error> {
        let mut kv = KvMap::parse(text)?;
        let train_kv = kv.take_prefixed("train");
        let synth_kv = kv.take_prefixed("synth");
        let mut cfg = PipelineConfig::default();
        let explicit_train_seed = train_kv_has_seed(&train_kv);
        let explicit_synth_seed = synth_kv_has_seed(&synth_kv);
        cfg.train = TrainConfig::from_kv(train_kv)?;
        cfg.synth = SynthSpec::from_kv(synth_kv)?;
        if let Some(seed) = kv.take_u64("seed")? {
            cfg.seed = seed;
        }
        if !explicit_train_seed {
            cfg.train.seed = cfg.seed;
        }
        if !explicit_synth_seed {
            cfg.synth.seed = cfg.seed;
        }
        if let Some(dir) = kv.take_string("out_dir") {
            cfg.out_dir = PathBuf::from(dir);
        }
        if let Some(dir) = kv.take_string("data_dir") {
            cfg.data_dir = Some(PathBuf::from(dir));
        }
        if let Some(k) = kv.take_usize("target_k")? {
            cfg.target_k = k;
        }
        if let Some(desc) = kv.take_string("policy") {
            cfg.policy = RetrievalPolicy::parse(&desc)?;
        }
        if let Some(list) = kv.take_string("sweep_p") {
            cfg.sweep_p = list
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| KvError::BadValue {
                    key: "sweep_p".into(),
                    value: list.clone(),
                    expected: "comma-separated reals",
                })?;
        }
        if let Some(p) = kv.take_f64("histogram_p")? {
            cfg.histogram_p = p;
        }
        if let Some(w) = kv.take_usize("bin_width")? {
            cfg.bin_width = w;
        }
        kv.finish()?;
        Ok(cfg)
    }

    /// Field-stable serialization; its FNV-1a hash is the config hash
    /// stamped into every artifact this run produces.
    pub fn canonical_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("seed = {}\n", self.seed));
        s.push_str(&format!("out_dir = {}\n", self.out_dir.display()));
        if let Some(d) = &self.data_dir {
            s.push_str(&format!("data_dir = {}\n", d.display()));
        }
        s.push_str(&format!("target_k = {}\n", self.target_k));
        s.push_str(&format!("policy = {}\n", self.policy.descriptor()));
        let ps: Vec<String> = self.sweep_p.iter().map(|p| format!("{p}")).collect();
        s.push_str(&format!("sweep_p = {}\n", ps.join(",")));
        s.push_str(&format!("histogram_p = {}\n", self.histogram_p));
        s.push_str(&format!("bin_width = {}\n", self.bin_width));
        for line in self.train.canonical_text().lines() {
            s.push_str(&format!("train.{line}\n"));
        }
        for line in self.synth.canonical_text().lines() {
            s.push_str(&format!("synth.{line}\n"));
        }
        s
    }

    pub fn config_hash(&self) -> u64 {
        config_hash(&self.canonical_text())
    }
}

fn train_kv_has_seed(kv: &KvMap) -> bool {
    kv_has(kv, "seed")
}

fn synth_kv_has_seed(kv: &KvMap) -> bool {
    kv_has(kv, "seed")
}

fn kv_has(kv: &KvMap, key: &str) -> bool {
    let mut probe = kv.clone();
    probe.take_string(key).is_some()
}

/// Everything a finished run produced, in memory; files land in `out_dir`.
pub struct RunArtifacts {
    pub config_hash: u64,
    pub out_dir: PathBuf,
    pub dataset: ClickLogDataset,
    pub model: ModelParams,
    pub score_policy: RetrievalPolicy,
    pub cdf_policy: RetrievalPolicy,
    /// Reports keyed "topk", "score", "cdf".
    pub reports: BTreeMap<&'static str, EvalReport>,
    pub sweep: SweepTable,
    pub histogram: HistogramReport,
}

/// Runs the whole experiment. Any stage failure halts with the stage name;
/// artifacts in flight keep their `.partial` suffix.
pub fn run_experiment(cfg: &PipelineConfig) -> Result<RunArtifacts, PipelineError> {
    let hash = cfg.config_hash();
    let out = &cfg.out_dir;
    stage("setup", std::fs::create_dir_all(out))?;
    stage(
        "setup",
        atomic_write(&out.join("config.resolved"), cfg.canonical_text().as_bytes()),
    )?;

    // Data: ingest an existing corpus or generate the synthetic one.
    let data = match &cfg.data_dir {
        Some(dir) => stage(
            "ingest",
            ClickLogDataset::read_path(dir)
                .with_context(|| format!("reading dataset from {}", dir.display())),
        )?,
        None => {
            let data = stage("generate", generate(&cfg.synth))?;
            stage("generate", data.write_dir(&out.join("data"), hash))?;
            data
        }
    };

    // Train.
    let model = {
        let shape = stage("train", cfg.train.model_shape(&data))?;
        let init = stage(
            "train",
            ModelParams::init(&shape, &mut ChaCha8Rng::seed_from_u64(cfg.train.seed)),
        )?;
        let ckpt_dir = out.join("checkpoints");
        let (model, _trace) = stage(
            "train",
            train(&cfg.train, &data, init, Some(ckpt_dir.as_path())),
        )?;
        stage(
            "train",
            checkpoint::save(&out.join("model.ckpt"), &model, hash),
        )?;
        model
    };

    // Index.
    let index = stage("index", ItemIndex::build(&model, &data))?;
    stage("index", index.save(&out.join("index.bin"), hash))?;

    // Calibrate the threshold policies to the same average k.
    let mode = match cfg.policy {
        RetrievalPolicy::CdfCutoff { mode, .. } => mode,
        _ => DistributionMode::Plain,
    };
    let (queries, taus) = stage("calibrate", encode_queries(&model, &data))?;
    let query_set: Vec<(EmbeddingVector, f64)> = stage(
        "calibrate",
        (0..queries.nrows())
            .map(|i| {
                EmbeddingVector::normalize(queries.row(i).to_owned()).map(|v| (v, taus[i]))
            })
            .collect::<Result<Vec<_>, _>>(),
    )?;
    let topk_policy = RetrievalPolicy::TopK { k: cfg.target_k };
    let score_cal = stage(
        "calibrate",
        calibrate_policy_for_avg_k(&index, &query_set, cfg.target_k, PolicyFamily::ScoreThreshold),
    )?;
    let cdf_cal = stage(
        "calibrate",
        calibrate_policy_for_avg_k(
            &index,
            &query_set,
            cfg.target_k,
            PolicyFamily::CdfCutoff(mode),
        ),
    )?;
    let calibration_note = format!(
        "{}\n# target_k: {}\nscore: {} (mean count {:.3})\ncdf: {} (mean count {:.3})\n",
        cdfcut_core::kv::hash_header(hash),
        cfg.target_k,
        score_cal.policy.descriptor(),
        score_cal.mean_count,
        cdf_cal.policy.descriptor(),
        cdf_cal.mean_count,
    );
    stage(
        "calibrate",
        atomic_write(&out.join("calibration.txt"), calibration_note.as_bytes()),
    )?;

    // Evaluate all three policies at the common k.
    let mut reports = BTreeMap::new();
    for (name, policy) in [
        ("topk", topk_policy),
        ("score", score_cal.policy),
        ("cdf", cdf_cal.policy),
    ] {
        let report = stage(
            "evaluate",
            evaluate(&index, &model, &data, &policy, cfg.target_k, cfg.bin_width),
        )?;
        stage(
            "evaluate",
            atomic_write(
                &out.join(format!("report_{name}.txt")),
                report.to_text(hash).as_bytes(),
            ),
        )?;
        stage(
            "evaluate",
            atomic_write(
                &out.join(format!("report_{name}.jsonl")),
                report.to_jsonl(hash).as_bytes(),
            ),
        )?;
        reports.insert(name, report);
    }

    // Retrieved-count behavior: sweep over cutoff CDF values, histogram at
    // the fixed one.
    let sweep = stage(
        "sweep",
        cdf_sweep(&index, &model, &data, &cfg.sweep_p, mode),
    )?;
    stage(
        "sweep",
        atomic_write(&out.join("sweep.txt"), sweep.to_text(hash).as_bytes()),
    )?;
    stage(
        "sweep",
        atomic_write(&out.join("sweep.jsonl"), sweep.to_jsonl(hash).as_bytes()),
    )?;

    let histogram = stage(
        "histogram",
        count_histogram(&index, &model, &data, cfg.histogram_p, mode, cfg.bin_width),
    )?;
    stage(
        "histogram",
        atomic_write(
            &out.join("histogram.txt"),
            histogram.to_text(hash).as_bytes(),
        ),
    )?;
    stage(
        "histogram",
        atomic_write(
            &out.join("histogram.jsonl"),
            histogram.to_jsonl(hash).as_bytes(),
        ),
    )?;

    Ok(RunArtifacts {
        config_hash: hash,
        out_dir: out.clone(),
        dataset: data,
        model,
        score_policy: score_cal.policy,
        cdf_policy: cdf_cal.policy,
        reports,
        sweep,
        histogram,
    })
}
