//! The `cdfcut` command line: one binary wiring
//! generate → train → build-index → calibrate → retrieve → eval → sweep
//! into reproducible pipelines.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.

pub mod pipeline;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cdfcut_core::dist::DistError;
use cdfcut_core::eval::{cdf_sweep, evaluate, DEFAULT_BIN_WIDTH};
use cdfcut_core::kv::{atomic_write, config_hash, hash_header, KvError, KvMap};
use cdfcut_core::model::{checkpoint, FeatureRecord, ModelError, ModelParams};
use cdfcut_core::retrieval::{
    calibrate_policy_for_avg_k, retrieve, DistributionMode, ItemIndex, PolicyFamily,
    RetrievalError, RetrievalPolicy,
};
use cdfcut_core::synth::{generate, ClickLogDataset, DataError, SynthSpec};
use cdfcut_core::train::{train, TrainConfig, TrainError};

use pipeline::{run_experiment, PipelineConfig, PipelineError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Parser)]
#[command(
    name = "cdfcut",
    version,
    about = "Probabilistic embedding retrieval: train two-tower encoders and retrieve with per-query CDF score cutoffs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic head/torso/tail corpus.
    Gen(GenArgs),
    /// Train a model on a click-log dataset.
    Train(TrainArgs),
    /// Encode every item into a searchable index.
    Index(IndexArgs),
    /// Tune a policy's scalar parameter to an average retrieved count.
    Calibrate(CalibrateArgs),
    /// Retrieve items for one query under a policy.
    Retrieve(RetrieveArgs),
    /// Evaluate a policy: stratified precision/recall and count histograms.
    Eval(EvalArgs),
    /// Mean retrieved counts per stratum across cutoff CDF values.
    Sweep(SweepArgs),
    /// Run the full experiment pipeline from a config file.
    Run(RunArgs),
}

#[derive(Args)]
struct GenArgs {
    /// `default` or a path to a key-value spec file.
    #[arg(long)]
    spec: String,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Override the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Key-value training config file.
    #[arg(long)]
    config: PathBuf,
    /// Dataset directory or click-log file.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct IndexArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Desired mean retrieved count over the dataset's queries.
    #[arg(long = "target-k")]
    target_k: usize,
    /// `score` or `cdf`.
    #[arg(long)]
    family: String,
    /// Distribution mode for the cdf family: `plain` or `spherical`.
    #[arg(long, default_value = "plain")]
    mode: String,
    /// Write the calibrated policy descriptor here (stdout otherwise).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Query id (looked up in --features) or raw text for token models.
    #[arg(long)]
    query: String,
    /// Query feature table for id lookup.
    #[arg(long)]
    features: Option<PathBuf>,
    /// topk:k=1500 | score:t=0.4 | cdf:p=0.985[,mode=plain|spherical]
    #[arg(long)]
    policy: String,
    /// Print at most this many rows.
    #[arg(long, default_value_t = 20)]
    limit: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// topk:k=1500 | score:t=0.4 | cdf:p=0.985[,mode=plain|spherical]
    #[arg(long)]
    policy: String,
    /// Nominal average retrieval depth labelling the metrics.
    #[arg(long)]
    k: usize,
    /// Report path; a `.jsonl` sibling is written as well.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BIN_WIDTH)]
    bin_width: usize,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated cutoff CDF values, e.g. 0.99,0.95,0.9
    #[arg(long)]
    p: String,
    #[arg(long, default_value = "plain")]
    mode: String,
    /// Output path; a `.jsonl` sibling is written as well.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Pipeline config file.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's out_dir.
    #[arg(long = "out-dir")]
    out_dir: Option<PathBuf>,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
}

/// Parses and executes `args` (including argv[0]); returns the process
/// exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version print through clap and succeed.
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(err) => {
            eprintln!("error: {err:#}");
            classify(&err)
        }
    }
}

fn dispatch(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Gen(args) => cmd_gen(args),
        Command::Train(args) => cmd_train(args),
        Command::Index(args) => cmd_index(args),
        Command::Calibrate(args) => cmd_calibrate(args),
        Command::Retrieve(args) => cmd_retrieve(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Run(args) => cmd_run(args),
    }
}

// Errors map onto exit codes by the innermost recognized cause.
fn classify(err: &anyhow::Error) -> i32 {
    if let Some(p) = err.downcast_ref::<PipelineError>() {
        return classify(&p.source);
    }
    for cause in err.chain() {
        if cause.downcast_ref::<KvError>().is_some() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            return match e {
                TrainError::Config(_) | TrainError::Kv(_) => EXIT_USAGE,
                TrainError::NonFiniteLoss { .. } => EXIT_NUMERIC,
                _ => EXIT_DATA,
            };
        }
        if let Some(e) = cause.downcast_ref::<RetrievalError>() {
            return match e {
                RetrievalError::InvalidPolicy(_) => EXIT_USAGE,
                RetrievalError::CalibrationFailed { .. } => EXIT_NUMERIC,
                RetrievalError::Dist(DistError::QuadratureFailure { .. }) => EXIT_NUMERIC,
                _ => EXIT_DATA,
            };
        }
        if let Some(e) = cause.downcast_ref::<DistError>() {
            return match e {
                DistError::QuadratureFailure { .. } => EXIT_NUMERIC,
                _ => EXIT_USAGE,
            };
        }
        if cause.downcast_ref::<DataError>().is_some()
            || cause.downcast_ref::<ModelError>().is_some()
            || cause.downcast_ref::<std::io::Error>().is_some()
        {
            return EXIT_DATA;
        }
    }
    EXIT_DATA
}

fn cmd_gen(args: GenArgs) -> anyhow::Result<()> {
    let mut spec = if args.spec == "default" {
        SynthSpec::default()
    } else {
        let text = std::fs::read_to_string(&args.spec)
            .with_context(|| format!("reading spec {}", args.spec))?;
        SynthSpec::from_kv(KvMap::parse(&text)?)?
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let hash = config_hash(&spec.canonical_text());
    let data = generate(&spec)?;
    data.write_dir(&args.out, hash)?;
    println!(
        "generated {} queries, {} items, {} click pairs -> {}",
        data.queries().len(),
        data.items().len(),
        data.records().len(),
        args.out.display()
    );
    Ok(())
}

fn read_train_config(path: &Path) -> anyhow::Result<TrainConfig> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(TrainConfig::from_kv(KvMap::parse(&text)?)?)
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let config = read_train_config(&args.config)?;
    let data = ClickLogDataset::read_path(&args.data)?;
    let shape = config.model_shape(&data)?;
    let init = ModelParams::init(&shape, &mut ChaCha8Rng::seed_from_u64(config.seed))?;
    let ckpt_dir = args.out.parent().map(|p| p.join("checkpoints"));
    let (model, trace) = train(&config, &data, init, ckpt_dir.as_deref())?;
    checkpoint::save(&args.out, &model, config.config_hash())?;
    let last = trace.losses.last().copied().unwrap_or(f64::NAN);
    println!(
        "trained {} steps ({}), final loss {last:.6} -> {}",
        trace.losses.len(),
        config.loss.name(),
        args.out.display()
    );
    Ok(())
}

fn cmd_index(args: IndexArgs) -> anyhow::Result<()> {
    let (model, hash) = checkpoint::load(&args.model)?;
    let data = ClickLogDataset::read_path(&args.data)?;
    let index = ItemIndex::build(&model, &data)?;
    index.save(&args.out, hash)?;
    println!(
        "indexed {} items of dimension {} -> {}",
        index.len(),
        index.dim(),
        args.out.display()
    );
    Ok(())
}

fn parse_mode(mode: &str) -> anyhow::Result<DistributionMode> {
    match mode {
        "plain" => Ok(DistributionMode::Plain),
        "spherical" => Ok(DistributionMode::Spherical),
        other => Err(RetrievalError::InvalidPolicy(format!("unknown mode {other:?}")).into()),
    }
}

fn cmd_calibrate(args: CalibrateArgs) -> anyhow::Result<()> {
    let (model, hash) = checkpoint::load(&args.model)?;
    let (index, _) = ItemIndex::load(&args.index)?;
    let data = ClickLogDataset::read_path(&args.data)?;
    let (emb, taus) = cdfcut_core::eval::encode_queries(&model, &data)?;
    let queries: Vec<_> = (0..emb.nrows())
        .map(|i| {
            cdfcut_core::model::EmbeddingVector::normalize(emb.row(i).to_owned())
                .map(|v| (v, taus[i]))
        })
        .collect::<Result<_, _>>()?;
    let family = match args.family.as_str() {
        "score" => PolicyFamily::ScoreThreshold,
        "cdf" => PolicyFamily::CdfCutoff(parse_mode(&args.mode)?),
        other => bail!(KvError::BadValue {
            key: "family".into(),
            value: other.into(),
            expected: "score or cdf",
        }),
    };
    let outcome = calibrate_policy_for_avg_k(&index, &queries, args.target_k, family)?;
    let text = format!(
        "{}\n# target_k: {}\npolicy = {}\nmean_count = {}\n",
        hash_header(hash),
        args.target_k,
        outcome.policy.descriptor(),
        outcome.mean_count
    );
    match &args.out {
        Some(path) => atomic_write(path, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_retrieve(args: RetrieveArgs) -> anyhow::Result<()> {
    let (model, _) = checkpoint::load(&args.model)?;
    let (index, _) = ItemIndex::load(&args.index)?;
    let policy = RetrievalPolicy::parse(&args.policy)?;

    // Resolve the query to features: table lookup by id, else raw text for
    // token models.
    let record: FeatureRecord = match &args.features {
        Some(path) => {
            let body = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            lookup_features(&body, path, &args.query)?
        }
        None => FeatureRecord::Tokens(
            args.query
                .split_whitespace()
                .map(str::to_string)
                .collect(),
        ),
    };
    let v_q = model.encode_query_record(&record)?;
    let tau = cdfcut_core::model::temperature(&model.temperature, &v_q);
    let result = retrieve(&index, &v_q, Some(tau), &policy)?;
    println!(
        "# policy: {} | tau_q: {tau:.6} | threshold: {:.6} | retrieved: {}",
        policy.descriptor(),
        result.threshold_used,
        result.count
    );
    for item in result.items.iter().take(args.limit) {
        println!("{}\t{:.6}", item.id, item.score);
    }
    Ok(())
}

fn lookup_features(body: &str, path: &Path, id: &str) -> anyhow::Result<FeatureRecord> {
    // Reuse the dataset parser on a synthetic one-table input by scanning
    // lines directly; the table may be large, so stop at the first match.
    let mut tokens_mode = false;
    for line in body.lines() {
        let trimmed = line.trim_end();
        if let Some(rest) = trimmed.strip_prefix('#') {
            if let Some(mode) = rest.trim().strip_prefix("feature-mode:") {
                tokens_mode = mode.trim() == "tokens";
            }
            continue;
        }
        if let Some((row_id, rest)) = trimmed.split_once('\t') {
            if row_id == id {
                return Ok(if tokens_mode {
                    FeatureRecord::Tokens(rest.split_whitespace().map(str::to_string).collect())
                } else {
                    FeatureRecord::Dense(
                        rest.split_whitespace()
                            .map(|t| t.parse::<f64>())
                            .collect::<Result<_, _>>()
                            .with_context(|| format!("parsing features of {id:?}"))?,
                    )
                });
            }
        }
    }
    if tokens_mode {
        // Unknown id in a token table: treat the query as raw text.
        return Ok(FeatureRecord::Tokens(
            id.split_whitespace().map(str::to_string).collect(),
        ));
    }
    Err(anyhow::Error::from(DataError::UnknownId {
        id: id.to_string(),
        table: "query",
    })
    .context(format!("query not found in {}", path.display())))
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let (model, hash) = checkpoint::load(&args.model)?;
    let (index, _) = ItemIndex::load(&args.index)?;
    let data = ClickLogDataset::read_path(&args.data)?;
    let policy = RetrievalPolicy::parse(&args.policy)?;
    let report = evaluate(&index, &model, &data, &policy, args.k, args.bin_width)?;
    atomic_write(&args.out, report.to_text(hash).as_bytes())?;
    atomic_write(
        &args.out.with_extension("jsonl"),
        report.to_jsonl(hash).as_bytes(),
    )?;
    print!("{}", report.to_text(hash));
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> anyhow::Result<()> {
    let (model, hash) = checkpoint::load(&args.model)?;
    let (index, _) = ItemIndex::load(&args.index)?;
    let data = ClickLogDataset::read_path(&args.data)?;
    let p_values: Vec<f64> = args
        .p
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| KvError::BadValue {
            key: "p".into(),
            value: args.p.clone(),
            expected: "comma-separated reals",
        })?;
    let mode = parse_mode(&args.mode)?;
    let table = cdf_sweep(&index, &model, &data, &p_values, mode)?;
    atomic_write(&args.out, table.to_text(hash).as_bytes())?;
    atomic_write(
        &args.out.with_extension("jsonl"),
        table.to_jsonl(hash).as_bytes(),
    )?;
    print!("{}", table.to_text(hash));
    Ok(())
}

fn cmd_run(args: RunArgs) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))?;
    let mut cfg = PipelineConfig::from_kv_text(&text)?;
    if let Some(dir) = args.out_dir {
        cfg.out_dir = dir;
    }
    if let Some(seed) = args.seed {
        cfg = cfg.with_master_seed(seed);
    }
    let artifacts = run_experiment(&cfg)?;
    println!(
        "run complete (config hash {:#018x}) -> {}",
        artifacts.config_hash,
        artifacts.out_dir.display()
    );
    for (name, report) in &artifacts.reports {
        let all = report.stratum(cdfcut_core::eval::ReportStratum::All);
        println!(
            "  {name:<6} P@{} {:.4}  R@{} {:.4}  mean count {:.1}",
            report.k, all.precision_at_k, report.k, all.recall_at_k, all.mean_retrieved
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn help_exits_zero() {
        assert_eq!(run(["cdfcut", "--help"]), EXIT_OK);
    }

    #[test]
    fn unknown_flag_is_usage_error() {
        assert_eq!(run(["cdfcut", "gen", "--bogus"]), EXIT_USAGE);
    }
}
