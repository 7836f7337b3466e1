//! Probabilistic embedding retrieval.
//!
//! Two-tower encoders are trained under distribution-grounded contrastive
//! losses (ExpNCE, BetaNCE, a Beta maximum-likelihood objective, and the
//! usual point-wise / softmax baselines). At inference time items are cut
//! off per query: instead of a fixed top-k or a fixed cosine threshold, the
//! learned score distribution for the query is inverted to the cosine value
//! above which a target probability mass lies.
//!
//! Modules follow the pipeline:
//!
//! - [`dist`]: score densities, CDFs, quadrature, inverse-CDF tables.
//! - [`model`]: the two towers, temperature and shape heads, checkpoints.
//! - [`loss`]: training objectives with analytic gradients.
//! - [`train`]: AdaGrad mini-batch loop with deterministic replay.
//! - [`synth`]: synthetic head/torso/tail corpora and click-log ingestion.
//! - [`retrieval`]: exact cosine index with top-k, score-threshold, and
//!   CDF-cutoff truncation policies, plus average-k calibration.
//! - [`eval`]: stratified precision/recall reports, CDF sweeps, histograms.
//! - [`verify`]: independent oracles for tests and acceptance checks.

pub mod dist;
pub mod eval;
pub mod kv;
pub mod loss;
pub mod model;
pub mod retrieval;
pub mod synth;
pub mod train;
pub mod verify;

pub use dist::{
    build_cdf_table, cdf, density, inverse_cdf, CdfTable, DistError, MarginalBase,
    QuadratureSpec, ScoreDistribution,
};
pub use eval::EvalReport;
pub use loss::{Batch, LossKind, LossOutput};
pub use model::{EmbeddingVector, Features, ModelParams, TemperatureHead, TowerParams};
pub use retrieval::{DistributionMode, ItemIndex, RetrievalPolicy, RetrievalResult};
pub use synth::{ClickLogDataset, Stratum, SynthSpec};
pub use train::{AdaGradState, TrainConfig, TrainingTrace};
