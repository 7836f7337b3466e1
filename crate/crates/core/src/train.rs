//! Mini-batch AdaGrad training with deterministic replay.
//!
//! Each step samples `batch_size` (query, positive) pairs uniformly with
//! replacement from the click records (so a query's sampling weight is its
//! click frequency), encodes both sides, evaluates the configured loss, and
//! applies one AdaGrad update to every parameter. Sampling order,
//! initialization, and update order are all fixed by the seed: two runs
//! with the same config and data produce bitwise-identical loss traces.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::kv::{config_hash, KvError, KvMap};
use crate::loss::{
    beta_nce_loss, exp_nce_loss, info_nce_loss, mle_beta_loss, pairwise_softmax_loss,
    pointwise_loss, Batch, LossError, LossKind, LossOutput, MleDensityConfig, PointwiseForm,
};
use crate::model::{
    checkpoint, FeatureBatch, FeatureEncoding, FeatureRecord, HeadGrads, ModelError, ModelParams,
    ModelShape, TowerGrads,
};
use crate::synth::ClickLogDataset;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset has no click records")]
    EmptyDataset,
    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Kv(#[from] KvError),
}

/// Training settings. The key-value config file mirrors these field names
/// exactly; see [`TrainConfig::from_kv`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Global temperature; required by (and only used by) the pairwise loss.
    pub global_tau: Option<f64>,
    /// Write a checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    pub tau_floor: f64,
    pub tau_ceiling: f64,
    /// Input width for hashed token features; unused for dense features.
    pub hash_dim: usize,
    /// Sign convention of the point-wise loss.
    pub pointwise_form: PointwiseForm,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossKind::BetaNce,
            learning_rate: 0.05,
            batch_size: 64,
            steps: 5000,
            seed: 42,
            global_tau: None,
            checkpoint_every: 0,
            embedding_dim: 32,
            hidden_dim: 64,
            tau_floor: 0.02,
            tau_ceiling: 1.0,
            hash_dim: 4096,
            pointwise_form: PointwiseForm::AsPublished,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size < 2 {
            return Err(TrainError::Config(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if self.steps < 1 {
            return Err(TrainError::Config(format!(
                "steps must be at least 1, got {}",
                self.steps
            )));
        }
        if self.loss == LossKind::Pairwise {
            match self.global_tau {
                Some(t) if t > 0.0 => {}
                Some(t) => {
                    return Err(TrainError::Config(format!(
                        "global_tau must be positive, got {t}"
                    )))
                }
                None => {
                    return Err(TrainError::Config(
                        "pairwise loss requires global_tau".into(),
                    ))
                }
            }
        }
        if self.embedding_dim < 1 || self.hidden_dim < 1 || self.hash_dim < 1 {
            return Err(TrainError::Config("model dimensions must be positive".into()));
        }
        if !(self.tau_floor > 0.0) || !(self.tau_ceiling > self.tau_floor) {
            return Err(TrainError::Config(format!(
                "need 0 < tau_floor < tau_ceiling, got {} and {}",
                self.tau_floor, self.tau_ceiling
            )));
        }
        Ok(())
    }

    pub fn from_kv(mut kv: KvMap) -> Result<Self, TrainError> {
        let mut cfg = TrainConfig::default();
        if let Some(name) = kv.take_string("loss") {
            cfg.loss = LossKind::parse(&name).ok_or_else(|| {
                TrainError::Config(format!(
                    "unknown loss {name:?}; expected one of pointwise, pairwise, infonce, \
                     expnce, betance, mle"
                ))
            })?;
        }
        if let Some(v) = kv.take_f64("learning_rate")? {
            cfg.learning_rate = v;
        }
        if let Some(v) = kv.take_usize("batch_size")? {
            cfg.batch_size = v;
        }
        if let Some(v) = kv.take_usize("steps")? {
            cfg.steps = v;
        }
        if let Some(v) = kv.take_u64("seed")? {
            cfg.seed = v;
        }
        if let Some(v) = kv.take_f64("global_tau")? {
            cfg.global_tau = Some(v);
        }
        if let Some(v) = kv.take_usize("checkpoint_every")? {
            cfg.checkpoint_every = v;
        }
        if let Some(v) = kv.take_usize("embedding_dim")? {
            cfg.embedding_dim = v;
        }
        if let Some(v) = kv.take_usize("hidden_dim")? {
            cfg.hidden_dim = v;
        }
        if let Some(v) = kv.take_f64("tau_floor")? {
            cfg.tau_floor = v;
        }
        if let Some(v) = kv.take_usize("hash_dim")? {
            cfg.hash_dim = v;
        }
        if let Some(v) = kv.take_f64("tau_ceiling")? {
            cfg.tau_ceiling = v;
        }
        if let Some(name) = kv.take_string("pointwise_form") {
            cfg.pointwise_form = match name.as_str() {
                "as_published" => PointwiseForm::AsPublished,
                "corrected" => PointwiseForm::Corrected,
                other => {
                    return Err(TrainError::Config(format!(
                        "unknown pointwise_form {other:?}"
                    )))
                }
            };
        }
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Field-stable serialization used for config hashing and `.resolved`
    /// artifacts.
    pub fn canonical_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("loss = {}\n", self.loss.name()));
        s.push_str(&format!("learning_rate = {}\n", self.learning_rate));
        s.push_str(&format!("batch_size = {}\n", self.batch_size));
        s.push_str(&format!("steps = {}\n", self.steps));
        s.push_str(&format!("seed = {}\n", self.seed));
        if let Some(t) = self.global_tau {
            s.push_str(&format!("global_tau = {t}\n"));
        }
        s.push_str(&format!("checkpoint_every = {}\n", self.checkpoint_every));
        s.push_str(&format!("embedding_dim = {}\n", self.embedding_dim));
        s.push_str(&format!("hidden_dim = {}\n", self.hidden_dim));
        s.push_str(&format!("tau_floor = {}\n", self.tau_floor));
        s.push_str(&format!("tau_ceiling = {}\n", self.tau_ceiling));
        s.push_str(&format!("hash_dim = {}\n", self.hash_dim));
        s.push_str(&format!(
            "pointwise_form = {}\n",
            match self.pointwise_form {
                PointwiseForm::AsPublished => "as_published",
                PointwiseForm::Corrected => "corrected",
            }
        ));
        s
    }

    pub fn config_hash(&self) -> u64 {
        config_hash(&self.canonical_text())
    }

    /// Tower shapes implied by this config and the dataset's feature kind.
    pub fn model_shape(&self, data: &ClickLogDataset) -> Result<ModelShape, TrainError> {
        let probe = data
            .queries()
            .first()
            .map(|q| &q.features)
            .ok_or(TrainError::EmptyDataset)?;
        let (encoding, query_input) = match probe {
            FeatureRecord::Dense(v) => (FeatureEncoding::Dense, v.len()),
            FeatureRecord::Tokens(_) => (FeatureEncoding::Hashed, self.hash_dim),
        };
        let item_input = match data.items().first().map(|i| &i.features) {
            Some(FeatureRecord::Dense(v)) => v.len(),
            Some(FeatureRecord::Tokens(_)) => self.hash_dim,
            None => return Err(TrainError::EmptyDataset),
        };
        Ok(ModelShape {
            query_input,
            item_input,
            hidden: self.hidden_dim,
            embedding: self.embedding_dim,
            tau_floor: self.tau_floor,
            tau_ceiling: self.tau_ceiling,
            encoding,
        })
    }
}

/// Accumulated squared gradients for every parameter tensor, plus epsilon.
/// Accumulators never decrease.
#[derive(Debug, Clone)]
pub struct AdaGradState {
    pub epsilon: f64,
    query: Vec<(Array2<f64>, Array1<f64>)>,
    item: Vec<(Array2<f64>, Array1<f64>)>,
    temperature: (Array1<f64>, f64),
    alpha_pos: (Array1<f64>, f64),
    beta_neg: (Array1<f64>, f64),
}

impl AdaGradState {
    pub fn new(params: &ModelParams) -> Self {
        let tower = |t: &crate::model::TowerParams| {
            t.layers
                .iter()
                .map(|l| (Array2::zeros(l.weight.dim()), Array1::zeros(l.bias.len())))
                .collect()
        };
        let head =
            |h: &crate::model::TemperatureHead| (Array1::zeros(h.weight.len()), 0.0);
        AdaGradState {
            epsilon: 1e-8,
            query: tower(&params.query),
            item: tower(&params.item),
            temperature: head(&params.temperature),
            alpha_pos: head(&params.alpha_pos),
            beta_neg: head(&params.beta_neg),
        }
    }

    /// Max accumulator value, for monotonicity checks.
    pub fn max_accumulator(&self) -> f64 {
        let mut m = 0.0f64;
        for (w, b) in self.query.iter().chain(&self.item) {
            m = w.iter().chain(b.iter()).fold(m, |acc, v| acc.max(*v));
        }
        for (w, b) in [&self.temperature, &self.alpha_pos, &self.beta_neg] {
            m = w.iter().fold(m.max(*b), |acc, v| acc.max(*v));
        }
        m
    }
}

/// Gradients for every model parameter.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub query: TowerGrads,
    pub item: TowerGrads,
    pub temperature: HeadGrads,
    pub alpha_pos: HeadGrads,
    pub beta_neg: HeadGrads,
}

/// The per-coordinate AdaGrad rule: `acc += g²; p -= lr · g / sqrt(acc + ε)`.
pub fn adagrad_update(param: &mut [f64], grad: &[f64], acc: &mut [f64], lr: f64, epsilon: f64) {
    debug_assert_eq!(param.len(), grad.len());
    debug_assert_eq!(param.len(), acc.len());
    for i in 0..param.len() {
        let g = grad[i];
        acc[i] += g * g;
        param[i] -= lr * g / (acc[i] + epsilon).sqrt();
    }
}

/// Applies one AdaGrad step to all parameters.
pub fn adagrad_step(
    params: &mut ModelParams,
    grads: &ModelGrads,
    state: &mut AdaGradState,
    lr: f64,
) {
    let eps = state.epsilon;
    for ((layer, (dw, db)), (aw, ab)) in params
        .query
        .layers
        .iter_mut()
        .zip(&grads.query.layers)
        .zip(&mut state.query)
    {
        adagrad_update(
            layer.weight.as_slice_mut().unwrap(),
            dw.as_slice().unwrap(),
            aw.as_slice_mut().unwrap(),
            lr,
            eps,
        );
        adagrad_update(
            layer.bias.as_slice_mut().unwrap(),
            db.as_slice().unwrap(),
            ab.as_slice_mut().unwrap(),
            lr,
            eps,
        );
    }
    for ((layer, (dw, db)), (aw, ab)) in params
        .item
        .layers
        .iter_mut()
        .zip(&grads.item.layers)
        .zip(&mut state.item)
    {
        adagrad_update(
            layer.weight.as_slice_mut().unwrap(),
            dw.as_slice().unwrap(),
            aw.as_slice_mut().unwrap(),
            lr,
            eps,
        );
        adagrad_update(
            layer.bias.as_slice_mut().unwrap(),
            db.as_slice().unwrap(),
            ab.as_slice_mut().unwrap(),
            lr,
            eps,
        );
    }
    for (head, grad, acc) in [
        (
            &mut params.temperature,
            &grads.temperature,
            &mut state.temperature,
        ),
        (&mut params.alpha_pos, &grads.alpha_pos, &mut state.alpha_pos),
        (&mut params.beta_neg, &grads.beta_neg, &mut state.beta_neg),
    ] {
        adagrad_update(
            head.weight.as_slice_mut().unwrap(),
            grad.weight.as_slice().unwrap(),
            acc.0.as_slice_mut().unwrap(),
            lr,
            eps,
        );
        let mut b = [head.bias];
        let mut a = [acc.1];
        adagrad_update(&mut b, &[grad.bias], &mut a, lr, eps);
        head.bias = b[0];
        acc.1 = a[0];
    }
}

/// Per-step loss values.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTrace {
    pub losses: Vec<f64>,
    /// Total scores clamped away from the log-domain boundary.
    pub saturated: u64,
}

/// Loss and full parameter gradients for an explicit batch of
/// (query index, item index) pairs. The forward pass chains the temperature
/// (and, for the MLE loss, the Beta shape heads) off the query embeddings,
/// so their gradients flow both into the heads and back through the query
/// tower.
pub fn batch_loss_and_grads(
    params: &ModelParams,
    rows: &[(u32, u32)],
    data: &ClickLogDataset,
    config: &TrainConfig,
) -> Result<(f64, ModelGrads, usize), TrainError> {
    let query_records: Vec<&FeatureRecord> = rows
        .iter()
        .map(|&(q, _)| &data.queries()[q as usize].features)
        .collect();
    let item_records: Vec<&FeatureRecord> = rows
        .iter()
        .map(|&(_, i)| &data.items()[i as usize].features)
        .collect();
    let fb_q = FeatureBatch::from_records(&query_records, params.encoding, params.query.input_dim())?;
    let fb_i = FeatureBatch::from_records(&item_records, params.encoding, params.item.input_dim())?;
    let (v_q, cache_q) = params.query.forward_batch(fb_q)?;
    let (v_p, cache_p) = params.item.forward_batch(fb_i)?;

    let uses_tau_head = matches!(
        config.loss,
        LossKind::InfoNce | LossKind::ExpNce | LossKind::BetaNce
    );
    let tau = if uses_tau_head {
        params.temperature.value_batch(&v_q)
    } else {
        Array1::from_elem(rows.len(), config.global_tau.unwrap_or(1.0))
    };

    let batch = Batch::new(v_q.clone(), v_p, tau)?;
    let out: LossOutput = match config.loss {
        LossKind::Pointwise => pointwise_loss(&batch, config.pointwise_form),
        LossKind::Pairwise => pairwise_softmax_loss(
            &batch,
            config.global_tau.expect("validated: pairwise requires global_tau"),
        )?,
        LossKind::InfoNce => info_nce_loss(&batch),
        LossKind::ExpNce => exp_nce_loss(&batch),
        LossKind::BetaNce => beta_nce_loss(&batch),
        LossKind::Mle => {
            let cfg = MleDensityConfig::new(
                params.alpha_pos.value_batch(&v_q),
                params.beta_neg.value_batch(&v_q),
            )?;
            mle_beta_loss(&batch, &cfg)?
        }
    };

    let mut grad_vq = out.grad_queries.clone();
    let temperature = if uses_tau_head {
        params
            .temperature
            .backward_batch(&v_q, &out.grad_tau, &mut grad_vq)
    } else {
        params.temperature.zero_grads()
    };
    let (alpha_pos, beta_neg) = if config.loss == LossKind::Mle {
        (
            params
                .alpha_pos
                .backward_batch(&v_q, &out.grad_alpha_pos, &mut grad_vq),
            params
                .beta_neg
                .backward_batch(&v_q, &out.grad_beta_neg, &mut grad_vq),
        )
    } else {
        (params.alpha_pos.zero_grads(), params.beta_neg.zero_grads())
    };

    let query = params.query.backward_batch(&cache_q, &grad_vq);
    let item = params.item.backward_batch(&cache_p, &out.grad_positives);

    Ok((
        out.value,
        ModelGrads {
            query,
            item,
            temperature,
            alpha_pos,
            beta_neg,
        },
        out.saturated,
    ))
}

/// Runs the training loop. Returns the final parameters and the loss trace;
/// aborts with the offending step index if the loss goes non-finite.
///
/// When `checkpoint_dir` is given and `checkpoint_every > 0`, intermediate
/// checkpoints land in `checkpoint_dir/checkpoint_step{N}.ckpt`.
pub fn train(
    config: &TrainConfig,
    data: &ClickLogDataset,
    init: ModelParams,
    checkpoint_dir: Option<&Path>,
) -> Result<(ModelParams, TrainingTrace), TrainError> {
    config.validate()?;
    init.validate()?;
    if data.records().is_empty() {
        return Err(TrainError::EmptyDataset);
    }

    // Uniform-with-replacement sampling over clicks (not deduped pairs), so
    // pair weight follows click frequency.
    let mut pairs: Vec<(u32, u32)> = Vec::new();
    for r in data.records() {
        for _ in 0..r.count {
            pairs.push((r.query, r.item));
        }
    }

    let mut params = init;
    let mut state = AdaGradState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trace = TrainingTrace {
        losses: Vec::with_capacity(config.steps),
        saturated: 0,
    };
    let hash = config.config_hash();

    for step in 0..config.steps {
        let rows: Vec<(u32, u32)> = (0..config.batch_size)
            .map(|_| pairs[rng.gen_range(0..pairs.len())])
            .collect();
        let (value, grads, saturated) = batch_loss_and_grads(&params, &rows, data, config)?;
        if !value.is_finite() {
            return Err(TrainError::NonFiniteLoss { step });
        }
        adagrad_step(&mut params, &grads, &mut state, config.learning_rate);
        trace.losses.push(value);
        trace.saturated += saturated as u64;

        if config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 {
            if let Some(dir) = checkpoint_dir {
                std::fs::create_dir_all(dir).map_err(ModelError::Io)?;
                let path = dir.join(format!("checkpoint_step{}.ckpt", step + 1));
                checkpoint::save(&path, &params, hash)?;
            }
        }
    }
    Ok((params, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adagrad_first_step_matches_hand_value() {
        let mut p = [0.0f64];
        let mut acc = [0.0f64];
        adagrad_update(&mut p, &[1.0], &mut acc, 0.1, 1e-8);
        let expected = -0.1 / (1.0f64 + 1e-8).sqrt();
        assert!((p[0] - expected).abs() < 1e-15);
        assert_eq!(acc[0], 1.0);
    }

    #[test]
    fn adagrad_zero_gradient_leaves_params_unchanged() {
        let mut p = [1.5f64, -0.25];
        let mut acc = [3.0f64, 0.0];
        adagrad_update(&mut p, &[0.0, 0.0], &mut acc, 0.5, 1e-8);
        assert_eq!(p, [1.5, -0.25]);
        assert_eq!(acc, [3.0, 0.0]);
    }

    #[test]
    fn adagrad_accumulator_is_monotone() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut p = vec![0.0f64; 16];
        let mut acc = vec![0.0f64; 16];
        let mut prev = acc.clone();
        for _ in 0..100 {
            let g: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
            adagrad_update(&mut p, &g, &mut acc, 0.05, 1e-8);
            for (a, b) in acc.iter().zip(&prev) {
                assert!(a >= b);
            }
            prev = acc.clone();
        }
    }

    #[test]
    fn config_rejects_zero_steps() {
        let cfg = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(TrainError::Config(_))));
    }

    #[test]
    fn pairwise_requires_global_tau() {
        let cfg = TrainConfig {
            loss: LossKind::Pairwise,
            global_tau: None,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        let ok = TrainConfig {
            loss: LossKind::Pairwise,
            global_tau: Some(0.2),
            ..TrainConfig::default()
        };
        assert!(ok.validate().is_ok());
    }

    #[test]
    fn config_kv_roundtrip() {
        let cfg = TrainConfig {
            loss: LossKind::InfoNce,
            learning_rate: 0.01,
            global_tau: Some(0.3),
            ..TrainConfig::default()
        };
        let parsed = TrainConfig::from_kv(KvMap::parse(&cfg.canonical_text()).unwrap()).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let kv = KvMap::parse("learning_rte = 0.05\n").unwrap();
        assert!(TrainConfig::from_kv(kv).is_err());
    }
}
