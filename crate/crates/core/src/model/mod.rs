//! Two-tower encoder: an MLP per side producing L2-normalized embeddings,
//! plus bounded scalar heads on the query embedding.
//!
//! The temperature head maps a query embedding to
//! `τ_q = floor + (ceiling - floor) · sigmoid(w·v_q + b)`, so the
//! temperature is always strictly inside its bounds. The same mapping, with
//! different bounds, produces the per-query Beta shape parameters used by
//! the maximum-likelihood loss.
//!
//! Feature inputs are either dense real vectors or bags of tokens hashed
//! into the first weight matrix, where a token bag is encoded as the sum of
//! the corresponding weight columns (exactly a sparse one-hot matmul).

pub mod checkpoint;

use ndarray::{Array1, Array2};
use rand::Rng;
use thiserror::Error;

use crate::kv::fnv1a64;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("token index {token} out of range for input dimension {dim}")]
    TokenOutOfRange { token: u32, dim: usize },
    #[error("embedding has zero norm and cannot be normalized")]
    ZeroNorm,
    #[error("vector norm {0} is not 1 within 1e-6")]
    NotUnitNorm(f64),
    #[error("invalid head bounds: floor {floor}, ceiling {ceiling}")]
    BadHeadBounds { floor: f64, ceiling: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A unit-norm embedding. Constructed by the towers (which normalize) or by
/// [`EmbeddingVector::new`], which verifies the norm.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Array1<f64>);

impl EmbeddingVector {
    pub fn new(values: Array1<f64>) -> Result<Self, ModelError> {
        let norm = values.dot(&values).sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(ModelError::NotUnitNorm(norm));
        }
        Ok(EmbeddingVector(values))
    }

    /// Normalizes an arbitrary nonzero vector.
    pub fn normalize(values: Array1<f64>) -> Result<Self, ModelError> {
        let norm = values.dot(&values).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(ModelError::ZeroNorm);
        }
        Ok(EmbeddingVector(values / norm))
    }

    pub(crate) fn from_normalized(values: Array1<f64>) -> Self {
        EmbeddingVector(values)
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Cosine similarity of two unit-norm embeddings: their dot product.
/// Symmetric by construction.
pub fn score(a: &EmbeddingVector, b: &EmbeddingVector) -> f64 {
    a.0.dot(&b.0)
}

/// Model-ready features for one entity.
#[derive(Debug, Clone, PartialEq)]
pub enum Features {
    Dense(Array1<f64>),
    /// Indices into the first weight matrix; repeats accumulate.
    Tokens(Vec<u32>),
}

/// Raw features as stored in a dataset, before hashing.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureRecord {
    Dense(Vec<f64>),
    Tokens(Vec<String>),
}

/// Stable token hash: FNV-1a reduced to the tower input dimension.
pub fn hash_token(token: &str, dim: usize) -> u32 {
    (fnv1a64(token.as_bytes()) % dim as u64) as u32
}

/// A batch of features sharing one representation.
#[derive(Debug, Clone)]
pub enum FeatureBatch {
    Dense(Array2<f64>),
    Tokens(Vec<Vec<u32>>),
}

impl FeatureBatch {
    pub fn len(&self) -> usize {
        match self {
            FeatureBatch::Dense(x) => x.nrows(),
            FeatureBatch::Tokens(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Converts raw records into a batch for a tower with `input_dim`
    /// inputs. Dense records must match the dimension exactly; token
    /// records are hashed into it.
    pub fn from_records(
        records: &[&FeatureRecord],
        encoding: FeatureEncoding,
        input_dim: usize,
    ) -> Result<Self, ModelError> {
        let dense = encoding == FeatureEncoding::Dense;
        if dense {
            let mut x = Array2::zeros((records.len(), input_dim));
            for (i, rec) in records.iter().enumerate() {
                let FeatureRecord::Dense(v) = rec else {
                    return Err(ModelError::ShapeMismatch(
                        "model expects dense features but record is tokens".into(),
                    ));
                };
                if v.len() != input_dim {
                    return Err(ModelError::ShapeMismatch(format!(
                        "dense feature length {} does not match tower input {}",
                        v.len(),
                        input_dim
                    )));
                }
                for (j, val) in v.iter().enumerate() {
                    x[(i, j)] = *val;
                }
            }
            Ok(FeatureBatch::Dense(x))
        } else {
            let mut rows = Vec::with_capacity(records.len());
            for rec in records {
                let FeatureRecord::Tokens(toks) = rec else {
                    return Err(ModelError::ShapeMismatch(
                        "model expects token features but record is dense".into(),
                    ));
                };
                rows.push(toks.iter().map(|t| hash_token(t, input_dim)).collect());
            }
            Ok(FeatureBatch::Tokens(rows))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `[out × in]`, applied as `W x + b`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

/// One encoder tower: a chain of layers whose final output is
/// L2-normalized, so every produced embedding has unit norm.
#[derive(Debug, Clone, PartialEq)]
pub struct TowerParams {
    pub layers: Vec<Layer>,
}

/// Per-batch forward state kept for the backward pass.
pub struct TowerCache {
    features: FeatureBatch,
    /// Post-activation output of each layer; the last entry is the
    /// unnormalized embedding.
    outputs: Vec<Array2<f64>>,
    norms: Array1<f64>,
    normalized: Array2<f64>,
}

impl TowerCache {
    pub fn embeddings(&self) -> &Array2<f64> {
        &self.normalized
    }
}

/// Gradients with the same shapes as a tower's parameters.
#[derive(Debug, Clone)]
pub struct TowerGrads {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl TowerParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layers.is_empty() {
            return Err(ModelError::ShapeMismatch("tower has no layers".into()));
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[1].weight.ncols() != pair[0].weight.nrows() {
                return Err(ModelError::ShapeMismatch(format!(
                    "layer {} outputs {} but layer {} expects {}",
                    i,
                    pair[0].weight.nrows(),
                    i + 1,
                    pair[1].weight.ncols()
                )));
            }
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.bias.len() != layer.weight.nrows() {
                return Err(ModelError::ShapeMismatch(format!(
                    "layer {i} bias length {} does not match {} rows",
                    layer.bias.len(),
                    layer.weight.nrows()
                )));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.nrows()
    }

    /// The standard two-layer tower: tanh hidden layer, linear output.
    pub fn two_layer(input: usize, hidden: usize, output: usize, rng: &mut impl Rng) -> Self {
        TowerParams {
            layers: vec![
                Layer {
                    weight: init_matrix(hidden, input, rng),
                    bias: Array1::zeros(hidden),
                    activation: Activation::Tanh,
                },
                Layer {
                    weight: init_matrix(output, hidden, rng),
                    bias: Array1::zeros(output),
                    activation: Activation::Identity,
                },
            ],
        }
    }

    pub fn forward_batch(&self, features: FeatureBatch) -> Result<(Array2<f64>, TowerCache), ModelError> {
        let batch = features.len();
        let first = &self.layers[0];
        let mut current = match &features {
            FeatureBatch::Dense(x) => {
                if x.ncols() != first.weight.ncols() {
                    return Err(ModelError::ShapeMismatch(format!(
                        "feature length {} does not match first layer input {}",
                        x.ncols(),
                        first.weight.ncols()
                    )));
                }
                x.dot(&first.weight.t())
            }
            FeatureBatch::Tokens(rows) => {
                let dim = first.weight.ncols();
                let mut pre = Array2::zeros((batch, first.weight.nrows()));
                for (r, tokens) in rows.iter().enumerate() {
                    for &t in tokens {
                        if t as usize >= dim {
                            return Err(ModelError::TokenOutOfRange {
                                token: t,
                                dim,
                            });
                        }
                        let col = first.weight.column(t as usize);
                        let mut row = pre.row_mut(r);
                        row += &col;
                    }
                }
                pre
            }
        };
        current += &first.bias;
        apply_activation(&mut current, first.activation);

        let mut outputs = vec![current];
        for layer in &self.layers[1..] {
            let prev = outputs.last().unwrap();
            let mut next = prev.dot(&layer.weight.t());
            next += &layer.bias;
            apply_activation(&mut next, layer.activation);
            outputs.push(next);
        }

        let raw = outputs.last().unwrap();
        let mut norms = Array1::zeros(batch);
        let mut normalized = raw.clone();
        for (i, mut row) in normalized.rows_mut().into_iter().enumerate() {
            let n = row.dot(&row).sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(ModelError::ZeroNorm);
            }
            row /= n;
            norms[i] = n;
        }
        let cache = TowerCache {
            features,
            outputs,
            norms,
            normalized: normalized.clone(),
        };
        Ok((normalized, cache))
    }

    /// Backpropagates `grad_embeddings` (w.r.t. the normalized outputs)
    /// through the normalization and every layer. Gradients w.r.t. the
    /// features are not needed and not computed.
    pub fn backward_batch(&self, cache: &TowerCache, grad_embeddings: &Array2<f64>) -> TowerGrads {
        let batch = cache.norms.len();
        // Through v = u / |u|: du = (dv - v (v·dv)) / |u|.
        let mut grad = grad_embeddings.clone();
        for i in 0..batch {
            let v = cache.normalized.row(i);
            let g = grad.row(i);
            let proj = v.dot(&g);
            let mut row = grad.row_mut(i);
            for (j, val) in row.iter_mut().enumerate() {
                *val = (*val - v[j] * proj) / cache.norms[i];
            }
        }

        let mut layer_grads: Vec<(Array2<f64>, Array1<f64>)> = Vec::with_capacity(self.layers.len());
        for idx in (0..self.layers.len()).rev() {
            let layer = &self.layers[idx];
            // Activation backward operates on the layer's own output.
            if layer.activation == Activation::Tanh {
                let out = &cache.outputs[idx];
                grad.zip_mut_with(out, |g, y| *g *= 1.0 - y * y);
            }
            let db = grad.sum_axis(ndarray::Axis(0));
            let dw = if idx == 0 {
                match &cache.features {
                    FeatureBatch::Dense(x) => grad.t().dot(x),
                    FeatureBatch::Tokens(rows) => {
                        let mut dw = Array2::zeros(self.layers[0].weight.dim());
                        for (r, tokens) in rows.iter().enumerate() {
                            let g = grad.row(r);
                            for &t in tokens {
                                let mut col = dw.column_mut(t as usize);
                                col += &g;
                            }
                        }
                        dw
                    }
                }
            } else {
                grad.t().dot(&cache.outputs[idx - 1])
            };
            layer_grads.push((dw, db));
            if idx > 0 {
                grad = grad.dot(&layer.weight);
            }
        }
        layer_grads.reverse();
        TowerGrads {
            layers: layer_grads,
        }
    }

    /// Single-input encode.
    pub fn encode(&self, features: &Features) -> Result<EmbeddingVector, ModelError> {
        let batch = match features {
            Features::Dense(x) => {
                FeatureBatch::Dense(x.clone().insert_axis(ndarray::Axis(0)))
            }
            Features::Tokens(t) => FeatureBatch::Tokens(vec![t.clone()]),
        };
        let (v, _) = self.forward_batch(batch)?;
        Ok(EmbeddingVector::from_normalized(v.row(0).to_owned()))
    }

    pub fn zero_grads(&self) -> TowerGrads {
        TowerGrads {
            layers: self
                .layers
                .iter()
                .map(|l| (Array2::zeros(l.weight.dim()), Array1::zeros(l.bias.len())))
                .collect(),
        }
    }
}

fn apply_activation(x: &mut Array2<f64>, act: Activation) {
    if act == Activation::Tanh {
        x.mapv_inplace(f64::tanh);
    }
}

fn init_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    let bound = 1.0 / (cols as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..=bound))
}

fn init_vector(len: usize, rng: &mut impl Rng) -> Array1<f64> {
    let bound = 1.0 / (len as f64).sqrt();
    Array1::from_shape_fn(len, |_| rng.gen_range(-bound..=bound))
}

/// A bounded scalar head on the query embedding:
/// `value = floor + (ceiling - floor) · sigmoid(w·v + b)`.
///
/// Used for the query temperature and, with different bounds, for the
/// Beta shape parameters of the maximum-likelihood loss.
#[derive(Debug, Clone, PartialEq)]
pub struct TemperatureHead {
    pub weight: Array1<f64>,
    pub bias: f64,
    pub floor: f64,
    pub ceiling: f64,
}

/// Gradients for a [`TemperatureHead`].
#[derive(Debug, Clone)]
pub struct HeadGrads {
    pub weight: Array1<f64>,
    pub bias: f64,
}

impl TemperatureHead {
    pub fn init(dim: usize, floor: f64, ceiling: f64, rng: &mut impl Rng) -> Result<Self, ModelError> {
        if !(floor > 0.0) || !(ceiling > floor) {
            return Err(ModelError::BadHeadBounds { floor, ceiling });
        }
        Ok(TemperatureHead {
            weight: init_vector(dim, rng),
            bias: 0.0,
            floor,
            ceiling,
        })
    }

    pub fn value(&self, v: &Array1<f64>) -> f64 {
        let a = self.weight.dot(v) + self.bias;
        self.floor + (self.ceiling - self.floor) * sigmoid(a)
    }

    /// Values for a batch of embeddings (rows).
    pub fn value_batch(&self, v: &Array2<f64>) -> Array1<f64> {
        let a = v.dot(&self.weight);
        a.mapv(|x| self.floor + (self.ceiling - self.floor) * sigmoid(x + self.bias))
    }

    /// Given dL/d(head value) per row, accumulates parameter gradients and
    /// adds the chain contribution into `grad_embeddings`.
    pub fn backward_batch(
        &self,
        embeddings: &Array2<f64>,
        grad_value: &Array1<f64>,
        grad_embeddings: &mut Array2<f64>,
    ) -> HeadGrads {
        let range = self.ceiling - self.floor;
        let mut dw = Array1::zeros(self.weight.len());
        let mut db = 0.0;
        for i in 0..embeddings.nrows() {
            let a = self.weight.dot(&embeddings.row(i)) + self.bias;
            let s = sigmoid(a);
            let slope = grad_value[i] * range * s * (1.0 - s);
            db += slope;
            dw.scaled_add(slope, &embeddings.row(i));
            let mut row = grad_embeddings.row_mut(i);
            row.scaled_add(slope, &self.weight);
        }
        HeadGrads { weight: dw, bias: db }
    }

    pub fn zero_grads(&self) -> HeadGrads {
        HeadGrads {
            weight: Array1::zeros(self.weight.len()),
            bias: 0.0,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Bounds for the per-query Beta shape heads of the maximum-likelihood
/// loss; the floor of 1 keeps positives concentrating toward +1 and
/// negatives toward -1.
pub const SHAPE_HEAD_FLOOR: f64 = 1.0;
pub const SHAPE_HEAD_CEILING: f64 = 50.0;

/// How raw feature records map onto tower inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureEncoding {
    Dense,
    /// Token strings hashed into the tower input dimension.
    Hashed,
}

/// The full trainable model: both towers plus the query-side heads.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub query: TowerParams,
    pub item: TowerParams,
    pub temperature: TemperatureHead,
    pub alpha_pos: TemperatureHead,
    pub beta_neg: TemperatureHead,
    pub encoding: FeatureEncoding,
}

/// Shape and bound settings for [`ModelParams::init`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelShape {
    pub query_input: usize,
    pub item_input: usize,
    pub hidden: usize,
    pub embedding: usize,
    pub tau_floor: f64,
    pub tau_ceiling: f64,
    pub encoding: FeatureEncoding,
}

impl ModelParams {
    /// Seeded initialization; parameter draw order is fixed, so a given
    /// seed always produces the same model.
    pub fn init(shape: &ModelShape, rng: &mut impl Rng) -> Result<Self, ModelError> {
        let query = TowerParams::two_layer(shape.query_input, shape.hidden, shape.embedding, rng);
        let item = TowerParams::two_layer(shape.item_input, shape.hidden, shape.embedding, rng);
        let temperature =
            TemperatureHead::init(shape.embedding, shape.tau_floor, shape.tau_ceiling, rng)?;
        let alpha_pos =
            TemperatureHead::init(shape.embedding, SHAPE_HEAD_FLOOR, SHAPE_HEAD_CEILING, rng)?;
        let beta_neg =
            TemperatureHead::init(shape.embedding, SHAPE_HEAD_FLOOR, SHAPE_HEAD_CEILING, rng)?;
        Ok(ModelParams {
            query,
            item,
            temperature,
            alpha_pos,
            beta_neg,
            encoding: shape.encoding,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.query.output_dim()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.query.validate()?;
        self.item.validate()?;
        let n = self.query.output_dim();
        if self.item.output_dim() != n {
            return Err(ModelError::ShapeMismatch(
                "query and item towers produce different embedding dimensions".into(),
            ));
        }
        for head in [&self.temperature, &self.alpha_pos, &self.beta_neg] {
            if head.weight.len() != n {
                return Err(ModelError::ShapeMismatch(
                    "head weight length does not match embedding dimension".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn featurize_query(&self, rec: &FeatureRecord) -> Result<Features, ModelError> {
        featurize(rec, self.encoding, self.query.input_dim())
    }

    pub fn featurize_item(&self, rec: &FeatureRecord) -> Result<Features, ModelError> {
        featurize(rec, self.encoding, self.item.input_dim())
    }

    pub fn encode_query_record(&self, rec: &FeatureRecord) -> Result<EmbeddingVector, ModelError> {
        self.query.encode(&self.featurize_query(rec)?)
    }

    pub fn encode_item_record(&self, rec: &FeatureRecord) -> Result<EmbeddingVector, ModelError> {
        self.item.encode(&self.featurize_item(rec)?)
    }
}

fn featurize(
    rec: &FeatureRecord,
    encoding: FeatureEncoding,
    input_dim: usize,
) -> Result<Features, ModelError> {
    match (encoding, rec) {
        (FeatureEncoding::Dense, FeatureRecord::Dense(v)) => {
            if v.len() != input_dim {
                return Err(ModelError::ShapeMismatch(format!(
                    "dense feature length {} does not match tower input {}",
                    v.len(),
                    input_dim
                )));
            }
            Ok(Features::Dense(Array1::from_vec(v.clone())))
        }
        (FeatureEncoding::Hashed, FeatureRecord::Tokens(toks)) => Ok(Features::Tokens(
            toks.iter().map(|t| hash_token(t, input_dim)).collect(),
        )),
        (FeatureEncoding::Hashed, FeatureRecord::Dense(_)) => Err(ModelError::ShapeMismatch(
            "model expects token features but record is dense".into(),
        )),
        (FeatureEncoding::Dense, FeatureRecord::Tokens(_)) => Err(ModelError::ShapeMismatch(
            "model expects dense features but record is tokens".into(),
        )),
    }
}

/// Encodes a query feature vector to a unit-norm embedding.
pub fn encode_query(params: &TowerParams, features: &Features) -> Result<EmbeddingVector, ModelError> {
    params.encode(features)
}

/// Encodes an item feature vector to a unit-norm embedding.
pub fn encode_item(params: &TowerParams, features: &Features) -> Result<EmbeddingVector, ModelError> {
    params.encode(features)
}

/// The query temperature `τ_q`, strictly inside `[floor, ceiling]`.
pub fn temperature(head: &TemperatureHead, v_q: &EmbeddingVector) -> f64 {
    head.value(v_q.values())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_tower(n: usize) -> TowerParams {
        TowerParams {
            layers: vec![Layer {
                weight: Array2::eye(n),
                bias: Array1::zeros(n),
                activation: Activation::Identity,
            }],
        }
    }

    #[test]
    fn identity_tower_preserves_unit_inputs() {
        let tower = identity_tower(4);
        let x = Array1::from_vec(vec![0.5, 0.5, 0.5, 0.5]);
        let v = tower.encode(&Features::Dense(x.clone())).unwrap();
        for (a, b) in v.values().iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn outputs_are_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tower = TowerParams::two_layer(6, 8, 5, &mut rng);
        for _ in 0..50 {
            let x = Array1::from_shape_fn(6, |_| rng.gen_range(-2.0..2.0));
            let v = tower.encode(&Features::Dense(x)).unwrap();
            let norm = v.values().dot(v.values()).sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn encoding_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tower = TowerParams::two_layer(4, 6, 3, &mut rng);
        let x = Array1::from_vec(vec![0.1, -0.7, 0.3, 0.9]);
        let a = tower.encode(&Features::Dense(x.clone())).unwrap();
        let b = tower.encode(&Features::Dense(x)).unwrap();
        for (u, w) in a.values().iter().zip(b.values()) {
            assert_eq!(u.to_bits(), w.to_bits());
        }
    }

    #[test]
    fn token_gather_equals_one_hot_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let tower = TowerParams::two_layer(10, 6, 4, &mut rng);
        let tokens = Features::Tokens(vec![2, 7, 2]);
        let mut dense = Array1::zeros(10);
        dense[2] += 2.0;
        dense[7] += 1.0;
        let via_tokens = tower.encode(&tokens).unwrap();
        let via_dense = tower.encode(&Features::Dense(dense)).unwrap();
        for (a, b) in via_tokens.values().iter().zip(via_dense.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn token_out_of_range_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let tower = TowerParams::two_layer(10, 6, 4, &mut rng);
        assert!(matches!(
            tower.encode(&Features::Tokens(vec![10])),
            Err(ModelError::TokenOutOfRange { .. })
        ));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tower = TowerParams::two_layer(4, 6, 3, &mut rng);
        let x = Array1::from_vec(vec![1.0, 2.0]);
        assert!(tower.encode(&Features::Dense(x)).is_err());
    }

    #[test]
    fn temperature_midpoint_at_zero_logit() {
        let head = TemperatureHead {
            weight: Array1::zeros(3),
            bias: 0.0,
            floor: 0.02,
            ceiling: 1.0,
        };
        let v = EmbeddingVector::new(Array1::from_vec(vec![1.0, 0.0, 0.0])).unwrap();
        assert!((temperature(&head, &v) - 0.51).abs() < 1e-12);
    }

    #[test]
    fn temperature_saturates_to_ceiling() {
        let head = TemperatureHead {
            weight: Array1::from_vec(vec![20.0, 0.0, 0.0]),
            bias: 0.0,
            floor: 0.02,
            ceiling: 0.5,
        };
        let v = EmbeddingVector::new(Array1::from_vec(vec![1.0, 0.0, 0.0])).unwrap();
        assert!((temperature(&head, &v) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn temperature_respects_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let head = TemperatureHead::init(8, 0.02, 1.0, &mut rng).unwrap();
        for _ in 0..10_000 {
            let raw = Array1::from_shape_fn(8, |_| rng.gen_range(-1.0..1.0));
            let v = EmbeddingVector::normalize(raw).unwrap();
            let tau = temperature(&head, &v);
            assert!(tau > 0.02 && tau < 1.0, "tau={tau}");
        }
    }

    #[test]
    fn score_is_symmetric_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let a = EmbeddingVector::normalize(Array1::from_shape_fn(6, |_| {
                rng.gen_range(-1.0..1.0)
            }))
            .unwrap();
            let b = EmbeddingVector::normalize(Array1::from_shape_fn(6, |_| {
                rng.gen_range(-1.0..1.0)
            }))
            .unwrap();
            assert_eq!(score(&a, &b), score(&b, &a));
            assert!(score(&a, &b).abs() <= 1.0 + 1e-6);
        }
    }

    #[test]
    fn self_and_antipodal_scores() {
        let v = EmbeddingVector::new(Array1::from_vec(vec![0.6, 0.8])).unwrap();
        let neg = EmbeddingVector::new(Array1::from_vec(vec![-0.6, -0.8])).unwrap();
        assert!((score(&v, &v) - 1.0).abs() < 1e-12);
        assert!((score(&v, &neg) + 1.0).abs() < 1e-12);
        let e1 = EmbeddingVector::new(Array1::from_vec(vec![1.0, 0.0])).unwrap();
        let e2 = EmbeddingVector::new(Array1::from_vec(vec![0.0, 1.0])).unwrap();
        assert!(score(&e1, &e2).abs() < 1e-7);
    }

    #[test]
    fn init_is_seed_reproducible() {
        let shape = ModelShape {
            query_input: 5,
            item_input: 7,
            hidden: 6,
            embedding: 4,
            tau_floor: 0.02,
            tau_ceiling: 1.0,
            encoding: FeatureEncoding::Dense,
        };
        let a = ModelParams::init(&shape, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = ModelParams::init(&shape, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a, b);
    }
}
