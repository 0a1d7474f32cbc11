//! A small TabPFN-style regressor: every cell of the table is a token, blocks
//! alternate attention across rows (per token column) and across the tokens
//! of a row, and the label token of each test row is read out by a scalar
//! head.

mod checkpoint;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{evaluate_icl, meta_train, IclScore, PriorComponent, TrainConfig, TrainState};

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::digest;
use crate::error::{Error, Result};
use crate::synthgen::{Split, TabularDataset};

const NORM_EPS: f64 = 1e-5;
const STD_FLOOR: f64 = 1e-8;
const PERTURB_SCALE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttentionOrder {
    #[default]
    SampleFirst,
    FeatureFirst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub embed_dim: usize,
    pub n_heads: usize,
    pub mlp_ratio: f64,
    /// Largest number of feature columns the embedding accepts.
    pub feature_cap: usize,
    /// Largest number of rows (train + test) in one grid.
    pub context_cap: usize,
    #[serde(default)]
    pub attention_order: AttentionOrder,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 8,
            embed_dim: 32,
            n_heads: 4,
            mlp_ratio: 4.0,
            feature_cap: 8,
            context_cap: 4096,
            attention_order: AttentionOrder::SampleFirst,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 2 {
            return Err(Error::Config(format!("n_layers must be >= 2, got {}", self.n_layers)));
        }
        if self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if !(self.mlp_ratio > 0.0) || self.feature_cap == 0 || self.context_cap < 3 {
            return Err(Error::Config("mlp_ratio, feature_cap and context_cap must be positive".into()));
        }
        Ok(())
    }

    pub fn mlp_dim(&self) -> usize {
        ((self.embed_dim as f64) * self.mlp_ratio).round() as usize
    }

    fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenRole {
    Feature,
    Label,
}

/// Per-layer hidden states of one table.
///
/// Rows are stored train-first; `source_rows[i]` is the dataset row that grid
/// row `i` came from.
#[derive(Debug, Clone)]
pub struct TokenGrid {
    /// `(n_rows, d + 1, k)`.
    pub states: Tensor,
    pub token_roles: Vec<TokenRole>,
    pub row_roles: Vec<Split>,
    pub source_rows: Vec<usize>,
    pub n_train: usize,
    pub label_mean: f64,
    pub label_std: f64,
}

impl TokenGrid {
    pub fn n_rows(&self) -> usize {
        self.row_roles.len()
    }

    pub fn n_tokens(&self) -> usize {
        self.token_roles.len()
    }

    /// Index of the label/answer token.
    pub fn label_token(&self) -> usize {
        self.n_tokens() - 1
    }
}

/// Train-split standardized inputs for one table.
#[derive(Debug, Clone)]
pub(crate) struct PreparedTask {
    /// Row-major `(n_rows, d)`, train rows first.
    pub features: Vec<f64>,
    /// Standardized train labels.
    pub train_labels: Vec<f64>,
    /// Standardized test labels (training loss only).
    pub test_labels: Vec<f64>,
    pub source_rows: Vec<usize>,
    pub n_train: usize,
    pub d: usize,
    pub label_mean: f64,
    pub label_std: f64,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count().max(1) as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    (mean, if std > STD_FLOOR { std } else { 1.0 })
}

impl PreparedTask {
    /// Standardizes with train-row statistics only; `rows` selects which test
    /// rows enter the grid (all of them when `None`).
    pub fn new(ds: &TabularDataset, test_rows: Option<&[usize]>) -> Result<Self> {
        let train = ds.rows_in(Split::Train);
        if train.is_empty() {
            return Err(Error::Config("dataset has no train rows".into()));
        }
        let test: Vec<usize> = match test_rows {
            Some(rows) => {
                for &r in rows {
                    if r >= ds.n_rows() || ds.split[r] != Split::Test {
                        return Err(Error::Selection(format!("row {r} is not a test row")));
                    }
                }
                rows.to_vec()
            }
            None => ds.rows_in(Split::Test),
        };
        let d = ds.n_features();
        let stats: Vec<(f64, f64)> = (0..d)
            .map(|j| mean_std(train.iter().map(|&i| ds.row(i)[j])))
            .collect();
        let (label_mean, label_std) = mean_std(train.iter().map(|&i| ds.z[i]));
        let source_rows: Vec<usize> = train.iter().chain(test.iter()).copied().collect();
        let mut features = Vec::with_capacity(source_rows.len() * d);
        for &i in &source_rows {
            for (j, &(m, s)) in stats.iter().enumerate() {
                features.push((ds.row(i)[j] - m) / s);
            }
        }
        let norm = |i: &usize| (ds.z[*i] - label_mean) / label_std;
        Ok(Self {
            features,
            train_labels: train.iter().map(norm).collect(),
            test_labels: test.iter().map(norm).collect(),
            source_rows,
            n_train: train.len(),
            d,
            label_mean,
            label_std,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.source_rows.len()
    }
}

// Parameter layout, in checkpoint order.
const SMALL_ATTENTION: usize = 16;
const EMBED_PARAMS: usize = 5; // feature_w, feature_b, label_w, label_b, dummy
const ATTN_PARAMS: usize = 8; // wq bq wk bk wv bv wo bo
const BLOCK_PARAMS: usize = 2 + ATTN_PARAMS + 2 + ATTN_PARAMS + 2 + 4;
const HEAD_PARAMS: usize = 4; // norm g, norm b, w, b

struct BlockIdx {
    sample_norm: usize,
    sample_attn: usize,
    feature_norm: usize,
    feature_attn: usize,
    mlp_norm: usize,
    mlp: usize,
}

fn block_idx(layer: usize) -> BlockIdx {
    let base = EMBED_PARAMS + layer * BLOCK_PARAMS;
    BlockIdx {
        sample_norm: base,
        sample_attn: base + 2,
        feature_norm: base + 2 + ATTN_PARAMS,
        feature_attn: base + 4 + ATTN_PARAMS,
        mlp_norm: base + 4 + 2 * ATTN_PARAMS,
        mlp: base + 6 + 2 * ATTN_PARAMS,
    }
}

/// Names and shapes of every parameter, in storage order.
pub fn parameter_layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let k = config.embed_dim;
    let h = config.mlp_dim();
    let mut out = vec![
        ("embed.feature_w".to_string(), vec![config.feature_cap, k]),
        ("embed.feature_b".to_string(), vec![config.feature_cap, k]),
        ("embed.label_w".to_string(), vec![k]),
        ("embed.label_b".to_string(), vec![k]),
        ("embed.dummy".to_string(), vec![k]),
    ];
    let attn = |prefix: &str, out: &mut Vec<(String, Vec<usize>)>| {
        for p in ["q", "k", "v", "o"] {
            out.push((format!("{prefix}.w{p}"), vec![k, k]));
            out.push((format!("{prefix}.b{p}"), vec![k]));
        }
    };
    for l in 0..config.n_layers {
        out.push((format!("block{l}.sample_norm.g"), vec![k]));
        out.push((format!("block{l}.sample_norm.b"), vec![k]));
        attn(&format!("block{l}.sample_attn"), &mut out);
        out.push((format!("block{l}.feature_norm.g"), vec![k]));
        out.push((format!("block{l}.feature_norm.b"), vec![k]));
        attn(&format!("block{l}.feature_attn"), &mut out);
        out.push((format!("block{l}.mlp_norm.g"), vec![k]));
        out.push((format!("block{l}.mlp_norm.b"), vec![k]));
        out.push((format!("block{l}.mlp.w1"), vec![k, h]));
        out.push((format!("block{l}.mlp.b1"), vec![h]));
        out.push((format!("block{l}.mlp.w2"), vec![h, k]));
        out.push((format!("block{l}.mlp.b2"), vec![k]));
    }
    out.push(("head.norm.g".to_string(), vec![k]));
    out.push(("head.norm.b".to_string(), vec![k]));
    out.push(("head.w".to_string(), vec![k, 1]));
    out.push(("head.b".to_string(), vec![1]));
    debug_assert_eq!(out.len(), EMBED_PARAMS + config.n_layers * BLOCK_PARAMS + HEAD_PARAMS);
    out
}

/// The scalar regression head: final normalization followed by a linear map.
#[derive(Debug, Clone)]
pub struct OutputHead {
    pub norm_gain: Tensor,
    pub norm_bias: Tensor,
    /// `(k, 1)`.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl OutputHead {
    /// Standardized-unit prediction from answer-token states `(n, k)`.
    pub fn apply(&self, states: &Tensor) -> Result<Tensor> {
        let normed = layer_norm(states, &self.norm_gain, &self.norm_bias)?;
        self.apply_raw(&normed)
    }

    /// The linear map alone, skipping the pre-head normalization.
    pub fn apply_raw(&self, states: &Tensor) -> Result<Tensor> {
        Ok(states.matmul(&self.weight)?.broadcast_add(&self.bias)?.squeeze(D::Minus1)?)
    }
}

pub struct ToyModel {
    config: ModelConfig,
    params: Vec<Var>,
    perturb: Tensor,
}

fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> candle_core::Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?;
    normed.broadcast_mul(gain)?.broadcast_add(bias)
}

struct Weights<'a> {
    params: &'a [Var],
    track: bool,
}

impl Weights<'_> {
    fn get(&self, i: usize) -> Tensor {
        let t = self.params[i].as_tensor();
        if self.track {
            t.clone()
        } else {
            t.detach()
        }
    }

    fn linear(&self, idx: usize, x: &Tensor) -> candle_core::Result<Tensor> {
        let w = self.get(idx);
        let b = self.get(idx + 1);
        let dims = x.dims().to_vec();
        let last = dims[dims.len() - 1];
        let rows = x.elem_count() / last;
        let y = x.reshape((rows, last))?.matmul(&w)?.broadcast_add(&b)?;
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = w.dim(1)?;
        y.reshape(out_dims)
    }

    fn norm(&self, idx: usize, x: &Tensor) -> candle_core::Result<Tensor> {
        layer_norm(x, &self.get(idx), &self.get(idx + 1))
    }
}

impl ToyModel {
    /// Fresh parameters drawn from the config seed.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let layout = parameter_layout(&config);
        let out_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        let mut params = Vec::with_capacity(layout.len());
        for (name, shape) in &layout {
            let n: usize = shape.iter().product();
            let leaf = name.rsplit('.').next().unwrap();
            let values: Vec<f32> = if name.ends_with("norm.g") {
                vec![1.0; n]
            } else if leaf.starts_with('b') && leaf.len() <= 2 || name.ends_with("norm.b") {
                vec![0.0; n]
            } else {
                let fan_in = if shape.len() == 2 { shape[0] } else { 1 };
                let mut std = match name.as_str() {
                    "embed.feature_w" | "embed.label_w" | "embed.dummy" => 1.0,
                    "embed.feature_b" | "embed.label_b" => 0.0,
                    _ => 1.0 / (fan_in as f64).sqrt(),
                };
                if leaf == "wo" || leaf == "w2" {
                    std *= out_scale;
                }
                (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        (z * std) as f32
                    })
                    .collect()
            };
            params.push(Var::from_tensor(&Tensor::from_vec(values, shape.as_slice(), &Device::Cpu)?)?);
        }
        let perturb = Self::perturbation(&config)?;
        Ok(Self { config, params, perturb })
    }

    /// Fixed per-feature-index offsets; not trained, reproducible from the seed.
    fn perturbation(config: &ModelConfig) -> Result<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7065_7274_7572_6221);
        let values: Vec<f32> = (0..config.feature_cap * config.embed_dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (z * PERTURB_SCALE) as f32
            })
            .collect();
        Ok(Tensor::from_vec(values, (config.feature_cap, config.embed_dim), &Device::Cpu)?)
    }

    pub(crate) fn from_params(config: ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let layout = parameter_layout(&config);
        if layout.len() != tensors.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if t.dims() != shape.as_slice() {
                return Err(Error::Config(format!("parameter {name} has shape {:?}, expected {shape:?}", t.dims())));
            }
        }
        let perturb = Self::perturbation(&config)?;
        let params = tensors.iter().map(Var::from_tensor).collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self { config, params, perturb })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        self.params[0].dtype()
    }

    pub fn vars(&self) -> &[Var] {
        &self.params
    }

    /// Copy of the model with every parameter cast to `dtype`.
    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let params = self
            .params
            .iter()
            .map(|v| Var::from_tensor(&v.as_tensor().to_dtype(dtype)?))
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self { config: self.config.clone(), params, perturb: self.perturb.to_dtype(dtype)? })
    }

    /// Parameters flattened to little-endian f32 bytes in layout order.
    pub fn parameter_bytes(&self) -> Result<Vec<u8>> {
        let mut bytes = Vec::new();
        for v in &self.params {
            let flat: Vec<f32> = v.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
            for x in flat {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(bytes)
    }

    pub fn parameter_digest(&self) -> Result<String> {
        Ok(digest::short_sha(&self.parameter_bytes()?))
    }

    pub fn n_parameters(&self) -> usize {
        self.params.iter().map(|v| v.elem_count()).sum()
    }

    pub fn output_head(&self) -> OutputHead {
        let w = Weights { params: &self.params, track: false };
        let base = EMBED_PARAMS + self.config.n_layers * BLOCK_PARAMS;
        OutputHead {
            norm_gain: w.get(base),
            norm_bias: w.get(base + 1),
            weight: w.get(base + 2),
            bias: w.get(base + 3),
        }
    }

    /// Layer-0 grid for a dataset; `test_rows` restricts which test rows are
    /// embedded (all when `None`).
    pub fn embed(&self, dataset: &TabularDataset, test_rows: Option<&[usize]>) -> Result<TokenGrid> {
        let task = PreparedTask::new(dataset, test_rows)?;
        self.check_capacity(task.d, task.n_rows())?;
        let w = Weights { params: &self.params, track: false };
        let states = self.embed_batch(&w, std::slice::from_ref(&task))?.squeeze(0)?;
        Ok(TokenGrid {
            states,
            token_roles: (0..=task.d)
                .map(|t| if t == task.d { TokenRole::Label } else { TokenRole::Feature })
                .collect(),
            row_roles: (0..task.n_rows())
                .map(|i| if i < task.n_train { Split::Train } else { Split::Test })
                .collect(),
            source_rows: task.source_rows.clone(),
            n_train: task.n_train,
            label_mean: task.label_mean,
            label_std: task.label_std,
        })
    }

    fn check_capacity(&self, d: usize, rows: usize) -> Result<()> {
        if d > self.config.feature_cap {
            return Err(Error::Capacity(format!(
                "{d} features exceed the model's feature cap of {}",
                self.config.feature_cap
            )));
        }
        if rows > self.config.context_cap {
            return Err(Error::Capacity(format!(
                "{rows} rows exceed the model's context cap of {}",
                self.config.context_cap
            )));
        }
        Ok(())
    }

    /// Runs every block on a layer-0 grid. Returns raw-unit predictions for
    /// the test rows (grid order) and the states after each layer, with the
    /// embedding output as layer 0.
    pub fn forward(&self, grid: &TokenGrid) -> Result<(Vec<f64>, Vec<TokenGrid>)> {
        let w = Weights { params: &self.params, track: false };
        let input = grid.states.unsqueeze(0)?;
        let mut layers = Vec::with_capacity(self.config.n_layers + 1);
        let last = self.run_blocks(&w, &input, grid.n_train, Some(&mut layers))?;
        let pred = self.head_batch(&w, &last, grid.n_train)?.squeeze(0)?;
        let pred: Vec<f64> = pred.to_dtype(DType::F64)?.to_vec1()?;
        let raw = pred.iter().map(|p| grid.label_mean + grid.label_std * p).collect();
        let all = layers
            .into_iter()
            .map(|s| {
                Ok(TokenGrid {
                    states: s.squeeze(0)?,
                    ..grid.clone()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((raw, all))
    }

    /// Convenience: embed + forward, predictions only.
    pub fn predict(&self, dataset: &TabularDataset) -> Result<Vec<f64>> {
        let grid = self.embed(dataset, None)?;
        Ok(self.forward(&grid)?.0)
    }

    fn embed_batch(&self, w: &Weights, tasks: &[PreparedTask]) -> Result<Tensor> {
        let b = tasks.len();
        let (d, r, n_train) = (tasks[0].d, tasks[0].n_rows(), tasks[0].n_train);
        let n_test = r - n_train;
        let k = self.config.embed_dim;
        let dtype = self.dtype();
        let dev = Device::Cpu;
        let feats: Vec<f64> = tasks.iter().flat_map(|t| t.features.iter().copied()).collect();
        let feats = Tensor::from_vec(feats, (b, r, d, 1), &dev)?.to_dtype(dtype)?;
        let fw = w.get(0).narrow(0, 0, d)?;
        let fb = (w.get(1).narrow(0, 0, d)? + self.perturb.narrow(0, 0, d)?)?;
        let feature_tokens = feats.broadcast_mul(&fw)?.broadcast_add(&fb)?;

        let labels: Vec<f64> = tasks.iter().flat_map(|t| t.train_labels.iter().copied()).collect();
        let labels = Tensor::from_vec(labels, (b, n_train, 1, 1), &dev)?.to_dtype(dtype)?;
        let train_label = labels.broadcast_mul(&w.get(2))?.broadcast_add(&w.get(3))?;
        let dummy = w.get(4).reshape((1, 1, 1, k))?.broadcast_as((b, n_test, 1, k))?;
        let label_tokens = Tensor::cat(&[&train_label, &dummy], 1)?;
        Ok(Tensor::cat(&[&feature_tokens, &label_tokens], 2)?.contiguous()?)
    }

    fn attention(&self, w: &Weights, idx: usize, queries: &Tensor, context: &Tensor) -> candle_core::Result<Tensor> {
        let (n, lq, k) = queries.dims3()?;
        let lk = context.dim(1)?;
        let heads = self.config.n_heads;
        let dh = self.config.head_dim();
        let split = |t: Tensor, l: usize| t.reshape((n, l, heads, dh))?.transpose(1, 2)?.contiguous();
        let q = split(w.linear(idx, queries)?, lq)?;
        let kk = split(w.linear(idx + 2, context)?, lk)?;
        let v = split(w.linear(idx + 4, context)?, lk)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let out = if lq <= SMALL_ATTENTION && lk <= SMALL_ATTENTION {
            // A few tokens per row: one broadcast product beats thousands of tiny gemm calls.
            let scores = (q.unsqueeze(3)?.broadcast_mul(&kk.unsqueeze(2)?)?.sum(D::Minus1)? * scale)?;
            let probs = candle_nn::ops::softmax(&scores, D::Minus1)?;
            probs.unsqueeze(D::Minus1)?.broadcast_mul(&v.unsqueeze(2)?)?.sum(3)?
        } else {
            let scores = (q.matmul(&kk.t()?)? * scale)?;
            let probs = candle_nn::ops::softmax(&scores, D::Minus1)?;
            probs.matmul(&v)?
        };
        let out = out.transpose(1, 2)?.reshape((n, lq, k))?;
        w.linear(idx + 6, &out)
    }

    /// Attention across rows within each token column; keys are train rows.
    fn sample_attention(&self, w: &Weights, blk: &BlockIdx, h: &Tensor, n_train: usize) -> candle_core::Result<Tensor> {
        let (b, r, t, k) = h.dims4()?;
        let x = w.norm(blk.sample_norm, h)?;
        let cols = x.transpose(1, 2)?.contiguous()?.reshape((b * t, r, k))?;
        let ctx = cols.narrow(1, 0, n_train)?;
        let out = self.attention(w, blk.sample_attn, &cols, &ctx)?;
        out.reshape((b, t, r, k))?.transpose(1, 2)?.contiguous()
    }

    /// Attention across the tokens of each row.
    fn feature_attention(&self, w: &Weights, blk: &BlockIdx, h: &Tensor) -> candle_core::Result<Tensor> {
        let (b, r, t, k) = h.dims4()?;
        let x = w.norm(blk.feature_norm, h)?.reshape((b * r, t, k))?;
        self.attention(w, blk.feature_attn, &x, &x)?.reshape((b, r, t, k))
    }

    fn mlp(&self, w: &Weights, blk: &BlockIdx, h: &Tensor) -> candle_core::Result<Tensor> {
        let x = w.norm(blk.mlp_norm, h)?;
        let hidden = w.linear(blk.mlp, &x)?.relu()?;
        w.linear(blk.mlp + 2, &hidden)
    }

    fn run_blocks(
        &self,
        w: &Weights,
        input: &Tensor,
        n_train: usize,
        mut keep: Option<&mut Vec<Tensor>>,
    ) -> Result<Tensor> {
        let mut h = input.clone();
        if let Some(k) = keep.as_deref_mut() {
            k.push(h.clone());
        }
        for layer in 0..self.config.n_layers {
            let blk = block_idx(layer);
            match self.config.attention_order {
                AttentionOrder::SampleFirst => {
                    h = (&h + self.sample_attention(w, &blk, &h, n_train)?)?;
                    h = (&h + self.feature_attention(w, &blk, &h)?)?;
                }
                AttentionOrder::FeatureFirst => {
                    h = (&h + self.feature_attention(w, &blk, &h)?)?;
                    h = (&h + self.sample_attention(w, &blk, &h, n_train)?)?;
                }
            }
            h = (&h + self.mlp(w, &blk, &h)?)?;
            if let Some(k) = keep.as_deref_mut() {
                k.push(h.clone());
            }
        }
        Ok(h)
    }

    /// `(b, n_test)` standardized predictions.
    fn head_batch(&self, w: &Weights, last: &Tensor, n_train: usize) -> Result<Tensor> {
        let (b, r, t, k) = last.dims4()?;
        let answer = last.narrow(1, n_train, r - n_train)?.narrow(2, t - 1, 1)?.reshape((b * (r - n_train), k))?;
        let base = EMBED_PARAMS + self.config.n_layers * BLOCK_PARAMS;
        let normed = w.norm(base, &answer)?;
        let pred = normed.matmul(&w.get(base + 2))?.broadcast_add(&w.get(base + 3))?;
        Ok(pred.reshape((b, r - n_train))?)
    }

    /// Mean squared error in standardized units over a batch of same-shape
    /// tasks, tracked for backprop.
    pub(crate) fn batch_loss(&self, tasks: &[PreparedTask]) -> Result<Tensor> {
        let w = Weights { params: &self.params, track: true };
        let first = &tasks[0];
        for t in tasks {
            if t.d != first.d || t.n_train != first.n_train || t.n_rows() != first.n_rows() {
                return Err(Error::Config("tasks in a batch must share their shape".into()));
            }
        }
        self.check_capacity(first.d, first.n_rows())?;
        let input = self.embed_batch(&w, tasks)?;
        let last = self.run_blocks(&w, &input, first.n_train, None)?;
        let pred = self.head_batch(&w, &last, first.n_train)?;
        let target: Vec<f64> = tasks.iter().flat_map(|t| t.test_labels.iter().copied()).collect();
        let target = Tensor::from_vec(target, pred.dims(), &Device::Cpu)?.to_dtype(self.dtype())?;
        Ok((pred - target)?.sqr()?.mean_all()?)
    }

    /// Training loss of a single task as a scalar tensor tracked for backprop.
    pub fn task_loss(&self, dataset: &TabularDataset) -> Result<Tensor> {
        self.batch_loss(&[PreparedTask::new(dataset, None)?])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{gen_compound, gen_linear};

    fn tiny(seed: u64) -> ToyModel {
        ToyModel::new(ModelConfig { n_layers: 2, embed_dim: 32, n_heads: 4, seed, ..Default::default() }).unwrap()
    }

    #[test]
    fn embed_shapes_and_dummy_label() {
        let model = tiny(1);
        let (_, ds) = gen_compound(7, 3, 4, None).unwrap();
        let grid = model.embed(&ds, None).unwrap();
        assert_eq!(grid.states.dims(), &[10, 4, 32]);
        let labels: Vec<Vec<f32>> = grid.states.narrow(1, 3, 1).unwrap().squeeze(1).unwrap().to_vec2().unwrap();
        assert_eq!(labels[7], labels[8]);
        assert_eq!(labels[8], labels[9]);
        assert_ne!(labels[0], labels[7]);
    }

    #[test]
    fn same_value_in_two_features_embeds_differently() {
        let model = tiny(2);
        let (spec, mut ds) = gen_linear(1.0, 1.0, 8, 2, 3, None).unwrap();
        let _ = spec;
        // make columns identical so standardized values coincide
        for i in 0..ds.n_rows() {
            let v = ds.x[i * 2];
            ds.x[i * 2 + 1] = v;
        }
        let grid = model.embed(&ds, None).unwrap();
        let row: Vec<Vec<f32>> = grid.states.get(0).unwrap().to_vec2().unwrap();
        assert_ne!(row[0], row[1]);
    }

    #[test]
    fn feature_cap_is_enforced() {
        let model = ToyModel::new(ModelConfig { n_layers: 2, embed_dim: 8, n_heads: 2, feature_cap: 2, ..Default::default() }).unwrap();
        let (_, ds) = gen_compound(8, 2, 0, None).unwrap();
        assert!(matches!(model.embed(&ds, None), Err(Error::Capacity(_))));
    }

    #[test]
    fn forward_contract() {
        let model = tiny(3);
        let (_, ds) = gen_compound(16, 6, 5, None).unwrap();
        let grid = model.embed(&ds, None).unwrap();
        let (pred, layers) = model.forward(&grid).unwrap();
        assert_eq!(pred.len(), 6);
        assert_eq!(layers.len(), 3);
        for l in &layers {
            assert_eq!(l.states.dims(), grid.states.dims());
        }
    }

    #[test]
    fn test_rows_do_not_interact() {
        let model = tiny(4);
        let (_, ds) = gen_compound(24, 8, 6, None).unwrap();
        let test = ds.rows_in(Split::Test);
        let full = model.predict(&ds).unwrap();
        // drop one test row, reverse the rest
        let mut subset: Vec<usize> = test[1..].to_vec();
        subset.reverse();
        let grid = model.embed(&ds, Some(&subset)).unwrap();
        let (part, _) = model.forward(&grid).unwrap();
        for (j, &row) in subset.iter().enumerate() {
            let i = test.iter().position(|&t| t == row).unwrap();
            assert!((part[j] - full[i]).abs() <= 1e-6 * (1.0 + full[i].abs()), "row {row}");
        }
        // duplicated test row -> equal predictions
        let dup = [test[2], test[2]];
        let grid = model.embed(&ds, Some(&dup)).unwrap();
        let (p, _) = model.forward(&grid).unwrap();
        assert_eq!(p[0], p[1]);
    }

    #[test]
    fn head_reproduces_prediction() {
        let model = tiny(5);
        let (_, ds) = gen_linear(0.5, -1.0, 20, 5, 8, None).unwrap();
        let grid = model.embed(&ds, None).unwrap();
        let (pred, layers) = model.forward(&grid).unwrap();
        let last = layers.last().unwrap();
        let answer = last.states.narrow(0, last.n_train, 5).unwrap().narrow(1, 2, 1).unwrap().squeeze(1).unwrap();
        let head = model.output_head().apply(&answer).unwrap();
        let head: Vec<f64> = head.to_dtype(DType::F64).unwrap().to_vec1().unwrap();
        for (h, p) in head.iter().zip(&pred) {
            assert_eq!(grid.label_mean + grid.label_std * h, *p);
        }
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(ToyModel::new(ModelConfig { n_layers: 1, ..Default::default() }).is_err());
        assert!(ToyModel::new(ModelConfig { embed_dim: 30, n_heads: 4, ..Default::default() }).is_err());
    }
}
