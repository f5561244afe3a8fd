//! Toy vision-language captioner.
//!
//! A frozen visual encoder maps each grid cell to a `d`-dim feature, a frozen
//! projection lifts those features to the `m`-dim sequence width, and `L`
//! frozen mixing layers (parameter-free causal mean pooling, then a fixed
//! linear map and `tanh`) run over image tokens followed by text tokens. Only
//! the token embeddings and the LM head are trainable.

mod checkpoint;
mod decode;
mod forward;
mod grad;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash;

pub use checkpoint::{CheckpointMeta, MAGIC, VERSION};
pub use decode::{decode_greedy, token_logit_trace, yes_no_prob, LogitTrace};
pub use forward::{encode_visual, forward, ForwardOutput, ImagePrefix, TapId, TapSet, Pooling};
pub use grad::{log_sum_exp, loss_and_grads, sequence_loss_grad, softmax, Example, Grads, SequenceLoss, TargetToken, Trainable};

/// Added to the norm in the mean-pool normalization.
pub const NORM_EPS: f64 = 1e-8;

/// Number of cell kinds besides object classes: empty and mask.
pub const RESERVED_CELL_KINDS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub grid_size: usize,
    pub class_count: usize,
    pub vocab_size: usize,
    pub visual_dim: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub seed: u64,
    /// Standard deviation of the mixing-layer weights.
    pub mixing_scale: f64,
    /// Standard deviation of the initial token embeddings.
    pub embedding_scale: f64,
    /// Distance of the mask encoder column from the empty-cell column, as a
    /// fraction of a random column: a masked patch reads as near-background.
    #[serde(default = "default_mask_offset")]
    pub mask_offset: f64,
}

fn default_mask_offset() -> f64 {
    0.2
}

impl ModelConfig {
    pub fn new(grid_size: usize, class_count: usize, vocab_size: usize, seed: u64) -> Self {
        Self {
            grid_size,
            class_count,
            vocab_size,
            visual_dim: 32,
            hidden_dim: 24,
            layers: 3,
            seed,
            mixing_scale: 1.0,
            embedding_scale: 1.0,
            mask_offset: default_mask_offset(),
        }
    }

    pub fn image_tokens(&self) -> usize {
        self.grid_size * self.grid_size
    }

    /// Encoder input width: cell-kind one-hot plus row and column one-hots.
    pub fn encoder_input_dim(&self) -> usize {
        self.class_count + RESERVED_CELL_KINDS + 2 * self.grid_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_size == 0 || self.visual_dim == 0 || self.hidden_dim == 0 || self.layers == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.vocab_size < crate::vocab::CLASS_OFFSET + self.class_count {
            return Err(Error::Config(format!(
                "vocab_size {} cannot hold {} classes",
                self.vocab_size, self.class_count
            )));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        hash::hash_json(self)
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn random(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        Self::from_fn(rows, cols, |_, _| normal.sample(rng))
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self · x`
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `selfᵀ · x`
    pub fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &xr) in x.iter().enumerate() {
            if xr != 0.0 {
                axpy(&mut out, xr, self.row(r));
            }
        }
        out
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += a · x`
#[inline]
pub fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

/// Bounded odd activation used by the mixing layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Tanh,
}

impl Nonlinearity {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Nonlinearity::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Nonlinearity::Tanh => 1.0 - y * y,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Nonlinearity::Tanh => "tanh",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    /// `d × (kinds + 2G)`
    pub encoder: Matrix,
    /// `d × m`; image embeddings are `projectionᵀ · features`.
    pub projection: Matrix,
    /// `L` matrices of `m × m`.
    pub mixing: Vec<Matrix>,
    pub nonlinearity: Nonlinearity,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// `V × m`
    pub embeddings: Matrix,
    /// `m × V`
    pub lm_head: Matrix,
    /// `V`
    pub bias: Vec<f64>,
}

impl HeadParams {
    /// Logits for one hidden state.
    pub fn logits(&self, hidden: &[f64]) -> Vec<f64> {
        let mut z = self.bias.clone();
        for (k, &h) in hidden.iter().enumerate() {
            if h != 0.0 {
                axpy(&mut z, h, self.lm_head.row(k));
            }
        }
        z
    }

    pub fn is_finite(&self) -> bool {
        self.embeddings.data.iter().chain(&self.lm_head.data).chain(&self.bias).all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub backbone: BackboneParams,
    pub head: HeadParams,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    /// Deterministic initialization from `config.seed`.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (d, m, v) = (config.visual_dim, config.hidden_dim, config.vocab_size);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        // Each cell feature sums three encoder columns, so the per-column
        // scale 1/sqrt(3) gives unit-variance features.
        let mut encoder = Matrix::random(d, config.encoder_input_dim(), (1.0f64 / 3.0).sqrt(), &mut rng);
        for r in 0..d {
            let (empty, mask) = (encoder.get(r, 0), encoder.get(r, 1));
            encoder.row_mut(r)[1] = empty + config.mask_offset * mask;
        }
        let projection = Matrix::random(d, m, (1.0 / d as f64).sqrt(), &mut rng);
        let mixing =
            (0..config.layers).map(|_| Matrix::random(m, m, config.mixing_scale, &mut rng)).collect();
        let embeddings = Matrix::random(v, m, config.embedding_scale, &mut rng);
        let lm_head = Matrix::random(m, v, 0.01, &mut rng);
        let meta = CheckpointMeta::new("init", 0, &config, Nonlinearity::Tanh);
        Ok(Self {
            backbone: BackboneParams {
                encoder,
                projection,
                mixing,
                nonlinearity: Nonlinearity::Tanh,
                seed: config.seed,
            },
            head: HeadParams { embeddings, lm_head, bias: vec![0.0; v] },
            meta,
            config,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        match tokens.iter().find(|&&t| t >= self.vocab_size()) {
            Some(&token) => Err(Error::Vocabulary { token, vocab: self.vocab_size() }),
            None => Ok(()),
        }
    }

    /// Little-endian bytes of every frozen block, for immutability checks.
    pub fn backbone_bytes(&self) -> Vec<u8> {
        let b = &self.backbone;
        std::iter::once(&b.encoder)
            .chain(std::iter::once(&b.projection))
            .chain(&b.mixing)
            .flat_map(|m| m.data.iter().flat_map(|x| x.to_le_bytes()))
            .collect()
    }

    pub fn embedding_bytes(&self) -> Vec<u8> {
        self.head.embeddings.data.iter().flat_map(|x| x.to_le_bytes()).collect()
    }

    pub fn lm_head_bytes(&self) -> Vec<u8> {
        self.head.lm_head.data.iter().chain(&self.head.bias).flat_map(|x| x.to_le_bytes()).collect()
    }

    /// Fraction of all parameters that live in the LM head.
    pub fn lm_head_fraction(&self) -> f64 {
        let b = &self.backbone;
        let frozen = b.encoder.data.len() + b.projection.data.len() + b.mixing.iter().map(|m| m.data.len()).sum::<usize>();
        let head = self.head.lm_head.data.len() + self.head.bias.len();
        let total = frozen + head + self.head.embeddings.data.len();
        head as f64 / total as f64
    }
}
