//! Bidirectional transformer mask predictor.
//!
//! The network predicts a distribution over the vocabulary at every position
//! in a single pass with no causal mask. Gradients are computed by an explicit
//! reverse pass over the activations recorded during the forward pass (see
//! [`Recording`]), and [`Adam`] applies updates to the trainable tensors only:
//! every tensor for full fine-tuning, or just the low-rank adapter factors
//! when `adapter_rank > 0`.

mod checkpoint;
mod net;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use net::Recording;
pub use optim::{Adam, AdamConfig};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::Float;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    /// Rank of the low-rank adapters; 0 trains every weight directly.
    #[serde(default)]
    pub adapter_rank: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: crate::tasks::Vocab::standard().len(),
            max_len: 64,
            num_layers: 4,
            num_heads: 4,
            hidden_dim: 128,
            ffn_dim: 512,
            adapter_rank: 0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 3 {
            return Err(Error::config("vocab_size", "needs MASK, EOS and at least one content token"));
        }
        if self.max_len == 0 {
            return Err(Error::config("max_len", "must be positive"));
        }
        if self.num_heads == 0 {
            return Err(Error::config("num_heads", "must be positive"));
        }
        if self.hidden_dim == 0 {
            return Err(Error::config("hidden_dim", "must be positive"));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::config(
                "hidden_dim",
                format!("{} is not divisible by num_heads = {}", self.hidden_dim, self.num_heads),
            ));
        }
        if self.ffn_dim == 0 {
            return Err(Error::config("ffn_dim", "must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Teacher,
    Student,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Float> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::zero(); shape.iter().product()],
        }
    }

    fn randn(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("positive std");
        Tensor {
            shape: shape.to_vec(),
            data: (0..shape.iter().product())
                .map(|_| F::lit(normal.sample(rng)))
                .collect(),
        }
    }

    fn filled(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::lit(value); shape.iter().product()],
        }
    }

    pub fn cast<G: Float>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| G::lit(x.as_f64())).collect(),
        }
    }
}

/// Low-rank factor pair added to a frozen linear map: `W + scale · down · up`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter<F> {
    /// `[in, rank]`
    pub down: Tensor<F>,
    /// `[rank, out]`, zero at init so an adapted model starts equal to its base.
    pub up: Tensor<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F> {
    /// `[in, out]`
    pub weight: Tensor<F>,
    pub adapter: Option<Adapter<F>>,
}

impl<F: Float> Linear<F> {
    fn init(fan_in: usize, fan_out: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            weight: Tensor::randn(&[fan_in, fan_out], std, rng),
            adapter: None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<F> {
    pub ln1_gain: Tensor<F>,
    pub ln1_bias: Tensor<F>,
    pub query: Linear<F>,
    pub key: Linear<F>,
    pub value: Linear<F>,
    pub output: Linear<F>,
    pub ln2_gain: Tensor<F>,
    pub ln2_bias: Tensor<F>,
    pub ffn_up: Linear<F>,
    pub ffn_down: Linear<F>,
}

impl<F> Block<F> {
    fn linears_mut(&mut self) -> [(&'static str, &mut Linear<F>); 6] {
        [
            ("query", &mut self.query),
            ("key", &mut self.key),
            ("value", &mut self.value),
            ("output", &mut self.output),
            ("ffn_up", &mut self.ffn_up),
            ("ffn_down", &mut self.ffn_down),
        ]
    }
}

/// Every tensor of the network. Also used as the gradient and optimizer-moment
/// container, since those share the parameter layout exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<F> {
    /// `[vocab, hidden]`
    pub token_embedding: Tensor<F>,
    /// `[max_len, hidden]`, unused when the network has no blocks.
    pub position_embedding: Tensor<F>,
    pub blocks: Vec<Block<F>>,
    pub final_gain: Tensor<F>,
    pub final_bias: Tensor<F>,
    /// `[hidden, vocab]`
    pub unembedding: Tensor<F>,
    pub unembedding_bias: Tensor<F>,
}

/// One named tensor as seen by generic passes (optimizer, checkpoint I/O).
pub struct NamedTensor<T> {
    pub name: String,
    pub tensor: T,
    pub is_adapter: bool,
}

macro_rules! visit_impl {
    ($self:ident, $iter:ident) => {{
        let mut out = Vec::new();
        let mut push = |name: String, tensor, is_adapter| out.push(NamedTensor { name, tensor, is_adapter });
        let Weights {
            token_embedding,
            position_embedding,
            blocks,
            final_gain,
            final_bias,
            unembedding,
            unembedding_bias,
        } = $self;
        push("token_embedding".into(), token_embedding, false);
        push("position_embedding".into(), position_embedding, false);
        for (l, block) in blocks.$iter().enumerate() {
            let Block {
                ln1_gain,
                ln1_bias,
                query,
                key,
                value,
                output,
                ln2_gain,
                ln2_bias,
                ffn_up,
                ffn_down,
            } = block;
            push(format!("blocks.{l}.ln1_gain"), ln1_gain, false);
            push(format!("blocks.{l}.ln1_bias"), ln1_bias, false);
            push(format!("blocks.{l}.ln2_gain"), ln2_gain, false);
            push(format!("blocks.{l}.ln2_bias"), ln2_bias, false);
            let linears = [
                ("query", query),
                ("key", key),
                ("value", value),
                ("output", output),
                ("ffn_up", ffn_up),
                ("ffn_down", ffn_down),
            ];
            for (name, Linear { weight, adapter }) in linears {
                push(format!("blocks.{l}.{name}.weight"), weight, false);
                if let Some(Adapter { down, up }) = adapter {
                    push(format!("blocks.{l}.{name}.adapter_down"), down, true);
                    push(format!("blocks.{l}.{name}.adapter_up"), up, true);
                }
            }
        }
        push("final_gain".into(), final_gain, false);
        push("final_bias".into(), final_bias, false);
        push("unembedding".into(), unembedding, false);
        push("unembedding_bias".into(), unembedding_bias, false);
        out
    }};
}

impl<F: Float> Weights<F> {
    /// All tensors in a fixed canonical order.
    pub fn tensors(&self) -> Vec<NamedTensor<&Tensor<F>>> {
        visit_impl!(self, iter)
    }

    pub fn tensors_mut(&mut self) -> Vec<NamedTensor<&mut Tensor<F>>> {
        visit_impl!(self, iter_mut)
    }

    /// Same layout, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.tensor.data.iter_mut().for_each(|x| *x = F::zero());
        }
        out
    }

    pub fn cast<G: Float>(&self) -> Weights<G> {
        let lin = |l: &Linear<F>| Linear {
            weight: l.weight.cast(),
            adapter: l.adapter.as_ref().map(|a| Adapter {
                down: a.down.cast(),
                up: a.up.cast(),
            }),
        };
        Weights {
            token_embedding: self.token_embedding.cast(),
            position_embedding: self.position_embedding.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    ln1_gain: b.ln1_gain.cast(),
                    ln1_bias: b.ln1_bias.cast(),
                    query: lin(&b.query),
                    key: lin(&b.key),
                    value: lin(&b.value),
                    output: lin(&b.output),
                    ln2_gain: b.ln2_gain.cast(),
                    ln2_bias: b.ln2_bias.cast(),
                    ffn_up: lin(&b.ffn_up),
                    ffn_down: lin(&b.ffn_down),
                })
                .collect(),
            final_gain: self.final_gain.cast(),
            final_bias: self.final_bias.cast(),
            unembedding: self.unembedding.cast(),
            unembedding_bias: self.unembedding_bias.cast(),
        }
    }
}

/// Parameters of one mask predictor plus the bookkeeping the trainer needs.
#[derive(Debug, Clone)]
pub struct ModelParams<F = f32> {
    pub config: ModelConfig,
    pub role: Role,
    pub weights: Weights<F>,
    /// Incremented by every optimizer step; recordings from older versions are stale.
    version: u64,
}

impl<F: Float> PartialEq for ModelParams<F> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.weights == other.weights
    }
}

/// Builds deterministic parameters for `config`.
pub fn init_model<F: Float>(config: &ModelConfig) -> Result<ModelParams<F>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let h = config.hidden_dim;
    let std_h = 1.0 / (h as f64).sqrt();
    let std_f = 1.0 / (config.ffn_dim as f64).sqrt();
    let residual_scale = 1.0 / (2.0 * config.num_layers.max(1) as f64).sqrt();

    let token_embedding = Tensor::randn(&[config.vocab_size, h], 1.0, &mut rng);
    let position_embedding = Tensor::randn(&[config.max_len, h], 0.1, &mut rng);
    let blocks = (0..config.num_layers)
        .map(|_| Block {
            ln1_gain: Tensor::filled(&[h], 1.0),
            ln1_bias: Tensor::zeros(&[h]),
            query: Linear::init(h, h, std_h, &mut rng),
            key: Linear::init(h, h, std_h, &mut rng),
            value: Linear::init(h, h, std_h, &mut rng),
            output: Linear::init(h, h, std_h * residual_scale, &mut rng),
            ln2_gain: Tensor::filled(&[h], 1.0),
            ln2_bias: Tensor::zeros(&[h]),
            ffn_up: Linear::init(h, config.ffn_dim, std_h, &mut rng),
            ffn_down: Linear::init(config.ffn_dim, h, std_f * residual_scale, &mut rng),
        })
        .collect();
    let unembedding = Tensor::randn(&[h, config.vocab_size], std_h, &mut rng);

    let mut params = ModelParams {
        config: config.clone(),
        role: Role::Teacher,
        weights: Weights {
            token_embedding,
            position_embedding,
            blocks,
            final_gain: Tensor::filled(&[h], 1.0),
            final_bias: Tensor::zeros(&[h]),
            unembedding,
            unembedding_bias: Tensor::zeros(&[config.vocab_size]),
        },
        version: 0,
    };
    if config.adapter_rank > 0 {
        params.attach_adapters(config.adapter_rank, config.seed ^ 0xada9_7e25)?;
    }
    Ok(params)
}

impl<F: Float> ModelParams<F> {
    /// Adds fresh low-rank adapters to every attention and FFN map, freezing
    /// the base weights. The `up` factors start at zero, so the adapted model
    /// computes exactly the same function as before.
    pub fn attach_adapters(&mut self, rank: usize, seed: u64) -> Result<()> {
        if rank == 0 {
            return Err(Error::config("adapter_rank", "must be positive to attach adapters"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for block in &mut self.weights.blocks {
            for (_, linear) in block.linears_mut() {
                let (fan_in, fan_out) = (linear.in_dim(), linear.out_dim());
                linear.adapter = Some(Adapter {
                    down: Tensor::randn(&[fan_in, rank], 1.0 / (fan_in as f64).sqrt(), &mut rng),
                    up: Tensor::zeros(&[rank, fan_out]),
                });
            }
        }
        self.config.adapter_rank = rank;
        self.version += 1;
        Ok(())
    }

    /// Copy of this model re-tagged as a student; weights are bitwise equal.
    pub fn to_student(&self) -> Self {
        let mut student = self.clone();
        student.role = Role::Student;
        student
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn has_adapters(&self) -> bool {
        self.config.adapter_rank > 0
    }

    /// Whether a tensor receives optimizer updates under the freezing rule.
    pub fn is_trainable(&self, is_adapter: bool) -> bool {
        is_adapter || !self.has_adapters()
    }

    pub fn num_parameters(&self) -> usize {
        self.weights.tensors().iter().map(|t| t.tensor.data.len()).sum()
    }

    /// Same parameters in another precision (used for 64-bit gradient checks).
    pub fn cast<G: Float>(&self) -> ModelParams<G> {
        ModelParams {
            config: self.config.clone(),
            role: self.role,
            weights: self.weights.cast(),
            version: self.version,
        }
    }

    pub(crate) fn bump_version(&mut self) {
        self.version += 1;
    }

}

/// Per-position unnormalized scores, row-major `[rows, vocab]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMatrix<F = f32> {
    pub rows: usize,
    pub vocab: usize,
    pub data: Vec<F>,
}

impl<F: Float> LogitMatrix<F> {
    pub fn new(rows: usize, vocab: usize, data: Vec<F>) -> Self {
        assert_eq!(data.len(), rows * vocab, "logit buffer has wrong size");
        LogitMatrix { rows, vocab, data }
    }

    pub fn zeros(rows: usize, vocab: usize) -> Self {
        Self::new(rows, vocab, vec![F::zero(); rows * vocab])
    }

    pub fn row(&self, i: usize) -> &[F] {
        &self.data[i * self.vocab..(i + 1) * self.vocab]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        &mut self.data[i * self.vocab..(i + 1) * self.vocab]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Anything that maps a token sequence to per-position logits in one pass.
/// Decoders take this trait so step accounting can be checked with a
/// counting wrapper.
pub trait MaskPredictor: Sync {
    fn vocab_size(&self) -> usize;
    fn max_len(&self) -> usize;
    fn predict(&self, tokens: &[u32]) -> Result<LogitMatrix<f32>>;
}

impl MaskPredictor for ModelParams<f32> {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn max_len(&self) -> usize {
        self.config.max_len
    }

    fn predict(&self, tokens: &[u32]) -> Result<LogitMatrix<f32>> {
        self.forward(tokens)
    }
}
