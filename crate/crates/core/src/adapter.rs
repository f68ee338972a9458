//! Trainable bridge between a patch embedding and the frozen language model.
//!
//! The projection maps one embedding vector through `linear → GELU → linear`
//! to a single `num_vision_tokens · hidden` vector that is reshaped into
//! vision tokens. After every `insert_every`-th LM block a gated
//! cross-attention block updates the hidden states:
//!
//! ```text
//! h ← h + tanh(g_attn) · XAttn(LN(h), vision)
//! h ← h + tanh(g_ff)   · FF(LN(h))
//! ```
//!
//! Queries come from the text positions, keys and values from the vision
//! tokens, so causality over text is preserved. Vision tokens carry no
//! positional encoding.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{AutogradError, ParamStore, ParamTensor, Tape, Var};
use crate::checkpoint::{self, CheckpointError, Container, Reader, TAG_ADAPTER};
use crate::lm::{BlockHook, FrozenLm, LanguageModel, LmError, LN_EPS};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("invalid adapter config: {0}")]
    Config(String),
    #[error("embedding has dimension {got}, adapter expects {expected}")]
    EmbeddingDim { got: usize, expected: usize },
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    /// Dimension of the incoming patch embedding.
    pub embed_dim: usize,
    /// Width of the language model the adapter plugs into.
    pub lm_hidden_dim: usize,
    pub num_vision_tokens: usize,
    pub insert_every: usize,
    pub proj_hidden_dim: usize,
    /// Width of the feed-forward layer inside each cross-attention block.
    pub ff_dim: usize,
    pub num_heads: usize,
    /// Pre-activation gate value; the gate applied is `tanh(gate_init)`.
    pub gate_init: f32,
    pub seed: u64,
}

impl AdapterConfig {
    pub fn new(embed_dim: usize, lm_hidden_dim: usize, seed: u64) -> Self {
        Self {
            embed_dim,
            lm_hidden_dim,
            num_vision_tokens: 4,
            insert_every: 4,
            proj_hidden_dim: 256,
            ff_dim: 4 * lm_hidden_dim,
            num_heads: 1,
            gate_init: 0.0,
            seed,
        }
    }

    pub fn validate(&self, num_blocks: usize) -> Result<(), AdapterError> {
        let sizes = [
            self.embed_dim,
            self.lm_hidden_dim,
            self.num_vision_tokens,
            self.insert_every,
            self.proj_hidden_dim,
            self.ff_dim,
            self.num_heads,
        ];
        if sizes.contains(&0) {
            return Err(AdapterError::Config("all sizes must be positive".into()));
        }
        if num_blocks % self.insert_every != 0 {
            return Err(AdapterError::Config(format!(
                "insert_every {} does not divide num_blocks {num_blocks}",
                self.insert_every
            )));
        }
        if self.lm_hidden_dim % self.num_heads != 0 {
            return Err(AdapterError::Config(format!(
                "lm_hidden_dim {} not divisible by num_heads {}",
                self.lm_hidden_dim, self.num_heads
            )));
        }
        if !self.gate_init.is_finite() {
            return Err(AdapterError::Config("gate_init must be finite".into()));
        }
        Ok(())
    }

    pub fn num_insertions(&self, num_blocks: usize) -> usize {
        num_blocks / self.insert_every
    }

    /// Closed-form count of trainable scalars.
    pub fn num_parameters(&self, num_blocks: usize) -> usize {
        let (d, p, h, f, t) =
            (self.embed_dim, self.proj_hidden_dim, self.lm_hidden_dim, self.ff_dim, self.num_vision_tokens);
        let projection = d * p + p + p * t * h + t * h;
        let per_block = 2 * h          // attention pre-norm
            + 4 * (h * h + h)          // q, k, v, out
            + 1                        // attention gate
            + 2 * h                    // feed-forward pre-norm
            + h * f + f + f * h + h    // feed-forward
            + 1; // feed-forward gate
        projection + self.num_insertions(num_blocks) * per_block
    }
}

fn xname(i: usize, rest: &str) -> String {
    format!("adapter.xattn.{i}.{rest}")
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Normal { fan_in: usize },
    Zeros,
    Ones,
    Gate,
}

/// Every adapter tensor with its shape and initializer, in a fixed order.
fn layout(c: &AdapterConfig, num_blocks: usize) -> Vec<(String, Vec<usize>, Init)> {
    let (d, p, h, f, t) = (c.embed_dim, c.proj_hidden_dim, c.lm_hidden_dim, c.ff_dim, c.num_vision_tokens);
    let mut out = vec![
        ("adapter.proj.fc1.w".to_string(), vec![d, p], Init::Normal { fan_in: d }),
        ("adapter.proj.fc1.b".to_string(), vec![p], Init::Zeros),
        ("adapter.proj.fc2.w".to_string(), vec![p, t * h], Init::Normal { fan_in: p }),
        ("adapter.proj.fc2.b".to_string(), vec![t * h], Init::Zeros),
    ];
    for i in 0..c.num_insertions(num_blocks) {
        out.push((xname(i, "ln_attn.gamma"), vec![h], Init::Ones));
        out.push((xname(i, "ln_attn.beta"), vec![h], Init::Zeros));
        for m in ["q", "k", "v", "o"] {
            out.push((xname(i, &format!("{m}.w")), vec![h, h], Init::Normal { fan_in: h }));
            out.push((xname(i, &format!("{m}.b")), vec![h], Init::Zeros));
        }
        out.push((xname(i, "attn_gate"), vec![1], Init::Gate));
        out.push((xname(i, "ln_ff.gamma"), vec![h], Init::Ones));
        out.push((xname(i, "ln_ff.beta"), vec![h], Init::Zeros));
        out.push((xname(i, "ff1.w"), vec![h, f], Init::Normal { fan_in: h }));
        out.push((xname(i, "ff1.b"), vec![f], Init::Zeros));
        out.push((xname(i, "ff2.w"), vec![f, h], Init::Normal { fan_in: f }));
        out.push((xname(i, "ff2.b"), vec![h], Init::Zeros));
        out.push((xname(i, "ff_gate"), vec![1], Init::Gate));
    }
    out
}

#[derive(Clone, Debug)]
pub struct Adapter<T: Scalar = f32> {
    config: AdapterConfig,
    num_blocks: usize,
    params: ParamStore<T>,
}

impl Adapter<f32> {
    pub fn init(config: AdapterConfig, num_blocks: usize) -> Result<Self, AdapterError> {
        config.validate(num_blocks)?;
        let mut params = ParamStore::new();
        for (counter, (name, shape, init)) in layout(&config, num_blocks).into_iter().enumerate() {
            let tensor = match init {
                Init::Normal { fan_in } => {
                    let mut r = rng::stream(config.seed, "adapter-init", counter as u64);
                    let dist = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive std");
                    Tensor::from_fn(&shape, |_| dist.sample(&mut r) as f32)
                }
                Init::Zeros => Tensor::zeros(&shape),
                Init::Ones => Tensor::full(&shape, 1.0),
                Init::Gate => Tensor::full(&shape, config.gate_init),
            };
            params.insert(ParamTensor::new(name, tensor, true))?;
        }
        Ok(Self { config, num_blocks, params })
    }

    /// `ADPT` payload: `u32 json_len  json{config, num_blocks}  tensors`.
    pub fn to_section(&self) -> Vec<u8> {
        let meta = serde_json::json!({ "config": self.config, "num_blocks": self.num_blocks }).to_string();
        let mut out = (meta.len() as u32).to_le_bytes().to_vec();
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&checkpoint::encode_store(&self.params));
        out
    }

    pub fn from_container(c: &Container) -> Result<Self, AdapterError> {
        #[derive(Deserialize)]
        struct Meta {
            config: AdapterConfig,
            num_blocks: usize,
        }
        let payload = c.require(TAG_ADAPTER)?;
        let mut r = Reader::new(payload, c.payload_offset(TAG_ADAPTER).unwrap_or(0));
        let len = r.u32()? as usize;
        let meta: Meta = serde_json::from_str(r.utf8(len)?).map_err(CheckpointError::from)?;
        let params = checkpoint::decode_store(&mut r, true)?;
        if !r.is_done() {
            r.fail::<()>("trailing bytes in ADPT section")?;
        }
        Adapter::from_params(meta.config, meta.num_blocks, params)
    }
}

impl<T: Scalar> Adapter<T> {
    /// Wraps an existing store after checking names and shapes against the
    /// config; every tensor is marked trainable.
    pub fn from_params(config: AdapterConfig, num_blocks: usize, mut params: ParamStore<T>) -> Result<Self, AdapterError> {
        config.validate(num_blocks)?;
        let expected = layout(&config, num_blocks);
        if params.len() != expected.len() {
            return Err(AdapterError::Config(format!(
                "{} adapter tensors supplied, config implies {}",
                params.len(),
                expected.len()
            )));
        }
        for (name, shape, _) in &expected {
            let p = params.get(name)?;
            if p.tensor.shape() != shape.as_slice() {
                return Err(AdapterError::Config(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    p.tensor.shape()
                )));
            }
        }
        params.set_trainable(true);
        Ok(Self { config, num_blocks, params })
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    pub fn num_blocks(&self) -> usize {
        self.num_blocks
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Scalar>(&self) -> Adapter<U> {
        Adapter { config: self.config.clone(), num_blocks: self.num_blocks, params: self.params.cast() }
    }

    /// Gate pre-activations in insertion order: `(attn, ff)`.
    pub fn gates(&self) -> Vec<(T, T)> {
        (0..self.config.num_insertions(self.num_blocks))
            .map(|i| {
                let a = self.params.get(&xname(i, "attn_gate")).map(|p| p.tensor.item()).unwrap_or(T::zero());
                let f = self.params.get(&xname(i, "ff_gate")).map(|p| p.tensor.item()).unwrap_or(T::zero());
                (a, f)
            })
            .collect()
    }

    fn p(&self, tape: &mut Tape<T>, name: &str) -> Result<Var, AutogradError> {
        Ok(tape.param(self.params.get(name)?))
    }

    /// Records the projection; returns vision tokens `[num_vision_tokens, hidden]`.
    pub fn project_on_tape(&self, tape: &mut Tape<T>, embedding: &[T]) -> Result<Var, AdapterError> {
        if embedding.len() != self.config.embed_dim {
            return Err(AdapterError::EmbeddingDim { got: embedding.len(), expected: self.config.embed_dim });
        }
        let e = tape.constant(Tensor::new(vec![1, embedding.len()], embedding.to_vec()).map_err(AutogradError::from)?);
        let w1 = self.p(tape, "adapter.proj.fc1.w")?;
        let b1 = self.p(tape, "adapter.proj.fc1.b")?;
        let z = tape.linear(e, w1, b1)?;
        let z = tape.gelu(z)?;
        let w2 = self.p(tape, "adapter.proj.fc2.w")?;
        let b2 = self.p(tape, "adapter.proj.fc2.b")?;
        let z = tape.linear(z, w2, b2)?;
        Ok(tape.reshape(z, &[self.config.num_vision_tokens, self.config.lm_hidden_dim])?)
    }

    /// Vision tokens for one embedding.
    pub fn project(&self, embedding: &[T]) -> Result<Tensor<T>, AdapterError> {
        let mut tape = Tape::new();
        let v = self.project_on_tape(&mut tape, embedding)?;
        Ok(tape.value(v).clone())
    }

    fn xattn_block(&self, tape: &mut Tape<T>, i: usize, h: Var, vision: Var) -> Result<Var, AutogradError> {
        let g = self.p(tape, &xname(i, "ln_attn.gamma"))?;
        let b = self.p(tape, &xname(i, "ln_attn.beta"))?;
        let a = tape.layer_norm(h, g, b, LN_EPS)?;
        let lin = |tape: &mut Tape<T>, m: &str, x: Var| -> Result<Var, AutogradError> {
            let w = self.p(tape, &xname(i, &format!("{m}.w")))?;
            let b = self.p(tape, &xname(i, &format!("{m}.b")))?;
            tape.linear(x, w, b)
        };
        let q = lin(tape, "q", a)?;
        let k = lin(tape, "k", vision)?;
        let v = lin(tape, "v", vision)?;
        let att = tape.attention(q, k, v, self.config.num_heads, false)?;
        let o = lin(tape, "o", att)?;
        let gate = self.p(tape, &xname(i, "attn_gate"))?;
        let h = tape.gated_add(h, gate, o)?;

        let g = self.p(tape, &xname(i, "ln_ff.gamma"))?;
        let b = self.p(tape, &xname(i, "ln_ff.beta"))?;
        let m = tape.layer_norm(h, g, b, LN_EPS)?;
        let f = lin(tape, "ff1", m)?;
        let f = tape.gelu(f)?;
        let f = lin(tape, "ff2", f)?;
        let gate = self.p(tape, &xname(i, "ff_gate"))?;
        tape.gated_add(h, gate, f)
    }
}

/// Hook that applies the adapter's cross-attention after every k-th block.
pub struct Conditioning<'a, T: Scalar> {
    pub adapter: &'a Adapter<T>,
    pub vision: Var,
}

impl<T: Scalar> BlockHook<T> for Conditioning<'_, T> {
    fn after_block(&self, tape: &mut Tape<T>, block: usize, hidden: Var) -> Result<Var, AutogradError> {
        let every = self.adapter.config.insert_every;
        if block % every != 0 {
            return Ok(hidden);
        }
        self.adapter.xattn_block(tape, block / every - 1, hidden, self.vision)
    }
}

fn check_pair<T: Scalar>(lm: &FrozenLm<T>, adapter: &Adapter<T>) -> Result<(), AdapterError> {
    if lm.config().hidden_dim != adapter.config.lm_hidden_dim || lm.config().num_blocks != adapter.num_blocks {
        return Err(AdapterError::Config(format!(
            "adapter built for width {} / {} blocks, LM has width {} / {} blocks",
            adapter.config.lm_hidden_dim,
            adapter.num_blocks,
            lm.config().hidden_dim,
            lm.config().num_blocks
        )));
    }
    Ok(())
}

/// Records projection plus conditioned LM forward; returns logits.
pub fn conditioned_forward_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    ids: &[usize],
    embedding: &[T],
    lm: &FrozenLm<T>,
    adapter: &Adapter<T>,
) -> Result<Var, AdapterError> {
    check_pair(lm, adapter)?;
    let vision = adapter.project_on_tape(tape, embedding)?;
    let hook = Conditioning { adapter, vision };
    Ok(lm.forward_on_tape(tape, ids, Some(&hook))?)
}

/// Number of leading LM blocks the adapter never touches. Their output can be
/// cached with [`FrozenLm::prefix_hidden`].
pub fn unconditioned_blocks<T: Scalar>(adapter: &Adapter<T>) -> usize {
    adapter.config.insert_every
}

/// Same as [`conditioned_forward_on_tape`] but resumes from cached hidden
/// states after the first [`unconditioned_blocks`] blocks.
pub fn conditioned_forward_from_prefix_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    prefix: &Tensor<T>,
    embedding: &[T],
    lm: &FrozenLm<T>,
    adapter: &Adapter<T>,
) -> Result<Var, AdapterError> {
    check_pair(lm, adapter)?;
    let vision = adapter.project_on_tape(tape, embedding)?;
    let hook = Conditioning { adapter, vision };
    let h = tape.constant(prefix.clone());
    Ok(lm.forward_from_on_tape(tape, h, unconditioned_blocks(adapter), Some(&hook))?)
}

/// Conditioned logits from precomputed vision tokens `[num_vision_tokens, hidden]`.
pub fn conditioned_forward<T: Scalar>(
    ids: &[usize],
    vision_tokens: &Tensor<T>,
    lm: &FrozenLm<T>,
    adapter: &Adapter<T>,
) -> Result<Tensor<T>, AdapterError> {
    check_pair(lm, adapter)?;
    let expected = [adapter.config.num_vision_tokens, adapter.config.lm_hidden_dim];
    if vision_tokens.shape() != expected {
        return Err(AutogradError::from(crate::tensor::TensorError::Mismatch {
            op: "conditioned_forward",
            lhs: vision_tokens.shape().to_vec(),
            rhs: expected.to_vec(),
        })
        .into());
    }
    let mut tape = Tape::new();
    let vision = tape.constant(vision_tokens.clone());
    let hook = Conditioning { adapter, vision };
    let out = lm.forward_on_tape(&mut tape, ids, Some(&hook))?;
    Ok(tape.value(out).clone())
}

/// Every parameter an optimizer may touch: trainable entries of both stores.
pub fn trainable_params<'a, T: Scalar>(lm: &'a FrozenLm<T>, adapter: &'a Adapter<T>) -> Vec<&'a ParamTensor<T>> {
    lm.params().iter().chain(adapter.params().iter()).filter(|p| p.trainable).collect()
}

/// Frozen LM conditioned on one patch embedding, usable for decoding.
pub struct ConditionedLm<'a> {
    pub lm: &'a FrozenLm<f32>,
    pub adapter: &'a Adapter<f32>,
    pub embedding: &'a [f32],
}

impl LanguageModel for ConditionedLm<'_> {
    fn logits(&self, ids: &[usize]) -> Result<Tensor<f32>, LmError> {
        let mut tape = Tape::new();
        let out = conditioned_forward_on_tape(&mut tape, ids, self.embedding, self.lm, self.adapter).map_err(|e| match e {
            AdapterError::Lm(e) => e,
            AdapterError::Autograd(e) => LmError::Autograd(e),
            other => LmError::Config(other.to_string()),
        })?;
        Ok(tape.value(out).clone())
    }

    fn max_seq_len(&self) -> usize {
        self.lm.config().max_seq_len
    }
}

/// Greedy caption for one embedding: decodes after `prompt_ids` and returns
/// the generated text without the prompt or the closing EOS.
pub fn generate_caption(
    lm: &FrozenLm<f32>,
    adapter: &Adapter<f32>,
    vocab: &crate::lm::Vocab,
    prompt_ids: &[usize],
    embedding: &[f32],
    max_new_tokens: usize,
) -> Result<String, LmError> {
    let model = ConditionedLm { lm, adapter, embedding };
    let ids = crate::lm::greedy_decode(&model, prompt_ids, max_new_tokens, crate::lm::vocab::EOS)?;
    let mut new = &ids[prompt_ids.len()..];
    if new.last() == Some(&crate::lm::vocab::EOS) {
        new = &new[..new.len() - 1];
    }
    Ok(vocab.decode(new))
}
