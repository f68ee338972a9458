use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{AutogradError, ParamStore, ParamTensor, Tape, Var};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

use super::LmError;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub max_seq_len: usize,
    /// Width of the feed-forward layer inside each block.
    pub mlp_dim: usize,
    pub seed: u64,
}

impl LmConfig {
    /// 8 blocks, width 128, 4 heads.
    pub fn toy(vocab_size: usize, seed: u64) -> Self {
        Self { vocab_size, hidden_dim: 128, num_blocks: 8, num_heads: 4, max_seq_len: 128, mlp_dim: 512, seed }
    }

    pub fn validate(&self) -> Result<(), LmError> {
        let positive = [self.vocab_size, self.hidden_dim, self.num_blocks, self.num_heads, self.max_seq_len, self.mlp_dim];
        if positive.contains(&0) {
            return Err(LmError::Config("all sizes must be positive".into()));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(LmError::Config(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

/// Called after every block; returns the (possibly modified) hidden states.
pub trait BlockHook<T: Scalar> {
    /// `block` is 1-based.
    fn after_block(&self, tape: &mut Tape<T>, block: usize, hidden: Var) -> Result<Var, AutogradError>;
}

/// A decoder-only transformer whose parameters are all frozen.
#[derive(Clone, Debug)]
pub struct FrozenLm<T: Scalar = f32> {
    config: LmConfig,
    params: ParamStore<T>,
}

fn block_name(i: usize, rest: &str) -> String {
    format!("lm.block.{i}.{rest}")
}

impl FrozenLm<f32> {
    /// Seeded random initialization.
    pub fn init(config: LmConfig) -> Result<Self, LmError> {
        config.validate()?;
        let LmConfig { vocab_size: v, hidden_dim: h, num_blocks, max_seq_len: l, mlp_dim: m, seed, .. } = config;
        let mut params = ParamStore::new();
        let mut counter = 0u64;
        let mut normal = |shape: &[usize], std: f64| {
            counter += 1;
            let mut r = rng::stream(seed, "lm-init", counter);
            let dist = Normal::new(0.0, std).expect("positive std");
            Tensor::from_fn(shape, |_| dist.sample(&mut r) as f32)
        };
        let resid_std = 0.02 / (2.0 * num_blocks as f64).sqrt();
        let mut add = |name: String, t: Tensor<f32>| params.insert(ParamTensor::new(name, t, false)).map(|_| ());
        add("lm.tok_emb".into(), normal(&[v, h], 0.02))?;
        add("lm.pos_emb".into(), normal(&[l, h], 0.01))?;
        for i in 0..num_blocks {
            add(block_name(i, "ln1.gamma"), Tensor::full(&[h], 1.0))?;
            add(block_name(i, "ln1.beta"), Tensor::zeros(&[h]))?;
            for p in ["q", "k", "v"] {
                add(block_name(i, &format!("attn.{p}.w")), normal(&[h, h], 0.02))?;
                add(block_name(i, &format!("attn.{p}.b")), Tensor::zeros(&[h]))?;
            }
            add(block_name(i, "attn.o.w"), normal(&[h, h], resid_std))?;
            add(block_name(i, "attn.o.b"), Tensor::zeros(&[h]))?;
            add(block_name(i, "ln2.gamma"), Tensor::full(&[h], 1.0))?;
            add(block_name(i, "ln2.beta"), Tensor::zeros(&[h]))?;
            add(block_name(i, "mlp.fc1.w"), normal(&[h, m], 0.02))?;
            add(block_name(i, "mlp.fc1.b"), Tensor::zeros(&[m]))?;
            add(block_name(i, "mlp.fc2.w"), normal(&[m, h], resid_std))?;
            add(block_name(i, "mlp.fc2.b"), Tensor::zeros(&[h]))?;
        }
        add("lm.ln_f.gamma".into(), Tensor::full(&[h], 1.0))?;
        add("lm.ln_f.beta".into(), Tensor::zeros(&[h]))?;
        add("lm.head".into(), normal(&[h, v], 1.0 / (h as f64).sqrt()))?;
        Ok(Self { config, params })
    }
}

impl<T: Scalar> FrozenLm<T> {
    /// Wraps an existing store; every tensor is marked frozen.
    pub fn from_params(config: LmConfig, mut params: ParamStore<T>) -> Result<Self, LmError> {
        config.validate()?;
        params.set_trainable(false);
        let lm = Self { config, params };
        lm.check_shapes()?;
        Ok(lm)
    }

    fn check_shapes(&self) -> Result<(), LmError> {
        let c = &self.config;
        let expect = |name: &str, shape: &[usize]| -> Result<(), LmError> {
            let p = self.params.get(name)?;
            if p.tensor.shape() != shape {
                return Err(LmError::Config(format!("{name} has shape {:?}, expected {shape:?}", p.tensor.shape())));
            }
            Ok(())
        };
        expect("lm.tok_emb", &[c.vocab_size, c.hidden_dim])?;
        expect("lm.pos_emb", &[c.max_seq_len, c.hidden_dim])?;
        expect("lm.head", &[c.hidden_dim, c.vocab_size])?;
        for i in 0..c.num_blocks {
            expect(&block_name(i, "mlp.fc1.w"), &[c.hidden_dim, c.mlp_dim])?;
        }
        Ok(())
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    /// Mutable access for the optional pretraining pass.
    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Scalar>(&self) -> FrozenLm<U> {
        FrozenLm { config: self.config.clone(), params: self.params.cast() }
    }

    fn p(&self, tape: &mut Tape<T>, name: &str) -> Result<Var, AutogradError> {
        Ok(tape.param(self.params.get(name)?))
    }

    fn check_ids(&self, ids: &[usize]) -> Result<(), LmError> {
        if ids.is_empty() {
            return Err(LmError::EmptyInput);
        }
        if ids.len() > self.config.max_seq_len {
            return Err(LmError::TooLong { len: ids.len(), max: self.config.max_seq_len });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(LmError::TokenOutOfRange { id: bad, vocab: self.config.vocab_size });
        }
        Ok(())
    }

    /// Records the forward pass and returns causal logits `[len(ids), vocab]`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<T>,
        ids: &[usize],
        hook: Option<&dyn BlockHook<T>>,
    ) -> Result<Var, LmError> {
        let h = self.embed_on_tape(tape, ids)?;
        self.forward_from_on_tape(tape, h, 0, hook)
    }

    /// Token plus positional embeddings `[len(ids), hidden]`.
    pub fn embed_on_tape(&self, tape: &mut Tape<T>, ids: &[usize]) -> Result<Var, LmError> {
        self.check_ids(ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let tok = self.p(tape, "lm.tok_emb")?;
        let pos = self.p(tape, "lm.pos_emb")?;
        let te = tape.gather(tok, ids)?;
        let pe = tape.gather(pos, &positions)?;
        Ok(tape.add(te, pe)?)
    }

    /// Continues a forward pass from the output of block `done` (1-based;
    /// 0 means the embeddings). The hook sees block `done` first, then every
    /// later block.
    pub fn forward_from_on_tape(
        &self,
        tape: &mut Tape<T>,
        hidden: Var,
        done: usize,
        hook: Option<&dyn BlockHook<T>>,
    ) -> Result<Var, LmError> {
        if done > self.config.num_blocks {
            return Err(LmError::Config(format!("block {done} out of range")));
        }
        let mut h = hidden;
        if let (Some(hook), true) = (hook, done > 0) {
            h = hook.after_block(tape, done, h)?;
        }
        for i in done..self.config.num_blocks {
            h = self.block(tape, i, h)?;
            if let Some(hook) = hook {
                h = hook.after_block(tape, i + 1, h)?;
            }
        }
        let g = self.p(tape, "lm.ln_f.gamma")?;
        let b = self.p(tape, "lm.ln_f.beta")?;
        let h = tape.layer_norm(h, g, b, LN_EPS)?;
        let head = self.p(tape, "lm.head")?;
        Ok(tape.matmul(h, head)?)
    }

    /// Unconditioned hidden states after the first `blocks` blocks.
    pub fn prefix_hidden(&self, ids: &[usize], blocks: usize) -> Result<Tensor<T>, LmError> {
        if blocks > self.config.num_blocks {
            return Err(LmError::Config(format!("block {blocks} out of range")));
        }
        let mut tape = Tape::new();
        let mut h = self.embed_on_tape(&mut tape, ids)?;
        for i in 0..blocks {
            h = self.block(&mut tape, i, h)?;
        }
        Ok(tape.value(h).clone())
    }

    fn block(&self, tape: &mut Tape<T>, i: usize, h: Var) -> Result<Var, AutogradError> {
        let p = |tape: &mut Tape<T>, rest: &str| -> Result<Var, AutogradError> {
            Ok(tape.param(self.params.get(&block_name(i, rest))?))
        };
        let g1 = p(tape, "ln1.gamma")?;
        let b1 = p(tape, "ln1.beta")?;
        let a = tape.layer_norm(h, g1, b1, LN_EPS)?;
        let mut qkv = [a; 3];
        for (slot, name) in qkv.iter_mut().zip(["q", "k", "v"]) {
            let w = p(tape, &format!("attn.{name}.w"))?;
            let b = p(tape, &format!("attn.{name}.b"))?;
            *slot = tape.linear(a, w, b)?;
        }
        let att = tape.attention(qkv[0], qkv[1], qkv[2], self.config.num_heads, true)?;
        let wo = p(tape, "attn.o.w")?;
        let bo = p(tape, "attn.o.b")?;
        let o = tape.linear(att, wo, bo)?;
        let h = tape.add(h, o)?;
        let g2 = p(tape, "ln2.gamma")?;
        let b2 = p(tape, "ln2.beta")?;
        let m = tape.layer_norm(h, g2, b2, LN_EPS)?;
        let w1 = p(tape, "mlp.fc1.w")?;
        let bb1 = p(tape, "mlp.fc1.b")?;
        let f = tape.linear(m, w1, bb1)?;
        let f = tape.gelu(f)?;
        let w2 = p(tape, "mlp.fc2.w")?;
        let bb2 = p(tape, "mlp.fc2.b")?;
        let f = tape.linear(f, w2, bb2)?;
        tape.add(h, f)
    }

    /// Unconditioned causal logits.
    pub fn logits(&self, ids: &[usize]) -> Result<Tensor<T>, LmError> {
        let mut tape = Tape::new();
        let out = self.forward_on_tape(&mut tape, ids, None)?;
        Ok(tape.value(out).clone())
    }
}
