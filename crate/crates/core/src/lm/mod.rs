//! Frozen decoder-only language model and word-level tokenizer.

mod decode;
mod model;
pub mod vocab;

use thiserror::Error;

use crate::autograd::AutogradError;

pub use decode::{argmax, greedy_decode, LanguageModel};
pub use model::{BlockHook, FrozenLm, LmConfig, LN_EPS};
pub use vocab::{normalize, tokenize, Vocab, VocabError};

#[derive(Debug, Error)]
pub enum LmError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("empty token sequence")]
    EmptyInput,
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error(transparent)]
    Autograd(#[from] AutogradError),
}

impl From<crate::tensor::TensorError> for LmError {
    fn from(e: crate::tensor::TensorError) -> Self {
        LmError::Autograd(e.into())
    }
}
