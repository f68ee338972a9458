//! Weakly supervised captioning of microscopy patch embeddings.
//!
//! Patches and literature-derived captions are linked only through an area
//! label. A frozen decoder-only language model is conditioned on a patch
//! embedding through a trainable gated cross-attention adapter, and generated
//! captions are scored for label consistency and label-masked
//! discriminability.

pub mod adapter;
pub mod autograd;
pub mod captions;
pub mod checkpoint;
pub mod corpus;
pub mod dataset;
pub mod evaluation;
pub mod gradcheck;
pub mod jsonl;
pub mod kernels;
pub mod lexicon;
pub mod llm;
pub mod lm;
pub mod ops;
pub mod qa;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod vision;

pub use autograd::{AutogradError, Gradients, ParamStore, ParamTensor, Tape, Var};
pub use lexicon::{AreaId, AreaLabel, Extracted, LabelLexicon};
pub use tensor::{Scalar, Tensor, TensorError};
