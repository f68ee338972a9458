//! Adapter optimization against weak pairs with masked cross-entropy. The
//! language model stays frozen; an optional pretraining pass can fit it to
//! the caption corpus beforehand.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{
    conditioned_forward_from_prefix_on_tape, unconditioned_blocks, Adapter, AdapterConfig, AdapterError,
};
use crate::autograd::{AutogradError, Gradients, ParamStore, Tape};
use crate::checkpoint::{self, CheckpointError, Container, Reader, TAG_LM, TAG_OPTIMIZER, TAG_TRAIN_STATE};
use crate::dataset::WeakPair;
use crate::lm::{FrozenLm, LmError, Vocab};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no embedding for patch {0}")]
    MissingEmbedding(String),
    #[error("non-finite loss {loss} in batch [{}] (gates {gates:?})", patch_ids.join(", "))]
    NonFinite { loss: f32, patch_ids: Vec<String>, gates: Vec<(f32, f32)> },
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm limit; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            learning_rate: 1e-3,
            batch_size: 32,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let ok = self.learning_rate > 0.0
            && self.batch_size > 0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.clip_norm.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(TrainError::Config(format!("{self:?}")))
        }
    }
}

/// Adam without weight decay. Moments are kept per parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam {
    pub step: u64,
    moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl Adam {
    /// One update of every parameter that has a gradient.
    pub fn update(&mut self, params: &mut ParamStore<f32>, grads: &Gradients<f32>, lr: f64, b1: f64, b2: f64, eps: f64) -> Result<(), AutogradError> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (name, g) in &grads.0 {
            let p = params.get(name)?;
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let mut data = p.tensor.data().to_vec();
            for (((x, &gi), mi), vi) in data.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi as f64;
                *mi = (b1 * *mi as f64 + (1.0 - b1) * gi) as f32;
                *vi = (b2 * *vi as f64 + (1.0 - b2) * gi * gi) as f32;
                let mhat = *mi as f64 / c1;
                let vhat = *vi as f64 / c2;
                *x = (*x as f64 - lr * mhat / (vhat.sqrt() + eps)) as f32;
            }
            let shape = p.tensor.shape().to_vec();
            params.set(name, Tensor::new(shape, data)?)?;
        }
        Ok(())
    }

    /// `OPTM` payload: `u64 step` then tensors `m/<name>` and `v/<name>`.
    pub fn to_section(&self) -> Vec<u8> {
        let tensors: Vec<(String, Tensor<f32>)> = self
            .moments
            .iter()
            .flat_map(|(n, (m, v))| {
                [
                    (format!("m/{n}"), Tensor::new(vec![m.len()], m.clone()).expect("1-d")),
                    (format!("v/{n}"), Tensor::new(vec![v.len()], v.clone()).expect("1-d")),
                ]
            })
            .collect();
        let mut out = self.step.to_le_bytes().to_vec();
        out.extend(checkpoint::encode_tensors(tensors.iter().map(|(n, t)| (n.as_str(), t))));
        out
    }

    pub fn from_section(payload: &[u8], base: usize) -> Result<Self, CheckpointError> {
        let mut r = Reader::new(payload, base);
        let step = r.u64()?;
        let mut moments: BTreeMap<String, (Vec<f32>, Vec<f32>)> = BTreeMap::new();
        for (name, t) in checkpoint::decode_tensors(&mut r)? {
            let (kind, param) = name.split_once('/').ok_or_else(|| CheckpointError::Format {
                offset: r.offset(),
                message: format!("bad moment name `{name}`"),
            })?;
            let slot = moments.entry(param.to_string()).or_default();
            match kind {
                "m" => slot.0 = t.data().to_vec(),
                "v" => slot.1 = t.data().to_vec(),
                _ => return r.fail(format!("bad moment kind `{kind}`")),
            }
        }
        if !r.is_done() {
            return r.fail("trailing bytes in OPTM section");
        }
        if let Some((n, _)) = moments.iter().find(|(_, (m, v))| m.len() != v.len()) {
            return r.fail(format!("moments of `{n}` disagree in length"));
        }
        Ok(Self { step, moments })
    }
}

/// Rescales `grads` so their global norm is at most `max`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients<f32>, max: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max {
        grads.scale((max / norm) as f32);
    }
    norm
}

/// A training example with its cached unconditioned prefix.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub patch_id: String,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
    pub embedding: Vec<f32>,
    pub prefix: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub epoch: usize,
    pub step: u64,
    pub loss: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: usize,
}

/// Loop position and loss history, stored in `TRST`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub epochs_done: usize,
    pub step: u64,
    pub history: Vec<EpochRecord>,
    pub step_losses: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct TrainStateSection {
    config: TrainConfig,
    progress: Progress,
}

pub struct Trainer {
    pub lm: FrozenLm<f32>,
    pub vocab: Vocab,
    pub adapter: Adapter<f32>,
    pub optimizer: Adam,
    pub config: TrainConfig,
    pub progress: Progress,
}

impl Trainer {
    pub fn new(lm: FrozenLm<f32>, vocab: Vocab, adapter: Adapter<f32>, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        if adapter.config().lm_hidden_dim != lm.config().hidden_dim || adapter.num_blocks() != lm.config().num_blocks {
            return Err(TrainError::Config("adapter does not fit the language model".into()));
        }
        Ok(Self { lm, vocab, adapter, optimizer: Adam::default(), config, progress: Progress::default() })
    }

    /// Fresh adapter from `adapter_config` on top of `lm`.
    pub fn init(lm: FrozenLm<f32>, vocab: Vocab, adapter_config: AdapterConfig, config: TrainConfig) -> Result<Self, TrainError> {
        let adapter = Adapter::init(adapter_config, lm.config().num_blocks)?;
        Self::new(lm, vocab, adapter, config)
    }

    /// Tokenized targets plus cached prefix states for each pair.
    pub fn prepare<'e>(
        &self,
        pairs: &[WeakPair],
        embedding_of: impl Fn(&str) -> Option<&'e [f32]> + Sync,
    ) -> Result<Vec<Prepared>, TrainError> {
        let blocks = unconditioned_blocks(&self.adapter);
        pairs
            .par_iter()
            .map(|p| {
                let embedding = embedding_of(&p.patch_id).ok_or_else(|| TrainError::MissingEmbedding(p.patch_id.clone()))?;
                Ok(Prepared {
                    patch_id: p.patch_id.clone(),
                    inputs: p.inputs().to_vec(),
                    targets: p.targets().to_vec(),
                    mask: p.target_mask().to_vec(),
                    embedding: embedding.to_vec(),
                    prefix: self.lm.prefix_hidden(p.inputs(), blocks)?,
                })
            })
            .collect()
    }

    /// Masked cross-entropy of one example and its adapter gradients.
    pub fn example_grads(&self, ex: &Prepared) -> Result<(f32, Gradients<f32>), TrainError> {
        let mut tape = Tape::new();
        let logits = conditioned_forward_from_prefix_on_tape(&mut tape, &ex.prefix, &ex.embedding, &self.lm, &self.adapter)?;
        let loss = tape.masked_cross_entropy(logits, &ex.targets, &ex.mask)?;
        let grads = tape.backward(loss)?;
        Ok((tape.value(loss).item(), grads))
    }

    /// Mean example loss of a batch, without updating anything.
    pub fn batch_loss(&self, batch: &[&Prepared]) -> Result<f32, TrainError> {
        let losses: Vec<f32> = batch
            .par_iter()
            .map(|ex| {
                let mut tape = Tape::new();
                let logits =
                    conditioned_forward_from_prefix_on_tape(&mut tape, &ex.prefix, &ex.embedding, &self.lm, &self.adapter)?;
                let loss = tape.masked_cross_entropy(logits, &ex.targets, &ex.mask)?;
                Ok(tape.value(loss).item())
            })
            .collect::<Result<_, TrainError>>()?;
        Ok(mean_f32(&losses))
    }

    /// One optimizer step on the batch; returns the batch loss before the update.
    /// Per-example results are reduced in batch order.
    pub fn train_step(&mut self, batch: &[&Prepared]) -> Result<f32, TrainError> {
        if batch.is_empty() {
            return Err(TrainError::Config("empty batch".into()));
        }
        let results: Vec<(f32, Gradients<f32>)> =
            batch.par_iter().map(|ex| self.example_grads(ex)).collect::<Result<_, _>>()?;
        let losses: Vec<f32> = results.iter().map(|r| r.0).collect();
        let loss = mean_f32(&losses);
        if !loss.is_finite() {
            return Err(TrainError::NonFinite {
                loss,
                patch_ids: batch.iter().map(|e| e.patch_id.clone()).collect(),
                gates: self.adapter.gates(),
            });
        }
        let mut grads = Gradients::default();
        for (_, g) in &results {
            grads.accumulate(g);
        }
        grads.scale(1.0 / batch.len() as f32);
        if let Some(max) = self.config.clip_norm {
            clip_global_norm(&mut grads, max);
        }
        let c = &self.config;
        self.optimizer.update(self.adapter.params_mut(), &grads, c.learning_rate, c.beta1, c.beta2, c.eps)?;
        self.progress.step += 1;
        self.progress.step_losses.push(loss);
        Ok(loss)
    }

    /// Example order for `epoch`, a function of the seed and epoch only.
    pub fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(self.config.seed, "epoch-order", epoch as u64));
        order
    }

    /// Runs the remaining epochs. `on_epoch` is called after each one, for
    /// checkpointing; `log` receives every step.
    pub fn train(
        &mut self,
        data: &[Prepared],
        log: &mut dyn FnMut(&LogEntry),
        on_epoch: &mut dyn FnMut(&Trainer) -> Result<(), TrainError>,
    ) -> Result<(), TrainError> {
        if data.is_empty() && self.progress.epochs_done < self.config.epochs {
            return Err(TrainError::Config("empty training split".into()));
        }
        while self.progress.epochs_done < self.config.epochs {
            let epoch = self.progress.epochs_done + 1;
            let order = self.epoch_order(data.len(), epoch);
            let mut losses = Vec::new();
            for idx in order.chunks(self.config.batch_size) {
                let batch: Vec<&Prepared> = idx.iter().map(|&i| &data[i]).collect();
                let loss = self.train_step(&batch)?;
                losses.push(loss as f64);
                log(&LogEntry { epoch, step: self.progress.step, loss });
            }
            let mean_loss = losses.iter().sum::<f64>() / losses.len() as f64;
            self.progress.history.push(EpochRecord { epoch, mean_loss, steps: losses.len() });
            self.progress.epochs_done = epoch;
            on_epoch(self)?;
        }
        Ok(())
    }

    /// Checkpoint with `LMWT`, `VOCB`, `ADPT`, `OPTM` and `TRST` sections.
    pub fn to_container(&self) -> Container {
        let mut c = checkpoint::lm_container(&self.lm, &self.vocab);
        c.put(crate::checkpoint::TAG_ADAPTER, self.adapter.to_section());
        c.put(TAG_OPTIMIZER, self.optimizer.to_section());
        let state = TrainStateSection { config: self.config.clone(), progress: self.progress.clone() };
        c.put(TAG_TRAIN_STATE, serde_json::to_vec(&state).expect("state serializes"));
        c
    }

    pub fn from_container(c: &Container) -> Result<Self, TrainError> {
        let (lm, vocab) = checkpoint::load_lm(c)?;
        let adapter = Adapter::from_container(c)?;
        let optimizer = Adam::from_section(c.require(TAG_OPTIMIZER)?, c.payload_offset(TAG_OPTIMIZER).unwrap_or(0))?;
        let state: TrainStateSection = serde_json::from_slice(c.require(TAG_TRAIN_STATE)?).map_err(CheckpointError::from)?;
        let mut t = Self::new(lm, vocab, adapter, state.config)?;
        t.optimizer = optimizer;
        t.progress = state.progress;
        Ok(t)
    }

    /// SHA-256 of the frozen LM weights as written to a checkpoint.
    pub fn lm_hash(&self) -> String {
        checkpoint::sha256_hex(&checkpoint::encode_store(self.lm.params()))
    }
}

/// Hash of a checkpoint's `LMWT` section.
pub fn lm_section_hash(c: &Container) -> Option<String> {
    c.section_hash(TAG_LM)
}

fn mean_f32(xs: &[f32]) -> f32 {
    (xs.iter().map(|&x| x as f64).sum::<f64>() / xs.len() as f64) as f32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub clip_norm: Option<f64>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 2, learning_rate: 3e-3, batch_size: 16, seed: 0, clip_norm: Some(1.0) }
    }
}

/// Fits the language model to caption text (unconditioned next-token
/// prediction on the masked positions) and freezes it again. Returns the
/// mean loss of each epoch.
pub fn pretrain_lm(lm: &mut FrozenLm<f32>, pairs: &[WeakPair], config: &PretrainConfig) -> Result<Vec<f64>, TrainError> {
    if config.batch_size == 0 || !(config.learning_rate > 0.0) {
        return Err(TrainError::Config(format!("{config:?}")));
    }
    lm.params_mut().set_trainable(true);
    let result = (|| {
        let mut opt = Adam::default();
        let mut epoch_losses = Vec::new();
        for epoch in 1..=config.epochs {
            let mut order: Vec<usize> = (0..pairs.len()).collect();
            order.shuffle(&mut rng::stream(config.seed, "pretrain-order", epoch as u64));
            let mut losses = Vec::new();
            for idx in order.chunks(config.batch_size) {
                let model = &*lm;
                let results: Vec<(f32, Gradients<f32>)> = idx
                    .par_iter()
                    .map(|&i| {
                        let p = &pairs[i];
                        let mut tape = Tape::new();
                        let logits = model.forward_on_tape(&mut tape, p.inputs(), None)?;
                        let loss = tape.masked_cross_entropy(logits, p.targets(), p.target_mask())?;
                        let g = tape.backward(loss)?;
                        Ok((tape.value(loss).item(), g))
                    })
                    .collect::<Result<_, TrainError>>()?;
                let mut grads = Gradients::default();
                for (_, g) in &results {
                    grads.accumulate(g);
                }
                grads.scale(1.0 / idx.len() as f32);
                if let Some(max) = config.clip_norm {
                    clip_global_norm(&mut grads, max);
                }
                opt.update(lm.params_mut(), &grads, config.learning_rate, 0.9, 0.999, 1e-8)?;
                let l: Vec<f32> = results.iter().map(|r| r.0).collect();
                losses.push(mean_f32(&l) as f64);
            }
            epoch_losses.push(losses.iter().sum::<f64>() / losses.len().max(1) as f64);
        }
        Ok(epoch_losses)
    })();
    lm.params_mut().set_trainable(false);
    result
}
