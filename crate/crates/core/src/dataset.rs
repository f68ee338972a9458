//! Weak pairing of patch embeddings with synthetic captions, ratio
//! enforcement and stratified splits.

use std::collections::{BTreeMap, VecDeque};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::captions::{synthesize, CaptionComposer, CaptionError, StatementPool};
use crate::lexicon::{AreaId, AreaLabel};
use crate::lm::vocab::{BOS, EOS};
use crate::lm::Vocab;
use crate::rng;
use crate::vision::EmbeddingRecord;

pub const DEFAULT_PROMPT: &str =
    "Provide a caption for this microscopy image of the human brain, describing its cytoarchitecture.";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid ratio: {0}")]
    Ratio(String),
    #[error("no statement pool for area {0}")]
    MissingArea(AreaId),
    #[error("split needs {requested} pairs but only {available} are available")]
    Insufficient { requested: usize, available: usize },
    #[error(transparent)]
    Caption(#[from] CaptionError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatioConfig {
    pub known_per_unknown: usize,
}

impl Default for RatioConfig {
    fn default() -> Self {
        Self { known_per_unknown: 10 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { n_train: 1920, n_val: 96, n_test: 300, seed: 0 }
    }
}

impl SplitSpec {
    pub fn total(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }
}

/// A training example linking one embedding to one caption through its weak label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakPair {
    pub patch_id: String,
    pub weak_label: AreaLabel,
    pub caption: String,
    pub statement_ids: Vec<String>,
    /// `BOS prompt caption EOS`.
    pub tokens: Vec<usize>,
    /// True exactly on caption tokens and the closing EOS.
    pub loss_mask: Vec<bool>,
    pub prompt_len: usize,
}

impl WeakPair {
    /// Model input: every token but the last.
    pub fn inputs(&self) -> &[usize] {
        &self.tokens[..self.tokens.len() - 1]
    }

    /// Next-token targets aligned with [`inputs`](Self::inputs).
    pub fn targets(&self) -> &[usize] {
        &self.tokens[1..]
    }

    pub fn target_mask(&self) -> &[bool] {
        &self.loss_mask[1..]
    }

    /// `BOS prompt` as fed to the decoder at inference time.
    pub fn prompt_ids(&self) -> &[usize] {
        &self.tokens[..1 + self.prompt_len]
    }
}

/// Token ids and loss mask for `BOS prompt caption EOS`.
pub fn encode_example(vocab: &Vocab, prompt: &str, caption: &str) -> (Vec<usize>, Vec<bool>, usize) {
    let p = vocab.encode(prompt);
    let c = vocab.encode(caption);
    let mut tokens = Vec::with_capacity(p.len() + c.len() + 2);
    tokens.push(BOS);
    tokens.extend(&p);
    tokens.extend(&c);
    tokens.push(EOS);
    let mask = (0..tokens.len()).map(|i| i > p.len()).collect();
    (tokens, mask, p.len())
}

/// `BOS prompt`, the decoder context at inference time.
pub fn prompt_ids(vocab: &Vocab, prompt: &str) -> Vec<usize> {
    std::iter::once(BOS).chain(vocab.encode(prompt)).collect()
}

/// Indices of the records kept so that known:unknown is exactly `ratio`.
/// The side in surplus is subsampled; original order is preserved.
pub fn balance(records: &[EmbeddingRecord], ratio: RatioConfig, seed: u64) -> Result<Vec<usize>, DatasetError> {
    let r = ratio.known_per_unknown;
    if r == 0 {
        return Err(DatasetError::Ratio("known_per_unknown must be at least 1".into()));
    }
    let (mut known, mut unknown) = (Vec::new(), Vec::new());
    for (i, rec) in records.iter().enumerate() {
        match rec.weak_label {
            Some(AreaLabel::Unknown) => unknown.push(i),
            Some(AreaLabel::Area(_)) => known.push(i),
            None => {}
        }
    }
    let n_u = unknown.len().min(known.len() / r);
    if n_u == 0 {
        return Err(DatasetError::Ratio(format!(
            "{} known and {} unknown records cannot be balanced at {r}:1",
            known.len(),
            unknown.len()
        )));
    }
    let mut keep = subsample(&known, n_u * r, seed, "balance-known");
    keep.extend(subsample(&unknown, n_u, seed, "balance-unknown"));
    keep.sort_unstable();
    Ok(keep)
}

fn subsample(items: &[usize], n: usize, seed: u64, label: &str) -> Vec<usize> {
    if n >= items.len() {
        return items.to_vec();
    }
    let mut v = items.to_vec();
    v.shuffle(&mut rng::stream(seed, label, 0));
    v.truncate(n);
    v
}

pub struct PairBuilder<'a> {
    pub pool: &'a StatementPool,
    pub composer: &'a dyn CaptionComposer,
    pub vocab: &'a Vocab,
    pub prompt: &'a str,
    /// Statements per caption.
    pub k: usize,
}

impl PairBuilder<'_> {
    /// Captions every labeled record after balancing. Caption sampling for a
    /// patch depends only on `seed` and its patch id.
    pub fn build(&self, records: &[EmbeddingRecord], ratio: RatioConfig, seed: u64) -> Result<Vec<WeakPair>, DatasetError> {
        let keep = balance(records, ratio, seed)?;
        for &i in &keep {
            if let Some(AreaLabel::Area(a)) = records[i].weak_label {
                if self.pool.len(a) == 0 {
                    return Err(DatasetError::MissingArea(a));
                }
            }
        }
        keep.into_iter()
            .map(|i| {
                let rec = &records[i];
                let label = rec.weak_label.expect("balanced records are labeled");
                let s = rng::derive_seed(seed, "caption", rng::label_hash(&rec.patch_id));
                let cap = synthesize(label, self.pool, self.k, s, self.composer)?;
                let (tokens, loss_mask, prompt_len) = encode_example(self.vocab, self.prompt, &cap.text);
                Ok(WeakPair {
                    patch_id: rec.patch_id.clone(),
                    weak_label: label,
                    caption: cap.text,
                    statement_ids: cap.statement_ids,
                    tokens,
                    loss_mask,
                    prompt_len,
                })
            })
            .collect()
    }
}

/// Texts a caption vocabulary must cover: the prompt, every area sentence,
/// the unknown caption and every pooled statement.
pub fn caption_corpus(pool: &StatementPool, prompt: &str) -> Vec<String> {
    let mut out = vec![prompt.to_string(), crate::captions::UNKNOWN_CAPTION.to_string()];
    out.extend(AreaId::all().map(crate::captions::area_sentence));
    for a in pool.areas() {
        out.extend(pool.get(a).into_iter().flatten().map(|s| s.text.clone()));
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<WeakPair>,
    pub val: Vec<WeakPair>,
    pub test: Vec<WeakPair>,
}

/// Integer table with the given row and column sums whose entries are the
/// floor or ceiling of `row[i] * col[j] / total`.
fn controlled_rounding(rows: &[usize], cols: &[usize]) -> Vec<Vec<usize>> {
    let total: usize = rows.iter().sum();
    let mut table: Vec<Vec<usize>> = rows.iter().map(|&r| cols.iter().map(|&c| r * c / total).collect()).collect();
    // max-flow: source → row (residual row sum) → column (fractional cell, cap 1) → sink
    let (nr, nc) = (rows.len(), cols.len());
    let (src, sink) = (nr + nc, nr + nc + 1);
    let n = nr + nc + 2;
    let mut cap = vec![vec![0i64; n]; n];
    for i in 0..nr {
        cap[src][i] = (rows[i] - table[i].iter().sum::<usize>()) as i64;
        for j in 0..nc {
            if rows[i] * cols[j] % total != 0 {
                cap[i][nr + j] = 1;
            }
        }
    }
    for j in 0..nc {
        cap[nr + j][sink] = (cols[j] - table.iter().map(|r| r[j]).sum::<usize>()) as i64;
    }
    loop {
        let mut prev = vec![usize::MAX; n];
        prev[src] = src;
        let mut queue = VecDeque::from([src]);
        while let Some(u) = queue.pop_front() {
            for v in 0..n {
                if prev[v] == usize::MAX && cap[u][v] > 0 {
                    prev[v] = u;
                    queue.push_back(v);
                }
            }
        }
        if prev[sink] == usize::MAX {
            break;
        }
        let mut v = sink;
        while v != src {
            let u = prev[v];
            cap[u][v] -= 1;
            cap[v][u] += 1;
            v = u;
        }
    }
    for (i, row) in table.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            // flow on a row → column edge shows up as reverse capacity
            *cell += cap[nr + j][i] as usize;
        }
    }
    table
}

/// Stratified seeded split. Per label, the counts in each split are the
/// proportional allocation rounded up or down; split sizes are exact.
pub fn split(pairs: &[WeakPair], spec: &SplitSpec) -> Result<Splits, DatasetError> {
    let requested = spec.total();
    if requested > pairs.len() {
        return Err(DatasetError::Insufficient { requested, available: pairs.len() });
    }
    let mut groups: BTreeMap<AreaLabel, Vec<usize>> = BTreeMap::new();
    for (i, p) in pairs.iter().enumerate() {
        groups.entry(p.weak_label).or_default().push(i);
    }
    let labels: Vec<AreaLabel> = groups.keys().copied().collect();
    let rows: Vec<usize> = groups.values().map(Vec::len).collect();
    let cols = [spec.n_train, spec.n_val, spec.n_test, pairs.len() - requested];
    let table = if pairs.is_empty() { Vec::new() } else { controlled_rounding(&rows, &cols) };

    let mut parts: [Vec<usize>; 3] = Default::default();
    for (li, label) in labels.iter().enumerate() {
        let mut idx = groups[label].clone();
        idx.shuffle(&mut rng::stream(spec.seed, "split", label.class_index() as u64));
        let mut it = idx.into_iter();
        for (s, part) in parts.iter_mut().enumerate() {
            part.extend(it.by_ref().take(table[li][s]));
        }
    }
    let [train, val, test] = parts.map(|mut p| {
        p.sort_unstable();
        p.into_iter().map(|i| pairs[i].clone()).collect()
    });
    Ok(Splits { train, val, test })
}
