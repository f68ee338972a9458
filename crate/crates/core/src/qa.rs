//! Multiple-choice QA benchmark: generation from corpus chunks, option
//! randomization, artifact filtering and scoring.

use std::sync::{Arc, LazyLock};

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Chunk;
use crate::lexicon::{AreaId, AreaLabel, LabelLexicon};
use crate::llm::{parse_choice, prompts, GenerationRequest, LlmError, TextGenerator};
use crate::rng;

pub const DEFAULT_NUM_OPTIONS: usize = 4;
pub const BLANK: &str = "____";

#[derive(Debug, Error)]
pub enum QaError {
    #[error("generation failed for chunk {chunk_id}: {source}")]
    Generate { chunk_id: String, source: LlmError },
    #[error("answerer failed on {question_id}: {message}")]
    Answer { question_id: String, message: String },
    #[error("invalid item {question_id}: {message}")]
    Invalid { question_id: String, message: String },
    #[error("no items to score")]
    Empty,
}

impl QaError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, QaError::Generate { source, .. } if source.is_retryable())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaSource {
    pub doc_id: String,
    pub chunk: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaItem {
    pub question_id: String,
    pub stem: String,
    pub options: Vec<String>,
    pub correct: usize,
    pub source: QaSource,
}

impl QaItem {
    pub fn validate(&self) -> Result<(), QaError> {
        let bad = |m: &str| Err(QaError::Invalid { question_id: self.question_id.clone(), message: m.into() });
        if self.stem.trim().is_empty() {
            return bad("empty stem");
        }
        if self.options.len() < 2 {
            return bad("fewer than two options");
        }
        if self.correct >= self.options.len() {
            return bad("correct index out of range");
        }
        Ok(())
    }

    pub fn correct_text(&self) -> &str {
        &self.options[self.correct]
    }
}

/// Turns one chunk into zero or more items.
pub trait QaGenerator: Send + Sync {
    fn generate(&self, chunk: &Chunk) -> Result<ChunkQuestions, QaError>;
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ChunkQuestions {
    pub items: Vec<QaItem>,
    /// Generations that could not be parsed into an item.
    pub malformed: usize,
}

/// Offline generator: every sentence that names an area becomes a cloze
/// question with that area blanked and distractor area names as options.
#[derive(Clone, Debug)]
pub struct ClozeGenerator {
    pub lexicon: LabelLexicon,
    pub num_options: usize,
    pub seed: u64,
}

impl ClozeGenerator {
    pub fn new(seed: u64) -> Self {
        Self { lexicon: LabelLexicon::builtin(), num_options: DEFAULT_NUM_OPTIONS, seed }
    }

    /// Cloze item for one sentence, or `None` when it names no area.
    pub fn cloze(&self, question_id: &str, sentence: &str, source: QaSource) -> Option<QaItem> {
        let mentions: Vec<_> = self.lexicon.mentions(sentence).into_iter().filter(|m| m.value != AreaLabel::Unknown).collect();
        let target = mentions.first()?.value.area()?;
        let mut stem = String::new();
        let mut last = 0;
        for m in mentions.iter().filter(|m| m.value == AreaLabel::Area(target)) {
            stem.push_str(&sentence[last..m.start]);
            stem.push_str(BLANK);
            last = m.end;
        }
        stem.push_str(&sentence[last..]);
        let others: Vec<AreaId> = AreaId::all().filter(|&a| a != target).collect();
        let mut r = rng::stream(self.seed, "cloze-distractors", rng::label_hash(question_id));
        let n = (self.num_options - 1).min(others.len());
        let mut options = vec![target.name().to_string()];
        options.extend(index::sample(&mut r, others.len(), n).into_iter().map(|i| others[i].name().to_string()));
        Some(QaItem { question_id: question_id.to_string(), stem, options, correct: 0, source })
    }
}

impl QaGenerator for ClozeGenerator {
    fn generate(&self, chunk: &Chunk) -> Result<ChunkQuestions, QaError> {
        let mut items = Vec::new();
        for sentence in chunk.sentences() {
            let id = format!("{}-q{}", chunk.id(), items.len());
            let source = QaSource { doc_id: chunk.doc_id.clone(), chunk: chunk.index };
            items.extend(self.cloze(&id, sentence.trim(), source));
        }
        Ok(ChunkQuestions { items, malformed: 0 })
    }
}

#[derive(Deserialize)]
struct RawQuestion {
    stem: String,
    options: Vec<String>,
    correct: usize,
}

/// First `{...}` span of the reply parsed as `{stem, options, correct}`.
pub fn parse_question(reply: &str) -> Option<(String, Vec<String>, usize)> {
    let start = reply.find('{')?;
    let end = reply.rfind('}')?;
    let raw: RawQuestion = serde_json::from_str(reply.get(start..=end)?).ok()?;
    Some((raw.stem, raw.options, raw.correct))
}

/// Generator backed by a text-generation client; one question per chunk.
pub struct LlmQaGenerator {
    pub client: Arc<dyn TextGenerator>,
    pub seed: u64,
    pub num_options: usize,
}

impl QaGenerator for LlmQaGenerator {
    fn generate(&self, chunk: &Chunk) -> Result<ChunkQuestions, QaError> {
        let id = chunk.id();
        let req = GenerationRequest::new(prompts::QA_SYSTEM, prompts::qa(chunk.clean_text()))
            .with_seed(self.seed ^ rng::label_hash(&id));
        let resp = self.client.complete(&req).map_err(|source| QaError::Generate { chunk_id: id.clone(), source })?;
        let item = parse_question(&resp.text).map(|(stem, options, correct)| QaItem {
            question_id: format!("{id}-q0"),
            stem,
            options,
            correct,
            source: QaSource { doc_id: chunk.doc_id.clone(), chunk: chunk.index },
        });
        Ok(match item.filter(|i| i.validate().is_ok() && i.options.len() == self.num_options) {
            Some(i) => ChunkQuestions { items: vec![i], malformed: 0 },
            None => ChunkQuestions { items: Vec::new(), malformed: 1 },
        })
    }
}

/// Items from every chunk, in chunk order.
pub fn generate_qa(chunks: &[Chunk], generator: &dyn QaGenerator) -> Result<ChunkQuestions, QaError> {
    let per: Vec<ChunkQuestions> = chunks.par_iter().map(|c| generator.generate(c)).collect::<Result<_, _>>()?;
    let mut out = ChunkQuestions::default();
    for q in per {
        out.items.extend(q.items);
        out.malformed += q.malformed;
    }
    Ok(out)
}

/// Seeded uniform permutation of `0..n`: new position `i` holds old option `perm[i]`.
pub fn option_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::stream(seed, "qa-options", 0));
    perm
}

pub fn randomize_options(item: &QaItem, seed: u64) -> QaItem {
    let perm = option_permutation(item.options.len(), seed);
    QaItem {
        options: perm.iter().map(|&i| item.options[i].clone()).collect(),
        correct: perm.iter().position(|&i| i == item.correct).expect("permutation"),
        ..item.clone()
    }
}

/// Randomizes every item with a seed derived from its question id.
pub fn randomize_all(items: &[QaItem], seed: u64) -> Vec<QaItem> {
    items.iter().map(|it| randomize_options(it, rng::derive_seed(seed, "qa-item", rng::label_hash(&it.question_id)))).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArtifactRules {
    /// Stem refers to options by letter, number or position.
    pub position_reference: bool,
    /// Two options share the same normalized text.
    pub duplicate_options: bool,
    /// The correct option text occurs in the stem.
    pub answer_in_stem: bool,
}

impl Default for ArtifactRules {
    fn default() -> Self {
        Self { position_reference: true, duplicate_options: true, answer_in_stem: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Artifact {
    PositionReference,
    DuplicateOptions,
    AnswerInStem,
}

static POSITION: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)\b(?:(?:option|answer|choice)\s+(?:[a-d]|[1-4])\b|(?:first|second|third|fourth|last|final)\s+(?:option|answer|choice)|(?:all|none|both)\s+of\s+the\s+above)",
    )
    .expect("valid regex")
});

fn fold(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// First rule the item violates, if any.
pub fn artifact(item: &QaItem, rules: &ArtifactRules) -> Option<Artifact> {
    if rules.position_reference && POSITION.is_match(&item.stem) {
        return Some(Artifact::PositionReference);
    }
    if rules.duplicate_options {
        let mut seen: Vec<String> = item.options.iter().map(|o| fold(o)).collect();
        seen.sort();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Some(Artifact::DuplicateOptions);
        }
    }
    if rules.answer_in_stem {
        let answer = regex::escape(&fold(item.correct_text()));
        let re = Regex::new(&format!(r"(?:^|\W){answer}(?:\W|$)")).expect("escaped");
        if !answer.is_empty() && re.is_match(&fold(&item.stem)) {
            return Some(Artifact::AnswerInStem);
        }
    }
    None
}

/// Splits items into kept and dropped (with the reason), preserving order.
pub fn filter_artifacts(items: &[QaItem], rules: &ArtifactRules) -> (Vec<QaItem>, Vec<(QaItem, Artifact)>) {
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for it in items {
        match artifact(it, rules) {
            None => kept.push(it.clone()),
            Some(a) => dropped.push((it.clone(), a)),
        }
    }
    (kept, dropped)
}

pub trait Answerer: Send + Sync {
    fn answer(&self, item: &QaItem) -> Result<usize, QaError>;
}

/// Always right; permutation-equivariant by construction.
#[derive(Clone, Copy, Debug, Default)]
pub struct PerfectAnswerer;

impl Answerer for PerfectAnswerer {
    fn answer(&self, item: &QaItem) -> Result<usize, QaError> {
        Ok(item.correct)
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RandomAnswerer {
    pub seed: u64,
}

impl Answerer for RandomAnswerer {
    fn answer(&self, item: &QaItem) -> Result<usize, QaError> {
        let mut r = rng::stream(self.seed, "random-answer", rng::label_hash(&item.question_id));
        Ok(r.random_range(0..item.options.len()))
    }
}

pub struct LlmAnswerer {
    pub client: Arc<dyn TextGenerator>,
    pub seed: u64,
}

impl Answerer for LlmAnswerer {
    fn answer(&self, item: &QaItem) -> Result<usize, QaError> {
        let req = GenerationRequest::new(prompts::QA_SYSTEM, prompts::answer(&item.stem, &item.options))
            .with_seed(self.seed ^ rng::label_hash(&item.question_id));
        let fail = |message: String| QaError::Answer { question_id: item.question_id.clone(), message };
        let resp = self.client.complete(&req).map_err(|e| fail(e.to_string()))?;
        parse_choice(&resp.text, item.options.len()).ok_or_else(|| fail(format!("unparseable reply {:?}", resp.text)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelScore {
    pub model: String,
    pub n_items: usize,
    pub n_answered: usize,
    pub n_correct: usize,
    /// Correct share among answered items.
    pub share: f64,
}

/// Items the answerer fails on are excluded and counted.
pub fn score_model(model: &str, items: &[QaItem], answerer: &dyn Answerer) -> Result<ModelScore, QaError> {
    if items.is_empty() {
        return Err(QaError::Empty);
    }
    let answers: Vec<Option<usize>> = items.par_iter().map(|it| answerer.answer(it).ok()).collect();
    let n_answered = answers.iter().flatten().count();
    let n_correct = items.iter().zip(&answers).filter(|(it, a)| **a == Some(it.correct)).count();
    let share = if n_answered == 0 { 0.0 } else { n_correct as f64 / n_answered as f64 };
    Ok(ModelScore { model: model.to_string(), n_items: items.len(), n_answered, n_correct, share })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub model: String,
    pub parameters: Option<String>,
    pub medical: Option<bool>,
    pub score: f64,
}

impl From<&ModelScore> for ScoreRow {
    fn from(s: &ModelScore) -> Self {
        Self { model: s.model.clone(), parameters: None, medical: None, score: s.share }
    }
}

/// Published scores, used as formatting fixtures only.
pub fn reference_scoreboard() -> Vec<ScoreRow> {
    let row = |m: &str, p: Option<&str>, med: Option<bool>, s: f64| ScoreRow {
        model: m.into(),
        parameters: p.map(Into::into),
        medical: med,
        score: s,
    };
    vec![
        row("First author performance", None, None, 0.340),
        row("BioGPT", Some("0.35b"), Some(true), 0.227),
        row("BioGPT-Large", Some("1.5b"), Some(true), 0.245),
        row("PMC Llama 7b", Some("7b"), Some(true), 0.281),
        row("Llama-3-8b", Some("8b"), Some(false), 0.581),
        row("Ministral 8b", Some("8b"), Some(false), 0.502),
        row("Llama-3-8b Ultramedical", Some("8b"), Some(true), 0.475),
        row("Phi-4", Some("14b"), Some(false), 0.572),
        row("Llama-3-70b", Some("70b"), Some(false), 0.591),
        row("Llama-3-70b Ultramedical", Some("70b"), Some(true), 0.538),
        row("Qwen3-Next", Some("80b"), Some(false), 0.614),
    ]
}

/// Markdown table with model, parameter count, medical fine-tuning and score.
pub fn scoreboard_markdown(rows: &[ScoreRow]) -> String {
    let mut s = String::from("| Model | # Parameters | Medical fine-tuning? | Score |\n|---|---|---|---|\n");
    for r in rows {
        let med = match r.medical {
            Some(true) => "yes",
            Some(false) => "no",
            None => "n.a.",
        };
        s.push_str(&format!(
            "| {} | {} | {} | {:.1}% |\n",
            r.model,
            r.parameters.as_deref().unwrap_or("n.a."),
            med,
            100.0 * r.score
        ));
    }
    s
}
