//! Synthetic captions composed from area-indexed statement pools.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Statement;
use crate::lexicon::{AreaId, AreaLabel, LabelLexicon};
use crate::llm::{prompts, GenerationRequest, LlmError, TextGenerator};
use crate::rng;

pub const UNKNOWN_CAPTION: &str = "This patch shows cytoarchitecture of an unknown area.";

/// Default number of statements per caption.
pub const DEFAULT_K: usize = 3;

#[derive(Debug, Error)]
pub enum CaptionError {
    #[error("area {0} has no statement pool")]
    MissingArea(AreaId),
    #[error("statement {id} is filed under {filed} but tagged {tagged}")]
    Mismatch { id: String, filed: AreaId, tagged: AreaId },
    #[error("cannot compose a caption without statements")]
    NoStatements,
    #[error("composer failed for area {area}: {source}")]
    Composer { area: AreaId, source: LlmError },
}

impl CaptionError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, CaptionError::Composer { source, .. } if source.is_retryable())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub text: String,
    pub label: AreaLabel,
    pub statement_ids: Vec<String>,
}

/// The leading sentence naming `area`.
pub fn area_sentence(area: AreaId) -> String {
    format!("This patch shows cytoarchitecture of area {}.", area.name())
}

pub fn unknown_caption() -> Caption {
    Caption { text: UNKNOWN_CAPTION.to_string(), label: AreaLabel::Unknown, statement_ids: Vec::new() }
}

/// Statements grouped by area.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StatementPool {
    by_area: BTreeMap<AreaId, Vec<Statement>>,
}

impl StatementPool {
    pub fn from_statements(statements: impl IntoIterator<Item = Statement>) -> Self {
        let mut by_area: BTreeMap<AreaId, Vec<Statement>> = BTreeMap::new();
        for s in statements {
            by_area.entry(s.area_id).or_default().push(s);
        }
        Self { by_area }
    }

    pub fn from_map(by_area: BTreeMap<AreaId, Vec<Statement>>) -> Result<Self, CaptionError> {
        for (&filed, stmts) in &by_area {
            if let Some(s) = stmts.iter().find(|s| s.area_id != filed) {
                return Err(CaptionError::Mismatch { id: s.statement_id.clone(), filed, tagged: s.area_id });
            }
        }
        Ok(Self { by_area })
    }

    pub fn get(&self, area: AreaId) -> Option<&[Statement]> {
        self.by_area.get(&area).map(Vec::as_slice)
    }

    pub fn areas(&self) -> impl Iterator<Item = AreaId> + '_ {
        self.by_area.keys().copied()
    }

    pub fn len(&self, area: AreaId) -> usize {
        self.by_area.get(&area).map_or(0, Vec::len)
    }

    pub fn total(&self) -> usize {
        self.by_area.values().map(Vec::len).sum()
    }

    /// Drops statements that name any area other than their own, and areas
    /// left empty.
    pub fn exclusive(&self, lexicon: &LabelLexicon) -> Self {
        let by_area = self
            .by_area
            .iter()
            .map(|(&a, stmts)| {
                let kept: Vec<Statement> =
                    stmts.iter().filter(|s| lexicon.areas_mentioned(&s.text).iter().all(|&m| m == a)).cloned().collect();
                (a, kept)
            })
            .filter(|(_, v)| !v.is_empty())
            .collect();
        Self { by_area }
    }

    /// Restricts the pool to `areas`.
    pub fn restrict(&self, areas: &[AreaId]) -> Self {
        Self { by_area: self.by_area.iter().filter(|(a, _)| areas.contains(a)).map(|(a, v)| (*a, v.clone())).collect() }
    }
}

/// `k` distinct statements drawn uniformly without replacement, in seeded
/// order; the whole pool when it has fewer than `k`.
pub fn sample_statements(pool: &StatementPool, area: AreaId, k: usize, seed: u64) -> Result<Vec<Statement>, CaptionError> {
    let stmts = pool.get(area).ok_or(CaptionError::MissingArea(area))?;
    let k = k.min(stmts.len());
    let mut r = rng::stream(seed, "sample-statements", area.index() as u64);
    Ok(index::sample(&mut r, stmts.len(), k).into_iter().map(|i| stmts[i].clone()).collect())
}

pub trait CaptionComposer: Send + Sync {
    fn compose(&self, area: AreaId, statements: &[Statement]) -> Result<Caption, CaptionError>;
}

/// Rewrites every mention of `area` (under any alias) to its canonical name.
fn canonicalize_self(lexicon: &LabelLexicon, area: AreaId, text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut last = 0;
    for m in lexicon.mentions(text) {
        if m.value == AreaLabel::Area(area) {
            out.push_str(&text[last..m.start]);
            out.push_str(area.name());
            last = m.end;
        }
    }
    out.push_str(&text[last..]);
    out
}

fn terminated(s: &str) -> String {
    let s = s.trim();
    if s.ends_with(['.', '!', '?']) {
        s.to_string()
    } else {
        format!("{s}.")
    }
}

/// Deterministic composer: the area sentence followed by the statements.
#[derive(Clone, Debug, Default)]
pub struct TemplateComposer {
    lexicon: LabelLexicon,
}

impl CaptionComposer for TemplateComposer {
    fn compose(&self, area: AreaId, statements: &[Statement]) -> Result<Caption, CaptionError> {
        if statements.is_empty() {
            return Err(CaptionError::NoStatements);
        }
        let mut parts = vec![area_sentence(area)];
        parts.extend(statements.iter().map(|s| terminated(&canonicalize_self(&self.lexicon, area, &s.text))));
        Ok(Caption {
            text: parts.join(" "),
            label: AreaLabel::Area(area),
            statement_ids: statements.iter().map(|s| s.statement_id.clone()).collect(),
        })
    }
}

/// Composer backed by a text generator. The area sentence is prepended when
/// the reply does not start with it.
pub struct LlmComposer {
    pub client: Arc<dyn TextGenerator>,
    pub seed: u64,
}

impl LlmComposer {
    pub fn new(client: Arc<dyn TextGenerator>, seed: u64) -> Self {
        Self { client, seed }
    }
}

impl CaptionComposer for LlmComposer {
    fn compose(&self, area: AreaId, statements: &[Statement]) -> Result<Caption, CaptionError> {
        if statements.is_empty() {
            return Err(CaptionError::NoStatements);
        }
        let texts: Vec<String> = statements.iter().map(|s| s.text.clone()).collect();
        let req = GenerationRequest::new(prompts::COMPOSE_SYSTEM, prompts::compose(area.name(), &texts))
            .with_seed(self.seed ^ rng::label_hash(&statements[0].statement_id));
        let resp = self.client.complete(&req).map_err(|source| CaptionError::Composer { area, source })?;
        let body = crate::corpus::normalize_whitespace(&resp.text);
        let lead = area_sentence(area);
        let text = if body.starts_with(&lead) { body } else { format!("{lead} {body}") };
        Ok(Caption {
            text,
            label: AreaLabel::Area(area),
            statement_ids: statements.iter().map(|s| s.statement_id.clone()).collect(),
        })
    }
}

/// Samples `k` statements and composes a caption for `label`.
pub fn synthesize(
    label: AreaLabel,
    pool: &StatementPool,
    k: usize,
    seed: u64,
    composer: &dyn CaptionComposer,
) -> Result<Caption, CaptionError> {
    match label {
        AreaLabel::Unknown => Ok(unknown_caption()),
        AreaLabel::Area(a) => {
            let stmts = sample_statements(pool, a, k, seed)?;
            composer.compose(a, &stmts)
        }
    }
}

/// One line of the captions JSONL file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub patch_id: String,
    pub area_id: AreaLabel,
    pub text: String,
    pub statement_ids: Vec<String>,
}
