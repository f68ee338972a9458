//! Offline literature distillation: ingest, citation expansion, keyword
//! filtering, chunking and statement extraction.

pub mod fixture;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lexicon::{AreaId, LabelLexicon, PhraseMatcher};
use crate::llm::{prompts, GenerationRequest, LlmError, TextGenerator};
use crate::lm::normalize;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("citation file line {line}: {message}")]
    Citation { line: usize, message: String },
    #[error("unknown seed document `{0}`")]
    UnknownSeed(String),
    #[error("invalid chunking: max_chars {max} must exceed overlap_chars {overlap}")]
    Chunking { max: usize, overlap: usize },
    #[error("extraction failed for chunk {chunk_id}: {source}")]
    Extract { chunk_id: String, source: LlmError },
}

impl CorpusError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, CorpusError::Extract { source, .. } if source.is_retryable())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub title: String,
    #[serde(rename = "abstract")]
    pub abstract_text: String,
    pub body: String,
    pub year: Option<u32>,
    pub source: Option<String>,
}

/// Metadata file stored next to each `.txt` document.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub title: String,
    #[serde(rename = "abstract", default)]
    pub abstract_text: String,
    #[serde(default)]
    pub year: Option<u32>,
    #[serde(default)]
    pub source: Option<String>,
}

#[derive(Clone, Debug, Default)]
pub struct Ingested {
    pub documents: Vec<Document>,
    pub warnings: Vec<String>,
}

pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Loads every `<id>.txt` in `dir` with its `<id>.json` sidecar, sorted by id.
/// Files with a missing or malformed sidecar, or an empty body, are skipped
/// with a warning.
pub fn ingest(dir: &Path) -> Result<Ingested, CorpusError> {
    let read_err = |path: &Path, e: &dyn std::fmt::Display| CorpusError::Read {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| read_err(dir, &e))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()
        .map_err(|e| read_err(dir, &e))?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "txt"));
    paths.sort();

    let mut out = Ingested::default();
    for path in paths {
        let doc_id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let sidecar_path = path.with_extension("json");
        let sidecar: Sidecar = match fs::read_to_string(&sidecar_path) {
            Ok(raw) => match serde_json::from_str(&raw) {
                Ok(s) => s,
                Err(e) => {
                    out.warnings.push(format!("{}: malformed sidecar ({e}); skipped", sidecar_path.display()));
                    continue;
                }
            },
            Err(_) => {
                out.warnings.push(format!("{}: missing sidecar; skipped", path.display()));
                continue;
            }
        };
        let raw = fs::read_to_string(&path).map_err(|e| read_err(&path, &e))?;
        let body = normalize_whitespace(&raw);
        if body.is_empty() {
            out.warnings.push(format!("{}: empty body; skipped", path.display()));
            continue;
        }
        out.documents.push(Document {
            doc_id,
            title: normalize_whitespace(&sidecar.title),
            abstract_text: normalize_whitespace(&sidecar.abstract_text),
            body,
            year: sidecar.year,
            source: sidecar.source,
        });
    }
    Ok(out)
}

/// Directed citation edges `citing → cited`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CitationGraph {
    edges: BTreeSet<(String, String)>,
}

impl CitationGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_edge(&mut self, citing: &str, cited: &str) -> Result<(), String> {
        if citing == cited {
            return Err(format!("self-citation of `{citing}`"));
        }
        self.edges.insert((citing.to_string(), cited.to_string()));
        Ok(())
    }

    /// `citing<TAB>cited` per line; blank lines and `#` comments are ignored.
    pub fn parse_tsv(text: &str) -> Result<Self, CorpusError> {
        let mut g = Self::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
            let [citing, cited] = fields.as_slice() else {
                return Err(CorpusError::Citation {
                    line: i + 1,
                    message: format!("expected 2 tab-separated fields, found {}", fields.len()),
                });
            };
            if citing.is_empty() || cited.is_empty() {
                return Err(CorpusError::Citation { line: i + 1, message: "empty document id".into() });
            }
            g.add_edge(citing, cited).map_err(|message| CorpusError::Citation { line: i + 1, message })?;
        }
        Ok(g)
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CorpusError::Read { path: path.to_path_buf(), message: e.to_string() })?;
        Self::parse_tsv(&text)
    }

    pub fn edges(&self) -> impl Iterator<Item = (&str, &str)> {
        self.edges.iter().map(|(a, b)| (a.as_str(), b.as_str()))
    }

    pub fn nodes(&self) -> BTreeSet<&str> {
        self.edges().flat_map(|(a, b)| [a, b]).collect()
    }

    /// Neighbors along either edge direction.
    fn undirected(&self) -> BTreeMap<&str, BTreeSet<&str>> {
        let mut adj: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for (a, b) in self.edges() {
            adj.entry(a).or_default().insert(b);
            adj.entry(b).or_default().insert(a);
        }
        adj
    }
}

/// Breadth-first expansion over both edge directions. Seeds must be graph
/// nodes or members of `known`. Output is ordered by BFS level, then id.
pub fn expand_citations(
    seeds: &[String],
    graph: &CitationGraph,
    depth: usize,
    known: &BTreeSet<String>,
) -> Result<Vec<String>, CorpusError> {
    let nodes = graph.nodes();
    for s in seeds {
        if !known.contains(s) && !nodes.contains(s.as_str()) {
            return Err(CorpusError::UnknownSeed(s.clone()));
        }
    }
    let adj = graph.undirected();
    let mut level: BTreeSet<&str> = seeds.iter().map(String::as_str).collect();
    let mut seen: HashSet<&str> = level.iter().copied().collect();
    let mut out: Vec<String> = level.iter().map(|s| s.to_string()).collect();
    for _ in 0..depth {
        let mut next = BTreeSet::new();
        for id in &level {
            for &n in adj.get(id).into_iter().flatten() {
                if seen.insert(n) {
                    next.insert(n);
                }
            }
        }
        if next.is_empty() {
            break;
        }
        out.extend(next.iter().map(|s| s.to_string()));
        level = next;
    }
    Ok(out)
}

/// Canonical names and aliases of every area.
pub fn default_keywords() -> BTreeMap<AreaId, Vec<String>> {
    AreaId::all().map(|a| (a, LabelLexicon::aliases(a).into_iter().map(String::from).collect())).collect()
}

fn matcher_for(phrases: &[String]) -> PhraseMatcher<()> {
    let mut m = PhraseMatcher::new();
    for p in phrases {
        m.insert(p, ());
    }
    m
}

/// Documents whose title or abstract contains a whole-word keyword phrase,
/// per area, ids sorted. Every area in `keywords` gets an entry.
pub fn keyword_filter(docs: &[Document], keywords: &BTreeMap<AreaId, Vec<String>>) -> BTreeMap<AreaId, Vec<String>> {
    keywords
        .iter()
        .map(|(&area, phrases)| {
            let m = matcher_for(phrases);
            let mut ids: Vec<String> = docs
                .iter()
                .filter(|d| m.contains_any(&d.title) || m.contains_any(&d.abstract_text))
                .map(|d| d.doc_id.clone())
                .collect();
            ids.sort();
            ids.dedup();
            (area, ids)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChunkConfig {
    pub max_chars: usize,
    pub overlap_chars: usize,
    /// How far back from the hard limit a boundary may move to reach a sentence end.
    pub snap_window: usize,
}

impl Default for ChunkConfig {
    fn default() -> Self {
        Self { max_chars: 1000, overlap_chars: 100, snap_window: 200 }
    }
}

/// A window of a document body; offsets are byte offsets into the body.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub doc_id: String,
    pub index: usize,
    pub start: usize,
    pub end: usize,
    pub text: String,
    /// Byte range of `text` that holds only complete sentences.
    pub clean_start: usize,
    pub clean_end: usize,
}

impl Chunk {
    pub fn id(&self) -> String {
        format!("{}#{}", self.doc_id, self.index)
    }

    pub fn clean_text(&self) -> &str {
        &self.text[self.clean_start..self.clean_end]
    }

    pub fn sentences(&self) -> Vec<&str> {
        split_sentences(self.clean_text())
    }
}

fn is_terminator(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

/// True when char index `p` sits right after a sentence terminator that is
/// followed by whitespace or the end of text.
fn sentence_end_at(chars: &[char], p: usize) -> bool {
    p > 0 && is_terminator(chars[p - 1]) && (p == chars.len() || chars[p].is_whitespace())
}

/// Sentences ending in `.`, `!` or `?` followed by whitespace, or at a newline.
pub fn split_sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut it = text.char_indices().peekable();
    while let Some((i, c)) = it.next() {
        let next = it.peek().map(|&(_, n)| n);
        let end = if c == '\n' {
            Some(i)
        } else if is_terminator(c) && next.is_none_or(char::is_whitespace) {
            Some(i + c.len_utf8())
        } else {
            None
        };
        if let Some(e) = end {
            let s = text[start..e].trim();
            if !s.is_empty() {
                out.push(s);
            }
            start = e;
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

/// Splits `body` into windows of at most `max_chars` characters. Each window
/// ends at the last sentence end within `snap_window` characters of the hard
/// limit (or at the limit when there is none) and the next window starts
/// `overlap_chars` characters before that end.
pub fn chunk(doc_id: &str, body: &str, config: &ChunkConfig) -> Result<Vec<Chunk>, CorpusError> {
    let ChunkConfig { max_chars: max, overlap_chars: overlap, snap_window } = *config;
    if max <= overlap {
        return Err(CorpusError::Chunking { max, overlap });
    }
    let chars: Vec<char> = body.chars().collect();
    let mut byte_at: Vec<usize> = body.char_indices().map(|(i, _)| i).collect();
    byte_at.push(body.len());
    let n = chars.len();
    // progress requires every end to lie beyond start + overlap
    let window = snap_window.min(max - overlap - 1);

    let mut bounds = Vec::new();
    let mut start = 0;
    loop {
        if n - start <= max {
            bounds.push((start, n));
            break;
        }
        let hard = start + max;
        let end = (hard - window..=hard).rev().find(|&p| sentence_end_at(&chars, p)).unwrap_or(hard);
        bounds.push((start, end));
        start = end - overlap;
    }

    Ok(bounds
        .into_iter()
        .enumerate()
        .map(|(index, (s, e))| {
            let lead = if s == 0 || starts_sentence(&chars, s) {
                0
            } else {
                (s..e).find(|&p| sentence_end_at(&chars, p)).map_or(e, |p| p) - s
            };
            let trail_end = if e == n || sentence_end_at(&chars, e) {
                e
            } else {
                (s + lead..e).rev().find(|&p| sentence_end_at(&chars, p)).unwrap_or(s + lead)
            };
            let (bs, be) = (byte_at[s], byte_at[e]);
            Chunk {
                doc_id: doc_id.to_string(),
                index,
                start: bs,
                end: be,
                text: body[bs..be].to_string(),
                clean_start: byte_at[s + lead] - bs,
                clean_end: byte_at[trail_end.max(s + lead)] - bs,
            }
        })
        .collect())
}

/// Whether a sentence begins at char index `s` (only whitespace between the
/// previous sentence end and `s`).
fn starts_sentence(chars: &[char], s: usize) -> bool {
    let mut p = s;
    while p > 0 && chars[p - 1].is_whitespace() {
        p -= 1;
    }
    p == 0 || sentence_end_at(chars, p)
}

/// Inverse of [`chunk`]: the first chunk plus every later chunk minus its
/// leading overlap.
pub fn reconstruct(chunks: &[Chunk], overlap_chars: usize) -> String {
    let mut out = String::new();
    for (i, c) in chunks.iter().enumerate() {
        if i == 0 {
            out.push_str(&c.text);
        } else {
            out.extend(c.text.chars().skip(overlap_chars));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Statement {
    pub statement_id: String,
    pub area_id: AreaId,
    pub text: String,
    pub doc_id: String,
    pub chunk: usize,
}

/// Produces raw statement candidates about `area` from one chunk.
pub trait StatementExtractor: Send + Sync {
    fn extract(&self, chunk: &Chunk, area: AreaId) -> Result<Vec<String>, CorpusError>;
}

fn numeral_with_unit() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?i)\d(?:[.,]\d+)?\s*(?:%|‰|°|(?:µm|μm|um|nm|mm|cm|m|mg|g|kg|ml|µl|l|ms|s|min|h|hz|khz|mv|kv|px|pixels?|years?|yrs?|days?|weeks?|months?|sections?|subjects?|brains?|cases?)\b)",
        )
        .expect("static regex")
    })
}

/// Whether `sentence` contains a number followed by a unit of measurement.
pub fn has_numeral_with_unit(sentence: &str) -> bool {
    numeral_with_unit().is_match(sentence)
}

/// Deterministic extractor: sentences naming the area, minus sentences with
/// measurements.
#[derive(Clone, Debug)]
pub struct KeywordExtractor {
    matchers: BTreeMap<AreaId, PhraseMatcher<()>>,
}

impl KeywordExtractor {
    pub fn new(keywords: &BTreeMap<AreaId, Vec<String>>) -> Self {
        Self { matchers: keywords.iter().map(|(&a, p)| (a, matcher_for(p))).collect() }
    }
}

impl Default for KeywordExtractor {
    fn default() -> Self {
        Self::new(&default_keywords())
    }
}

impl StatementExtractor for KeywordExtractor {
    fn extract(&self, chunk: &Chunk, area: AreaId) -> Result<Vec<String>, CorpusError> {
        let Some(m) = self.matchers.get(&area) else {
            return Ok(Vec::new());
        };
        Ok(chunk
            .sentences()
            .into_iter()
            .filter(|s| m.contains_any(s) && !has_numeral_with_unit(s))
            .map(str::to_string)
            .collect())
    }
}

/// Extractor backed by a text generator; replies are read one statement per line.
pub struct LlmExtractor {
    pub client: Arc<dyn TextGenerator>,
    pub seed: u64,
}

impl StatementExtractor for LlmExtractor {
    fn extract(&self, chunk: &Chunk, area: AreaId) -> Result<Vec<String>, CorpusError> {
        let req = GenerationRequest::new(prompts::EXTRACT_SYSTEM, prompts::extract(area.name(), chunk.clean_text()))
            .with_seed(self.seed);
        let resp = self
            .client
            .complete(&req)
            .map_err(|source| CorpusError::Extract { chunk_id: chunk.id(), source })?;
        Ok(resp.text.lines().map(str::to_string).collect())
    }
}

fn strip_formatting(line: &str) -> String {
    static BULLET: OnceLock<Regex> = OnceLock::new();
    let bullet = BULLET.get_or_init(|| Regex::new(r"^\s*(?:[-*•]+|\d+[.)])\s+").expect("static regex"));
    let s = bullet.replace(line, "");
    normalize_whitespace(&s.replace("**", "").replace("__", "").replace('`', ""))
}

/// Strips list markers and markup, then splits into single sentences.
pub fn post_process(raw: &[String]) -> Vec<String> {
    raw.iter()
        .flat_map(|line| {
            let cleaned = strip_formatting(line);
            split_sentences(&cleaned).into_iter().map(str::to_string).collect::<Vec<_>>()
        })
        .filter(|s| s.chars().any(char::is_alphanumeric))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub seeds: Vec<String>,
    pub depth: usize,
    pub chunking: ChunkConfig,
    pub keywords: BTreeMap<AreaId, Vec<String>>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self { seeds: Vec::new(), depth: 1, chunking: ChunkConfig::default(), keywords: default_keywords() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DistillCounts {
    pub documents: usize,
    pub expanded: usize,
    pub external: usize,
    pub per_area_documents: BTreeMap<AreaId, usize>,
    pub chunks: usize,
    pub candidates: usize,
    pub statements: usize,
    pub per_area_statements: BTreeMap<AreaId, usize>,
}

#[derive(Clone, Debug, Default)]
pub struct Distilled {
    pub statements: Vec<Statement>,
    pub counts: DistillCounts,
}

/// Expand → filter → chunk → extract → deduplicate. Statements are unique per
/// (area, normalized text), ordered by area, document, chunk and position,
/// with ids `<area>-<n>`.
pub fn distill(
    docs: &[Document],
    graph: &CitationGraph,
    config: &DistillConfig,
    extractor: &dyn StatementExtractor,
) -> Result<Distilled, CorpusError> {
    let known: BTreeSet<String> = docs.iter().map(|d| d.doc_id.clone()).collect();
    let seeds = if config.seeds.is_empty() { known.iter().cloned().collect() } else { config.seeds.clone() };
    let expanded = expand_citations(&seeds, graph, config.depth, &known)?;
    let selected: Vec<Document> = {
        let ids: BTreeSet<&str> = expanded.iter().map(String::as_str).collect();
        docs.iter().filter(|d| ids.contains(d.doc_id.as_str())).cloned().collect()
    };
    let mut counts = DistillCounts {
        documents: docs.len(),
        expanded: expanded.len(),
        external: expanded.len() - selected.len(),
        ..Default::default()
    };
    let by_area = keyword_filter(&selected, &config.keywords);
    let by_id: BTreeMap<&str, &Document> = selected.iter().map(|d| (d.doc_id.as_str(), d)).collect();
    let mut chunk_cache: BTreeMap<&str, Vec<Chunk>> = BTreeMap::new();
    let mut statements = Vec::new();
    for (area, ids) in &by_area {
        counts.per_area_documents.insert(*area, ids.len());
        let mut seen = HashSet::new();
        let mut n = 0;
        for id in ids {
            let doc = by_id[id.as_str()];
            if !chunk_cache.contains_key(id.as_str()) {
                let chunks = chunk(&doc.doc_id, &doc.body, &config.chunking)?;
                counts.chunks += chunks.len();
                chunk_cache.insert(id.as_str(), chunks);
            }
            for c in &chunk_cache[id.as_str()] {
                let raw = extractor.extract(c, *area)?;
                let cleaned = post_process(&raw);
                counts.candidates += cleaned.len();
                for text in cleaned {
                    if seen.insert(normalize(&text)) {
                        n += 1;
                        statements.push(Statement {
                            statement_id: format!("{}-{n:04}", area.name()),
                            area_id: *area,
                            text,
                            doc_id: doc.doc_id.clone(),
                            chunk: c.index,
                        });
                    }
                }
            }
        }
        counts.per_area_statements.insert(*area, n);
    }
    counts.statements = statements.len();
    Ok(Distilled { statements, counts })
}
