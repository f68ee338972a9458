//! Label consistency, label-masked multiple-choice discriminability,
//! percentile bootstrap intervals and the evaluation report.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::captions::{sample_statements, StatementPool};
use crate::lexicon::{AreaId, AreaLabel, LabelLexicon, NUM_TARGET_AREAS};
use crate::llm::{parse_choice, prompts, GenerationRequest, LlmError, TextGenerator};
use crate::lm::tokenize;
use crate::rng;

/// Candidates per multiple-choice item.
pub const NUM_CANDIDATES: usize = 8;
/// Statements shown per candidate.
pub const STATEMENTS_PER_CANDIDATE: usize = 5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no results to evaluate")]
    Empty,
    #[error("invalid bootstrap settings: {0}")]
    Bootstrap(String),
    #[error("area index {0} is not a target area")]
    InvalidArea(u16),
    #[error("judge failed on item {item_id}: {source}")]
    Judge { item_id: String, source: LlmError },
    #[error("judge reply for item {item_id} names no option: {reply:?}")]
    Unparseable { item_id: String, reply: String },
}

impl EvalError {
    pub fn is_retryable(&self) -> bool {
        match self {
            EvalError::Judge { source, .. } => source.is_retryable(),
            EvalError::Unparseable { .. } => true,
            _ => false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub iterations: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self { iterations: 10_000, level: 0.95, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCI {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    pub iterations: usize,
    pub seed: u64,
    pub n: usize,
}

/// Linear-interpolation quantile of sorted data (`h = (n-1)q`).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile bootstrap of the success rate. Resample `i` draws from its own
/// stream, so the interval does not depend on thread scheduling.
pub fn bootstrap_ci(successes: &[bool], cfg: &BootstrapConfig) -> Result<BootstrapCI, EvalError> {
    let n = successes.len();
    if n == 0 {
        return Err(EvalError::Empty);
    }
    if cfg.iterations == 0 || !(cfg.level > 0.0 && cfg.level < 1.0) {
        return Err(EvalError::Bootstrap(format!("{cfg:?}")));
    }
    let point = successes.iter().filter(|&&s| s).count() as f64 / n as f64;
    let mut means: Vec<f64> = (0..cfg.iterations)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(cfg.seed, "bootstrap", i as u64);
            let hits = (0..n).filter(|_| successes[r.random_range(0..n)]).count();
            hits as f64 / n as f64
        })
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - cfg.level) / 2.0;
    // the clamp only matters for floating-point ties at the extremes
    let lower = quantile_sorted(&means, tail).min(point);
    let upper = quantile_sorted(&means, 1.0 - tail).max(point);
    Ok(BootstrapCI { point, lower, upper, level: cfg.level, iterations: cfg.iterations, seed: cfg.seed, n })
}

/// A generated caption with its reference (weak) label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionResult {
    pub patch_id: String,
    pub caption: String,
    pub reference: AreaLabel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub label: AreaLabel,
    pub support: usize,
    pub predicted: usize,
    pub true_positives: usize,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelMetrics {
    pub in_scope: Option<BootstrapCI>,
    pub unknown: Option<BootstrapCI>,
    pub n_in_scope: usize,
    pub n_unknown: usize,
    /// Captions whose first sentence names no single label.
    pub n_none: usize,
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub per_class: Vec<ClassScore>,
}

/// `2·TP / (2·TP + FP + FN)`; classes that are neither referenced nor
/// predicted are left out of the macro average.
pub fn f1_scores(pairs: &[(AreaLabel, Option<AreaLabel>)]) -> (f64, f64, Vec<ClassScore>) {
    let mut support: BTreeMap<AreaLabel, usize> = BTreeMap::new();
    let mut predicted: BTreeMap<AreaLabel, usize> = BTreeMap::new();
    let mut tp: BTreeMap<AreaLabel, usize> = BTreeMap::new();
    for &(r, p) in pairs {
        *support.entry(r).or_default() += 1;
        if let Some(p) = p {
            *predicted.entry(p).or_default() += 1;
            if p == r {
                *tp.entry(r).or_default() += 1;
            }
        }
    }
    let classes: BTreeSet<AreaLabel> = support.keys().chain(predicted.keys()).copied().collect();
    let per_class: Vec<ClassScore> = classes
        .into_iter()
        .map(|label| {
            let s = support.get(&label).copied().unwrap_or(0);
            let p = predicted.get(&label).copied().unwrap_or(0);
            let t = tp.get(&label).copied().unwrap_or(0);
            let f1 = 2.0 * t as f64 / (s + p) as f64;
            ClassScore { label, support: s, predicted: p, true_positives: t, f1 }
        })
        .collect();
    let macro_f1 = if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().map(|c| c.f1).sum::<f64>() / per_class.len() as f64
    };
    let total_tp: usize = tp.values().sum();
    let total_pred: usize = predicted.values().sum();
    let micro_f1 = if pairs.is_empty() { 0.0 } else { 2.0 * total_tp as f64 / (pairs.len() + total_pred) as f64 };
    (macro_f1, micro_f1, per_class)
}

/// Extracted label of every caption plus accuracy, intervals and F1.
pub fn label_consistency(
    results: &[CaptionResult],
    lexicon: &LabelLexicon,
    boot: &BootstrapConfig,
) -> Result<(Vec<Option<AreaLabel>>, LabelMetrics), EvalError> {
    if results.is_empty() {
        return Err(EvalError::Empty);
    }
    let predicted: Vec<Option<AreaLabel>> = results.iter().map(|r| lexicon.extract_label(&r.caption).label()).collect();
    let (mut known, mut unknown) = (Vec::new(), Vec::new());
    for (r, p) in results.iter().zip(&predicted) {
        let hit = *p == Some(r.reference);
        match r.reference {
            AreaLabel::Area(_) => known.push(hit),
            AreaLabel::Unknown => unknown.push(hit),
        }
    }
    let ci = |v: &[bool], salt: &str| {
        (!v.is_empty())
            .then(|| bootstrap_ci(v, &BootstrapConfig { seed: rng::derive_seed(boot.seed, salt, 0), ..*boot }))
            .transpose()
    };
    let pairs: Vec<(AreaLabel, Option<AreaLabel>)> = results.iter().map(|r| r.reference).zip(predicted.iter().copied()).collect();
    let (macro_f1, micro_f1, per_class) = f1_scores(&pairs);
    let metrics = LabelMetrics {
        in_scope: ci(&known, "in-scope")?,
        unknown: ci(&unknown, "unknown")?,
        n_in_scope: known.len(),
        n_unknown: unknown.len(),
        n_none: predicted.iter().filter(|p| p.is_none()).count(),
        macro_f1,
        micro_f1,
        per_class,
    };
    Ok((predicted, metrics))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub area: AreaId,
    pub statements: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McItem {
    pub item_id: String,
    /// Caption with every area mention masked.
    pub caption: String,
    pub candidates: Vec<Candidate>,
    pub correct: usize,
    pub seed: u64,
}

/// Eight candidates: `predicted` plus seven distinct areas drawn uniformly
/// from the other target areas, each with up to five pooled statements, in
/// seeded order.
pub fn build_mc_item(
    item_id: &str,
    redacted: &str,
    predicted: AreaId,
    pool: &StatementPool,
    seed: u64,
) -> Result<McItem, EvalError> {
    if predicted.index() >= NUM_TARGET_AREAS {
        return Err(EvalError::InvalidArea(predicted.0));
    }
    let mut r = rng::stream(seed, "mc-item", 0);
    let others: Vec<AreaId> = AreaId::all().filter(|&a| a != predicted).collect();
    let mut areas = vec![predicted];
    areas.extend(index::sample(&mut r, others.len(), NUM_CANDIDATES - 1).into_iter().map(|i| others[i]));
    areas.shuffle(&mut r);
    let candidates = areas
        .iter()
        .map(|&area| {
            let statements = if pool.len(area) == 0 {
                Vec::new()
            } else {
                let s = rng::derive_seed(seed, "mc-statements", area.index() as u64);
                sample_statements(pool, area, STATEMENTS_PER_CANDIDATE, s)
                    .expect("pool has the area")
                    .into_iter()
                    .map(|s| s.text)
                    .collect()
            };
            Candidate { area, statements }
        })
        .collect();
    let correct = areas.iter().position(|&a| a == predicted).expect("predicted is a candidate");
    Ok(McItem { item_id: item_id.to_string(), caption: redacted.to_string(), candidates, correct, seed })
}

pub trait Judge: Send + Sync {
    fn choose(&self, item: &McItem) -> Result<usize, EvalError>;
}

fn term_counts(text: &str) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    for t in tokenize(text) {
        if t.chars().any(char::is_alphanumeric) {
            *m.entry(t).or_insert(0.0) += 1.0;
        }
    }
    m
}

pub fn cosine(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> f64 {
    let dot: f64 = a.iter().filter_map(|(k, x)| b.get(k).map(|y| x * y)).sum();
    let na = a.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Term-frequency cosine between the caption and each candidate's
/// statements; the lowest index wins ties.
#[derive(Clone, Copy, Debug, Default)]
pub struct OracleJudge;

impl OracleJudge {
    pub fn scores(item: &McItem) -> Vec<f64> {
        let cap = term_counts(&item.caption);
        item.candidates.iter().map(|c| cosine(&cap, &term_counts(&c.statements.join(" ")))).collect()
    }
}

impl Judge for OracleJudge {
    fn choose(&self, item: &McItem) -> Result<usize, EvalError> {
        let scores = Self::scores(item);
        let mut best = 0;
        for (i, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = i;
            }
        }
        Ok(best)
    }
}

/// Uniform choice seeded per item id.
#[derive(Clone, Copy, Debug, Default)]
pub struct RandomJudge {
    pub seed: u64,
}

impl Judge for RandomJudge {
    fn choose(&self, item: &McItem) -> Result<usize, EvalError> {
        let mut r = rng::stream(self.seed, "random-judge", rng::label_hash(&item.item_id));
        Ok(r.random_range(0..item.candidates.len()))
    }
}

/// Asks a text generator and parses the first option number in the reply.
pub struct LlmJudge {
    pub client: Arc<dyn TextGenerator>,
    pub seed: u64,
}

impl Judge for LlmJudge {
    fn choose(&self, item: &McItem) -> Result<usize, EvalError> {
        let cands: Vec<(String, Vec<String>)> =
            item.candidates.iter().map(|c| (c.area.name().to_string(), c.statements.clone())).collect();
        let req = GenerationRequest::new(prompts::JUDGE_SYSTEM, prompts::judge(&item.caption, &cands))
            .with_seed(self.seed ^ rng::label_hash(&item.item_id));
        let resp = self
            .client
            .complete(&req)
            .map_err(|source| EvalError::Judge { item_id: item.item_id.clone(), source })?;
        parse_choice(&resp.text, item.candidates.len())
            .ok_or_else(|| EvalError::Unparseable { item_id: item.item_id.clone(), reply: resp.text })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discriminability {
    pub accuracy: BootstrapCI,
    pub chosen: Vec<usize>,
}

/// Share of items where the judge picks the recorded correct candidate.
/// Judging runs in parallel; results keep item order.
pub fn discriminability(items: &[McItem], judge: &dyn Judge, boot: &BootstrapConfig) -> Result<Discriminability, EvalError> {
    if items.is_empty() {
        return Err(EvalError::Empty);
    }
    let chosen: Vec<usize> = items.par_iter().map(|it| judge.choose(it)).collect::<Result<_, _>>()?;
    let hits: Vec<bool> = items.iter().zip(&chosen).map(|(it, &c)| c == it.correct).collect();
    Ok(Discriminability { accuracy: bootstrap_ci(&hits, boot)?, chosen })
}

/// Pearson chi-square statistic and p-value against equal expected counts.
pub fn chi_square_uniform(counts: &[usize]) -> (f64, f64) {
    let k = counts.len();
    let total: usize = counts.iter().sum();
    if k < 2 || total == 0 {
        return (0.0, 1.0);
    }
    let e = total as f64 / k as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    let dist = ChiSquared::new((k - 1) as f64).expect("positive degrees of freedom");
    (stat, dist.sf(stat))
}

/// Items built from the consistency results: masked caption, anchored on the
/// extracted label. Captions predicted as unknown or as no label are skipped.
pub fn build_items(
    results: &[CaptionResult],
    predicted: &[Option<AreaLabel>],
    lexicon: &LabelLexicon,
    pool: &StatementPool,
    seed: u64,
) -> Result<(Vec<McItem>, usize), EvalError> {
    let mut items = Vec::new();
    let mut excluded = 0;
    for (r, p) in results.iter().zip(predicted) {
        match p {
            Some(AreaLabel::Area(a)) => {
                let s = rng::derive_seed(seed, "mc", rng::label_hash(&r.patch_id));
                items.push(build_mc_item(&r.patch_id, &lexicon.mask_areas(&r.caption), *a, pool, s)?);
            }
            _ => excluded += 1,
        }
    }
    Ok((items, excluded))
}

/// Published reference figures shown next to measured values.
pub const REFERENCE_IN_SCOPE: f64 = 0.906;
pub const REFERENCE_UNKNOWN: f64 = 0.9141;
pub const REFERENCE_F1: f64 = 0.82;
pub const REFERENCE_DISCRIMINABILITY: f64 = 0.686;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub labels: LabelMetrics,
    pub discriminability: Option<BootstrapCI>,
    pub random_baseline: Option<BootstrapCI>,
    pub n_items: usize,
    pub n_excluded: usize,
    /// Masked captions from which a label could still be extracted; 0 when masking is complete.
    pub mask_leaks: usize,
    pub judge: String,
    pub seeds: BTreeMap<String, u64>,
}

fn pct(ci: Option<&BootstrapCI>) -> String {
    match ci {
        Some(c) => format!("{:.1}% ({:.1}–{:.1}%, n={})", 100.0 * c.point, 100.0 * c.lower, 100.0 * c.upper, c.n),
        None => "n/a".into(),
    }
}

impl EvalReport {
    pub fn to_markdown(&self) -> String {
        let l = &self.labels;
        let mut s = String::from("# Evaluation\n\n");
        s.push_str(&format!("Config hash: `{}`\n\n", self.config_hash));
        s.push_str("## Label consistency\n\n| metric | value |\n|---|---|\n");
        s.push_str(&format!("| in-scope accuracy | {} |\n", pct(l.in_scope.as_ref())));
        s.push_str(&format!("| unknown accuracy | {} |\n", pct(l.unknown.as_ref())));
        s.push_str(&format!("| macro-F1 | {:.3} |\n| micro-F1 | {:.3} |\n", l.macro_f1, l.micro_f1));
        s.push_str(&format!("| captions without a label | {} |\n\n", l.n_none));
        s.push_str("## Discriminability\n\n| metric | value |\n|---|---|\n");
        s.push_str(&format!("| {} judge | {} |\n", self.judge, pct(self.discriminability.as_ref())));
        s.push_str(&format!("| random judge | {} |\n", pct(self.random_baseline.as_ref())));
        s.push_str(&format!("| items / excluded | {} / {} |\n", self.n_items, self.n_excluded));
        s.push_str(&format!("| masked captions still labeled | {} |\n\n", self.mask_leaks));
        s.push_str(&reference_table(self));
        s
    }
}

/// Published full-scale figures beside this run's values. The full-scale
/// numbers come from a much larger setup and are not reproduction targets.
pub fn reference_table(r: &EvalReport) -> String {
    let v = |c: Option<&BootstrapCI>| c.map_or("n/a".to_string(), |c| format!("{:.1}%", 100.0 * c.point));
    let mut s = String::from("## Reference values (published full-scale run vs. this run)\n\n");
    s.push_str("| metric | published (full scale) | this run (toy scale) |\n|---|---|---|\n");
    s.push_str(&format!("| in-scope label accuracy | {:.1}% | {} |\n", 100.0 * REFERENCE_IN_SCOPE, v(r.labels.in_scope.as_ref())));
    s.push_str(&format!("| unknown label accuracy | {:.2}% | {} |\n", 100.0 * REFERENCE_UNKNOWN, v(r.labels.unknown.as_ref())));
    s.push_str(&format!("| overall F1 | {:.2} | {:.2} |\n", REFERENCE_F1, r.labels.macro_f1));
    s.push_str(&format!(
        "| 8-way discriminability | {:.1}% | {} |\n",
        100.0 * REFERENCE_DISCRIMINABILITY,
        v(r.discriminability.as_ref())
    ));
    s
}

/// Full protocol over generated captions.
pub fn evaluate(
    results: &[CaptionResult],
    lexicon: &LabelLexicon,
    pool: &StatementPool,
    judge: &dyn Judge,
    judge_name: &str,
    boot: &BootstrapConfig,
    mc_seed: u64,
    config_hash: &str,
) -> Result<(EvalReport, Vec<McItem>), EvalError> {
    let (predicted, labels) = label_consistency(results, lexicon, boot)?;
    let (items, excluded) = build_items(results, &predicted, lexicon, pool, mc_seed)?;
    let mask_leaks = results.iter().filter(|r| lexicon.extract_label(&lexicon.mask_areas(&r.caption)).label().is_some()).count();
    let (disc, random) = if items.is_empty() {
        (None, None)
    } else {
        let d = discriminability(&items, judge, boot)?;
        let rj = discriminability(&items, &RandomJudge { seed: mc_seed }, boot)?;
        (Some(d.accuracy), Some(rj.accuracy))
    };
    let seeds = BTreeMap::from([("bootstrap".to_string(), boot.seed), ("mc".to_string(), mc_seed)]);
    let report = EvalReport {
        config_hash: config_hash.to_string(),
        labels,
        discriminability: disc,
        random_baseline: random,
        n_items: items.len(),
        n_excluded: excluded,
        mask_leaks,
        judge: judge_name.to_string(),
        seeds,
    };
    Ok((report, items))
}
