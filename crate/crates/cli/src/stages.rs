use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use cytocap::adapter::generate_caption;
use cytocap::captions::{CaptionComposer, LlmComposer, StatementPool, TemplateComposer};
use cytocap::checkpoint::Container;
use cytocap::corpus::{self, fixture, CitationGraph, DistillConfig, DistillCounts, KeywordExtractor, LlmExtractor, Statement, StatementExtractor};
use cytocap::dataset::{caption_corpus, split, PairBuilder, RatioConfig, SplitSpec, WeakPair};
use cytocap::evaluation::{self, BootstrapConfig, CaptionResult, EvalReport, Judge, LlmJudge, McItem, OracleJudge, RandomJudge};
use cytocap::lexicon::NUM_TARGET_AREAS;
use cytocap::llm::{HttpClient, StubClient, TextGenerator};
use cytocap::lm::{FrozenLm, Vocab};
use cytocap::qa::{
    self, reference_scoreboard, score_model, scoreboard_markdown, Answerer, Artifact, ClozeGenerator, LlmAnswerer,
    LlmQaGenerator, ModelScore, PerfectAnswerer, QaGenerator, QaItem, RandomAnswerer, ScoreRow,
};
use cytocap::training::{pretrain_lm, EpochRecord, LogEntry, PretrainConfig, TrainError, Trainer};
use cytocap::vision::{decode_embeddings, encode_embeddings, synth_areas, synth_embeddings, ClassifierStandIn, EmbeddingRecord, NUM_CLASSES};
use cytocap::{AreaLabel, LabelLexicon};
use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifacts::{self as art, out_path, Meta};
use crate::config::{JudgeKind, LlmMode, RunConfig, Stage};
use crate::CliError;

fn fail(stage: Stage, e: impl std::fmt::Display) -> CliError {
    CliError::Stage { stage: stage.name(), message: e.to_string() }
}

fn client(cfg: &RunConfig) -> Result<Arc<dyn TextGenerator>, CliError> {
    match cfg.llm.mode {
        LlmMode::Stub => Ok(Arc::new(StubClient)),
        LlmMode::Http => HttpClient::new(cfg.llm.http.clone())
            .map(|c| Arc::new(c) as Arc<dyn TextGenerator>)
            .map_err(|e| CliError::Validation(format!("llm.http: {e}"))),
    }
}

fn require_dir(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::Validation(format!("{what} {} is not a directory; `cytocap init-corpus` writes a fixture corpus", path.display())))
    }
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Validation(format!("{what} {} does not exist", path.display())))
    }
}

/// Writes the synthetic literature corpus the default paths point at.
pub fn init_corpus(dir: &Path, seed: u64) -> Result<usize, CliError> {
    let fx = fixture::generate(seed);
    fx.write(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    Ok(fx.documents.len())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DistillSummary {
    pub counts: DistillCounts,
    pub warnings: Vec<String>,
    pub seeds: Vec<String>,
}

pub fn distill(cfg: &RunConfig) -> Result<DistillSummary, CliError> {
    let p = &cfg.paths;
    require_dir(&p.corpus_dir, "corpus directory")?;
    require_file(&p.citations, "citation table")?;
    if let Some(s) = &p.seeds {
        require_file(s, "seed list")?;
    }
    let client = client(cfg)?;
    let stage = Stage::Distill;
    let ingested = corpus::ingest(&p.corpus_dir).map_err(|e| fail(stage, e))?;
    let graph = CitationGraph::load(&p.citations).map_err(|e| fail(stage, e))?;
    let seeds = match &p.seeds {
        Some(path) => fixture::parse_seeds(
            &fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?,
        ),
        None => Vec::new(),
    };
    let dc = DistillConfig {
        seeds: seeds.clone(),
        depth: cfg.distill.depth,
        chunking: cfg.distill.chunking.clone(),
        ..Default::default()
    };
    let extractor: Box<dyn StatementExtractor> = match cfg.llm.mode {
        LlmMode::Stub => Box::new(KeywordExtractor::default()),
        LlmMode::Http => Box::new(LlmExtractor { client, seed: cfg.seed_for("extract") }),
    };
    let out = corpus::distill(&ingested.documents, &graph, &dc, extractor.as_ref()).map_err(|e| fail(stage, e))?;
    if out.statements.is_empty() {
        return Err(fail(stage, "no statements were extracted; check the seed list and keywords"));
    }
    let meta = Meta::new(cfg, stage);
    art::write_jsonl(&out_path(cfg, art::STATEMENTS), &meta, &out.statements)?;
    let summary = DistillSummary { counts: out.counts, warnings: ingested.warnings, seeds };
    art::write_json(&out_path(cfg, art::DISTILL_COUNTS), &meta, &summary)?;
    info!("distill: {} statements over {} areas", summary.counts.statements, summary.counts.per_area_statements.len());
    Ok(summary)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthSummary {
    pub records: usize,
    pub dim: usize,
    pub per_weak_label: BTreeMap<String, usize>,
    /// Records whose weak label equals the label of their generating class.
    pub weak_label_agreement: f64,
}

pub fn synth(cfg: &RunConfig) -> Result<SynthSummary, CliError> {
    let s = &cfg.synth;
    let stage = Stage::Synth;
    let profiles = synth_areas(NUM_CLASSES, s.dim, s.min_angle_deg, s.sigma as f32, cfg.seed_for("areas")).map_err(|e| fail(stage, e))?;
    let seed = cfg.seed_for("embeddings");
    let mut records = synth_embeddings(&profiles[..s.target_areas], s.patches_per_area, seed);
    records.extend(synth_embeddings(&profiles[NUM_TARGET_AREAS..], s.unknown_per_class, seed));
    ClassifierStandIn::new(&profiles)
        .and_then(|c| c.label_all(&mut records))
        .map_err(|e| fail(stage, e))?;
    let mut per_weak_label = BTreeMap::new();
    let mut agree = 0;
    for r in &records {
        let w = r.weak_label.expect("labeled");
        *per_weak_label.entry(w.to_string()).or_insert(0) += 1;
        agree += (Some(w) == r.true_label()) as usize;
    }
    let summary = SynthSummary {
        records: records.len(),
        dim: s.dim,
        per_weak_label,
        weak_label_agreement: agree as f64 / records.len() as f64,
    };
    let bytes = encode_embeddings(&records).map_err(|e| fail(stage, e))?;
    art::write_binary(&out_path(cfg, art::EMBEDDINGS), &Meta::new(cfg, stage), &bytes, &summary)?;
    info!("synth: {} embeddings, weak-label agreement {:.4}", summary.records, summary.weak_label_agreement);
    Ok(summary)
}

fn load_embeddings(cfg: &RunConfig) -> Result<Vec<EmbeddingRecord>, CliError> {
    let path = out_path(cfg, art::EMBEDDINGS);
    let bytes = art::read_binary(&path, cfg, Stage::Synth)?;
    decode_embeddings(&bytes).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn load_pool(cfg: &RunConfig) -> Result<StatementPool, CliError> {
    let statements: Vec<Statement> = art::read_jsonl(&out_path(cfg, art::STATEMENTS), cfg, Stage::Distill)?;
    Ok(StatementPool::from_statements(statements).exclusive(&LabelLexicon::builtin()))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RatioAudit {
    pub known: usize,
    pub unknown: usize,
    pub known_per_unknown: usize,
    pub exact: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub audit: RatioAudit,
    /// Label counts per split.
    pub per_split: BTreeMap<String, BTreeMap<String, usize>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
}

pub fn pair(cfg: &RunConfig) -> Result<SplitManifest, CliError> {
    let stage = Stage::Pair;
    let pool = load_pool(cfg)?;
    let records = load_embeddings(cfg)?;
    let client = client(cfg)?;
    let d = &cfg.dataset;
    let vocab = Vocab::build(&caption_corpus(&pool, &d.prompt), 1).map_err(|e| fail(stage, e))?;
    let composer: Box<dyn CaptionComposer> = match cfg.llm.mode {
        LlmMode::Stub => Box::new(TemplateComposer::default()),
        LlmMode::Http => Box::new(LlmComposer::new(client, cfg.seed_for("compose"))),
    };
    let builder = PairBuilder { pool: &pool, composer: composer.as_ref(), vocab: &vocab, prompt: &d.prompt, k: d.statements_per_caption };
    let ratio = RatioConfig { known_per_unknown: d.known_per_unknown };
    let pairs = builder.build(&records, ratio, cfg.seed_for("pairs")).map_err(|e| fail(stage, e))?;
    let unknown = pairs.iter().filter(|p| p.weak_label == AreaLabel::Unknown).count();
    let known = pairs.len() - unknown;
    let audit = RatioAudit { known, unknown, known_per_unknown: d.known_per_unknown, exact: known == d.known_per_unknown * unknown };
    if !audit.exact {
        return Err(fail(stage, format!("ratio audit failed: {known} known vs {unknown} unknown")));
    }
    let spec = SplitSpec { n_train: d.n_train, n_val: d.n_val, n_test: d.n_test, seed: cfg.seed_for("split") };
    let splits = split(&pairs, &spec).map_err(|e| fail(stage, e))?;
    let ids = |v: &[WeakPair]| v.iter().map(|p| p.patch_id.clone()).collect::<Vec<_>>();
    let counts = |v: &[WeakPair]| {
        let mut m = BTreeMap::new();
        for p in v {
            *m.entry(p.weak_label.to_string()).or_insert(0) += 1;
        }
        m
    };
    let manifest = SplitManifest {
        train: ids(&splits.train),
        val: ids(&splits.val),
        test: ids(&splits.test),
        audit,
        per_split: BTreeMap::from([
            ("train".to_string(), counts(&splits.train)),
            ("val".to_string(), counts(&splits.val)),
            ("test".to_string(), counts(&splits.test)),
        ]),
    };
    let meta = Meta::new(cfg, stage);
    art::write_jsonl(&out_path(cfg, art::PAIRS), &meta, &pairs)?;
    art::write_json(&out_path(cfg, art::VOCAB), &meta, VocabFile { tokens: vocab.tokens().to_vec() })?;
    art::write_json(&out_path(cfg, art::SPLITS), &meta, &manifest)?;
    info!(
        "pair: {} pairs ({known}:{unknown}), splits {}/{}/{}",
        pairs.len(),
        manifest.train.len(),
        manifest.val.len(),
        manifest.test.len()
    );
    Ok(manifest)
}

struct PairData {
    vocab: Vocab,
    manifest: SplitManifest,
    by_id: HashMap<String, WeakPair>,
    embeddings: HashMap<String, Vec<f32>>,
    embed_dim: usize,
}

impl PairData {
    fn load(cfg: &RunConfig) -> Result<Self, CliError> {
        let manifest: SplitManifest = art::read_json(&out_path(cfg, art::SPLITS), cfg, Stage::Pair)?;
        let vf: VocabFile = art::read_json(&out_path(cfg, art::VOCAB), cfg, Stage::Pair)?;
        let vocab = Vocab::from_tokens(vf.tokens).map_err(|e| CliError::Validation(format!("vocab: {e}")))?;
        let pairs: Vec<WeakPair> = art::read_jsonl(&out_path(cfg, art::PAIRS), cfg, Stage::Pair)?;
        let records = load_embeddings(cfg)?;
        let embed_dim = records.first().map_or(0, |r| r.vector.len());
        let embeddings = records.into_iter().map(|r| (r.patch_id, r.vector)).collect();
        let by_id = pairs.into_iter().map(|p| (p.patch_id.clone(), p)).collect();
        Ok(Self { vocab, manifest, by_id, embeddings, embed_dim })
    }

    fn select(&self, ids: &[String]) -> Result<Vec<WeakPair>, CliError> {
        ids.iter()
            .map(|id| {
                self.by_id
                    .get(id)
                    .cloned()
                    .ok_or_else(|| CliError::Validation(format!("split lists {id}, which is not in {}", art::PAIRS)))
            })
            .collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub history: Vec<EpochRecord>,
    pub steps: u64,
    pub pretrain_losses: Vec<f64>,
    pub lm_hash_before: String,
    pub lm_hash_after: String,
    pub gates: Vec<(f32, f32)>,
    pub seconds: f64,
}

/// Trains from scratch, or continues from `resume` when given.
pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainSummary, CliError> {
    let stage = Stage::Train;
    let data = PairData::load(cfg)?;
    let train_pairs = data.select(&data.manifest.train)?;
    let meta = Meta::new(cfg, stage);
    let (mut trainer, pretrain_losses) = match resume {
        Some(path) => {
            let c = read_resumable(path, cfg)?;
            (Trainer::from_container(&c).map_err(|e| fail(stage, e))?, Vec::new())
        }
        None => {
            let mut lm = FrozenLm::init(cfg.lm_config(data.vocab.len())).map_err(|e| fail(stage, e))?;
            let losses = if cfg.lm.pretrain_epochs > 0 {
                let pc = PretrainConfig { epochs: cfg.lm.pretrain_epochs, seed: cfg.seed_for("pretrain"), ..Default::default() };
                pretrain_lm(&mut lm, &train_pairs, &pc).map_err(|e| fail(stage, e))?
            } else {
                Vec::new()
            };
            let t = Trainer::init(lm, data.vocab.clone(), cfg.adapter_config(data.embed_dim), cfg.train_config())
                .map_err(|e| fail(stage, e))?;
            (t, losses)
        }
    };
    let lm_hash_before = trainer.lm_hash();
    let started = Instant::now();
    let prepared = trainer
        .prepare(&train_pairs, |id| data.embeddings.get(id).map(Vec::as_slice))
        .map_err(|e| fail(stage, e))?;
    let mut log = Vec::new();
    let ckpt_dir = out_path(cfg, art::CHECKPOINT_DIR);
    trainer
        .train(&prepared, &mut |e: &LogEntry| log.push(e.clone()), &mut |t: &Trainer| {
            let epoch = t.progress.epochs_done;
            let rec = t.progress.history.last().expect("epoch recorded");
            info!("train: epoch {epoch} mean loss {:.4}", rec.mean_loss);
            art::write_checkpoint(&ckpt_dir.join(format!("epoch-{epoch:02}.cclm")), &meta, t.to_container())
                .map_err(|e| TrainError::Config(e.to_string()))
        })
        .map_err(|e| fail(stage, e))?;
    art::write_checkpoint(&out_path(cfg, art::MODEL), &meta, trainer.to_container())?;
    art::write_jsonl(&out_path(cfg, art::TRAIN_LOG), &meta, &log)?;
    let summary = TrainSummary {
        history: trainer.progress.history.clone(),
        steps: trainer.progress.step,
        pretrain_losses,
        lm_hash_after: trainer.lm_hash(),
        lm_hash_before,
        gates: trainer.adapter.gates(),
        seconds: started.elapsed().as_secs_f64(),
    };
    art::write_json(&out_path(cfg, art::TRAIN_SUMMARY), &meta, &summary)?;
    Ok(summary)
}

fn read_resumable(path: &Path, cfg: &RunConfig) -> Result<Container, CliError> {
    art::read_checkpoint(path, cfg)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CaptionRow {
    #[serde(flatten)]
    pub result: CaptionResult,
    pub predicted: Option<AreaLabel>,
}

pub fn eval(cfg: &RunConfig) -> Result<EvalReport, CliError> {
    let stage = Stage::Eval;
    let container = art::read_checkpoint(&out_path(cfg, art::MODEL), cfg)?;
    let data = PairData::load(cfg)?;
    let pool = load_pool(cfg)?;
    let trainer = Trainer::from_container(&container).map_err(|e| fail(stage, e))?;
    let test = data.select(&data.manifest.test)?;
    let judge_kind = match (cfg.eval.judge, cfg.llm.mode) {
        (JudgeKind::Auto, LlmMode::Stub) => JudgeKind::Oracle,
        (JudgeKind::Auto, LlmMode::Http) => JudgeKind::Llm,
        (k, _) => k,
    };
    let judge: Box<dyn Judge> = match judge_kind {
        JudgeKind::Oracle | JudgeKind::Auto => Box::new(OracleJudge),
        JudgeKind::Random => Box::new(RandomJudge { seed: cfg.seed_for("judge") }),
        JudgeKind::Llm => Box::new(LlmJudge { client: client(cfg)?, seed: cfg.seed_for("judge") }),
    };
    let started = Instant::now();
    let results: Vec<CaptionResult> = test
        .par_iter()
        .map(|p| {
            let e = data
                .embeddings
                .get(&p.patch_id)
                .ok_or_else(|| fail(stage, format!("no embedding for {}", p.patch_id)))?;
            let caption = generate_caption(&trainer.lm, &trainer.adapter, &trainer.vocab, p.prompt_ids(), e, cfg.eval.max_new_tokens)
                .map_err(|err| fail(stage, format!("{}: {err}", p.patch_id)))?;
            Ok(CaptionResult { patch_id: p.patch_id.clone(), caption, reference: p.weak_label })
        })
        .collect::<Result<_, CliError>>()?;
    info!("eval: {} captions in {:.1}s", results.len(), started.elapsed().as_secs_f64());
    let lex = LabelLexicon::builtin();
    let boot = BootstrapConfig {
        iterations: cfg.eval.bootstrap_iterations,
        level: cfg.eval.confidence_level,
        seed: cfg.seed_for("bootstrap"),
    };
    let judge_name = format!("{judge_kind:?}").to_lowercase();
    let hash = cfg.stage_hash(stage);
    let (report, items) = evaluation::evaluate(&results, &lex, &pool, judge.as_ref(), &judge_name, &boot, cfg.seed_for("mc"), &hash)
        .map_err(|e| fail(stage, e))?;
    let rows: Vec<CaptionRow> = results
        .into_iter()
        .map(|r| {
            let predicted = lex.extract_label(&r.caption).label();
            CaptionRow { result: r, predicted }
        })
        .collect();
    let meta = Meta::new(cfg, stage);
    art::write_jsonl(&out_path(cfg, art::CAPTIONS), &meta, &rows)?;
    art::write_jsonl::<McItem>(&out_path(cfg, art::MC_ITEMS), &meta, &items)?;
    art::write_json(&out_path(cfg, art::EVAL_REPORT), &meta, &report)?;
    art::write_text(&out_path(cfg, art::EVAL_MARKDOWN), &report.to_markdown())?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DroppedItem {
    pub item: QaItem,
    pub artifact: Artifact,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QaSummary {
    pub documents: usize,
    pub chunks: usize,
    pub generated: usize,
    pub malformed: usize,
    pub kept: usize,
    pub dropped: BTreeMap<String, usize>,
}

pub fn qa_gen(cfg: &RunConfig) -> Result<QaSummary, CliError> {
    let stage = Stage::QaGen;
    require_dir(&cfg.paths.corpus_dir, "corpus directory")?;
    let client = client(cfg)?;
    let docs = corpus::ingest(&cfg.paths.corpus_dir).map_err(|e| fail(stage, e))?.documents;
    let mut chunks = Vec::new();
    for d in &docs {
        chunks.extend(corpus::chunk(&d.doc_id, &d.body, &cfg.distill.chunking).map_err(|e| fail(stage, e))?);
    }
    let generator: Box<dyn QaGenerator> = match cfg.llm.mode {
        LlmMode::Stub => Box::new(ClozeGenerator { num_options: cfg.qa.num_options, ..ClozeGenerator::new(cfg.seed_for("qa-gen")) }),
        LlmMode::Http => Box::new(LlmQaGenerator { client, seed: cfg.seed_for("qa-gen"), num_options: cfg.qa.num_options }),
    };
    let generated = qa::generate_qa(&chunks, generator.as_ref()).map_err(|e| fail(stage, e))?;
    let shuffled = qa::randomize_all(&generated.items, cfg.seed_for("qa-options"));
    let (kept, dropped) = qa::filter_artifacts(&shuffled, &cfg.qa.rules);
    let mut by_kind = BTreeMap::new();
    for (_, a) in &dropped {
        *by_kind.entry(serde_json::to_value(a).expect("json").as_str().unwrap_or("?").to_string()).or_insert(0) += 1;
    }
    let summary = QaSummary {
        documents: docs.len(),
        chunks: chunks.len(),
        generated: generated.items.len(),
        malformed: generated.malformed,
        kept: kept.len(),
        dropped: by_kind,
    };
    let dropped: Vec<DroppedItem> = dropped.into_iter().map(|(item, artifact)| DroppedItem { item, artifact }).collect();
    let meta = Meta::new(cfg, stage);
    art::write_jsonl(&out_path(cfg, art::QA_ITEMS), &meta, &kept)?;
    art::write_jsonl(&out_path(cfg, art::QA_DROPPED), &meta, &dropped)?;
    art::write_json(&out_path(cfg, art::QA_SUMMARY), &meta, &summary)?;
    info!("qa-gen: {} kept, {} dropped, {} malformed", summary.kept, dropped.len(), summary.malformed);
    Ok(summary)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Scoreboard {
    pub measured: Vec<ModelScore>,
    /// Published rows first, then this run's.
    pub rows: Vec<ScoreRow>,
}

pub fn qa_score(cfg: &RunConfig) -> Result<Scoreboard, CliError> {
    let stage = Stage::QaScore;
    let items: Vec<QaItem> = art::read_jsonl(&out_path(cfg, art::QA_ITEMS), cfg, Stage::QaGen)?;
    let mut answerers: Vec<(String, Box<dyn Answerer>)> = Vec::new();
    match cfg.llm.mode {
        LlmMode::Stub => answerers.push(("perfect answerer (this run)".into(), Box::new(PerfectAnswerer))),
        LlmMode::Http => answerers.push((
            format!("{} (this run)", cfg.llm.http.model),
            Box::new(LlmAnswerer { client: client(cfg)?, seed: cfg.seed_for("qa-answer") }),
        )),
    }
    answerers.push(("random answerer (this run)".into(), Box::new(RandomAnswerer { seed: cfg.seed_for("qa-random") })));
    let measured: Vec<ModelScore> = answerers
        .iter()
        .map(|(name, a)| score_model(name, &items, a.as_ref()))
        .collect::<Result<_, _>>()
        .map_err(|e| fail(stage, e))?;
    let mut rows = reference_scoreboard();
    rows.extend(measured.iter().map(ScoreRow::from));
    let board = Scoreboard { measured, rows };
    let meta = Meta::new(cfg, stage);
    art::write_json(&out_path(cfg, art::SCOREBOARD), &meta, &board)?;
    let md = format!(
        "# QA scoreboard\n\nConfig hash: `{}`\n\nRows marked \"this run\" were measured on {} generated items; the others are published reference scores.\n\n{}",
        meta.config_hash,
        items.len(),
        scoreboard_markdown(&board.rows)
    );
    art::write_text(&out_path(cfg, art::SCOREBOARD_MARKDOWN), &md)?;
    Ok(board)
}

/// Everything `report` found, keyed by stage.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Bundle {
    /// In run order.
    pub stage_hashes: Vec<(String, String)>,
    pub distill: Option<DistillSummary>,
    pub synth: Option<SynthSummary>,
    pub splits: Option<RatioAudit>,
    pub train: Option<TrainSummary>,
    pub eval: Option<EvalReport>,
    pub qa: Option<QaSummary>,
    pub scoreboard: Option<Scoreboard>,
    pub missing: Vec<String>,
}

fn optional<T>(path: PathBuf, read: impl FnOnce(&Path) -> Result<T, CliError>, missing: &mut Vec<String>) -> Result<Option<T>, CliError> {
    if path.exists() {
        read(&path).map(Some)
    } else {
        missing.push(path.display().to_string());
        Ok(None)
    }
}

fn read_sidecar<T: serde::de::DeserializeOwned>(path: &Path, cfg: &RunConfig, stage: Stage) -> Result<T, CliError> {
    art::read_binary(path, cfg, stage)?;
    art::read_json(&art::sidecar(path), cfg, stage)
}

/// Collates every stage output present under the output directory into
/// `report.md` and `report.json`. Outputs from a different config are rejected.
pub fn report(cfg: &RunConfig) -> Result<Bundle, CliError> {
    let mut missing = Vec::new();
    let stage_hashes = Stage::ALL.iter().map(|s| (s.name().to_string(), cfg.stage_hash(*s))).collect();
    let o = |n: &str| out_path(cfg, n);
    let bundle = Bundle {
        stage_hashes,
        distill: optional(o(art::DISTILL_COUNTS), |p| art::read_json(p, cfg, Stage::Distill), &mut missing)?,
        synth: optional(o(art::EMBEDDINGS), |p| read_sidecar(p, cfg, Stage::Synth), &mut missing)?,
        splits: optional(o(art::SPLITS), |p| art::read_json::<SplitManifest>(p, cfg, Stage::Pair).map(|m| m.audit), &mut missing)?,
        train: optional(o(art::TRAIN_SUMMARY), |p| art::read_json(p, cfg, Stage::Train), &mut missing)?,
        eval: optional(o(art::EVAL_REPORT), |p| art::read_json(p, cfg, Stage::Eval), &mut missing)?,
        qa: optional(o(art::QA_SUMMARY), |p| art::read_json(p, cfg, Stage::QaGen), &mut missing)?,
        scoreboard: optional(o(art::SCOREBOARD), |p| art::read_json(p, cfg, Stage::QaScore), &mut missing)?,
        missing,
    };
    let md = render_report(cfg, &bundle);
    art::write_text(&o(art::REPORT), &md)?;
    let mut json = serde_json::to_string_pretty(&serde_json::json!({"config": cfg, "bundle": bundle})).expect("json");
    json.push('\n');
    art::write_text(&o(art::REPORT_JSON), &json)?;
    Ok(bundle)
}

fn render_report(cfg: &RunConfig, b: &Bundle) -> String {
    let mut s = String::from("# cytocap run report\n\n## Provenance\n\n| stage | config hash |\n|---|---|\n");
    for (k, v) in &b.stage_hashes {
        s.push_str(&format!("| {k} | `{v}` |\n"));
    }
    if let Some(d) = &b.distill {
        let c = &d.counts;
        s.push_str("\n## Corpus distillation\n\n| count | value |\n|---|---|\n");
        s.push_str(&format!("| documents | {} |\n| after citation expansion | {} |\n", c.documents, c.expanded));
        s.push_str(&format!("| chunks | {} |\n| candidate statements | {} |\n", c.chunks, c.candidates));
        s.push_str(&format!("| statements | {} |\n| areas with statements | {} |\n", c.statements, c.per_area_statements.len()));
    }
    if let Some(x) = &b.synth {
        s.push_str(&format!(
            "\n## Embeddings\n\n{} vectors of dimension {}; weak labels agree with the generating class for {:.2}% of them.\n",
            x.records,
            x.dim,
            100.0 * x.weak_label_agreement
        ));
    }
    if let Some(a) = &b.splits {
        s.push_str(&format!(
            "\n## Pairs\n\n{} known and {} unknown pairs (target {}:1, exact: {}).\n",
            a.known, a.unknown, a.known_per_unknown, a.exact
        ));
    }
    if let Some(t) = &b.train {
        s.push_str("\n## Training\n\n| epoch | mean loss | steps |\n|---|---|---|\n");
        for h in &t.history {
            s.push_str(&format!("| {} | {:.4} | {} |\n", h.epoch, h.mean_loss, h.steps));
        }
        s.push_str(&format!(
            "\nLanguage-model weights unchanged: {} (`{}`).\n",
            t.lm_hash_before == t.lm_hash_after,
            &t.lm_hash_after[..16]
        ));
    }
    if let Some(e) = &b.eval {
        s.push('\n');
        s.push_str(&e.to_markdown().replacen("# Evaluation", "## Evaluation", 1).replace("\n## ", "\n### "));
    }
    if let Some(q) = &b.qa {
        s.push_str(&format!(
            "\n## QA benchmark\n\n{} items generated from {} chunks, {} kept after the artifact filter, {} malformed.\n",
            q.generated, q.chunks, q.kept, q.malformed
        ));
    }
    if let Some(board) = &b.scoreboard {
        s.push('\n');
        s.push_str(&scoreboard_markdown(&board.rows));
    }
    if !b.missing.is_empty() {
        s.push_str("\n## Not run\n\n");
        for m in &b.missing {
            s.push_str(&format!("- {m}\n"));
        }
    }
    s.push_str(&format!("\n## Configuration\n\n```toml\n{}```\n", cfg.to_toml()));
    s
}

/// Every stage in order, then the report.
pub fn run_all(cfg: &RunConfig) -> Result<Bundle, CliError> {
    distill(cfg)?;
    synth(cfg)?;
    pair(cfg)?;
    train(cfg, None)?;
    eval(cfg)?;
    qa_gen(cfg)?;
    qa_score(cfg)?;
    report(cfg)
}
