use std::path::{Path, PathBuf};

use cytocap::adapter::AdapterConfig;
use cytocap::checkpoint::sha256_hex;
use cytocap::corpus::ChunkConfig;
use cytocap::dataset::DEFAULT_PROMPT;
use cytocap::lexicon::NUM_TARGET_AREAS;
use cytocap::lm::LmConfig;
use cytocap::llm::HttpConfig;
use cytocap::qa::{ArtifactRules, DEFAULT_NUM_OPTIONS};
use cytocap::rng::derive_seed;
use cytocap::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every stage derives its own stream from it.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub paths: PathsConfig,
    pub distill: DistillSection,
    pub synth: SynthSection,
    pub dataset: DatasetSection,
    pub lm: LmSection,
    pub adapter: AdapterSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub qa: QaSection,
    pub llm: LlmSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: "out".into(),
            paths: PathsConfig::default(),
            distill: DistillSection::default(),
            synth: SynthSection::default(),
            dataset: DatasetSection::default(),
            lm: LmSection::default(),
            adapter: AdapterSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            qa: QaSection::default(),
            llm: LlmSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Directory of `.txt` documents with `.json` sidecars.
    pub corpus_dir: PathBuf,
    pub citations: PathBuf,
    /// One document id per line; all documents are seeds when absent.
    pub seeds: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            corpus_dir: "corpus/docs".into(),
            citations: "corpus/citations.tsv".into(),
            seeds: Some("corpus/seeds.txt".into()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillSection {
    /// Citation hops followed from the seed documents.
    pub depth: usize,
    pub chunking: ChunkConfig,
}

impl Default for DistillSection {
    fn default() -> Self {
        Self { depth: 2, chunking: ChunkConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub dim: usize,
    pub min_angle_deg: f64,
    pub sigma: f64,
    /// Leading target areas that receive patches.
    pub target_areas: usize,
    pub patches_per_area: usize,
    /// Patches drawn from each non-target class.
    pub unknown_per_class: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self { dim: 64, min_angle_deg: 60.0, sigma: 0.1, target_areas: 8, patches_per_area: 300, unknown_per_class: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub known_per_unknown: usize,
    pub statements_per_caption: usize,
    pub prompt: String,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            known_per_unknown: 10,
            statements_per_caption: 3,
            prompt: DEFAULT_PROMPT.into(),
            n_train: 1920,
            n_val: 96,
            n_test: 300,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmSection {
    pub hidden_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub mlp_dim: usize,
    pub max_seq_len: usize,
    /// Caption-text epochs fitted before the weights are frozen; 0 keeps the random init.
    pub pretrain_epochs: usize,
}

impl Default for LmSection {
    fn default() -> Self {
        Self { hidden_dim: 64, num_blocks: 8, num_heads: 4, mlp_dim: 256, max_seq_len: 128, pretrain_epochs: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterSection {
    pub num_vision_tokens: usize,
    pub insert_every: usize,
    pub proj_hidden_dim: usize,
    /// Defaults to four times the LM width.
    pub ff_dim: Option<usize>,
    pub num_heads: usize,
    pub gate_init: f32,
}

impl Default for AdapterSection {
    fn default() -> Self {
        Self { num_vision_tokens: 4, insert_every: 4, proj_hidden_dim: 256, ff_dim: None, num_heads: 1, gate_init: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            clip_norm: t.clip_norm,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeKind {
    /// Oracle with the stub client, the LLM judge with the HTTP client.
    Auto,
    Oracle,
    Random,
    Llm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub bootstrap_iterations: usize,
    pub confidence_level: f64,
    pub max_new_tokens: usize,
    pub judge: JudgeKind,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { bootstrap_iterations: 10_000, confidence_level: 0.95, max_new_tokens: 80, judge: JudgeKind::Auto }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QaSection {
    pub num_options: usize,
    pub rules: ArtifactRules,
}

impl Default for QaSection {
    fn default() -> Self {
        Self { num_options: DEFAULT_NUM_OPTIONS, rules: ArtifactRules::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LlmMode {
    Stub,
    Http,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmSection {
    pub mode: LlmMode,
    pub http: HttpConfig,
}

impl Default for LlmSection {
    fn default() -> Self {
        Self { mode: LlmMode::Stub, http: HttpConfig::default() }
    }
}

/// Flag values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub llm_mode: Option<LlmMode>,
}

/// Pipeline stages in run order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Distill,
    Synth,
    Pair,
    Train,
    Eval,
    QaGen,
    QaScore,
}

impl Stage {
    pub const ALL: [Stage; 7] =
        [Stage::Distill, Stage::Synth, Stage::Pair, Stage::Train, Stage::Eval, Stage::QaGen, Stage::QaScore];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Distill => "distill",
            Stage::Synth => "synth",
            Stage::Pair => "pair",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::QaGen => "qa-gen",
            Stage::QaScore => "qa-score",
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(d) = &o.out_dir {
            self.out_dir = d.clone();
        }
        if let Some(m) = o.llm_mode {
            self.llm.mode = m;
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Validation(m));
        let s = &self.synth;
        if s.dim == 0 || s.patches_per_area == 0 {
            return bad("synth.dim and synth.patches_per_area must be positive".into());
        }
        if s.target_areas == 0 || s.target_areas > NUM_TARGET_AREAS {
            return bad(format!("synth.target_areas must be in 1..={}", NUM_TARGET_AREAS));
        }
        if !(s.sigma > 0.0) || !(s.min_angle_deg > 0.0 && s.min_angle_deg <= 90.0) {
            return bad("synth.sigma must be positive and synth.min_angle_deg in (0, 90]".into());
        }
        let d = &self.dataset;
        if d.known_per_unknown == 0 || d.statements_per_caption == 0 {
            return bad("dataset.known_per_unknown and dataset.statements_per_caption must be positive".into());
        }
        if d.n_train == 0 || d.n_test == 0 {
            return bad("dataset.n_train and dataset.n_test must be positive".into());
        }
        self.lm_config(1).validate().map_err(|e| CliError::Validation(format!("lm: {e}")))?;
        self.adapter_config(1)
            .validate(self.lm.num_blocks)
            .map_err(|e| CliError::Validation(format!("adapter: {e}")))?;
        self.train_config().validate().map_err(|e| CliError::Validation(format!("train: {e}")))?;
        let e = &self.eval;
        if e.bootstrap_iterations == 0 || !(e.confidence_level > 0.0 && e.confidence_level < 1.0) {
            return bad("eval.bootstrap_iterations must be positive and eval.confidence_level in (0, 1)".into());
        }
        if e.max_new_tokens == 0 {
            return bad("eval.max_new_tokens must be positive".into());
        }
        if self.qa.num_options < 2 {
            return bad("qa.num_options must be at least 2".into());
        }
        Ok(())
    }

    /// Seed for one named purpose.
    pub fn seed_for(&self, label: &str) -> u64 {
        derive_seed(self.seed, label, 0)
    }

    pub fn lm_config(&self, vocab_size: usize) -> LmConfig {
        let l = &self.lm;
        LmConfig {
            vocab_size,
            hidden_dim: l.hidden_dim,
            num_blocks: l.num_blocks,
            num_heads: l.num_heads,
            max_seq_len: l.max_seq_len,
            mlp_dim: l.mlp_dim,
            seed: self.seed_for("lm"),
        }
    }

    pub fn adapter_config(&self, embed_dim: usize) -> AdapterConfig {
        let a = &self.adapter;
        AdapterConfig {
            embed_dim,
            lm_hidden_dim: self.lm.hidden_dim,
            num_vision_tokens: a.num_vision_tokens,
            insert_every: a.insert_every,
            proj_hidden_dim: a.proj_hidden_dim,
            ff_dim: a.ff_dim.unwrap_or(4 * self.lm.hidden_dim),
            num_heads: a.num_heads,
            gate_init: a.gate_init,
            seed: self.seed_for("adapter"),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            seed: self.seed_for("train"),
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            clip_norm: t.clip_norm,
        }
    }

    /// What a stage's text generator is, without credentials.
    fn llm_identity(&self) -> serde_json::Value {
        match self.llm.mode {
            LlmMode::Stub => json!({"mode": "stub"}),
            LlmMode::Http => json!({"mode": "http", "endpoint": self.llm.http.endpoint, "model": self.llm.http.model}),
        }
    }

    /// Hash over everything a stage's output depends on, including the
    /// hashes of the stages it reads from. The output directory is excluded.
    pub fn stage_hash(&self, stage: Stage) -> String {
        let parts = match stage {
            Stage::Distill => json!({
                "seed": self.seed,
                "corpus_dir": self.paths.corpus_dir,
                "citations": self.paths.citations,
                "seeds": self.paths.seeds,
                "distill": self.distill,
                "llm": self.llm_identity(),
            }),
            Stage::Synth => json!({"seed": self.seed, "synth": self.synth}),
            Stage::Pair => json!({
                "distill": self.stage_hash(Stage::Distill),
                "synth": self.stage_hash(Stage::Synth),
                "dataset": self.dataset,
                "llm": self.llm_identity(),
            }),
            Stage::Train => json!({
                "pair": self.stage_hash(Stage::Pair),
                "lm": self.lm,
                "adapter": self.adapter,
                "train": self.train,
            }),
            Stage::Eval => json!({
                "train": self.stage_hash(Stage::Train),
                "eval": self.eval,
                "llm": self.llm_identity(),
            }),
            Stage::QaGen => json!({
                "seed": self.seed,
                "corpus_dir": self.paths.corpus_dir,
                "chunking": self.distill.chunking,
                "qa": self.qa,
                "llm": self.llm_identity(),
            }),
            Stage::QaScore => json!({"qa_gen": self.stage_hash(Stage::QaGen), "llm": self.llm_identity()}),
        };
        let doc = json!({"stage": stage.name(), "parts": parts});
        sha256_hex(&serde_json::to_vec(&doc).expect("json"))[..16].to_string()
    }
}
