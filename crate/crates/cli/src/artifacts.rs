//! Output files and their provenance headers.
//!
//! JSONL files start with a `{"meta": ...}` line, JSON files carry a `meta`
//! field, checkpoints a `META` section and embedding files a `.meta.json`
//! sidecar holding the payload digest.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use cytocap::checkpoint::{sha256_hex, Container};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Stage};
use crate::CliError;

pub const TAG_META: [u8; 4] = *b"META";

pub const STATEMENTS: &str = "statements.jsonl";
pub const DISTILL_COUNTS: &str = "distill_counts.json";
pub const EMBEDDINGS: &str = "embeddings.ccem";
pub const PAIRS: &str = "pairs.jsonl";
pub const VOCAB: &str = "vocab.json";
pub const SPLITS: &str = "splits.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const MODEL: &str = "model.cclm";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const TRAIN_SUMMARY: &str = "train_summary.json";
pub const CAPTIONS: &str = "captions.jsonl";
pub const MC_ITEMS: &str = "mc_items.jsonl";
pub const EVAL_REPORT: &str = "eval_report.json";
pub const EVAL_MARKDOWN: &str = "eval_report.md";
pub const QA_ITEMS: &str = "qa_items.jsonl";
pub const QA_DROPPED: &str = "qa_dropped.jsonl";
pub const QA_SUMMARY: &str = "qa_summary.json";
pub const SCOREBOARD: &str = "scoreboard.json";
pub const SCOREBOARD_MARKDOWN: &str = "scoreboard.md";
pub const REPORT: &str = "report.md";
pub const REPORT_JSON: &str = "report.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub stage: String,
    pub config_hash: String,
    pub tool_version: String,
    /// The full run configuration, for provenance.
    pub config: RunConfig,
    /// SHA-256 of a binary payload stored beside this header.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload_sha256: Option<String>,
}

impl Meta {
    pub fn new(cfg: &RunConfig, stage: Stage) -> Self {
        Self {
            stage: stage.name().into(),
            config_hash: cfg.stage_hash(stage),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config: cfg.clone(),
            payload_sha256: None,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: Meta,
}

/// A JSON document with its provenance header.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub meta: Meta,
    #[serde(flatten)]
    pub data: T,
}

pub fn out_path(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.out_dir.join(name)
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(|e| io_err(p, e)),
        _ => Ok(()),
    }
}

/// Fails with a hint naming the stage that produces `path`.
pub fn require(path: &Path, producer: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Validation(format!("missing {}; run `cytocap {producer}` first", path.display())))
    }
}

fn check_meta(path: &Path, meta: &Meta, cfg: &RunConfig, stage: Stage) -> Result<(), CliError> {
    let expected = cfg.stage_hash(stage);
    if meta.stage != stage.name() || meta.config_hash != expected {
        return Err(CliError::Validation(format!(
            "{} was written by stage `{}` with config hash {}, but the current config expects `{}` with {}; rerun `cytocap {}`",
            path.display(),
            meta.stage,
            meta.config_hash,
            stage.name(),
            expected,
            stage.name()
        )));
    }
    Ok(())
}

pub fn write_jsonl<T: Serialize>(path: &Path, meta: &Meta, items: &[T]) -> Result<(), CliError> {
    ensure_parent(path)?;
    let mut out = serde_json::to_string(&Header { meta: meta.clone() }).expect("meta serializes");
    out.push('\n');
    out.push_str(&cytocap::jsonl::to_string(items));
    fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Reads a JSONL output, rejecting it unless its header matches `stage`
/// under the current config.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path, cfg: &RunConfig, stage: Stage) -> Result<Vec<T>, CliError> {
    require(path, stage.name())?;
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| CliError::Validation(format!("{} is empty", path.display())))?
        .map_err(|e| io_err(path, e))?;
    let header: Header = serde_json::from_str(&first)
        .map_err(|e| CliError::Validation(format!("{}: missing provenance header ({e})", path.display())))?;
    check_meta(path, &header.meta, cfg, stage)?;
    let mut items = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        items.push(
            serde_json::from_str(&line)
                .map_err(|e| CliError::Validation(format!("{} line {}: {e}", path.display(), i + 2)))?,
        );
    }
    Ok(items)
}

pub fn write_json<T: Serialize>(path: &Path, meta: &Meta, data: T) -> Result<(), CliError> {
    ensure_parent(path)?;
    let doc = Stamped { meta: meta.clone(), data };
    let mut text = serde_json::to_string_pretty(&doc).expect("json serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path, cfg: &RunConfig, stage: Stage) -> Result<T, CliError> {
    require(path, stage.name())?;
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let doc: Stamped<T> =
        serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    check_meta(path, &doc.meta, cfg, stage)?;
    Ok(doc.data)
}

pub fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Writes `bytes` and a sidecar recording their digest.
pub fn write_binary<T: Serialize>(path: &Path, meta: &Meta, bytes: &[u8], extra: T) -> Result<(), CliError> {
    ensure_parent(path)?;
    fs::write(path, bytes).map_err(|e| io_err(path, e))?;
    let meta = Meta { payload_sha256: Some(sha256_hex(bytes)), ..meta.clone() };
    write_json(&sidecar(path), &meta, extra)
}

pub fn read_binary(path: &Path, cfg: &RunConfig, stage: Stage) -> Result<Vec<u8>, CliError> {
    require(path, stage.name())?;
    let side = sidecar(path);
    require(&side, stage.name())?;
    let text = fs::read_to_string(&side).map_err(|e| io_err(&side, e))?;
    let doc: Stamped<serde_json::Value> =
        serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", side.display())))?;
    check_meta(path, &doc.meta, cfg, stage)?;
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if doc.meta.payload_sha256.as_deref() != Some(sha256_hex(&bytes).as_str()) {
        return Err(CliError::Validation(format!(
            "{} does not match the digest in {}; rerun `cytocap {}`",
            path.display(),
            side.display(),
            stage.name()
        )));
    }
    Ok(bytes)
}

/// Adds a `META` section and writes the checkpoint.
pub fn write_checkpoint(path: &Path, meta: &Meta, mut container: Container) -> Result<(), CliError> {
    ensure_parent(path)?;
    container.put(TAG_META, serde_json::to_vec(meta).expect("meta serializes"));
    container.write(path).map_err(|e| io_err(path, e))
}

pub fn read_checkpoint(path: &Path, cfg: &RunConfig) -> Result<Container, CliError> {
    if !path.exists() {
        return Err(CliError::Validation(format!(
            "no checkpoint at {}; run `cytocap train` first (or point --out at a finished run)",
            path.display()
        )));
    }
    let c = Container::read(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    let meta: Meta = c
        .get(TAG_META)
        .ok_or_else(|| CliError::Validation(format!("{} has no META section", path.display())))
        .and_then(|b| serde_json::from_slice(b).map_err(|e| CliError::Validation(format!("{}: {e}", path.display()))))?;
    check_meta(path, &meta, cfg, Stage::Train)?;
    Ok(c)
}

/// Writes a file and flushes it; used for markdown outputs.
pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    ensure_parent(path)?;
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| io_err(path, e))
}
