//! The `CCLM` checkpoint container.
//!
//! ```text
//! "CCLM"  u16 version  u32 config_len  config_json
//! u32 section_count
//! per section: [u8; 4] tag  u64 payload_len  payload
//! ```
//!
//! Tensor payloads are `u32 count` followed by, per tensor,
//! `u16 name_len  name  u8 rank  u32 dims[rank]  f32 data[...]`.
//! All integers and floats are little-endian. Known section tags: `LMWT`
//! (language model tensors), `VOCB` (vocabulary JSON), `ADPT` (adapter),
//! `OPTM` (optimizer state), `TRST` (training state JSON).

use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autograd::{ParamStore, ParamTensor};
use crate::lm::{FrozenLm, LmConfig, LmError, Vocab, VocabError};
use crate::tensor::{Tensor, TensorError};

pub const MAGIC: &[u8; 4] = b"CCLM";
pub const VERSION: u16 = 1;

pub const TAG_LM: [u8; 4] = *b"LMWT";
pub const TAG_VOCAB: [u8; 4] = *b"VOCB";
pub const TAG_ADAPTER: [u8; 4] = *b"ADPT";
pub const TAG_OPTIMIZER: [u8; 4] = *b"OPTM";
pub const TAG_TRAIN_STATE: [u8; 4] = *b"TRST";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed checkpoint at byte {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error("checkpoint has no `{0}` section")]
    MissingSection(String),
    #[error("config json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Bounds-checked little-endian reader that reports byte offsets.
pub struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    base: usize,
}

impl<'a> Reader<'a> {
    /// `base` is added to reported offsets (position of `bytes` in the file).
    pub fn new(bytes: &'a [u8], base: usize) -> Self {
        Self { bytes, pos: 0, base }
    }

    pub fn offset(&self) -> usize {
        self.base + self.pos
    }

    pub fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }

    pub fn fail<T>(&self, message: impl Into<String>) -> Result<T, CheckpointError> {
        Err(CheckpointError::Format { offset: self.offset(), message: message.into() })
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return self.fail(format!("truncated: need {n} bytes, {} left", self.bytes.len() - self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>, CheckpointError> {
        let raw = self.take(n.checked_mul(4).ok_or(CheckpointError::Format {
            offset: self.offset(),
            message: "length overflow".into(),
        })?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    pub fn utf8(&mut self, n: usize) -> Result<&'a str, CheckpointError> {
        let at = self.offset();
        let raw = self.take(n)?;
        std::str::from_utf8(raw)
            .map_err(|e| CheckpointError::Format { offset: at, message: format!("invalid utf-8: {e}") })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Section {
    pub tag: [u8; 4],
    pub payload: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Container {
    pub config_json: String,
    pub sections: Vec<Section>,
}

impl Container {
    pub fn new(config_json: String) -> Self {
        Self { config_json, sections: Vec::new() }
    }

    /// Replaces an existing section with the same tag, else appends.
    pub fn put(&mut self, tag: [u8; 4], payload: Vec<u8>) {
        match self.sections.iter_mut().find(|s| s.tag == tag) {
            Some(s) => s.payload = payload,
            None => self.sections.push(Section { tag, payload }),
        }
    }

    pub fn get(&self, tag: [u8; 4]) -> Option<&[u8]> {
        self.sections.iter().find(|s| s.tag == tag).map(|s| s.payload.as_slice())
    }

    pub fn require(&self, tag: [u8; 4]) -> Result<&[u8], CheckpointError> {
        self.get(tag).ok_or_else(|| CheckpointError::MissingSection(String::from_utf8_lossy(&tag).into_owned()))
    }

    /// Byte offset of a section's payload within [`to_bytes`](Self::to_bytes).
    pub fn payload_offset(&self, tag: [u8; 4]) -> Option<usize> {
        let mut off = 4 + 2 + 4 + self.config_json.len() + 4;
        for s in &self.sections {
            off += 4 + 8;
            if s.tag == tag {
                return Some(off);
            }
            off += s.payload.len();
        }
        None
    }

    /// Hex SHA-256 of one section's payload.
    pub fn section_hash(&self, tag: [u8; 4]) -> Option<String> {
        self.get(tag).map(sha256_hex)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config_json.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_json.as_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for s in &self.sections {
            out.extend_from_slice(&s.tag);
            out.extend_from_slice(&(s.payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&s.payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader::new(bytes, 0);
        if r.take(4)? != MAGIC {
            return Err(CheckpointError::Format { offset: 0, message: "bad magic, expected CCLM".into() });
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(CheckpointError::Format { offset: 4, message: format!("unsupported version {version}") });
        }
        let len = r.u32()? as usize;
        let config_json = r.utf8(len)?.to_string();
        let count = r.u32()?;
        let mut sections = Vec::with_capacity(count.min(64) as usize);
        for _ in 0..count {
            let tag: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
            let len = r.u64()?;
            let len = usize::try_from(len).or_else(|_| r.fail("section too large"))?;
            sections.push(Section { tag, payload: r.take(len)?.to_vec() });
        }
        if !r.is_done() {
            return r.fail("trailing bytes after last section");
        }
        Ok(Self { config_json, sections })
    }

    pub fn write(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes())
            .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
    }

    pub fn read(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode_tensors<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>) -> Vec<u8> {
    let items: Vec<_> = tensors.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(&(items.len() as u32).to_le_bytes());
    for (name, t) in items {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_tensors(r: &mut Reader<'_>) -> Result<Vec<(String, Tensor<f32>)>, CheckpointError> {
    let count = r.u32()?;
    let mut out = Vec::with_capacity(count.min(4096) as usize);
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = r.utf8(len)?.to_string();
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let at = r.offset();
        let data = r.f32s(n)?;
        let t = Tensor::new(shape, data)
            .map_err(|e| CheckpointError::Format { offset: at, message: format!("tensor `{name}`: {e}") })?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn encode_store(store: &ParamStore<f32>) -> Vec<u8> {
    encode_tensors(store.iter().map(|p| (p.name.as_str(), p.tensor.as_ref())))
}

pub fn decode_store(r: &mut Reader<'_>, trainable: bool) -> Result<ParamStore<f32>, CheckpointError> {
    let mut store = ParamStore::new();
    for (name, t) in decode_tensors(r)? {
        let at = r.offset();
        store
            .insert(ParamTensor::new(name, t, trainable))
            .map_err(|e| CheckpointError::Format { offset: at, message: e.to_string() })?;
    }
    Ok(store)
}

/// Container holding the frozen LM (config, `LMWT`, `VOCB`).
pub fn lm_container(lm: &FrozenLm<f32>, vocab: &Vocab) -> Container {
    let mut c = Container::new(serde_json::to_string(lm.config()).expect("config serializes"));
    c.put(TAG_LM, encode_store(lm.params()));
    c.put(TAG_VOCAB, vocab.to_json().into_bytes());
    c
}

pub fn load_lm(c: &Container) -> Result<(FrozenLm<f32>, Vocab), CheckpointError> {
    let config: LmConfig = serde_json::from_str(&c.config_json)?;
    let payload = c.require(TAG_LM)?;
    let base = c.payload_offset(TAG_LM).unwrap_or(0);
    let mut r = Reader::new(payload, base);
    let store = decode_store(&mut r, false)?;
    if !r.is_done() {
        return r.fail("trailing bytes in LMWT section");
    }
    let vocab_raw = c.require(TAG_VOCAB)?;
    let vocab_json = std::str::from_utf8(vocab_raw).map_err(|e| CheckpointError::Format {
        offset: c.payload_offset(TAG_VOCAB).unwrap_or(0),
        message: format!("vocabulary is not utf-8: {e}"),
    })?;
    let vocab = Vocab::from_json(vocab_json)?;
    if vocab.len() != config.vocab_size {
        return Err(CheckpointError::Lm(LmError::Config(format!(
            "vocabulary has {} tokens, config says {}",
            vocab.len(),
            config.vocab_size
        ))));
    }
    Ok((FrozenLm::from_params(config, store)?, vocab))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_roundtrip_and_offsets() {
        let mut c = Container::new("{}".into());
        c.put(*b"AAAA", vec![1, 2, 3]);
        c.put(*b"BBBB", vec![9]);
        let bytes = c.to_bytes();
        assert_eq!(Container::from_bytes(&bytes).unwrap(), c);
        let off = c.payload_offset(*b"BBBB").unwrap();
        assert_eq!(bytes[off], 9);
    }

    #[test]
    fn truncation_reports_offset() {
        let mut c = Container::new("{\"a\":1}".into());
        c.put(*b"AAAA", vec![0; 32]);
        let bytes = c.to_bytes();
        match Container::from_bytes(&bytes[..bytes.len() - 5]) {
            Err(CheckpointError::Format { offset, .. }) => assert_eq!(offset, c.payload_offset(*b"AAAA").unwrap()),
            other => panic!("expected format error, got {other:?}"),
        }
        assert!(Container::from_bytes(b"CCXX").is_err());
    }

    #[test]
    fn tensor_payload_roundtrip() {
        let t = Tensor::new(vec![2, 2], vec![1.0f32, -0.0, f32::MIN_POSITIVE, 3.5]).unwrap();
        let bytes = encode_tensors([("x", &t)]);
        let back = decode_tensors(&mut Reader::new(&bytes, 0)).unwrap();
        assert_eq!(back[0].0, "x");
        assert_eq!(
            back[0].1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
