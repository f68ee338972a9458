//! Synthetic patch embeddings, the nearest-centroid label classifier, and the
//! `CCEM` embedding file.
//!
//! `CCEM` layout, little-endian throughout:
//!
//! ```text
//! "CCEM"  u16 version  u32 count  u32 dim
//! per record: u16 id_len  id (UTF-8)  u16 label  dim × f32
//! ```
//!
//! Label codes: `0..57` target area, `0xFFFF` unknown, `0xFFFE` unlabeled.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{CheckpointError, Reader};
use crate::lexicon::{AreaId, AreaLabel, NUM_TARGET_AREAS};
use crate::rng;

pub const MAGIC: &[u8; 4] = b"CCEM";
pub const VERSION: u16 = 1;
pub const NUM_CLASSES: usize = 159;
pub const LABEL_UNKNOWN: u16 = 0xFFFF;
pub const LABEL_UNSET: u16 = 0xFFFE;
const MAX_ATTEMPTS: usize = 10_000;

#[derive(Debug, Error)]
pub enum VisionError {
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("could not place {placed} of {wanted} centroids at {angle_deg}° separation in dim {dim}")]
    Infeasible { placed: usize, wanted: usize, angle_deg: f64, dim: usize },
    #[error("vector has dimension {got}, expected {expected}")]
    Dim { got: usize, expected: usize },
    #[error("malformed embedding file at byte {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl From<CheckpointError> for VisionError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Format { offset, message } => VisionError::Format { offset, message },
            other => VisionError::Format { offset: 0, message: other.to_string() },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AreaProfile {
    /// Classifier class, `0..159`; the first 57 are the target areas.
    pub class_id: u16,
    pub centroid: Vec<f32>,
    pub noise_sigma: f32,
}

impl AreaProfile {
    pub fn target(&self) -> Option<AreaId> {
        class_target(self.class_id)
    }
}

/// Target area for a classifier class, `None` for the non-target classes.
pub fn class_target(class_id: u16) -> Option<AreaId> {
    ((class_id as usize) < NUM_TARGET_AREAS).then_some(AreaId(class_id))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRecord {
    pub patch_id: String,
    pub vector: Vec<f32>,
    /// Generating class; kept out of the embedding file.
    pub true_class: Option<u16>,
    pub weak_label: Option<AreaLabel>,
}

impl EmbeddingRecord {
    pub fn true_label(&self) -> Option<AreaLabel> {
        self.true_class.map(|c| class_target(c).map_or(AreaLabel::Unknown, AreaLabel::Area))
    }
}

fn unit_vector(r: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(r)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Unit centroids with every pairwise angle at least `min_angle_deg`, placed
/// by seeded rejection sampling. Class ids are `0..num_areas`.
pub fn synth_areas(
    num_areas: usize,
    dim: usize,
    min_angle_deg: f64,
    sigma: f32,
    seed: u64,
) -> Result<Vec<AreaProfile>, VisionError> {
    if num_areas < 2 || dim == 0 || num_areas > NUM_CLASSES {
        return Err(VisionError::Invalid(format!("need 2..={NUM_CLASSES} areas and dim > 0")));
    }
    if !(0.0..=180.0).contains(&min_angle_deg) || !(sigma >= 0.0) {
        return Err(VisionError::Invalid("angle must be in [0, 180] and sigma ≥ 0".into()));
    }
    let max_cos = min_angle_deg.to_radians().cos();
    let mut r = rng::stream(seed, "synth-areas", 0);
    let mut placed: Vec<Vec<f64>> = Vec::with_capacity(num_areas);
    while placed.len() < num_areas {
        let mut accepted = None;
        for _ in 0..MAX_ATTEMPTS {
            let v = unit_vector(&mut r, dim);
            let ok = placed.iter().all(|p| p.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() <= max_cos);
            if ok {
                accepted = Some(v);
                break;
            }
        }
        match accepted {
            Some(v) => placed.push(v),
            None => {
                return Err(VisionError::Infeasible {
                    placed: placed.len(),
                    wanted: num_areas,
                    angle_deg: min_angle_deg,
                    dim,
                })
            }
        }
    }
    Ok(placed
        .into_iter()
        .enumerate()
        .map(|(i, c)| AreaProfile {
            class_id: i as u16,
            centroid: c.into_iter().map(|x| x as f32).collect(),
            noise_sigma: sigma,
        })
        .collect())
}

/// `n_per_area` samples of `centroid + N(0, σ²I)` per profile; ids are
/// `c{class}-{index}` so draws for different classes never collide.
pub fn synth_embeddings(profiles: &[AreaProfile], n_per_area: usize, seed: u64) -> Vec<EmbeddingRecord> {
    let mut out = Vec::with_capacity(profiles.len() * n_per_area);
    for p in profiles {
        let mut r = rng::stream(seed, "synth-embeddings", p.class_id as u64);
        let noise = Normal::new(0.0f64, p.noise_sigma as f64).expect("sigma validated");
        for i in 0..n_per_area {
            let vector = p.centroid.iter().map(|&c| (c as f64 + noise.sample(&mut r)) as f32).collect();
            out.push(EmbeddingRecord {
                patch_id: format!("c{:03}-{i:05}", p.class_id),
                vector,
                true_class: Some(p.class_id),
                weak_label: None,
            });
        }
    }
    out
}

/// Index of the centroid closest to `vector` in Euclidean distance; the
/// lowest index wins ties. Dimensions are assumed to match.
pub fn nearest_centroid(centroids: &[Vec<f32>], vector: &[f32]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (c, centroid) in centroids.iter().enumerate() {
        let d: f64 = centroid.iter().zip(vector).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
        if d < best.0 {
            best = (d, c);
        }
    }
    best.1
}

/// Nearest-centroid stand-in for the area classifier.
#[derive(Clone, Debug)]
pub struct ClassifierStandIn {
    dim: usize,
    centroids: Vec<Vec<f32>>,
}

impl ClassifierStandIn {
    /// Needs exactly 159 profiles with class ids `0..159` in order.
    pub fn new(profiles: &[AreaProfile]) -> Result<Self, VisionError> {
        if profiles.len() != NUM_CLASSES {
            return Err(VisionError::Invalid(format!("classifier needs {NUM_CLASSES} classes, got {}", profiles.len())));
        }
        if profiles.iter().enumerate().any(|(i, p)| p.class_id as usize != i) {
            return Err(VisionError::Invalid("profiles must be ordered by class id".into()));
        }
        let dim = profiles[0].centroid.len();
        if let Some(p) = profiles.iter().find(|p| p.centroid.len() != dim) {
            return Err(VisionError::Dim { got: p.centroid.len(), expected: dim });
        }
        Ok(Self { dim, centroids: profiles.iter().map(|p| p.centroid.clone()).collect() })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_targets(&self) -> usize {
        (0..self.centroids.len() as u16).filter(|&c| class_target(c).is_some()).count()
    }

    /// Index of the nearest centroid; ties go to the lowest class id.
    pub fn nearest_class(&self, vector: &[f32]) -> Result<u16, VisionError> {
        if vector.len() != self.dim {
            return Err(VisionError::Dim { got: vector.len(), expected: self.dim });
        }
        Ok(nearest_centroid(&self.centroids, vector) as u16)
    }

    pub fn classify(&self, vector: &[f32]) -> Result<AreaLabel, VisionError> {
        let c = self.nearest_class(vector)?;
        Ok(class_target(c).map_or(AreaLabel::Unknown, AreaLabel::Area))
    }

    /// Fills `weak_label` on every record.
    pub fn label_all(&self, records: &mut [EmbeddingRecord]) -> Result<(), VisionError> {
        for r in records {
            r.weak_label = Some(self.classify(&r.vector)?);
        }
        Ok(())
    }
}

pub fn label_code(label: Option<AreaLabel>) -> u16 {
    match label {
        Some(AreaLabel::Area(a)) => a.0,
        Some(AreaLabel::Unknown) => LABEL_UNKNOWN,
        None => LABEL_UNSET,
    }
}

fn label_from_code(code: u16) -> Option<Option<AreaLabel>> {
    match code {
        LABEL_UNKNOWN => Some(Some(AreaLabel::Unknown)),
        LABEL_UNSET => Some(None),
        c if (c as usize) < NUM_TARGET_AREAS => Some(Some(AreaLabel::Area(AreaId(c)))),
        _ => None,
    }
}

pub fn encode_embeddings(records: &[EmbeddingRecord]) -> Result<Vec<u8>, VisionError> {
    let dim = records.first().map_or(0, |r| r.vector.len());
    let mut out = Vec::with_capacity(14 + records.len() * (8 + 4 * dim));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for r in records {
        if r.vector.len() != dim {
            return Err(VisionError::Dim { got: r.vector.len(), expected: dim });
        }
        let id = r.patch_id.as_bytes();
        let len = u16::try_from(id.len()).map_err(|_| VisionError::Invalid(format!("patch id too long: {}", r.patch_id)))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(id);
        out.extend_from_slice(&label_code(r.weak_label).to_le_bytes());
        for v in &r.vector {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Records come back with `true_class = None`.
pub fn decode_embeddings(bytes: &[u8]) -> Result<Vec<EmbeddingRecord>, VisionError> {
    let mut r = Reader::new(bytes, 0);
    if r.take(4)? != MAGIC {
        return Err(VisionError::Format { offset: 0, message: "bad magic".into() });
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(VisionError::Format { offset: 4, message: format!("unsupported version {version}") });
    }
    let count = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let patch_id = r.utf8(len)?.to_string();
        let at = r.offset();
        let code = r.u16()?;
        let weak_label = label_from_code(code)
            .ok_or_else(|| VisionError::Format { offset: at, message: format!("invalid label code {code}") })?;
        let vector = r.f32s(dim)?;
        out.push(EmbeddingRecord { patch_id, vector, true_class: None, weak_label });
    }
    if !r.is_done() {
        return Err(VisionError::Format { offset: r.offset(), message: "trailing bytes".into() });
    }
    Ok(out)
}

pub fn save_embeddings(records: &[EmbeddingRecord], path: &Path) -> Result<(), VisionError> {
    let bytes = encode_embeddings(records)?;
    fs::write(path, bytes).map_err(|source| VisionError::Io { path: path.display().to_string(), source })
}

pub fn load_embeddings(path: &Path) -> Result<Vec<EmbeddingRecord>, VisionError> {
    let bytes = fs::read(path).map_err(|source| VisionError::Io { path: path.display().to_string(), source })?;
    decode_embeddings(&bytes)
}
