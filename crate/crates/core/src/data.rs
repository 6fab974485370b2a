//! Feature files, annotations and the synthetic procedure generator.
//!
//! Feature files (`.fdft`) are little-endian:
//!
//! ```text
//! "FDFT" | version u32 | T u32 | D u32 | P u32 | T·P·D f32 values
//! ```
//!
//! with values laid out frame-major, then patch, then channel. `P = 1` means
//! the sequence carries no patch axis.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tsa_diffcore::Tensor;

use crate::lexicon::{DiveCode, Lexicon, LexiconError};

pub const FEATURE_MAGIC: &[u8; 4] = b"FDFT";
pub const FEATURE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad magic {0:?}, expected \"FDFT\"")]
    BadMagic([u8; 4]),
    #[error("unsupported feature file version {0}")]
    UnsupportedVersion(u32),
    #[error("feature file is truncated")]
    TruncatedFile,
    #[error("feature file has {0} trailing bytes")]
    TrailingBytes(usize),
    #[error("non-finite feature value in {0}")]
    NonFiniteValue(String),
    #[error("invalid feature shape T={t} D={d} P={p}")]
    InvalidShape { t: usize, d: usize, p: usize },
    #[error("frame {frame} outside 1..={frame_count}")]
    OutOfRange { frame: usize, frame_count: usize },
    #[error("annotation {video_id}: {reason}")]
    InvalidAnnotation { video_id: String, reason: String },
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error("no features for video {0}")]
    MissingFeatures(String),
    #[error(transparent)]
    Lexicon(#[from] LexiconError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Backbone-style features of one action instance.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub video_id: String,
    pub t: usize,
    pub d: usize,
    pub p: usize,
    /// `t·p·d` values, frame-major.
    pub values: Vec<f32>,
}

impl FeatureSequence {
    pub fn new(video_id: impl Into<String>, t: usize, d: usize, p: usize, values: Vec<f32>) -> Result<Self, DataError> {
        if t == 0 || d == 0 || p == 0 || values.len() != t * d * p {
            return Err(DataError::InvalidShape { t, d, p });
        }
        let video_id = video_id.into();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DataError::NonFiniteValue(video_id));
        }
        Ok(Self {
            video_id,
            t,
            d,
            p,
            values,
        })
    }

    /// One token per frame (patches averaged): `T × D`.
    pub fn frame_tokens(&self) -> Tensor {
        let mut out = vec![0.0; self.t * self.d];
        for f in 0..self.t {
            for p in 0..self.p {
                let base = (f * self.p + p) * self.d;
                for c in 0..self.d {
                    out[f * self.d + c] += self.values[base + c] as f64;
                }
            }
        }
        let inv = 1.0 / self.p as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        Tensor::matrix(self.t, self.d, out).expect("validated shape")
    }

    /// Every patch token of frames `start..start+len`: `(len·P) × D`,
    /// frame-major.
    pub fn patch_tokens(&self, start: usize, len: usize) -> Tensor {
        let lo = start * self.p * self.d;
        let hi = (start + len) * self.p * self.d;
        let data = self.values[lo..hi].iter().map(|&v| v as f64).collect();
        Tensor::matrix(len * self.p, self.d, data).expect("validated shape")
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(FEATURE_MAGIC)?;
        for v in [FEATURE_VERSION, self.t as u32, self.d as u32, self.p as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Parses a feature file; `video_id` is not stored in the file.
    pub fn read_from(video_id: &str, mut r: impl Read) -> Result<Self, DataError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(io_err(Path::new(video_id)))?;
        if bytes.len() < 4 {
            return Err(DataError::TruncatedFile);
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if &magic != FEATURE_MAGIC {
            return Err(DataError::BadMagic(magic));
        }
        if bytes.len() < 20 {
            return Err(DataError::TruncatedFile);
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
        if word(0) != FEATURE_VERSION {
            return Err(DataError::UnsupportedVersion(word(0)));
        }
        let (t, d, p) = (word(1) as usize, word(2) as usize, word(3) as usize);
        let n = t * d * p;
        let body = &bytes[20..];
        if body.len() < n * 4 {
            return Err(DataError::TruncatedFile);
        }
        if body.len() > n * 4 {
            return Err(DataError::TrailingBytes(body.len() - n * 4));
        }
        let values = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Self::new(video_id, t, d, p, values)
    }
}

pub fn save_features(path: impl AsRef<Path>, features: &FeatureSequence) -> Result<(), DataError> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(20 + features.values.len() * 4);
    features.write_to(&mut buf).expect("writing to a Vec");
    std::fs::write(path, buf).map_err(io_err(path))
}

/// Loads a feature file; the video id is taken from the file stem.
pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureSequence, DataError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    FeatureSequence::read_from(id, bytes.as_slice())
}

/// Step-level annotation of one action instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProcedureAnnotation {
    pub video_id: String,
    pub action_code: DiveCode,
    pub difficulty: f64,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge_scores: Option<Vec<f64>>,
    pub frame_count: usize,
    /// Frame index closing each step except the last, strictly increasing.
    pub boundaries: Vec<usize>,
}

impl ProcedureAnnotation {
    pub fn validate(&self, lexicon: &Lexicon) -> Result<(), DataError> {
        let invalid = |reason: String| DataError::InvalidAnnotation {
            video_id: self.video_id.clone(),
            reason,
        };
        if !(self.score >= 0.0 && self.score.is_finite()) {
            return Err(invalid(format!("score {} must be finite and non-negative", self.score)));
        }
        if !self.difficulty.is_finite() {
            return Err(invalid("difficulty must be finite".into()));
        }
        let steps = lexicon.step_count(self.action_code.as_str())?;
        if self.boundaries.len() + 1 != steps {
            return Err(invalid(format!(
                "{} has {steps} steps but {} boundaries were given",
                self.action_code,
                self.boundaries.len()
            )));
        }
        if self.boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("boundaries must be strictly increasing".into()));
        }
        if self
            .boundaries
            .iter()
            .any(|&b| b < 1 || b + 1 > self.frame_count)
        {
            return Err(invalid(format!(
                "boundaries must lie in 1..={}",
                self.frame_count.saturating_sub(1)
            )));
        }
        Ok(())
    }
}

pub fn annotations_from_json(json: &str, lexicon: &Lexicon) -> Result<Vec<ProcedureAnnotation>, DataError> {
    let records: Vec<ProcedureAnnotation> = serde_json::from_str(json)?;
    for r in &records {
        r.validate(lexicon)?;
    }
    Ok(records)
}

pub fn load_annotations(path: impl AsRef<Path>, lexicon: &Lexicon) -> Result<Vec<ProcedureAnnotation>, DataError> {
    let path = path.as_ref();
    let json = std::fs::read_to_string(path).map_err(io_err(path))?;
    annotations_from_json(&json, lexicon)
}

pub fn save_annotations(path: impl AsRef<Path>, records: &[ProcedureAnnotation]) -> Result<(), DataError> {
    let path = path.as_ref();
    let json = serde_json::to_string_pretty(records)?;
    std::fs::write(path, json).map_err(io_err(path))
}

/// Maps a 1-based frame index onto a timeline of `t` feature steps:
/// `floor(frame·t / frame_count)` clamped to `1..=t`.
pub fn frame_to_feature_index(frame: usize, frame_count: usize, t: usize) -> Result<usize, DataError> {
    if frame < 1 || frame > frame_count {
        return Err(DataError::OutOfRange { frame, frame_count });
    }
    Ok((frame * t / frame_count).clamp(1, t))
}

/// Features plus annotation for one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: FeatureSequence,
    pub annotation: ProcedureAnnotation,
}

/// Loads an annotation file and the matching `<video_id>.fdft` files from
/// `features_dir`.
pub fn load_dataset(
    annotations: impl AsRef<Path>,
    features_dir: impl AsRef<Path>,
    lexicon: &Lexicon,
) -> Result<Vec<Sample>, DataError> {
    let records = load_annotations(annotations, lexicon)?;
    records
        .into_iter()
        .map(|annotation| {
            let path = features_dir.as_ref().join(format!("{}.fdft", annotation.video_id));
            if !path.exists() {
                return Err(DataError::MissingFeatures(annotation.video_id.clone()));
            }
            let mut features = load_features(&path)?;
            features.video_id = annotation.video_id.clone();
            Ok(Sample { features, annotation })
        })
        .collect()
}

/// Writes samples as `annotations.json` plus one feature file per instance
/// under `features/`.
pub fn save_dataset(dir: impl AsRef<Path>, samples: &[Sample]) -> Result<(), DataError> {
    let dir = dir.as_ref();
    let fdir = dir.join("features");
    std::fs::create_dir_all(&fdir).map_err(io_err(&fdir))?;
    for s in samples {
        save_features(fdir.join(format!("{}.fdft", s.features.video_id)), &s.features)?;
    }
    let records: Vec<_> = samples.iter().map(|s| s.annotation.clone()).collect();
    save_annotations(dir.join("annotations.json"), &records)
}

/// Splits into train/test, stratified by action code so every test code
/// also appears in training. Deterministic per seed.
pub fn split_stratified(samples: Vec<Sample>, train_fraction: f64, seed: u64) -> (Vec<Sample>, Vec<Sample>) {
    let mut groups: BTreeMap<DiveCode, Vec<Sample>> = BTreeMap::new();
    for s in samples {
        groups.entry(s.annotation.action_code.clone()).or_default().push(s);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (_, mut group) in groups {
        group.shuffle(&mut rng);
        let n_train = ((group.len() as f64 * train_fraction).round() as usize).clamp(1, group.len());
        let rest = group.split_off(n_train);
        train.extend(group);
        test.extend(rest);
    }
    (train, test)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub t: usize,
    pub d: usize,
    pub p: usize,
    pub n: usize,
    pub sigma: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub seed: u64,
    /// Number of canonical transitions.
    pub transitions: usize,
    /// Standard deviation of each sub-action embedding coordinate.
    pub embedding_scale: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            t: 48,
            d: 32,
            p: 1,
            n: 800,
            sigma: 0.1,
            y_min: 0.0,
            y_max: 10.0,
            seed: 0,
            transitions: 2,
            embedding_scale: 3.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidConfig(m.to_string()));
        if !(self.sigma >= 0.0) {
            return bad("sigma must be >= 0");
        }
        if !(self.y_max > self.y_min) {
            return bad("y_max must exceed y_min");
        }
        if self.d == 0 || self.p == 0 {
            return bad("d and p must be positive");
        }
        if self.transitions != 2 {
            return bad("the generator places exactly 2 canonical transitions");
        }
        // Room for the 5-step dives: 4 boundaries, the last below t.
        if self.t < 2 * self.transitions + 2 {
            return bad("t too short for a 5-step procedure");
        }
        Ok(())
    }
}

/// Fixed random quantities shared by all instances of one seed: a
/// unit quality direction and one embedding per sub-action name.
#[derive(Clone, Debug)]
pub struct SynthWorld {
    pub quality_direction: Vec<f64>,
    pub embeddings: BTreeMap<String, Vec<f64>>,
    config: SynthConfig,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

impl SynthWorld {
    pub fn new(config: &SynthConfig, lexicon: &Lexicon) -> Result<Self, DataError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5157_0000);
        let mut u: Vec<f64> = (0..config.d).map(|_| gaussian(&mut rng)).collect();
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        u.iter_mut().for_each(|v| *v /= norm);
        let embeddings = lexicon
            .sub_action_names()
            .into_iter()
            .map(|name| {
                let e = (0..config.d).map(|_| config.embedding_scale * gaussian(&mut rng)).collect();
                (name, e)
            })
            .collect();
        Ok(Self {
            quality_direction: u,
            embeddings,
            config: config.clone(),
        })
    }

    /// Renders one instance.
    ///
    /// `boundaries` close every sub-action step but the last; the first and
    /// last are the canonical transitions delimiting `qualities` (one per
    /// canonical step).
    pub fn render(
        &self,
        video_id: &str,
        code: &DiveCode,
        boundaries: &[usize],
        qualities: &[f64],
        lexicon: &Lexicon,
        rng: &mut ChaCha8Rng,
    ) -> Result<Sample, DataError> {
        let cfg = &self.config;
        let seq = lexicon.parse_dive_code(code.as_str())?;
        let canonical = crate::lexicon::canonical_from_boundaries(boundaries)?;
        if qualities.len() != canonical.len() + 1 {
            return Err(DataError::InvalidConfig(format!(
                "expected {} step qualities, got {}",
                canonical.len() + 1,
                qualities.len()
            )));
        }
        let mut values = Vec::with_capacity(cfg.t * cfg.p * cfg.d);
        for frame in 1..=cfg.t {
            let sub = boundaries.iter().filter(|&&b| b < frame).count();
            let step = canonical.iter().filter(|&&b| b < frame).count();
            let emb = &self.embeddings[&seq.steps[sub].name];
            let q = qualities[step];
            for _ in 0..cfg.p {
                for c in 0..cfg.d {
                    let noise = if cfg.sigma > 0.0 { cfg.sigma * gaussian(rng) } else { 0.0 };
                    values.push((emb[c] + q * self.quality_direction[c] + noise) as f32);
                }
            }
        }
        let mean_q = qualities.iter().sum::<f64>() / qualities.len() as f64;
        let annotation = ProcedureAnnotation {
            video_id: video_id.to_string(),
            action_code: code.clone(),
            // Synthetic instances carry no difficulty degree.
            difficulty: 0.0,
            score: cfg.y_min + (cfg.y_max - cfg.y_min) * mean_q,
            judge_scores: None,
            frame_count: cfg.t,
            boundaries: boundaries.to_vec(),
        };
        annotation.validate(lexicon)?;
        Ok(Sample {
            features: FeatureSequence::new(video_id, cfg.t, cfg.d, cfg.p, values)?,
            annotation,
        })
    }
}

/// Draws boundaries for a `steps`-step dive: canonical transitions inside
/// the windows `((t/2)(k−1), (t/2)k]`, the last kept below `t` so the final
/// step is non-empty, and any extra flight boundaries strictly between them.
fn draw_boundaries(t: usize, steps: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let half = t / 2;
    loop {
        let first = rng.gen_range(1..=half);
        let last = rng.gen_range(half + 1..t);
        let inner = steps - 3;
        if last - first < inner + 1 {
            continue;
        }
        let mut mids: Vec<usize> = (first + 1..last).collect::<Vec<_>>().choose_multiple(rng, inner).copied().collect();
        mids.sort_unstable();
        let mut b = vec![first];
        b.extend(mids);
        b.push(last);
        return b;
    }
}

/// Generates `config.n` instances with the action code drawn uniformly from
/// the lexicon. Deterministic per seed.
pub fn generate_synthetic(config: &SynthConfig, lexicon: &Lexicon) -> Result<Vec<Sample>, DataError> {
    let world = SynthWorld::new(config, lexicon)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let codes = lexicon.codes();
    (0..config.n)
        .map(|i| {
            let code = codes[rng.gen_range(0..codes.len())].clone();
            let steps = lexicon.step_count(code.as_str())?;
            let boundaries = draw_boundaries(config.t, steps, &mut rng);
            let qualities: Vec<f64> = (0..=config.transitions).map(|_| rng.gen::<f64>()).collect();
            world.render(&format!("synth{:03}_{i:05}", config.seed), &code, &boundaries, &qualities, lexicon, &mut rng)
        })
        .collect()
}
