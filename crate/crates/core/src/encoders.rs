//! Phoneme ("average voice"), speaker and emotion encoders.
//!
//! The encoders are traits so pretrained models can be plugged in through
//! the [`EmbeddingCache`]. The mock implementations are deterministic
//! stand-ins:
//!
//! * [`WindowAverageEncoder`] removes each mel row's temporal mean and
//!   averages fixed-length pseudo-phoneme windows;
//! * [`HashedSpeakerEncoder`] maps a speaker id to a seeded random unit vector;
//! * [`CentroidEmotionEncoder`] reads arousal off the energy-weighted spectral
//!   centroid of the mel and embeds it with a smooth injective feature map.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::UtteranceRecord;
use crate::error::{Error, Result};
use crate::mel::MelSpectrogram;

pub const AROUSAL_MIN: f64 = 1.0;
pub const AROUSAL_MAX: f64 = 7.0;

/// Continuous arousal on the 1..7 annotation scale.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct ArousalLabel(f64);

impl ArousalLabel {
    pub fn new(value: f64) -> Result<Self> {
        if (AROUSAL_MIN..=AROUSAL_MAX).contains(&value) {
            Ok(Self(value))
        } else {
            Err(Error::ArousalRange {
                value,
                context: None,
            })
        }
    }

    /// Clamps into range; for values produced by regressors.
    pub fn saturating(value: f64) -> Self {
        Self(value.clamp(AROUSAL_MIN, AROUSAL_MAX))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// `(a − 1) / 6`, in `[0, 1]`.
    pub fn normalized(self) -> f64 {
        normalize_arousal(self.0)
    }

    /// Nearest integer class `1..=7` (halves round up).
    pub fn bin(self) -> u8 {
        arousal_bin(self.0)
    }
}

impl TryFrom<f64> for ArousalLabel {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ArousalLabel> for f64 {
    fn from(a: ArousalLabel) -> f64 {
        a.0
    }
}

pub fn normalize_arousal(a: f64) -> f64 {
    (a - AROUSAL_MIN) / (AROUSAL_MAX - AROUSAL_MIN)
}

pub fn denormalize_arousal(u: f64) -> f64 {
    AROUSAL_MIN + u * (AROUSAL_MAX - AROUSAL_MIN)
}

pub(crate) fn arousal_bin(a: f64) -> u8 {
    (a.round() as i64).clamp(1, 7) as u8
}

/// Unit-norm d-vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerEmbedding(Vec<f64>);

impl SpeakerEmbedding {
    pub fn new(v: Vec<f64>) -> Result<Self> {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if v.is_empty() || (norm - 1.0).abs() > 1e-6 {
            return Err(Error::contract(format!(
                "speaker embedding must have unit norm, got {norm}"
            )));
        }
        Ok(Self(v))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmotionEmbedding(Vec<f64>);

impl EmotionEmbedding {
    pub fn new(v: Vec<f64>) -> Result<Self> {
        if v.is_empty() || !v.iter().all(|x| x.is_finite()) {
            return Err(Error::contract("emotion embedding must be non-empty and finite"));
        }
        Ok(Self(v))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

pub trait PhonemeEncoder: Send + Sync {
    fn encode(&self, mel: &MelSpectrogram) -> Result<MelSpectrogram>;
}

pub trait SpeakerEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode(&self, record: &UtteranceRecord) -> Result<SpeakerEmbedding>;
}

pub trait EmotionEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, id: &str, mel: &MelSpectrogram) -> Result<EmotionEmbedding>;
    fn predict_arousal(&self, id: &str, mel: &MelSpectrogram) -> Result<ArousalLabel>;
}

/// Row-mean removal followed by averaging over fixed windows of frames.
#[derive(Debug, Clone, Copy)]
pub struct WindowAverageEncoder {
    pub window: usize,
}

impl Default for WindowAverageEncoder {
    fn default() -> Self {
        Self { window: 8 }
    }
}

impl PhonemeEncoder for WindowAverageEncoder {
    fn encode(&self, mel: &MelSpectrogram) -> Result<MelSpectrogram> {
        if self.window == 0 {
            return Err(Error::Config("phoneme window must be at least one frame".into()));
        }
        let x = mel.values();
        let (n, frames) = x.dim();
        let mut out = Array2::zeros((n, frames));
        for k in 0..n {
            let row = x.row(k);
            let mean = row.sum() / frames as f64;
            let mut start = 0;
            while start < frames {
                let end = (start + self.window).min(frames);
                let avg = row.slice(ndarray::s![start..end]).sum() / (end - start) as f64 - mean;
                out.row_mut(k).slice_mut(ndarray::s![start..end]).fill(avg);
                start = end;
            }
        }
        mel.with_values(out)
    }
}

/// Seeded random unit vector per speaker id.
#[derive(Debug, Clone, Copy)]
pub struct HashedSpeakerEncoder {
    pub dim: usize,
}

impl Default for HashedSpeakerEncoder {
    fn default() -> Self {
        Self { dim: 128 }
    }
}

pub fn stable_seed(parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

impl SpeakerEncoder for HashedSpeakerEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, record: &UtteranceRecord) -> Result<SpeakerEmbedding> {
        if record.speaker_id.trim().is_empty() {
            return Err(Error::contract(format!(
                "utterance `{}` has no speaker id",
                record.utterance_id
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(stable_seed(&[b"speaker", record.speaker_id.as_bytes()]));
        let v = crate::sde::standard_normal(&mut rng, (1, self.dim)).into_raw_vec_and_offset().0;
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        SpeakerEmbedding::new(v.into_iter().map(|x| x / norm).collect())
    }
}

/// Toy arousal proxy: energy-weighted spectral centroid of a log-mel,
/// mapped affinely from the relative centroid position `[lo, hi]` onto `[1, 7]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArousalProxy {
    pub lo: f64,
    pub hi: f64,
}

impl Default for ArousalProxy {
    fn default() -> Self {
        Self { lo: 0.3, hi: 0.7 }
    }
}

impl ArousalProxy {
    /// Centroid of `Σ_t exp(x[k, t])` over mel rows, as a fraction of `n − 1`.
    pub fn centroid_position(values: &Array2<f64>) -> f64 {
        let n = values.nrows();
        if n < 2 {
            return 0.5;
        }
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let (mut num, mut den) = (0.0, 0.0);
        for (k, row) in values.rows().into_iter().enumerate() {
            let e: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            num += k as f64 * e;
            den += e;
        }
        num / den / (n - 1) as f64
    }

    /// Per-frame centroid positions, the toy stand-in for a pitch contour.
    pub fn centroid_track(values: &Array2<f64>) -> Vec<f64> {
        values
            .columns()
            .into_iter()
            .map(|c| Self::centroid_position(&c.to_owned().insert_axis(ndarray::Axis(1))))
            .collect()
    }

    pub fn arousal_for_position(&self, p: f64) -> f64 {
        (AROUSAL_MIN + (AROUSAL_MAX - AROUSAL_MIN) * (p - self.lo) / (self.hi - self.lo))
            .clamp(AROUSAL_MIN, AROUSAL_MAX)
    }

    pub fn position_for_arousal(&self, a: f64) -> f64 {
        self.lo + (self.hi - self.lo) * normalize_arousal(a)
    }

    pub fn arousal(&self, values: &Array2<f64>) -> f64 {
        self.arousal_for_position(Self::centroid_position(values))
    }
}

/// Mock SER system built on [`ArousalProxy`].
#[derive(Debug, Clone, Copy)]
pub struct CentroidEmotionEncoder {
    pub dim: usize,
    pub proxy: ArousalProxy,
}

impl CentroidEmotionEncoder {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            proxy: ArousalProxy::default(),
        }
    }
}

/// Smooth injective feature map of arousal: the normalised value followed by
/// Gaussian bumps spread evenly over the normalised range.
pub fn arousal_features(a: f64, dim: usize) -> Vec<f64> {
    let u = normalize_arousal(a);
    let mut out = Vec::with_capacity(dim);
    out.push(u);
    let bumps = dim.saturating_sub(1);
    for k in 0..bumps {
        let c = if bumps == 1 { 0.5 } else { k as f64 / (bumps - 1) as f64 };
        out.push((-(u - c).powi(2) / (2.0 * BUMP_WIDTH * BUMP_WIDTH)).exp());
    }
    out
}

const BUMP_WIDTH: f64 = 0.15;

/// Inverse of [`arousal_features`] (reads the leading coordinate).
pub fn arousal_from_features(e: &[f64]) -> ArousalLabel {
    ArousalLabel::saturating(denormalize_arousal(e[0]))
}

impl EmotionEncoder for CentroidEmotionEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, _id: &str, mel: &MelSpectrogram) -> Result<EmotionEmbedding> {
        EmotionEmbedding::new(arousal_features(self.proxy.arousal(mel.values()), self.dim))
    }

    fn predict_arousal(&self, id: &str, mel: &MelSpectrogram) -> Result<ArousalLabel> {
        Ok(arousal_from_features(self.embed(id, mel)?.as_slice()))
    }
}

/// Embeddings for one utterance as computed by external tooling.
#[derive(Debug, Clone, PartialEq)]
pub struct CachedEmbeddings {
    pub speaker: Vec<f32>,
    pub emotion: Vec<f32>,
    pub arousal_pred: f32,
}

/// Per-split embedding table keyed by utterance id.
///
/// File layout, all little-endian: magic `EMBC`, u32 version (1), u32
/// speaker dim, u32 emotion dim, u32 record count, then per record (sorted by
/// id): u32 id byte length, UTF-8 id, speaker f32 x dim, emotion f32 x dim,
/// arousal prediction f32.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCache {
    speaker_dim: usize,
    emotion_dim: usize,
    entries: BTreeMap<String, CachedEmbeddings>,
}

const CACHE_MAGIC: &[u8; 4] = b"EMBC";
const CACHE_VERSION: u32 = 1;

impl EmbeddingCache {
    pub fn new(speaker_dim: usize, emotion_dim: usize) -> Self {
        Self {
            speaker_dim,
            emotion_dim,
            entries: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn store(&mut self, id: &str, emb: CachedEmbeddings) -> Result<()> {
        self.check_dims(&emb)?;
        self.entries.insert(id.to_owned(), emb);
        Ok(())
    }

    pub fn load(&self, id: &str) -> Result<&CachedEmbeddings> {
        self.entries
            .get(id)
            .ok_or_else(|| Error::MissingEmbedding(id.to_owned()))
    }

    fn check_dims(&self, emb: &CachedEmbeddings) -> Result<()> {
        if emb.speaker.len() != self.speaker_dim {
            return Err(Error::DimensionMismatch {
                what: "cached speaker embedding",
                expected: self.speaker_dim,
                actual: emb.speaker.len(),
            });
        }
        if emb.emotion.len() != self.emotion_dim {
            return Err(Error::DimensionMismatch {
                what: "cached emotion embedding",
                expected: self.emotion_dim,
                actual: emb.emotion.len(),
            });
        }
        Ok(())
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        let mut b = Vec::new();
        b.extend_from_slice(CACHE_MAGIC);
        for v in [CACHE_VERSION, self.speaker_dim as u32, self.emotion_dim as u32, self.entries.len() as u32] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        for (id, e) in &self.entries {
            b.extend_from_slice(&(id.len() as u32).to_le_bytes());
            b.extend_from_slice(id.as_bytes());
            for v in e.speaker.iter().chain(&e.emotion).chain(std::iter::once(&e.arousal_pred)) {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, b).map_err(|e| Error::io(path, e))
    }

    /// Reads a cache file, checking its dimensions against the configured ones.
    pub fn read_file(path: &Path, speaker_dim: usize, emotion_dim: usize) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::contract(format!("{}: {m}", path.display()));
        let mut cur = Cursor { b: &bytes, pos: 0 };
        if cur.take(4).ok_or_else(|| bad("truncated"))? != CACHE_MAGIC {
            return Err(bad("not an embedding cache"));
        }
        let mut header = [0u32; 4];
        for h in &mut header {
            *h = cur.u32().ok_or_else(|| bad("truncated header"))?;
        }
        let [version, sd, ed, count] = header;
        if version != CACHE_VERSION {
            return Err(bad("unsupported cache version"));
        }
        if sd as usize != speaker_dim {
            return Err(Error::DimensionMismatch {
                what: "cache speaker dimension",
                expected: speaker_dim,
                actual: sd as usize,
            });
        }
        if ed as usize != emotion_dim {
            return Err(Error::DimensionMismatch {
                what: "cache emotion dimension",
                expected: emotion_dim,
                actual: ed as usize,
            });
        }
        let mut cache = Self::new(speaker_dim, emotion_dim);
        for _ in 0..count {
            let len = cur.u32().ok_or_else(|| bad("truncated record"))? as usize;
            let id = std::str::from_utf8(cur.take(len).ok_or_else(|| bad("truncated id"))?)
                .map_err(|_| bad("id is not UTF-8"))?
                .to_owned();
            let mut floats = |n: usize| -> Result<Vec<f32>> {
                (0..n).map(|_| cur.f32().ok_or_else(|| bad("truncated vector"))).collect()
            };
            let speaker = floats(speaker_dim)?;
            let emotion = floats(emotion_dim)?;
            let arousal_pred = floats(1)?[0];
            cache.entries.insert(
                id,
                CachedEmbeddings {
                    speaker,
                    emotion,
                    arousal_pred,
                },
            );
        }
        if cur.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(cache)
    }
}

struct Cursor<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.b.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }
    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }
    fn f32(&mut self) -> Option<f32> {
        Some(f32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }
}

/// Speaker vectors read from an [`EmbeddingCache`] by utterance id.
pub struct CachedSpeakerEncoder(pub Arc<EmbeddingCache>);

impl SpeakerEncoder for CachedSpeakerEncoder {
    fn dim(&self) -> usize {
        self.0.speaker_dim
    }

    fn encode(&self, record: &UtteranceRecord) -> Result<SpeakerEmbedding> {
        let v: Vec<f64> = self.0.load(&record.utterance_id)?.speaker.iter().map(|&x| x as f64).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-4 {
            return Err(Error::contract(format!(
                "cached speaker vector for `{}` is not unit norm ({norm})",
                record.utterance_id
            )));
        }
        SpeakerEmbedding::new(v.into_iter().map(|x| x / norm).collect())
    }
}

/// Emotion vectors and arousal predictions read from an [`EmbeddingCache`].
pub struct CachedEmotionEncoder(pub Arc<EmbeddingCache>);

impl EmotionEncoder for CachedEmotionEncoder {
    fn dim(&self) -> usize {
        self.0.emotion_dim
    }

    fn embed(&self, id: &str, _mel: &MelSpectrogram) -> Result<EmotionEmbedding> {
        EmotionEmbedding::new(self.0.load(id)?.emotion.iter().map(|&x| x as f64).collect())
    }

    fn predict_arousal(&self, id: &str, _mel: &MelSpectrogram) -> Result<ArousalLabel> {
        Ok(ArousalLabel::saturating(self.0.load(id)?.arousal_pred as f64))
    }
}

/// The three encoders the pipeline needs.
pub struct Encoders {
    pub phoneme: Box<dyn PhonemeEncoder>,
    pub speaker: Box<dyn SpeakerEncoder>,
    pub emotion: Box<dyn EmotionEncoder>,
}

impl Encoders {
    pub fn mock(speaker_dim: usize, emotion_dim: usize) -> Self {
        Self {
            phoneme: Box::new(WindowAverageEncoder::default()),
            speaker: Box::new(HashedSpeakerEncoder { dim: speaker_dim }),
            emotion: Box::new(CentroidEmotionEncoder::new(emotion_dim)),
        }
    }

    /// Speaker and emotion from a cache; the phoneme encoder stays the window average.
    pub fn cached(cache: Arc<EmbeddingCache>) -> Self {
        Self {
            phoneme: Box::new(WindowAverageEncoder::default()),
            speaker: Box::new(CachedSpeakerEncoder(cache.clone())),
            emotion: Box::new(CachedEmotionEncoder(cache)),
        }
    }
}
