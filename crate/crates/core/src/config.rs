//! One declarative run configuration, read from TOML with dotted-key
//! overrides layered on top: command line, then file, then defaults.
//!
//! Every field has a default and unknown keys are rejected. The defaults
//! describe the synthetic-corpus pipeline; for recorded speech set `mel.*`
//! (for example 22050 Hz, 1024/256, 80 bands) and `model.n_mels` to match.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::{MelConfig, Split, ToyConfig};
use crate::encoders::stable_seed;
use crate::error::{Error, Result};
use crate::eval::PitchConfig;
use crate::inference::SolverConfig;
use crate::score_model::ScoreModelConfig;
use crate::sde::NoiseSchedule;
use crate::training::{LambdaMode, TrainConfig};

/// Per-stage seeds. Unset stages derive theirs from `master`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub master: u64,
    pub toy: Option<u64>,
    pub init: Option<u64>,
    pub train: Option<u64>,
    pub convert: Option<u64>,
}

impl Seeds {
    /// 63 bits, so the value fits a TOML integer.
    fn derive(&self, stage: &str) -> u64 {
        stable_seed(&[b"seed", &self.master.to_le_bytes(), stage.as_bytes()]) >> 1
    }

    pub fn toy(&self) -> u64 {
        self.toy.unwrap_or_else(|| self.derive("toy"))
    }

    pub fn init(&self) -> u64 {
        self.init.unwrap_or_else(|| self.derive("init"))
    }

    pub fn train(&self) -> u64 {
        self.train.unwrap_or_else(|| self.derive("train"))
    }

    pub fn convert(&self) -> u64 {
        self.convert.unwrap_or_else(|| self.derive("convert"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Existing manifest; when unset the toy corpus under `<out>/data` is used.
    pub manifest: Option<PathBuf>,
    pub toy_utterances: usize,
    pub train_splits: Vec<Split>,
    /// Reference utterances for the embedding bank.
    pub bank_splits: Vec<Split>,
    /// Sources for batch conversion.
    pub convert_splits: Vec<Split>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            toy_utterances: 100,
            train_splits: vec![Split::Train],
            bank_splits: vec![Split::Train, Split::Valid],
            convert_splits: vec![Split::Test],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Frames averaged per step of the phoneme-level prior.
    pub phoneme_window: usize,
    pub speaker_dim: usize,
    pub emotion_dim: usize,
    /// Precomputed speaker/emotion embeddings; the mock encoders are used
    /// when unset.
    pub cache: Option<PathBuf>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            phoneme_window: 8,
            speaker_dim: 128,
            emotion_dim: 8,
            cache: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    /// Fraction of each bin averaged into the bank.
    pub bank_p: f64,
    /// Targets swept per source in batch conversion.
    pub targets: Vec<f64>,
    pub write_audio: bool,
    pub solver: SolverConfig,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            bank_p: 0.2,
            targets: (1..=7).map(f64::from).collect(),
            write_audio: true,
            solver: SolverConfig {
                fallback_to_nearest_bin: true,
                ..SolverConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContourSource {
    /// Spectral-centroid track of the mel; meaningful on the toy corpus.
    #[default]
    CentroidProxy,
    /// Autocorrelation pitch of the rendered audio.
    Autocorrelation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub contour: ContourSource,
    pub pitch: PitchConfig,
    /// Hz range the centroid proxy is mapped onto.
    pub proxy_hz: (f64, f64),
    /// Number of sources that get a diagnostics plot.
    pub plots: usize,
    /// JSON object of offline quality scores keyed by output id.
    pub quality_scores: Option<PathBuf>,
    /// JSON object of arousal predictions keyed by output id, for encoders
    /// that cannot score new audio.
    pub predictions: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            contour: ContourSource::CentroidProxy,
            pitch: PitchConfig::default(),
            proxy_hz: (80.0, 300.0),
            plots: 3,
            quality_scores: None,
            predictions: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub x0: f64,
    pub y: f64,
    pub n_paths: usize,
    pub n_steps: usize,
    pub times: Vec<f64>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            x0: 2.0,
            y: 0.0,
            n_paths: 10_000,
            n_steps: 1000,
            times: vec![0.25, 0.5, 0.75, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seeds: Seeds,
    pub schedule: NoiseSchedule,
    pub mel: MelConfig,
    pub model: ScoreModelConfig,
    pub encoders: EncoderConfig,
    pub data: DataConfig,
    pub toy: ToyConfig,
    pub training: TrainConfig,
    pub inference: InferenceConfig,
    pub eval: EvalConfig,
    pub simulate: SimulateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mel = MelConfig::toy();
        let encoders = EncoderConfig::default();
        Self {
            seeds: Seeds::default(),
            schedule: NoiseSchedule::default(),
            model: ScoreModelConfig {
                n_mels: mel.n_mels,
                base_channels: 16,
                depth: 2,
                time_embed_dim: 32,
                speaker_dim: encoders.speaker_dim,
                emotion_dim: encoders.emotion_dim,
                sigma_data: 1.0,
            },
            mel,
            encoders,
            data: DataConfig::default(),
            toy: ToyConfig::default(),
            training: TrainConfig {
                n_steps: 4000,
                learning_rate: 1e-3,
                lr_final_fraction: 0.05,
                lambda_mode: LambdaMode::OnX0,
                checkpoint_every: 1000,
                ..TrainConfig::default()
            },
            inference: InferenceConfig::default(),
            eval: EvalConfig::default(),
            simulate: SimulateConfig::default(),
        }
    }
}

impl RunConfig {
    /// Defaults, then `file` (if any), then each `key.path=value` override.
    /// Values parse as TOML literals and fall back to plain strings.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = toml::Table::try_from(RunConfig::default()).expect("defaults serialise");
        if let Some(p) = file {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let from_file = text
                .parse::<toml::Table>()
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            merge(&mut doc, from_file);
        }
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.mel.validate()?;
        self.model.validate()?;
        self.toy.validate()?;
        self.training.validate()?;
        self.inference.solver.validate()?;
        if self.model.n_mels != self.mel.n_mels {
            return Err(Error::Config(format!(
                "model.n_mels = {} but mel.n_mels = {}",
                self.model.n_mels, self.mel.n_mels
            )));
        }
        if self.model.speaker_dim != self.encoders.speaker_dim || self.model.emotion_dim != self.encoders.emotion_dim {
            return Err(Error::Config(
                "model.speaker_dim / model.emotion_dim must match the encoders section".into(),
            ));
        }
        if !(self.inference.bank_p > 0.0 && self.inference.bank_p <= 1.0) {
            return Err(Error::Config("inference.bank_p must lie in (0, 1]".into()));
        }
        if let Some(bad) = self.inference.targets.iter().find(|t| !(1.0..=7.0).contains(*t)) {
            return Err(Error::Config(format!("inference.targets contains {bad}, outside [1, 7]")));
        }
        if self.simulate.n_paths < 2 || self.simulate.n_steps == 0 {
            return Err(Error::Config("simulate needs n_paths ≥ 2 and n_steps ≥ 1".into()));
        }
        if let Some(t) = self.simulate.times.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::Config(format!("simulate.times contains {t}, outside [0, 1]")));
        }
        if self.encoders.phoneme_window == 0 {
            return Err(Error::Config("encoders.phoneme_window must be ≥ 1".into()));
        }
        if self.data.toy_utterances == 0 {
            return Err(Error::Config("data.toy_utterances must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Copy with every derived seed written out, so the document alone
    /// reproduces the run.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.seeds = Seeds {
            master: self.seeds.master,
            toy: Some(self.seeds.toy()),
            init: Some(self.seeds.init()),
            train: Some(self.seeds.train()),
            convert: Some(self.seeds.convert()),
        };
        c.training.seed = c.seeds.train();
        c
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    /// SHA-256 of the TOML rendering, hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Recursive table merge; `top` wins.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
