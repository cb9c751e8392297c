//! Synthetic corpus whose arousal is carried by the spectral tilt of the mel.
//!
//! Each utterance is `base + speaker offset + phonetic content + tilt`, with
//! the content piecewise constant over fixed segments and zero-mean per row,
//! and the tilt solved so that the centroid proxy reads back the label.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{mel_sidecar_path, write_manifest, Split, UtteranceRecord};
use super::{mel_invert, normalize_peak, write_wav, MelConfig};
use crate::encoders::{ArousalLabel, ArousalProxy};
use crate::error::{Error, Result};
use crate::mel::MelSpectrogram;

/// How toy arousal labels are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LabelDistribution {
    /// Every bin gets members, so each conversion target has references.
    Uniform { lo: f64, hi: f64 },
    /// Clamped to `[1, 7]`. Closer to natural corpora, where extremes are rare.
    Normal { mean: f64, sd: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub n_speakers: usize,
    pub frame_choices: Vec<usize>,
    pub segment: usize,
    pub n_phonemes: usize,
    pub labels: LabelDistribution,
    pub content_scale: f64,
    pub speaker_scale: f64,
    pub render_audio: bool,
    pub proxy: ArousalProxy,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            n_speakers: 8,
            frame_choices: vec![24, 32, 40],
            segment: 8,
            n_phonemes: 6,
            labels: LabelDistribution::Uniform { lo: 1.0, hi: 7.0 },
            content_scale: 0.6,
            speaker_scale: 0.2,
            render_audio: true,
            proxy: ArousalProxy::default(),
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_speakers == 0 || self.n_phonemes == 0 || self.segment == 0 {
            return Err(Error::Config("toy data needs speakers, phonemes and segments".into()));
        }
        if self.frame_choices.is_empty() || self.frame_choices.contains(&0) {
            return Err(Error::Config("toy frame choices must be non-empty and positive".into()));
        }
        let labels_ok = match self.labels {
            LabelDistribution::Uniform { lo, hi } => (1.0..=7.0).contains(&lo) && lo < hi && hi <= 7.0,
            LabelDistribution::Normal { sd, .. } => sd >= 0.0,
        };
        if !labels_ok || !(self.proxy.lo < self.proxy.hi) {
            return Err(Error::Config(
                "toy labels need 1 ≤ lo < hi ≤ 7 or sd ≥ 0, and proxy lo < hi".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub root: PathBuf,
    pub manifest_path: PathBuf,
    pub records: Vec<UtteranceRecord>,
}

/// Tilt direction: zero-mean ramp across mel rows.
fn ramp(n: usize) -> Array1<f64> {
    Array1::from_shape_fn(n, |k| k as f64 / (n - 1) as f64 - 0.5)
}

/// Solves for the tilt that puts the centroid at `target`; the centroid is
/// strictly increasing in the tilt, so bisection converges.
fn solve_tilt(body: &Array2<f64>, target: f64) -> Result<Array2<f64>> {
    let r = ramp(body.nrows());
    let with = |g: f64| {
        let mut x = body.clone();
        for (mut row, &rk) in x.rows_mut().into_iter().zip(r.iter()) {
            row += g * rk;
        }
        x
    };
    let (mut lo, mut hi) = (-200.0, 200.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if ArousalProxy::centroid_position(&with(mid)) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let x = with(0.5 * (lo + hi));
    if (ArousalProxy::centroid_position(&x) - target).abs() > 1e-9 {
        return Err(Error::contract("toy tilt solve did not reach the target centroid"));
    }
    Ok(x)
}

/// Generates `n_utts` utterances under `out_dir`: `manifest.jsonl`, plus
/// `wav/<id>.wav` (when rendering) and the exact `wav/<id>.mel` sidecar.
/// `mel.n_mels` sets the height and `mel` also drives audio rendering.
pub fn make_toy_dataset(n_utts: usize, seed: u64, out_dir: &Path, cfg: &ToyConfig, mel: &MelConfig) -> Result<ToyDataset> {
    if n_utts == 0 {
        return Err(Error::contract("toy dataset needs at least one utterance"));
    }
    cfg.validate()?;
    mel.validate()?;
    if mel.n_mels < 2 {
        return Err(Error::Config("toy data needs at least two mel rows".into()));
    }
    let n = mel.n_mels;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = Normal::new(0.0, 1.0).unwrap();
    let gauss = |rng: &mut ChaCha8Rng, scale: f64| -> Array1<f64> {
        Array1::from_shape_fn(n, |_| scale * std.sample(rng))
    };

    let base = Array1::from_shape_fn(n, |k| -1.0 - 1.5 * k as f64 / (n - 1) as f64);
    let speakers: Vec<Array1<f64>> = (0..cfg.n_speakers).map(|_| gauss(&mut rng, cfg.speaker_scale)).collect();
    let phonemes: Vec<Array1<f64>> = (0..cfg.n_phonemes).map(|_| gauss(&mut rng, cfg.content_scale)).collect();

    let normal = match cfg.labels {
        LabelDistribution::Normal { mean, sd } => {
            Some(Normal::new(mean, sd).map_err(|e| Error::Config(format!("toy label distribution: {e}")))?)
        }
        LabelDistribution::Uniform { .. } => None,
    };
    let mut order: Vec<usize> = (0..n_utts).collect();
    order.shuffle(&mut rng);
    let n_train = ((0.8 * n_utts as f64).round() as usize).max(1);
    let n_valid = ((0.1 * n_utts as f64).round() as usize).min(n_utts - n_train);
    let mut split = vec![Split::Test; n_utts];
    for (rank, &i) in order.iter().enumerate() {
        split[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_valid {
            Split::Valid
        } else {
            Split::Test
        };
    }

    let wav_dir = out_dir.join("wav");
    fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    let mut records = Vec::with_capacity(n_utts);
    for i in 0..n_utts {
        let label = match (cfg.labels, &normal) {
            (LabelDistribution::Uniform { lo, hi }, _) => rng.gen_range(lo..=hi),
            (_, Some(d)) => d.sample(&mut rng).clamp(1.0, 7.0),
            (_, None) => unreachable!("normal distribution built above"),
        };
        let spk = rng.gen_range(0..cfg.n_speakers);
        let frames = *cfg.frame_choices.choose(&mut rng).unwrap();
        let mut content = Array2::zeros((n, frames));
        let mut t0 = 0;
        while t0 < frames {
            let p = &phonemes[rng.gen_range(0..cfg.n_phonemes)];
            for t in t0..(t0 + cfg.segment).min(frames) {
                content.column_mut(t).assign(p);
            }
            t0 += cfg.segment;
        }
        for mut row in content.rows_mut() {
            let m = row.mean().unwrap();
            row -= m;
        }
        let mut body = content;
        for t in 0..frames {
            let mut col = body.column_mut(t);
            col += &base;
            col += &speakers[spk];
        }
        let x = solve_tilt(&body, cfg.proxy.position_for_arousal(label))?;

        let id = format!("toy{i:05}");
        let audio_rel = format!("wav/{id}.wav");
        let audio_path = out_dir.join(&audio_rel);
        let spec = MelSpectrogram::new(x, mel.frame_rate())?;
        spec.write_file(&mel_sidecar_path(&audio_path))?;
        if cfg.render_audio {
            let mut wave = mel_invert(&spec, mel)?;
            normalize_peak(&mut wave, 0.5);
            write_wav(&audio_path, &wave, mel.sample_rate)?;
        }
        records.push(UtteranceRecord {
            utterance_id: id,
            audio_path: audio_rel,
            speaker_id: format!("spk{spk:02}"),
            arousal: ArousalLabel::new(label)?,
            split: split[i],
        });
    }
    let manifest_path = out_dir.join("manifest.jsonl");
    write_manifest(&manifest_path, &records)?;
    Ok(ToyDataset {
        root: out_dir.to_path_buf(),
        manifest_path,
        records,
    })
}
