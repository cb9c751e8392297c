//! Waveform I/O, log-mel analysis and Griffin-Lim resynthesis.

mod manifest;
mod toy;

pub use manifest::{load_manifest, mel_sidecar_path, write_manifest, Split, UtteranceRecord};
pub use toy::{make_toy_dataset, LabelDistribution, ToyConfig, ToyDataset};

use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mel::MelSpectrogram;

/// STFT and mel filterbank parameters. Frames are not centred: frame `i`
/// covers samples `[i·hop, i·hop + n_fft)`, and a waveform shorter than one
/// window is zero-padded to `n_fft`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    /// Defaults to Nyquist when absent.
    pub fmax: Option<f64>,
    pub log_floor: f64,
    pub griffin_lim_iters: usize,
    pub griffin_lim_seed: u64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: 22050,
            n_fft: 1024,
            hop: 256,
            n_mels: 80,
            fmin: 0.0,
            fmax: None,
            log_floor: 1e-5,
            griffin_lim_iters: 60,
            griffin_lim_seed: 0,
        }
    }
}

impl MelConfig {
    /// Small analysis settings sized for the synthetic corpus: 16 bands at 8 kHz.
    pub fn toy() -> Self {
        Self {
            sample_rate: 8000,
            n_fft: 256,
            hop: 64,
            n_mels: 16,
            griffin_lim_iters: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nyquist = self.sample_rate as f64 / 2.0;
        let fmax = self.fmax();
        if self.sample_rate == 0 || self.n_fft < 2 || self.hop == 0 || self.hop > self.n_fft || self.n_mels == 0 {
            return Err(Error::Config(format!(
                "mel config needs sample_rate > 0, 1 ≤ hop ≤ n_fft, n_mels ≥ 1 (got {self:?})"
            )));
        }
        if !(self.fmin >= 0.0 && self.fmin < fmax && fmax <= nyquist) {
            return Err(Error::Config(format!(
                "mel band must satisfy 0 ≤ fmin < fmax ≤ {nyquist}"
            )));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::Config("log floor must be positive".into()));
        }
        Ok(())
    }

    pub fn fmax(&self) -> f64 {
        self.fmax.unwrap_or(self.sample_rate as f64 / 2.0)
    }

    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop as f64
    }

    /// Frame count for a waveform of `len` samples.
    pub fn frames_for(&self, len: usize) -> usize {
        1 + len.saturating_sub(self.n_fft) / self.hop
    }

    /// Sample count Griffin-Lim produces for `frames` frames.
    pub fn samples_for(&self, frames: usize) -> usize {
        self.n_fft + (frames - 1) * self.hop
    }

    fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK-scale filterbank, shape `(n_mels, n_fft/2 + 1)`, peak 1.
pub fn mel_filterbank(cfg: &MelConfig) -> Array2<f64> {
    let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax()));
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
    Array2::from_shape_fn((cfg.n_mels, cfg.n_bins()), |(m, b)| {
        let f = b as f64 * bin_hz;
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        let up = (f - l) / (c - l);
        let down = (r - f) / (r - c);
        up.min(down).max(0.0)
    })
}

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

struct Stft {
    cfg: MelConfig,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Stft {
    fn new(cfg: &MelConfig) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            cfg: cfg.clone(),
            window: hann(cfg.n_fft),
            forward: planner.plan_fft_forward(cfg.n_fft),
            inverse: planner.plan_fft_inverse(cfg.n_fft),
        }
    }

    /// Complex spectra, one `Vec` of `n_fft/2 + 1` bins per frame.
    fn analyse(&self, x: &[f64]) -> Vec<Vec<Complex64>> {
        let n = self.cfg.n_fft;
        let frames = self.cfg.frames_for(x.len());
        let mut buf = vec![Complex64::default(); n];
        (0..frames)
            .map(|i| {
                let start = i * self.cfg.hop;
                for (j, b) in buf.iter_mut().enumerate() {
                    let s = x.get(start + j).copied().unwrap_or(0.0);
                    *b = Complex64::new(s * self.window[j], 0.0);
                }
                self.forward.process(&mut buf);
                buf[..self.cfg.n_bins()].to_vec()
            })
            .collect()
    }

    /// Weighted overlap-add inverse (least-squares estimate for the given spectra).
    fn synthesise(&self, spectra: &[Vec<Complex64>]) -> Vec<f64> {
        let n = self.cfg.n_fft;
        let len = self.cfg.samples_for(spectra.len());
        let mut out = vec![0.0; len];
        let mut norm = vec![0.0; len];
        let mut buf = vec![Complex64::default(); n];
        for (i, spec) in spectra.iter().enumerate() {
            buf[..spec.len()].copy_from_slice(spec);
            for k in 1..n - spec.len() + 1 {
                buf[n - k] = spec[k].conj();
            }
            self.inverse.process(&mut buf);
            let start = i * self.cfg.hop;
            for j in 0..n {
                out[start + j] += buf[j].re / n as f64 * self.window[j];
                norm[start + j] += self.window[j] * self.window[j];
            }
        }
        for (o, w) in out.iter_mut().zip(&norm) {
            if *w > 1e-8 {
                *o /= w;
            }
        }
        out
    }
}

fn check_waveform(x: &[f64]) -> Result<()> {
    if x.is_empty() {
        return Err(Error::contract("waveform is empty"));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::contract("waveform contains non-finite samples"));
    }
    Ok(())
}

/// Natural-log mel magnitude spectrogram, floored at `cfg.log_floor`.
pub fn mel_extract(waveform: &[f64], cfg: &MelConfig) -> Result<MelSpectrogram> {
    cfg.validate()?;
    check_waveform(waveform)?;
    let fb = mel_filterbank(cfg);
    let spectra = Stft::new(cfg).analyse(waveform);
    let mut out = Array2::zeros((cfg.n_mels, spectra.len()));
    for (t, spec) in spectra.iter().enumerate() {
        for m in 0..cfg.n_mels {
            let e: f64 = fb.row(m).iter().zip(spec).map(|(w, c)| w * c.norm()).sum();
            out[[m, t]] = e.max(cfg.log_floor).ln();
        }
    }
    MelSpectrogram::new(out, cfg.frame_rate())
}

/// Griffin-Lim reconstruction from a log-mel. Magnitudes come from the
/// filterbank pseudo-inverse clamped at zero; phases start from a seeded
/// uniform draw.
pub fn mel_invert(mel: &MelSpectrogram, cfg: &MelConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if mel.n_mels() != cfg.n_mels {
        return Err(Error::Shape {
            what: "mel rows for inversion",
            expected: (cfg.n_mels, mel.frames()),
            actual: mel.shape(),
        });
    }
    let fb = mel_filterbank(cfg);
    let fb = DMatrix::from_fn(fb.nrows(), fb.ncols(), |i, j| fb[[i, j]]);
    let pinv = fb
        .pseudo_inverse(1e-10)
        .map_err(|e| Error::contract(format!("filterbank pseudo-inverse failed: {e}")))?;
    let frames = mel.frames();
    let lin = DMatrix::from_fn(cfg.n_mels, frames, |m, t| mel.values()[[m, t]].exp());
    let mag = (pinv * lin).map(|v| v.max(0.0));

    let stft = Stft::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.griffin_lim_seed);
    let mut spectra: Vec<Vec<Complex64>> = (0..frames)
        .map(|t| {
            (0..cfg.n_bins())
                .map(|b| Complex64::from_polar(mag[(b, t)], rng.gen_range(0.0..std::f64::consts::TAU)))
                .collect()
        })
        .collect();
    for _ in 0..cfg.griffin_lim_iters {
        let x = stft.synthesise(&spectra);
        let est = stft.analyse(&x);
        for (t, (spec, e)) in spectra.iter_mut().zip(&est).enumerate() {
            for (b, (s, c)) in spec.iter_mut().zip(e).enumerate() {
                let n = c.norm();
                let phase = if n > 1e-12 { c / n } else { Complex64::new(1.0, 0.0) };
                *s = phase * mag[(b, t)];
            }
        }
    }
    let x = stft.synthesise(&spectra);
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::contract("Griffin-Lim produced non-finite samples"));
    }
    Ok(x)
}

/// Reads a mono wav as samples in `[-1, 1]`; multi-channel files are averaged.
pub fn read_wav(path: &Path) -> Result<(Vec<f64>, u32)> {
    let wav = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = hound::WavReader::open(path).map_err(wav)?;
    let spec = reader.spec();
    let samples: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(wav)?
        }
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav)?,
    };
    let ch = spec.channels as usize;
    let mono = samples.chunks(ch).map(|c| c.iter().sum::<f64>() / ch as f64).collect();
    Ok((mono, spec.sample_rate))
}

/// Writes 16-bit PCM mono; samples outside the representable range are clipped.
pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let wav = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wav)?;
    for &s in samples {
        w.write_sample((s * 32768.0).round().clamp(-32768.0, 32767.0) as i16).map_err(wav)?;
    }
    w.finalize().map_err(wav)
}

/// Mel for a manifest record: the exact `.mel` sidecar when present,
/// otherwise extracted from the audio with `cfg`.
pub fn load_mel(root: &Path, record: &UtteranceRecord, cfg: &MelConfig) -> Result<MelSpectrogram> {
    let audio = record.resolve_audio(root);
    let sidecar = mel_sidecar_path(&audio);
    if sidecar.exists() {
        return MelSpectrogram::read_file(&sidecar);
    }
    let (wave, sr) = read_wav(&audio)?;
    if sr != cfg.sample_rate {
        return Err(Error::contract(format!(
            "{} is {sr} Hz, mel config expects {} Hz",
            audio.display(),
            cfg.sample_rate
        )));
    }
    mel_extract(&wave, cfg)
}

/// Scales a waveform so its peak sits at `peak` (silence is left alone).
pub fn normalize_peak(x: &mut [f64], peak: f64) {
    let m = x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if m > 0.0 {
        x.iter_mut().for_each(|v| *v *= peak / m);
    }
}

/// Mean per-frame Pearson correlation across mel bins.
pub fn framewise_correlation(a: &MelSpectrogram, b: &MelSpectrogram) -> Result<f64> {
    let frames = a.frames().min(b.frames());
    if a.n_mels() != b.n_mels() || frames == 0 {
        return Err(Error::Shape {
            what: "mel spectrograms to correlate",
            expected: a.shape(),
            actual: b.shape(),
        });
    }
    let mut total = 0.0;
    for t in 0..frames {
        let x = a.values().column(t);
        let y = b.values().column(t);
        let (mx, my) = (x.mean().unwrap(), y.mean().unwrap());
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for (u, v) in x.iter().zip(y.iter()) {
            sxy += (u - mx) * (v - my);
            sxx += (u - mx).powi(2);
            syy += (v - my).powi(2);
        }
        total += if sxx == 0.0 || syy == 0.0 { 0.0 } else { sxy / (sxx * syy).sqrt() };
    }
    Ok(total / frames as f64)
}

/// One second of low-pass filtered, amplitude-modulated noise.
pub fn speech_shaped_noise(sample_rate: u32, seconds: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (sample_rate as f64 * seconds) as usize;
    let mut y = 0.0;
    (0..n)
        .map(|i| {
            let w: f64 = rng.gen_range(-1.0..1.0);
            y = 0.9 * y + w;
            let t = i as f64 / sample_rate as f64;
            0.1 * y * (0.6 + 0.4 * (2.0 * std::f64::consts::PI * 4.0 * t).sin())
        })
        .collect()
}
