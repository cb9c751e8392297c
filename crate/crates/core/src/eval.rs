//! Conversion metrics, per-bin breakdowns, pitch tracks and diagnostic plots.
//!
//! Arousal errors are computed on the unit scale `a' = (a − 1) / 6`, and the
//! absolute error is reported as a percentage of that scale.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoders::{ArousalLabel, ArousalProxy};
use crate::error::{Error, Result};
use crate::mel::MelSpectrogram;
use crate::sde::{MomentTrack, NoiseSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversionEvalRow {
    pub utterance_id: String,
    pub source_arousal: ArousalLabel,
    pub target_arousal: ArousalLabel,
    pub predicted_arousal: ArousalLabel,
}

impl ConversionEvalRow {
    /// Signed error on the unit scale.
    pub fn normalized_error(&self) -> f64 {
        self.predicted_arousal.normalized() - self.target_arousal.normalized()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SerErrors {
    pub l_mse: f64,
    /// Mean absolute unit-scale error × 100.
    pub l_abs_percent: f64,
}

pub fn ser_errors(rows: &[ConversionEvalRow]) -> Result<SerErrors> {
    if rows.is_empty() {
        return Err(Error::contract("no rows to score"));
    }
    let n = rows.len() as f64;
    let l_mse = rows.iter().map(|r| r.normalized_error().powi(2)).sum::<f64>() / n;
    let l_abs = rows.iter().map(|r| r.normalized_error().abs()).sum::<f64>() / n;
    Ok(SerErrors {
        l_mse,
        l_abs_percent: 100.0 * l_abs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupBy {
    Target,
    Source,
}

/// Squared unit-scale error statistics for one arousal bin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    pub bin: u8,
    pub count: usize,
    /// `None` for an empty bin.
    pub mean: Option<f64>,
    /// Population standard deviation; `None` for an empty bin.
    pub sd: Option<f64>,
}

impl BinStats {
    pub fn is_empty(&self) -> bool {
        self.count == 0
    }
}

/// Always seven entries, bins `1..=7`.
pub fn classwise_errors(rows: &[ConversionEvalRow], group_by: GroupBy) -> Vec<BinStats> {
    let mut groups: BTreeMap<u8, Vec<f64>> = (1..=7).map(|b| (b, Vec::new())).collect();
    for r in rows {
        let key = match group_by {
            GroupBy::Target => r.target_arousal,
            GroupBy::Source => r.source_arousal,
        };
        groups.entry(key.bin()).or_default().push(r.normalized_error().powi(2));
    }
    groups
        .into_iter()
        .map(|(bin, v)| {
            if v.is_empty() {
                return BinStats {
                    bin,
                    count: 0,
                    mean: None,
                    sd: None,
                };
            }
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            BinStats {
                bin,
                count: v.len(),
                mean: Some(mean),
                sd: Some(var.sqrt()),
            }
        })
        .collect()
}

/// Count-weighted mean over non-empty bins; equals `ser_errors(..).l_mse`.
pub fn pooled_mse(bins: &[BinStats]) -> Option<f64> {
    let n: usize = bins.iter().map(|b| b.count).sum();
    if n == 0 {
        return None;
    }
    Some(bins.iter().filter_map(|b| b.mean.map(|m| m * b.count as f64)).sum::<f64>() / n as f64)
}

/// Spearman rank correlation with average ranks for ties. `None` when
/// either side is constant or the lengths differ.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PitchConfig {
    pub window_s: f64,
    pub hop_s: f64,
    pub fmin: f64,
    pub fmax: f64,
    /// Minimum normalised autocorrelation peak for a voiced frame.
    pub voicing_threshold: f64,
    /// Frames quieter than this RMS are unvoiced without analysis.
    pub silence_rms: f64,
}

impl Default for PitchConfig {
    fn default() -> Self {
        Self {
            window_s: 0.025,
            hop_s: 0.010,
            fmin: 60.0,
            fmax: 500.0,
            voicing_threshold: 0.3,
            silence_rms: 1e-4,
        }
    }
}

const OCTAVE_RATIO: f64 = 0.9;

/// Autocorrelation f0 per frame; `None` marks unvoiced frames.
pub fn pitch_contour(audio: &[f64], sample_rate: u32, cfg: &PitchConfig) -> Result<Vec<Option<f64>>> {
    let sr = f64::from(sample_rate);
    let win = (cfg.window_s * sr).round() as usize;
    let hop = (cfg.hop_s * sr).round() as usize;
    let min_lag = (sr / cfg.fmax).floor().max(1.0) as usize;
    let max_lag = (sr / cfg.fmin).ceil() as usize;
    if win == 0 || hop == 0 || !(cfg.fmin > 0.0 && cfg.fmin < cfg.fmax) || max_lag + 1 >= win {
        return Err(Error::Config(format!(
            "pitch window {win} samples cannot resolve {}–{} Hz at {sample_rate} Hz",
            cfg.fmin, cfg.fmax
        )));
    }
    if audio.len() < win {
        return Ok(Vec::new());
    }
    let n_frames = 1 + (audio.len() - win) / hop;
    let mut out = Vec::with_capacity(n_frames);
    for f in 0..n_frames {
        let frame = &audio[f * hop..f * hop + win];
        let mean = frame.iter().sum::<f64>() / win as f64;
        let x: Vec<f64> = frame.iter().map(|v| v - mean).collect();
        let energy: f64 = x.iter().map(|v| v * v).sum();
        if (energy / win as f64).sqrt() < cfg.silence_rms {
            out.push(None);
            continue;
        }
        // Normalised by the overlap length so long lags are not penalised.
        let r = |lag: usize| -> f64 {
            let m = win - lag;
            let c: f64 = (0..m).map(|i| x[i] * x[i + lag]).sum();
            c / m as f64 / (energy / win as f64)
        };
        let rs: Vec<f64> = (min_lag - 1..=max_lag + 1).map(r).collect();
        let peaks: Vec<usize> = (1..rs.len() - 1)
            .filter(|&i| rs[i] >= rs[i - 1] && rs[i] >= rs[i + 1])
            .collect();
        let top = peaks.iter().map(|&i| rs[i]).fold(f64::NEG_INFINITY, f64::max);
        // Multiples of the period score about as well as the period itself,
        // so the shortest lag close to the top wins.
        let best = peaks.into_iter().find(|&i| rs[i] >= OCTAVE_RATIO * top).map(|i| (i, rs[i]));
        out.push(match best {
            Some((i, v)) if v >= cfg.voicing_threshold => {
                let (a, b, c) = (rs[i - 1], rs[i], rs[i + 1]);
                let denom = a - 2.0 * b + c;
                let shift = if denom.abs() > 1e-12 { 0.5 * (a - c) / denom } else { 0.0 };
                let lag = (min_lag - 1 + i) as f64 + shift;
                Some(sr / lag)
            }
            _ => None,
        });
    }
    Ok(out)
}

/// Toy stand-in for a pitch track: per-frame spectral-centroid position
/// mapped linearly onto `[fmin, fmax]` Hz.
pub fn centroid_pitch_proxy(mel: &MelSpectrogram, fmin: f64, fmax: f64) -> Vec<Option<f64>> {
    ArousalProxy::centroid_track(mel.values())
        .into_iter()
        .map(|p| Some(fmin + (fmax - fmin) * p))
        .collect()
}

/// Mean and standard deviation over voiced frames.
pub fn contour_stats(contour: &[Option<f64>]) -> Option<(f64, f64)> {
    let v: Vec<f64> = contour.iter().flatten().copied().collect();
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    Some((m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt()))
}

/// Writes an SVG with one log-energy spectrogram panel per mel (source
/// first) and a final panel with the contours overlaid.
pub fn diagnostics_plot(
    source: &MelSpectrogram,
    converted: &[(String, MelSpectrogram)],
    contours: &[(String, Vec<Option<f64>>)],
    path: &Path,
) -> Result<()> {
    let plot_err = |e: &dyn fmt::Display| Error::Plot(e.to_string());
    let mut mels: Vec<(&str, &MelSpectrogram)> = vec![("source", source)];
    mels.extend(converted.iter().map(|(n, m)| (n.as_str(), m)));
    let panels = mels.len() + 1;
    let root = SVGBackend::new(path, (720, 180 * panels as u32)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(&e))?;
    let areas = root.split_evenly((panels, 1));

    let (lo, hi) = mels
        .iter()
        .flat_map(|(_, m)| m.values().iter().copied())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let span = (hi - lo).max(1e-9);
    for ((name, mel), area) in mels.iter().zip(&areas) {
        let (n, frames) = mel.shape();
        let mut chart = ChartBuilder::on(area)
            .margin(8)
            .caption(*name, ("sans-serif", 14))
            .x_label_area_size(20)
            .y_label_area_size(30)
            .build_cartesian_2d(0..frames, 0..n)
            .map_err(|e| plot_err(&e))?;
        chart.configure_mesh().disable_mesh().draw().map_err(|e| plot_err(&e))?;
        chart
            .draw_series(mel.values().indexed_iter().map(|((k, t), &v)| {
                let c = ((v - lo) / span * 255.0) as u8;
                Rectangle::new([(t, k), (t + 1, k + 1)], RGBColor(c, c / 2, 255 - c).filled())
            }))
            .map_err(|e| plot_err(&e))?;
    }

    let longest = contours.iter().map(|(_, c)| c.len()).max().unwrap_or(1).max(1);
    let (fmin, fmax) = contours
        .iter()
        .flat_map(|(_, c)| c.iter().flatten().copied())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (fmin, fmax) = if fmin.is_finite() { (fmin - 1.0, fmax + 1.0) } else { (0.0, 1.0) };
    let mut chart = ChartBuilder::on(&areas[panels - 1])
        .margin(8)
        .caption("contours", ("sans-serif", 14))
        .x_label_area_size(20)
        .y_label_area_size(40)
        .build_cartesian_2d(0..longest, fmin..fmax)
        .map_err(|e| plot_err(&e))?;
    chart.configure_mesh().draw().map_err(|e| plot_err(&e))?;
    for (i, (name, c)) in contours.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        // Unvoiced frames break the line.
        let mut run = Vec::new();
        for (t, f) in c.iter().enumerate() {
            match f {
                Some(f) => run.push((t, *f)),
                None if !run.is_empty() => {
                    chart.draw_series(LineSeries::new(std::mem::take(&mut run), color)).map_err(|e| plot_err(&e))?;
                }
                None => {}
            }
        }
        chart
            .draw_series(LineSeries::new(run, color))
            .map_err(|e| plot_err(&e))?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 12, y)], color));
    }
    if !contours.is_empty() {
        chart
            .configure_series_labels()
            .border_style(BLACK)
            .draw()
            .map_err(|e| plot_err(&e))?;
    }
    root.present().map_err(|e| plot_err(&e))
}

/// Simulated mean and ±2 sd band against the kernel's, over the whole path.
pub fn moments_plot(track: &MomentTrack, schedule: &NoiseSchedule, x0: f64, y: f64, path: &Path) -> Result<()> {
    let plot_err = |e: &dyn fmt::Display| Error::Plot(e.to_string());
    let kernel: Vec<(f64, f64, f64)> = track
        .t
        .iter()
        .map(|&t| {
            let a = schedule.alpha(t)?;
            Ok((t, a * x0 + (1.0 - a) * y, schedule.variance(t)?.sqrt()))
        })
        .collect::<Result<_>>()?;
    let lo = kernel.iter().map(|k| k.1 - 2.0 * k.2).fold(x0.min(y), f64::min) - 0.1;
    let hi = kernel.iter().map(|k| k.1 + 2.0 * k.2).fold(x0.max(y), f64::max) + 0.1;
    let root = SVGBackend::new(path, (720, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .margin(10)
        .caption("forward moments: kernel (solid) vs simulation (dashed)", ("sans-serif", 14))
        .x_label_area_size(25)
        .y_label_area_size(40)
        .build_cartesian_2d(0.0..1.0, lo..hi)
        .map_err(|e| plot_err(&e))?;
    chart.configure_mesh().draw().map_err(|e| plot_err(&e))?;
    let sim = |k: f64| -> Vec<(f64, f64)> {
        track
            .t
            .iter()
            .zip(&track.sim_mean)
            .zip(&track.sim_var)
            .map(|((&t, &m), &v)| (t, m + k * v.sqrt()))
            .collect()
    };
    for k in [-2.0, 0.0, 2.0] {
        chart
            .draw_series(LineSeries::new(kernel.iter().map(|&(t, m, s)| (t, m + k * s)), BLUE))
            .map_err(|e| plot_err(&e))?;
        chart
            .draw_series(DashedLineSeries::new(sim(k), 6, 4, RED.stroke_width(1)))
            .map_err(|e| plot_err(&e))?;
    }
    root.present().map_err(|e| plot_err(&e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityScores {
    pub sig: f64,
    pub ovrl: f64,
}

/// External perceptual-quality estimator.
pub trait QualityScorer {
    fn score(&self, utterance_id: &str, audio: &[f64], sample_rate: u32) -> Result<QualityScores>;
}

/// Quality column of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum QualityCell {
    Scored { sig: f64, ovrl: f64 },
    NotConfigured,
    Unavailable { reason: String },
}

impl fmt::Display for QualityCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QualityCell::Scored { sig, ovrl } => write!(f, "SIG {sig:.2} / OVRL {ovrl:.2}"),
            _ => f.write_str("n/a"),
        }
    }
}

/// Never fails: scorer errors become `Unavailable`.
pub fn quality_metric(scorer: Option<&dyn QualityScorer>, id: &str, audio: &[f64], sample_rate: u32) -> QualityCell {
    let Some(s) = scorer else {
        return QualityCell::NotConfigured;
    };
    match s.score(id, audio, sample_rate) {
        Ok(q) if (1.0..=5.0).contains(&q.sig) && (1.0..=5.0).contains(&q.ovrl) => QualityCell::Scored { sig: q.sig, ovrl: q.ovrl },
        Ok(q) => QualityCell::Unavailable {
            reason: format!("scores {q:?} outside [1, 5]"),
        },
        Err(e) => {
            log::warn!("quality scorer failed on {id}: {e}");
            QualityCell::Unavailable { reason: e.to_string() }
        }
    }
}

/// Scores produced offline, keyed by utterance id (a JSON object of
/// `{"id": {"sig": .., "ovrl": ..}}`).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RecordedScores(pub BTreeMap<String, QualityScores>);

impl RecordedScores {
    pub fn read_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

impl QualityScorer for RecordedScores {
    fn score(&self, id: &str, _audio: &[f64], _sr: u32) -> Result<QualityScores> {
        self.0
            .get(id)
            .copied()
            .ok_or_else(|| Error::contract(format!("no recorded quality scores for `{id}`")))
    }
}

/// Metrics over a set of conversions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: usize,
    pub ser: SerErrors,
    pub by_target: Vec<BinStats>,
    pub by_source: Vec<BinStats>,
    pub quality: QualityCell,
}

impl EvalReport {
    pub fn new(rows: &[ConversionEvalRow], quality: QualityCell) -> Result<Self> {
        Ok(Self {
            rows: rows.len(),
            ser: ser_errors(rows)?,
            by_target: classwise_errors(rows, GroupBy::Target),
            by_source: classwise_errors(rows, GroupBy::Source),
            quality,
        })
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!(
            "| rows | L_mse | L_abs | quality |\n|---|---|---|---|\n| {} | {:.4} | {:.1}% | {} |\n",
            self.rows, self.ser.l_mse, self.ser.l_abs_percent, self.quality
        );
        for (title, bins) in [("target", &self.by_target), ("source", &self.by_source)] {
            s.push_str(&format!("\n| {title} bin | n | L_mse mean | sd |\n|---|---|---|---|\n"));
            for b in bins.iter() {
                match (b.mean, b.sd) {
                    (Some(m), Some(sd)) => s.push_str(&format!("| {} | {} | {m:.4} | {sd:.4} |\n", b.bin, b.count)),
                    _ => s.push_str(&format!("| {} | 0 | empty | empty |\n", b.bin)),
                }
            }
        }
        s
    }
}
