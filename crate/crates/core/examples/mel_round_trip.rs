//! Mel analysis, Griffin-Lim resynthesis, 16-bit wav output and an
//! autocorrelation pitch track of a synthetic vowel.
//!
//! cargo run --release --example mel_round_trip -- [out.wav]

use std::f64::consts::PI;

use emoshift::audio::{framewise_correlation, mel_extract, mel_invert, normalize_peak, read_wav, write_wav, MelConfig};
use emoshift::eval::{contour_stats, pitch_contour, PitchConfig};

fn main() -> anyhow::Result<()> {
    let cfg = MelConfig::default();
    let sr = f64::from(cfg.sample_rate);
    // Harmonic source gliding 120 -> 180 Hz with a little vibrato.
    let n = cfg.sample_rate as usize;
    let mut phase = 0.0;
    let x: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let f0 = 120.0 + 60.0 * t + 3.0 * (2.0 * PI * 5.0 * t).sin();
            phase += 2.0 * PI * f0 / sr;
            (1..=8).map(|h| (h as f64 * phase).sin() / h as f64).sum::<f64>() * 0.2
        })
        .collect();

    let m = mel_extract(&x, &cfg)?;
    println!("{} mel bands x {} frames at {:.1} frames/s", m.n_mels(), m.frames(), m.frame_rate());
    let mut y = mel_invert(&m, &cfg)?;
    normalize_peak(&mut y, 0.9);
    let back = mel_extract(&y, &cfg)?;
    println!("per-frame correlation after resynthesis: {:.3}", framewise_correlation(&m, &back)?);

    let dir = tempfile::tempdir()?;
    let path = std::env::args().nth(1).map(Into::into).unwrap_or_else(|| dir.path().join("resynth.wav"));
    write_wav(&path, &y, cfg.sample_rate)?;
    let (read, rate) = read_wav(&path)?;
    println!("wrote {} ({} samples at {rate} Hz)", path.display(), read.len());

    for (name, audio) in [("original", &x), ("resynthesised", &y)] {
        let track = pitch_contour(audio, cfg.sample_rate, &PitchConfig::default())?;
        let voiced = track.iter().flatten().count();
        if let Some((mean, sd)) = contour_stats(&track) {
            println!("{name:>14}: f0 mean {mean:.1} Hz, sd {sd:.1} Hz, {voiced}/{} frames voiced", track.len());
        }
    }
    Ok(())
}
