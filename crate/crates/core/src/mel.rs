//! The log-mel matrix that serves as the diffusion state space.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

/// A finite `n_mels x frames` log-mel matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    values: Array2<f64>,
    frame_rate: f64,
}

impl MelSpectrogram {
    pub fn new(values: Array2<f64>, frame_rate: f64) -> Result<Self> {
        let (n, t) = values.dim();
        if n == 0 || t == 0 {
            return Err(Error::contract(format!(
                "mel spectrogram must be at least 1x1, got {n}x{t}"
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::contract(format!(
                "mel spectrogram has a non-finite entry at flat index {pos}"
            )));
        }
        if !(frame_rate.is_finite() && frame_rate > 0.0) {
            return Err(Error::contract(format!(
                "frame rate must be positive, got {frame_rate}"
            )));
        }
        Ok(Self { values, frame_rate })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn n_mels(&self) -> usize {
        self.values.nrows()
    }

    pub fn frames(&self) -> usize {
        self.values.ncols()
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// Same frame rate, new values.
    pub fn with_values(&self, values: Array2<f64>) -> Result<Self> {
        Self::new(values, self.frame_rate)
    }

    pub fn ensure_same_shape(&self, other: &MelSpectrogram, what: &'static str) -> Result<()> {
        check_shape(self.values(), other.values(), what)
    }

    /// Writes the `.mel` sidecar format (see README): magic `EMEL`, version,
    /// `n_mels`, `frames` (u32 LE), frame rate (f64 LE), then row-major f64 LE values.
    pub fn write_file(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(24 + 8 * self.values.len());
        buf.extend_from_slice(MEL_MAGIC);
        buf.extend_from_slice(&MEL_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.n_mels() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.frames() as u32).to_le_bytes());
        buf.extend_from_slice(&self.frame_rate.to_le_bytes());
        for v in self.values.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::contract(format!("{}: {m}", path.display()));
        if bytes.len() < 24 || &bytes[..4] != MEL_MAGIC {
            return Err(bad("not a mel file"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        if u32_at(4) != MEL_VERSION {
            return Err(bad("unsupported mel file version"));
        }
        let (n, t) = (u32_at(8) as usize, u32_at(12) as usize);
        let frame_rate = f64::from_le_bytes(bytes[16..24].try_into().unwrap());
        if bytes.len() != 24 + 8 * n * t {
            return Err(bad("truncated mel file"));
        }
        let data = bytes[24..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let values = Array2::from_shape_vec((n, t), data).map_err(|e| bad(&e.to_string()))?;
        Self::new(values, frame_rate)
    }
}

const MEL_MAGIC: &[u8; 4] = b"EMEL";
const MEL_VERSION: u32 = 1;

pub(crate) fn check_shape(a: &Array2<f64>, b: &Array2<f64>, what: &'static str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape {
            what,
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite_and_empty() {
        let mut v = Array2::zeros((2, 3));
        v[[1, 2]] = f64::NAN;
        assert!(MelSpectrogram::new(v, 10.0).is_err());
        assert!(MelSpectrogram::new(Array2::zeros((0, 3)), 10.0).is_err());
    }

    #[test]
    fn file_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.mel");
        let v = Array2::from_shape_fn((3, 5), |(i, j)| (i as f64 * 0.1).sin() - j as f64 / 7.0);
        let mel = MelSpectrogram::new(v, 86.13).unwrap();
        mel.write_file(&path).unwrap();
        assert_eq!(MelSpectrogram::read_file(&path).unwrap(), mel);
    }
}
