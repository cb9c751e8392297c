//! Target-emotion bank, reverse-time sampling and the conversion pipeline.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::audio::{load_mel, MelConfig, UtteranceRecord};
use crate::encoders::{ArousalLabel, EmotionEmbedding, EmotionEncoder, Encoders};
use crate::error::{Error, Result};
use crate::mel::MelSpectrogram;
use crate::score_model::{ConditioningBundle, ScoreModel};
use crate::sde::NoiseSchedule;

/// Members of a bin are ordered by distance of their label to the bin
/// centre, then by utterance id.
pub const RANKING_RULE: &str = "label_proximity_then_id";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankEntry {
    pub embedding: Vec<f64>,
    /// Number of utterances whose label rounds to this bin.
    pub support: usize,
    /// Selected utterances in rank order; the embedding is their mean.
    pub selected: Vec<String>,
}

/// Averaged emotion embedding per integer arousal bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingBank {
    pub p: f64,
    pub dim: usize,
    pub ranking: String,
    pub entries: BTreeMap<u8, BankEntry>,
}

/// Size of the selected set for a bin of `n` members.
pub fn selection_count(n: usize, p: f64) -> usize {
    // The epsilon keeps 0.2·10 from rounding up to 3.
    ((p * n as f64 - 1e-9).ceil() as usize).clamp(usize::from(n > 0), n)
}

/// Builds the bank from labelled records, computing embeddings only for the
/// selected members. `embed` is called in rank order within each bin.
pub fn build_bank_with<F>(records: &[UtteranceRecord], p: f64, mut embed: F) -> Result<EmbeddingBank>
where
    F: FnMut(&UtteranceRecord) -> Result<Vec<f64>>,
{
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Config(format!("bank selection fraction {p} must be in (0, 1]")));
    }
    let mut bins: BTreeMap<u8, Vec<&UtteranceRecord>> = BTreeMap::new();
    for r in records {
        bins.entry(r.arousal.bin()).or_default().push(r);
    }
    let mut entries = BTreeMap::new();
    let mut dim = None;
    for (bin, mut members) in bins {
        let centre = f64::from(bin);
        members.sort_by(|a, b| {
            let da = (a.arousal.value() - centre).abs();
            let db = (b.arousal.value() - centre).abs();
            da.total_cmp(&db).then_with(|| a.utterance_id.cmp(&b.utterance_id))
        });
        let k = selection_count(members.len(), p);
        let chosen = &members[..k];
        let mut sum: Vec<f64> = Vec::new();
        for r in chosen {
            let e = embed(r)?;
            let d = *dim.get_or_insert(e.len());
            if e.len() != d {
                return Err(Error::DimensionMismatch {
                    what: "bank embedding",
                    expected: d,
                    actual: e.len(),
                });
            }
            if sum.is_empty() {
                sum = vec![0.0; d];
            }
            for (s, v) in sum.iter_mut().zip(&e) {
                *s += v;
            }
        }
        let embedding = sum.into_iter().map(|s| s / k as f64).collect();
        entries.insert(
            bin,
            BankEntry {
                embedding,
                support: members.len(),
                selected: chosen.iter().map(|r| r.utterance_id.clone()).collect(),
            },
        );
    }
    Ok(EmbeddingBank {
        p,
        dim: dim.unwrap_or(0),
        ranking: RANKING_RULE.into(),
        entries,
    })
}

/// Bank over `records` using the emotion encoder on each selected mel.
pub fn build_bank(
    records: &[UtteranceRecord],
    root: &Path,
    mel: &MelConfig,
    encoder: &dyn EmotionEncoder,
    p: f64,
) -> Result<EmbeddingBank> {
    build_bank_with(records, p, |r| {
        let x = load_mel(root, r, mel)?;
        Ok(encoder.embed(&r.utterance_id, &x)?.into_vec())
    })
}

impl EmbeddingBank {
    pub fn entry(&self, bin: u8) -> Result<&BankEntry> {
        self.entries.get(&bin).ok_or(Error::MissingBin(bin))
    }

    /// Entry for `bin`, or with `fallback` the nearest populated bin (the
    /// lower one on ties). Returns the bin actually used.
    pub fn lookup(&self, bin: u8, fallback: bool) -> Result<(u8, &BankEntry)> {
        if let Some(e) = self.entries.get(&bin) {
            return Ok((bin, e));
        }
        if !fallback {
            return Err(Error::MissingBin(bin));
        }
        self.entries
            .iter()
            .min_by_key(|(&b, _)| (b.abs_diff(bin), b))
            .map(|(&b, e)| (b, e))
            .ok_or(Error::MissingBin(bin))
    }

    /// Recomputes every entry from its provenance list.
    pub fn verify<F>(&self, mut embed: F) -> Result<()>
    where
        F: FnMut(&str) -> Result<Vec<f64>>,
    {
        for (bin, entry) in &self.entries {
            let mut sum = vec![0.0; self.dim];
            for id in &entry.selected {
                for (s, v) in sum.iter_mut().zip(embed(id)?) {
                    *s += v;
                }
            }
            let k = entry.selected.len() as f64;
            if sum.iter().map(|s| s / k).ne(entry.embedding.iter().copied()) {
                return Err(Error::contract(format!("bank entry {bin} does not match its provenance")));
            }
        }
        Ok(())
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Anything that can supply a score at `(x, t)`; conditioning is captured.
pub trait ScoreFn {
    fn score(&self, x: &Array2<f64>, t: f64) -> Result<Array2<f64>>;
}

impl<F> ScoreFn for F
where
    F: Fn(&Array2<f64>, f64) -> Result<Array2<f64>>,
{
    fn score(&self, x: &Array2<f64>, t: f64) -> Result<Array2<f64>> {
        self(x, t)
    }
}

/// The trained network with fixed prior and embeddings.
pub struct ModelScore<'a> {
    pub model: &'a ScoreModel,
    pub y: Array2<f64>,
    pub speaker: Vec<f64>,
    pub emotion: Vec<f64>,
}

impl ScoreFn for ModelScore<'_> {
    fn score(&self, x: &Array2<f64>, t: f64) -> Result<Array2<f64>> {
        let cond = ConditioningBundle {
            y: self.y.clone(),
            speaker: self.speaker.clone(),
            emotion: self.emotion.clone(),
            t,
        };
        self.model.evaluate(x, &cond)
    }
}

/// Noise coefficient of the reverse-time equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReverseDiffusion {
    /// `√β_t`, the time reversal of the forward equation.
    #[default]
    Sqrt,
    /// `β_t` in the noise term; kept for comparison, not a valid reversal.
    Beta,
}

impl ReverseDiffusion {
    pub fn name(self) -> &'static str {
        match self {
            ReverseDiffusion::Sqrt => "sqrt",
            ReverseDiffusion::Beta => "beta",
        }
    }
}

impl fmt::Display for ReverseDiffusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ReverseDiffusion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sqrt" => Ok(ReverseDiffusion::Sqrt),
            "beta" => Ok(ReverseDiffusion::Beta),
            _ => Err(Error::Config(format!("unknown reverse diffusion `{s}` (sqrt | beta)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub n_steps: usize,
    pub diffusion: ReverseDiffusion,
    /// Use the nearest populated bank bin when the target bin is empty.
    pub fallback_to_nearest_bin: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            n_steps: 50,
            diffusion: ReverseDiffusion::Sqrt,
            fallback_to_nearest_bin: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::Config("solver.n_steps must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Euler–Maruyama from `t = 1` down to `t_min` on a uniform grid.
///
/// Starts from `N(Y, σ(1)²)`. Each step moves `X` by
/// `h (−½β (Y − X) + β s) + g √h ξ`, with `g = √β` or `β` per `diffusion`.
pub fn reverse_solve(
    y: &Array2<f64>,
    score: &dyn ScoreFn,
    schedule: &NoiseSchedule,
    n_steps: usize,
    diffusion: ReverseDiffusion,
    seed: u64,
) -> Result<Array2<f64>> {
    if n_steps == 0 {
        return Err(Error::contract("reverse solve needs at least one step"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noise = |shape: (usize, usize)| -> Array2<f64> {
        Array2::from_shape_simple_fn(shape, || StandardNormal.sample(&mut rng))
    };
    let s1 = schedule.sigma(1.0)?;
    let mut x = y + &(noise(y.dim()) * s1);
    let h = (1.0 - schedule.t_min) / n_steps as f64;
    for step in 0..n_steps {
        let t = 1.0 - step as f64 * h;
        let b = schedule.beta(t);
        let g = match diffusion {
            ReverseDiffusion::Sqrt => b.sqrt(),
            ReverseDiffusion::Beta => b,
        };
        let s = score.score(&x, t)?;
        let xi = noise(y.dim());
        Zip::from(&mut x).and(y).and(&s).and(&xi).for_each(|x, &y, &s, &xi| {
            *x += h * (-0.5 * b * (y - *x) + b * s) + g * h.sqrt() * xi;
        });
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                step,
                t: t - h,
            });
        }
    }
    Ok(x)
}

/// Everything needed to reproduce one conversion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversionMetadata {
    pub source_id: String,
    pub target_arousal: f64,
    pub requested_bin: u8,
    pub used_bin: u8,
    pub fell_back: bool,
    pub seed: u64,
    pub n_steps: usize,
    pub diffusion: ReverseDiffusion,
    pub t_min: f64,
    /// Bank members averaged into the conditioning embedding.
    pub bank_members: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct ConversionResult {
    pub mel_out: MelSpectrogram,
    pub y: MelSpectrogram,
    pub used_embedding: EmotionEmbedding,
    pub metadata: ConversionMetadata,
}

/// Converts `x0` (the mel of `source`) towards `target`.
pub fn convert(
    source: &UtteranceRecord,
    x0: &MelSpectrogram,
    target: ArousalLabel,
    bank: &EmbeddingBank,
    encoders: &Encoders,
    model: &ScoreModel,
    solver: &SolverConfig,
    seed: u64,
) -> Result<ConversionResult> {
    solver.validate()?;
    let requested = target.bin();
    let (used_bin, entry) = bank.lookup(requested, solver.fallback_to_nearest_bin)?;
    if used_bin != requested {
        log::warn!("bin {requested} is empty; conditioning on bin {used_bin}");
    }
    let y = encoders.phoneme.encode(x0)?;
    let speaker = encoders.speaker.encode(source)?;
    let score = ModelScore {
        model,
        y: y.values().clone(),
        speaker: speaker.into_vec(),
        emotion: entry.embedding.clone(),
    };
    let schedule = model.schedule();
    let out = reverse_solve(y.values(), &score, schedule, solver.n_steps, solver.diffusion, seed)?;
    Ok(ConversionResult {
        mel_out: x0.with_values(out)?,
        y,
        used_embedding: EmotionEmbedding::new(entry.embedding.clone())?,
        metadata: ConversionMetadata {
            source_id: source.utterance_id.clone(),
            target_arousal: target.value(),
            requested_bin: requested,
            used_bin,
            fell_back: used_bin != requested,
            seed,
            n_steps: solver.n_steps,
            diffusion: solver.diffusion,
            t_min: schedule.t_min,
            bank_members: entry.selected.clone(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::Split;
    use crate::sde::analytic_score;
    use ndarray::array;

    fn rec(id: &str, a: f64) -> UtteranceRecord {
        UtteranceRecord {
            utterance_id: id.into(),
            audio_path: format!("{id}.wav"),
            speaker_id: "s".into(),
            arousal: ArousalLabel::new(a).unwrap(),
            split: Split::Train,
        }
    }

    fn fake_embed(r: &UtteranceRecord) -> Result<Vec<f64>> {
        let a = r.arousal.value();
        Ok(vec![a, a * a, r.utterance_id.len() as f64])
    }

    #[test]
    fn ceiling_rule() {
        assert_eq!(selection_count(10, 0.2), 2);
        assert_eq!(selection_count(11, 0.2), 3);
        assert_eq!(selection_count(1, 0.2), 1);
        assert_eq!(selection_count(7, 1.0), 7);
        assert_eq!(selection_count(0, 0.2), 0);
    }

    #[test]
    fn ten_members_select_two_closest() {
        let recs: Vec<_> = (0..10).map(|i| rec(&format!("u{i}"), 3.6 + 0.07 * i as f64)).collect();
        let bank = build_bank_with(&recs, 0.2, fake_embed).unwrap();
        let e = bank.entry(4).unwrap();
        assert_eq!(e.support, 10);
        // 4.02 and 3.95 are the two closest to the centre.
        assert_eq!(e.selected, vec!["u6", "u5"]);
    }

    #[test]
    fn mean_of_two_unit_vectors() {
        let recs = vec![rec("a", 2.0), rec("b", 2.0)];
        let bank = build_bank_with(&recs, 1.0, |r| Ok(if r.utterance_id == "a" { vec![1.0, 0.0] } else { vec![0.0, 1.0] })).unwrap();
        assert_eq!(bank.entry(2).unwrap().embedding, vec![0.5, 0.5]);
    }

    #[test]
    fn ties_broken_by_id_and_order_independent() {
        let recs = vec![rec("c", 5.1), rec("a", 4.9), rec("b", 5.1), rec("d", 5.0)];
        let bank = build_bank_with(&recs, 0.5, fake_embed).unwrap();
        assert_eq!(bank.entry(5).unwrap().selected, vec!["d", "a"]);
        let mut rev = recs.clone();
        rev.reverse();
        assert_eq!(build_bank_with(&rev, 0.5, fake_embed).unwrap(), bank);
    }

    #[test]
    fn provenance_rebuild_matches() {
        let recs: Vec<_> = (0..60).map(|i| rec(&format!("r{i:02}"), 1.0 + 6.0 * ((i * 37) % 60) as f64 / 59.0)).collect();
        let bank = build_bank_with(&recs, 0.2, fake_embed).unwrap();
        let by_id = |id: &str| fake_embed(recs.iter().find(|r| r.utterance_id == id).unwrap());
        bank.verify(by_id).unwrap();
        // Brute force: re-average each selected list.
        for e in bank.entries.values() {
            let k = e.selected.len() as f64;
            for d in 0..bank.dim {
                let m: f64 = e.selected.iter().map(|id| by_id(id).unwrap()[d]).sum::<f64>() / k;
                assert!((m - e.embedding[d]).abs() < 1e-12);
            }
        }
        let mut bad = bank.clone();
        bad.entries.get_mut(&4).unwrap().embedding[0] += 1e-9;
        assert!(bad.verify(by_id).is_err());
    }

    #[test]
    fn missing_bin_and_fallback() {
        let bank = build_bank_with(&[rec("a", 2.0), rec("b", 6.0)], 0.2, fake_embed).unwrap();
        assert!(matches!(bank.lookup(4, false), Err(Error::MissingBin(4))));
        assert_eq!(bank.lookup(4, true).unwrap().0, 2);
        assert_eq!(bank.lookup(5, true).unwrap().0, 6);
        assert_eq!(bank.lookup(7, true).unwrap().0, 6);
        assert!(build_bank_with(&[], 0.2, fake_embed).unwrap().lookup(1, true).is_err());
        assert!(build_bank_with(&[], 0.0, fake_embed).is_err());
    }

    #[test]
    fn bank_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let recs: Vec<_> = (0..20).map(|i| rec(&format!("q{i}"), 1.0 + 0.3 * i as f64)).collect();
        let bank = build_bank_with(&recs, 0.2, fake_embed).unwrap();
        let p = dir.path().join("bank.json");
        bank.write_file(&p).unwrap();
        assert_eq!(EmbeddingBank::read_file(&p).unwrap(), bank);
    }

    #[test]
    fn exact_score_reverses_the_forward_kernel() {
        let s = NoiseSchedule::default();
        let (x0, y) = (array![[2.0]], array![[0.0]]);
        let exact = |x: &Array2<f64>, t: f64| analytic_score(x, &x0, &y, t, &s);
        let n = 10_000;
        let finals: Vec<f64> = (0..n)
            .map(|i| reverse_solve(&y, &exact, &s, 200, ReverseDiffusion::Sqrt, i).unwrap()[[0, 0]])
            .collect();
        let mean = finals.iter().sum::<f64>() / n as f64;
        let var = finals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - 2.0).abs() <= 0.05, "mean {mean}");
        assert!(var <= 0.05, "variance {var}");
    }

    /// Reverse paths for a Gaussian source `N(2, 1)` whose marginal score is
    /// known in closed form; returns the sample mean and variance.
    fn gaussian_source_moments(diffusion: ReverseDiffusion, n: u64) -> (f64, f64) {
        let s = NoiseSchedule::default();
        let y = array![[0.0]];
        let score = |x: &Array2<f64>, t: f64| {
            let a = s.alpha(t)?;
            let v = a * a + s.variance(t)?;
            Ok(x.mapv(|x| -(x - 2.0 * a) / v))
        };
        let finals: Vec<f64> = (0..n)
            .map(|i| reverse_solve(&y, &score, &s, 200, diffusion, i).unwrap()[[0, 0]])
            .collect();
        let mean = finals.iter().sum::<f64>() / n as f64;
        let var = finals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (mean, var)
    }

    #[test]
    fn gaussian_source_is_recovered_only_with_sqrt_coefficient() {
        let (mean, var) = gaussian_source_moments(ReverseDiffusion::Sqrt, 10_000);
        assert!((mean - 2.0).abs() <= 0.05 && (var - 1.0).abs() <= 0.05, "sqrt: {mean} {var}");
        let (mean, var) = gaussian_source_moments(ReverseDiffusion::Beta, 2_000);
        assert!((mean - 2.0).abs() > 0.05 || (var - 1.0).abs() > 0.05, "beta: {mean} {var}");
    }

    #[test]
    fn single_step_and_determinism() {
        let s = NoiseSchedule::default();
        let y = array![[0.5, -0.5], [1.0, 0.0]];
        let zero = |x: &Array2<f64>, _t: f64| Ok(Array2::zeros(x.dim()));
        let a = reverse_solve(&y, &zero, &s, 1, ReverseDiffusion::Sqrt, 3).unwrap();
        assert!(a.iter().all(|v| v.is_finite()));
        assert_eq!(a, reverse_solve(&y, &zero, &s, 1, ReverseDiffusion::Sqrt, 3).unwrap());
        assert_ne!(a, reverse_solve(&y, &zero, &s, 1, ReverseDiffusion::Sqrt, 4).unwrap());
        assert!(reverse_solve(&y, &zero, &s, 0, ReverseDiffusion::Sqrt, 3).is_err());
    }

    #[test]
    fn divergence_names_the_step() {
        let s = NoiseSchedule::default();
        let y = array![[0.0]];
        let blow = |x: &Array2<f64>, t: f64| Ok(if t < 0.5 { x.mapv(|_| f64::INFINITY) } else { x.clone() });
        match reverse_solve(&y, &blow, &s, 10, ReverseDiffusion::Sqrt, 0) {
            Err(Error::Divergence { step, .. }) => assert_eq!(step, 6),
            other => panic!("{other:?}"),
        }
    }
}
